#ifndef MIRROR_SPLAT_H
#define MIRROR_SPLAT_H

#include <stddef.h>
#include <stdint.h>

typedef enum MsStatus {
  MS_STATUS_OK = 0,
  MS_STATUS_NULL_POINTER = 1,
  MS_STATUS_INVALID_ARGUMENT = 2,
  MS_STATUS_IO = 3,
  MS_STATUS_FORMAT = 4,
  MS_STATUS_NUMERIC = 5,
  MS_STATUS_BUFFER_TOO_SMALL = 6,
  MS_STATUS_PANIC = 7,
} MsStatus;

typedef struct MsCamera MsCamera;

typedef struct MsCloud MsCloud;

typedef struct MsPlane MsPlane;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` as a
// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
// message length in bytes, excluding the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t ms_last_error_message(char *buf, size_t len);

// Loads a checkpoint PLY. `out_plane` may be null; otherwise it receives
// the plane from the checkpoint's sidecar, or null when there is none.
//
// # Safety
// `path` must be a NUL-terminated string; `out_cloud` must be writable.
enum MsStatus ms_cloud_load(const char *path,
                            struct MsCloud **out_cloud,
                            struct MsPlane **out_plane);

// Saves `cloud` as a checkpoint PLY; a non-null `plane` goes to the
// sidecar file.
//
// # Safety
// Handles must come from this library; `path` must be NUL-terminated.
enum MsStatus ms_cloud_save(const struct MsCloud *cloud,
                            const struct MsPlane *plane,
                            const char *path);

// Number of Gaussians, or 0 for a null handle.
//
// # Safety
// `cloud` must be null or a live handle.
size_t ms_cloud_len(const struct MsCloud *cloud);

// # Safety
// `cloud` must be null or a live handle, not used afterwards.
void ms_cloud_free(struct MsCloud *cloud);

// The reflection of the Gaussians strictly in front of `plane`.
//
// # Safety
// Handles must be live; `out_cloud` must be writable.
enum MsStatus ms_cloud_reflect(const struct MsCloud *cloud,
                               const struct MsPlane *plane,
                               struct MsCloud **out_cloud);

// The plane `n . x + b = 0`.
//
// # Safety
// `out_plane` must be writable.
enum MsStatus ms_plane_new(double nx, double ny, double nz, double b, struct MsPlane **out_plane);

// Writes (nx, ny, nz, b) to `out4`.
//
// # Safety
// `plane` must be live; `out4` must point to 4 writable doubles.
enum MsStatus ms_plane_get(const struct MsPlane *plane, double *out4);

// # Safety
// `plane` must be null or a live handle, not used afterwards.
void ms_plane_free(struct MsPlane *plane);

// Pinhole camera. `rotation` is a row-major 3x3 world-to-camera rotation
// and `translation` its translation, so `x_cam = R x + t`.
//
// # Safety
// `rotation` must point to 9 doubles, `translation` to 3; `out_camera`
// must be writable.
enum MsStatus ms_camera_new(size_t width,
                            size_t height,
                            double fx,
                            double fy,
                            double cx,
                            double cy,
                            const double *rotation,
                            const double *translation,
                            struct MsCamera **out_camera);

// # Safety
// `camera` must be null or a live handle, not used afterwards.
void ms_camera_free(struct MsCamera *camera);

// Renders `cloud` from `camera` on a black background. With a null
// `plane` this is the plain pass; otherwise the real and mirror passes are
// composited with the rendered mask. `color` receives height x width x 3
// interleaved RGB values, `mask` (optional) height x width values.
//
// # Safety
// Handles must be live; `color` must hold `color_len` doubles and `mask`,
// when non-null, `mask_len` doubles.
enum MsStatus ms_render(const struct MsCloud *cloud,
                        const struct MsPlane *plane,
                        const struct MsCamera *camera,
                        double *color,
                        size_t color_len,
                        double *mask,
                        size_t mask_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIRROR_SPLAT_H */
