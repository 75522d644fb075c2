//! C ABI over the mirror-splat engine.
//!
//! Clouds, planes and cameras are opaque heap handles created by the
//! `*_new`/`*_load` functions and released with the matching `*_free`.
//! Every fallible call returns an [`MsStatus`]; the message of the last
//! failure on the calling thread is available from
//! [`ms_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mirror_splat::io::{load_checkpoint, save_checkpoint};
use mirror_splat::mirror::MirrorPlane;
use mirror_splat::model::{Camera, GaussianCloud};
use mirror_splat::raster::{render_composite, RasterSettings};
use mirror_splat::Error;
use nalgebra::{Matrix3, Vector3};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

pub struct MsCloud(GaussianCloud);
pub struct MsPlane(MirrorPlane);
pub struct MsCamera(Camera);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message);
}

fn status_of(e: &Error) -> MsStatus {
    match e {
        Error::MissingFile(_) | Error::Io { .. } => MsStatus::Io,
        Error::MalformedJson { .. }
        | Error::Parse { .. }
        | Error::UnsupportedCameraModel { .. }
        | Error::UnknownProperty { .. }
        | Error::UnsupportedImage(_) => MsStatus::Format,
        e if e.is_numeric() => MsStatus::Numeric,
        _ => MsStatus::InvalidArgument,
    }
}

struct Failure(MsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status and the thread's last
/// error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MsStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Failure(MsStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn out_ptr<T>(p: *mut *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(null(what))
    } else {
        Ok(())
    }
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ms_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint PLY. `out_plane` may be null; otherwise it receives
/// the plane from the checkpoint's sidecar, or null when there is none.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_cloud` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_cloud_load(path: *const c_char, out_cloud: *mut *mut MsCloud, out_plane: *mut *mut MsPlane) -> MsStatus {
    guard(|| {
        out_ptr(out_cloud, "out_cloud")?;
        let checkpoint = load_checkpoint(&path_arg(path)?)?;
        *out_cloud = Box::into_raw(Box::new(MsCloud(checkpoint.cloud)));
        if !out_plane.is_null() {
            *out_plane = checkpoint
                .plane
                .map_or(ptr::null_mut(), |p| Box::into_raw(Box::new(MsPlane(p))));
        }
        Ok(())
    })
}

/// Saves `cloud` as a checkpoint PLY; a non-null `plane` goes to the
/// sidecar file.
///
/// # Safety
/// Handles must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ms_cloud_save(cloud: *const MsCloud, plane: *const MsPlane, path: *const c_char) -> MsStatus {
    guard(|| {
        let cloud = handle(cloud, "cloud")?;
        let plane = plane.as_ref().map(|p| &p.0);
        save_checkpoint(&cloud.0, plane, &path_arg(path)?)?;
        Ok(())
    })
}

/// Number of Gaussians, or 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ms_cloud_len(cloud: *const MsCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// # Safety
/// `cloud` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ms_cloud_free(cloud: *mut MsCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// The reflection of the Gaussians strictly in front of `plane`.
///
/// # Safety
/// Handles must be live; `out_cloud` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_cloud_reflect(cloud: *const MsCloud, plane: *const MsPlane, out_cloud: *mut *mut MsCloud) -> MsStatus {
    guard(|| {
        out_ptr(out_cloud, "out_cloud")?;
        let cloud = handle(cloud, "cloud")?;
        let plane = handle(plane, "plane")?;
        let mirrored = plane.0.reflect_cloud(&cloud.0)?;
        *out_cloud = Box::into_raw(Box::new(MsCloud(mirrored)));
        Ok(())
    })
}

/// The plane `n . x + b = 0`.
///
/// # Safety
/// `out_plane` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_plane_new(nx: f64, ny: f64, nz: f64, b: f64, out_plane: *mut *mut MsPlane) -> MsStatus {
    guard(|| {
        out_ptr(out_plane, "out_plane")?;
        let plane = MirrorPlane::new(Vector3::new(nx, ny, nz), b);
        plane.check()?;
        *out_plane = Box::into_raw(Box::new(MsPlane(plane)));
        Ok(())
    })
}

/// Writes (nx, ny, nz, b) to `out4`.
///
/// # Safety
/// `plane` must be live; `out4` must point to 4 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ms_plane_get(plane: *const MsPlane, out4: *mut f64) -> MsStatus {
    guard(|| {
        let plane = handle(plane, "plane")?;
        if out4.is_null() {
            return Err(null("out4"));
        }
        let v = [plane.0.normal.x, plane.0.normal.y, plane.0.normal.z, plane.0.offset];
        ptr::copy_nonoverlapping(v.as_ptr(), out4, 4);
        Ok(())
    })
}

/// # Safety
/// `plane` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ms_plane_free(plane: *mut MsPlane) {
    if !plane.is_null() {
        drop(Box::from_raw(plane));
    }
}

/// Pinhole camera. `rotation` is a row-major 3x3 world-to-camera rotation
/// and `translation` its translation, so `x_cam = R x + t`.
///
/// # Safety
/// `rotation` must point to 9 doubles, `translation` to 3; `out_camera`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_camera_new(
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: *const f64,
    translation: *const f64,
    out_camera: *mut *mut MsCamera,
) -> MsStatus {
    guard(|| {
        out_ptr(out_camera, "out_camera")?;
        if rotation.is_null() || translation.is_null() {
            return Err(null("rotation or translation"));
        }
        let r = Matrix3::from_row_slice(std::slice::from_raw_parts(rotation, 9));
        let t = Vector3::from_column_slice(std::slice::from_raw_parts(translation, 3));
        let camera = Camera::new(fx, fy, cx, cy, width, height, r, t);
        camera.validate()?;
        *out_camera = Box::into_raw(Box::new(MsCamera(camera)));
        Ok(())
    })
}

/// # Safety
/// `camera` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ms_camera_free(camera: *mut MsCamera) {
    if !camera.is_null() {
        drop(Box::from_raw(camera));
    }
}

/// Renders `cloud` from `camera` on a black background. With a null
/// `plane` this is the plain pass; otherwise the real and mirror passes are
/// composited with the rendered mask. `color` receives height x width x 3
/// interleaved RGB values, `mask` (optional) height x width values.
///
/// # Safety
/// Handles must be live; `color` must hold `color_len` doubles and `mask`,
/// when non-null, `mask_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ms_render(
    cloud: *const MsCloud,
    plane: *const MsPlane,
    camera: *const MsCamera,
    color: *mut f64,
    color_len: usize,
    mask: *mut f64,
    mask_len: usize,
) -> MsStatus {
    guard(|| {
        let cloud = handle(cloud, "cloud")?;
        let camera = handle(camera, "camera")?;
        if color.is_null() {
            return Err(null("color"));
        }
        let pixels = camera.0.width * camera.0.height;
        if color_len < 3 * pixels || (!mask.is_null() && mask_len < pixels) {
            return Err(Failure(
                MsStatus::BufferTooSmall,
                format!("need {} color and {pixels} mask values", 3 * pixels),
            ));
        }
        let plane = plane.as_ref().map(|p| &p.0);
        let (image, rendered_mask) = render_composite(&cloud.0, plane, &camera.0, &RasterSettings::default())?;
        ptr::copy_nonoverlapping(image.data.as_ptr(), color, 3 * pixels);
        if !mask.is_null() {
            ptr::copy_nonoverlapping(rendered_mask.data.as_ptr(), mask, pixels);
        }
        Ok(())
    })
}
