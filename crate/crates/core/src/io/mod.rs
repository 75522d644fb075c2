//! Reading and writing datasets, checkpoints, planes and images.

pub mod checkpoint;
pub mod colmap;
pub mod image;
pub mod manifest;
pub mod plane;
pub mod ply;

pub use checkpoint::{load_checkpoint, plane_sidecar_path, save_checkpoint, Checkpoint};
pub use colmap::{load_colmap_text, read_colmap_model, write_colmap_model, ColmapModel};
pub use image::{read_image, read_mask, write_image};
pub use manifest::{load_scene, write_scene, FrameData, Scene, SceneManifest, Split};
pub use plane::{read_plane, write_plane};
