//! Persistence: PLY models, PNG/PPM images, depth maps, scene bundles,
//! metrics CSV/JSON.

mod image_io;
mod ply;
mod scene_io;

pub use image_io::{
    read_depth, read_image, write_depth, write_image, write_metrics_csv, TraceRow,
};
pub use ply::{export_ply, import_ply, read_ply, write_ply, SH_C0};
pub use scene_io::{
    read_bundle, read_cameras, write_bundle, write_cameras, write_report, CameraJson,
};
