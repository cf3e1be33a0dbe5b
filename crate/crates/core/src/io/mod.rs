//! File formats: PFM images, PNG previews, OLAT directories, JSON helpers and
//! network checkpoints.

pub mod checkpoint;
mod json;
pub mod olat_dir;
pub mod pfm;
pub mod png;

pub use json::{read_json, write_json};
pub use olat_dir::{read_olat_dir, write_olat_dir};
pub use pfm::{read_pfm, write_pfm};
pub use png::export_png;
