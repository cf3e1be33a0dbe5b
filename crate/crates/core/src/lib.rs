//! Single-image portrait relighting on a light-stage basis.

pub mod datasynth;
pub mod envmap;
mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod lightstage;
pub mod metrics;
pub mod prnet;
pub mod train;

pub use error::{Error, ErrorKind, Result};
