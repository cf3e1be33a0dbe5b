//! 8-bit previews with a 1/2.2 display gamma. Never read back.

use std::path::Path;

use image::ColorType;

use crate::image::Image;
use crate::{Error, Result};

/// Display byte for a linear value: `round(255·clamp(v)^(1/2.2))`.
pub fn encode_byte(linear: f32) -> u8 {
    let v = if linear.is_nan() { 0.0 } else { linear.clamp(0.0, 1.0) as f64 };
    (255.0 * v.powf(1.0 / 2.2)).round() as u8
}

pub fn export_png(image: &Image, path: &Path) -> Result<()> {
    let color = match image.channels() {
        1 => ColorType::L8,
        3 => ColorType::Rgb8,
        c => return Err(Error::Png(format!("cannot export {c}-channel image"))),
    };
    let bytes: Vec<u8> = image.data().iter().map(|&v| encode_byte(v)).collect();
    image::save_buffer(path, &bytes, image.width() as u32, image.height() as u32, color).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Png(other.to_string()),
    })
}
