//! Portable float maps. Samples are stored bottom-up on disk and top-down in
//! memory; a negative scale token marks little-endian data.

use std::path::Path;

use crate::image::Image;
use crate::{Error, Result};

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_pfm(&bytes)
}

pub fn write_pfm(path: &Path, image: &Image) -> Result<()> {
    let bytes = encode_pfm(image)?;
    std::fs::write(path, bytes).map_err(Error::io(path))
}

/// Little-endian encoding with scale `-1.0`.
pub fn encode_pfm(image: &Image) -> Result<Vec<u8>> {
    let tag = match image.channels() {
        3 => "PF",
        1 => "Pf",
        c => return Err(Error::InvalidArgument(format!("PFM supports 1 or 3 channels, not {c}"))),
    };
    if let Some(i) = image.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("PFM sample {i} is {}", image.data()[i])));
    }
    let header = format!("{tag}\n{} {}\n-1.0\n", image.width(), image.height());
    let row = image.width() * image.channels();
    let mut out = Vec::with_capacity(header.len() + image.data().len() * 4);
    out.extend_from_slice(header.as_bytes());
    for y in (0..image.height()).rev() {
        for v in &image.data()[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Pfm(format!("missing {what} at byte offset {start}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token("type tag")?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::Pfm(format!("unknown type tag {other:?}"))),
    };
    let parse_dim = |s: String, what: &str| -> Result<usize> {
        match s.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Pfm(format!("invalid {what} {s:?}"))),
        }
    };
    let width = parse_dim(token("width")?, "width")?;
    let height = parse_dim(token("height")?, "height")?;
    let scale_text = token("scale")?;
    let scale: f32 = scale_text
        .parse()
        .ok()
        .filter(|s: &f32| s.is_finite() && *s != 0.0)
        .ok_or_else(|| Error::Pfm(format!("invalid scale {scale_text:?}")))?;
    // Exactly one whitespace byte separates the header from the samples.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::PfmTruncated {
            offset: pos,
            expected: 1,
            found: 0,
        });
    }
    pos += 1;
    let count = width * height * channels;
    let expected = count * 4;
    let found = bytes.len() - pos;
    if found < expected {
        return Err(Error::PfmTruncated {
            offset: pos,
            expected,
            found,
        });
    }
    let little = scale < 0.0;
    let samples: Vec<f32> = bytes[pos..pos + expected]
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let row = width * channels;
    let mut data = Vec::with_capacity(count);
    for y in (0..height).rev() {
        data.extend_from_slice(&samples[y * row..(y + 1) * row]);
    }
    Image::new(width, height, channels, data)
}
