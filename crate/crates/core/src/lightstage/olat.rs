use rayon::prelude::*;

use super::LightStage;
use crate::image::{Image, Rect};
use crate::{Error, Result};

/// One linear RGB image per LED plus a foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct OlatSet {
    pub id: String,
    pub subject_id: String,
    pub camera_id: String,
    stage: LightStage,
    images: Vec<Image>,
    mask: Image,
}

impl OlatSet {
    pub fn new(
        id: impl Into<String>,
        subject_id: impl Into<String>,
        camera_id: impl Into<String>,
        stage: LightStage,
        images: Vec<Image>,
        mask: Image,
    ) -> Result<Self> {
        if images.len() != stage.len() {
            return Err(Error::CountMismatch {
                what: "OLAT images",
                expected: stage.len(),
                got: images.len(),
            });
        }
        let (w, h) = (mask.width(), mask.height());
        if mask.channels() != 1 || mask.data().iter().any(|&m| !(0.0..=1.0).contains(&m)) {
            return Err(Error::InvalidArgument(
                "OLAT mask must be single-channel with values in [0, 1]".into(),
            ));
        }
        for (j, img) in images.iter().enumerate() {
            if (img.width(), img.height(), img.channels()) != (w, h, 3) {
                return Err(Error::InvalidArgument(format!(
                    "OLAT image {j} is {}x{}x{}, expected {w}x{h}x3",
                    img.width(),
                    img.height(),
                    img.channels()
                )));
            }
            if img.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "OLAT image {j} has negative or non-finite pixels"
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            subject_id: subject_id.into(),
            camera_id: camera_id.into(),
            stage,
            images,
            mask,
        })
    }

    pub fn stage(&self) -> &LightStage {
        &self.stage
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn mask(&self) -> &Image {
        &self.mask
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }
}

/// `Σ_j w_j ⊙ image_j` over the whole frame.
pub fn relight(olat: &OlatSet, weights: &[[f64; 3]]) -> Result<Image> {
    let full = Rect {
        x: 0,
        y: 0,
        width: olat.width(),
        height: olat.height(),
    };
    relight_rect(olat, weights, full)
}

/// `Σ_j w_j ⊙ image_j` restricted to `rect`, accumulated in `f64`.
pub fn relight_rect(olat: &OlatSet, weights: &[[f64; 3]], rect: Rect) -> Result<Image> {
    if weights.len() != olat.images.len() {
        return Err(Error::CountMismatch {
            what: "LED weights",
            expected: olat.images.len(),
            got: weights.len(),
        });
    }
    if rect.width == 0 || rect.height == 0 || rect.x + rect.width > olat.width() || rect.y + rect.height > olat.height() {
        return Err(Error::InvalidArgument(format!(
            "relight window {rect:?} outside {}x{} frame",
            olat.width(),
            olat.height()
        )));
    }
    let row_len = rect.width * 3;
    let src_w = olat.width();
    let rows: Vec<Vec<f32>> = (rect.y..rect.y + rect.height)
        .into_par_iter()
        .map(|y| {
            let mut acc = vec![0.0f64; row_len];
            let start = (y * src_w + rect.x) * 3;
            for (img, w) in olat.images.iter().zip(weights) {
                if w.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let src = &img.data()[start..start + row_len];
                for (a, px) in acc.chunks_exact_mut(3).zip(src.chunks_exact(3)) {
                    a[0] += w[0] * px[0] as f64;
                    a[1] += w[1] * px[1] as f64;
                    a[2] += w[2] * px[2] as f64;
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    Image::new(rect.width, rect.height, 3, rows.concat())
}
