//! Linear float images, row-major top-down with interleaved channels.

use relight_autodiff::{Real, Tensor};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Square or rectangular pixel window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "image extents must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::CountMismatch {
                what: "image samples",
                expected: width * height * channels,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    /// `f(x, y, channel)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Multiplies every channel by a single-channel mask of the same extent.
    pub fn masked(&self, mask: &Image) -> Result<Self> {
        if mask.channels != 1 || (mask.width, mask.height) != (self.width, self.height) {
            return Err(Error::InvalidArgument(format!(
                "mask {}x{}x{} does not fit image {}x{}",
                mask.width, mask.height, mask.channels, self.width, self.height
            )));
        }
        let mut out = self.clone();
        for (px, &m) in out.data.chunks_mut(self.channels).zip(&mask.data) {
            px.iter_mut().for_each(|v| *v *= m);
        }
        Ok(out)
    }

    pub fn crop(&self, rect: Rect) -> Result<Self> {
        if rect.width == 0
            || rect.height == 0
            || rect.x + rect.width > self.width
            || rect.y + rect.height > self.height
        {
            return Err(Error::InvalidArgument(format!(
                "crop {rect:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        let row = rect.width * self.channels;
        let mut data = Vec::with_capacity(row * rect.height);
        for y in rect.y..rect.y + rect.height {
            let start = (y * self.width + rect.x) * self.channels;
            data.extend_from_slice(&self.data[start..start + row]);
        }
        Self::new(rect.width, rect.height, self.channels, data)
    }

    /// Resamples to `width×height`: area averaging along axes that shrink,
    /// bilinear interpolation at pixel centers (edge-clamped) along axes that grow.
    pub fn resample(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "resample target must be positive, got {width}x{height}"
            )));
        }
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let c = self.channels;
        let xw = axis_weights(self.width, width);
        let yw = axis_weights(self.height, height);
        // Horizontal pass into f64, then vertical.
        let mut tmp = vec![0.0f64; self.height * width * c];
        for y in 0..self.height {
            for (x, taps) in xw.iter().enumerate() {
                for &(sx, w) in taps {
                    let src = self.pixel(sx, y);
                    let dst = &mut tmp[(y * width + x) * c..(y * width + x + 1) * c];
                    for ch in 0..c {
                        dst[ch] += w * src[ch] as f64;
                    }
                }
            }
        }
        let mut data = vec![0.0f32; height * width * c];
        for (y, taps) in yw.iter().enumerate() {
            for x in 0..width {
                let mut acc = vec![0.0f64; c];
                for &(sy, w) in taps {
                    let src = &tmp[(sy * width + x) * c..(sy * width + x + 1) * c];
                    for ch in 0..c {
                        acc[ch] += w * src[ch];
                    }
                }
                for ch in 0..c {
                    data[(y * width + x) * c + ch] = acc[ch] as f32;
                }
            }
        }
        Self::new(width, height, c, data)
    }

    /// `H×W×C` tensor view of the samples.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.height, self.width, self.channels],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("image extents are positive")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (h, w, c) = t.dims3()?;
        Self::new(w, h, c, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }
}

/// Resampling taps along one axis: for each output index, `(source index, weight)`.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    if dst < src {
        let ratio = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let (a, b) = (i as f64 * ratio, (i + 1) as f64 * ratio);
                let first = a.floor() as usize;
                let last = (b.ceil() as usize).min(src);
                (first..last)
                    .filter_map(|s| {
                        let overlap = b.min((s + 1) as f64) - a.max(s as f64);
                        (overlap > 0.0).then_some((s, overlap / ratio))
                    })
                    .collect()
            })
            .collect()
    } else {
        (0..dst)
            .map(|i| {
                let u = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let s0 = u.floor() as usize;
                let s1 = (s0 + 1).min(src - 1);
                let f = u - s0 as f64;
                if f == 0.0 || s0 == s1 {
                    vec![(s0, 1.0)]
                } else {
                    vec![(s0, 1.0 - f), (s1, f)]
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_downsample_by_two_averages_blocks() {
        let img = Image::from_fn(4, 2, 1, |x, y, _| (x + 4 * y) as f32).unwrap();
        let small = img.resample(2, 1).unwrap();
        assert_eq!(small.data(), &[(0.0 + 1.0 + 4.0 + 5.0) / 4.0, (2.0 + 3.0 + 6.0 + 7.0) / 4.0]);
    }

    #[test]
    fn fractional_area_downsample_preserves_mean() {
        let img = Image::from_fn(7, 5, 2, |x, y, c| (x * 3 + y + c) as f32).unwrap();
        let small = img.resample(3, 2).unwrap();
        let mean = |i: &Image| i.data().iter().map(|&v| v as f64).sum::<f64>() / i.data().len() as f64;
        assert!((mean(&img) - mean(&small)).abs() < 1e-5);
    }

    #[test]
    fn bilinear_upsample_matches_hand_values() {
        let img = Image::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let up = img.resample(4, 1).unwrap();
        // Centers map to -0.25, 0.25, 0.75, 1.25 in source pixels.
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn crop_extracts_window() {
        let img = Image::from_fn(4, 4, 1, |x, y, _| (x + 10 * y) as f32).unwrap();
        let c = img
            .crop(Rect {
                x: 1,
                y: 2,
                width: 2,
                height: 2,
            })
            .unwrap();
        assert_eq!(c.data(), &[21.0, 22.0, 31.0, 32.0]);
        assert!(img
            .crop(Rect {
                x: 3,
                y: 0,
                width: 2,
                height: 1
            })
            .is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(3, 2, 3, |x, y, c| (x + y * 3 + c * 7) as f32 * 0.1).unwrap();
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[2, 3, 3]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }
}
