//! Image and light error metrics, and the loss terms evaluated outside training.

use relight_autodiff::{Tape, Tensor};

use crate::envmap::solid_angle_map;
use crate::image::Image;
use crate::{Error, Result};

/// Foreground threshold applied to soft masks.
pub const MASK_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImageMetrics {
    pub rmse: f64,
    pub rmse_s: f64,
    pub dssim: f64,
    /// Global scale applied for `rmse_s`.
    pub alpha: f64,
}

/// Gaussian-window SSIM settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

fn check_pair(pred: &Image, target: &Image, mask: &Image) -> Result<Vec<bool>> {
    let dims = |i: &Image| (i.width(), i.height());
    if dims(pred) != dims(target) || pred.channels() != target.channels() {
        return Err(Error::InvalidArgument(format!(
            "prediction {}x{}x{} and target {}x{}x{} differ",
            pred.width(),
            pred.height(),
            pred.channels(),
            target.width(),
            target.height(),
            target.channels()
        )));
    }
    if dims(mask) != dims(pred) || mask.channels() != 1 {
        return Err(Error::InvalidArgument("mask must be single-channel and match the image".into()));
    }
    let fg: Vec<bool> = mask.data().iter().map(|&m| m >= MASK_THRESHOLD).collect();
    if !fg.iter().any(|&b| b) {
        return Err(Error::InvalidArgument("mask selects no pixels".into()));
    }
    Ok(fg)
}

/// RMSE, scale-invariant RMSE and DSSIM over the foreground of `mask`.
pub fn image_metrics(pred: &Image, target: &Image, mask: &Image) -> Result<ImageMetrics> {
    let fg = check_pair(pred, target, mask)?;
    let c = pred.channels();
    let (mut se, mut pt, mut pp, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (i, &inside) in fg.iter().enumerate() {
        if !inside {
            continue;
        }
        for ch in 0..c {
            let p = pred.data()[i * c + ch] as f64;
            let t = target.data()[i * c + ch] as f64;
            se += (p - t) * (p - t);
            pt += p * t;
            pp += p * p;
            n += 1;
        }
    }
    let rmse = (se / n as f64).sqrt();
    let alpha = if pp > 0.0 { pt / pp } else { 0.0 };
    let mut se_s = 0.0;
    for (i, &inside) in fg.iter().enumerate() {
        if inside {
            for ch in 0..c {
                let d = alpha * pred.data()[i * c + ch] as f64 - target.data()[i * c + ch] as f64;
                se_s += d * d;
            }
        }
    }
    // α = 1 is a candidate too, so the minimum never exceeds plain RMSE.
    let rmse_s = (se_s / n as f64).sqrt().min(rmse);
    let dssim = dssim_with(pred, target, mask, &SsimParams::default())?;
    Ok(ImageMetrics {
        rmse,
        rmse_s,
        dssim,
        alpha,
    })
}

/// `(1 − SSIM)/2`, SSIM averaged over channels and over every window that
/// overlaps the foreground. Window statistics use Gaussian weights times the
/// binarized mask, truncated at the image border.
pub fn dssim_with(pred: &Image, target: &Image, mask: &Image, params: &SsimParams) -> Result<f64> {
    let fg = check_pair(pred, target, mask)?;
    let (w, h, c) = (pred.width(), pred.height(), pred.channels());
    let m: Vec<f64> = fg.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let taps = params.taps();
    let weight = blur(&m, w, h, &taps);
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..w * h).map(|i| pred.data()[i * c + ch] as f64).collect();
        let y: Vec<f64> = (0..w * h).map(|i| target.data()[i * c + ch] as f64).collect();
        let field = |f: &dyn Fn(usize) -> f64| {
            let v: Vec<f64> = (0..w * h).map(|i| m[i] * f(i)).collect();
            blur(&v, w, h, &taps)
        };
        let sx = field(&|i| x[i]);
        let sy = field(&|i| y[i]);
        let sxx = field(&|i| x[i] * x[i]);
        let syy = field(&|i| y[i] * y[i]);
        let sxy = field(&|i| x[i] * y[i]);
        let (mut acc, mut count) = (0.0, 0usize);
        for i in 0..w * h {
            if weight[i] <= 0.0 {
                continue;
            }
            let wt = weight[i];
            let (mx, my) = (sx[i] / wt, sy[i] / wt);
            let vx = sxx[i] / wt - mx * mx;
            let vy = syy[i] / wt - my * my;
            let cov = sxy[i] / wt - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
        total += acc / count as f64;
    }
    let ssim = total / c as f64;
    Ok(((1.0 - ssim) / 2.0).clamp(0.0, 1.0))
}

/// Separable correlation with `taps`, zero outside the image.
fn blur(v: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &g) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r as isize;
                if (0..w as isize).contains(&xx) {
                    s += g * v[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &g) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r as isize;
                if (0..h as isize).contains(&yy) {
                    s += g * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// `min_{α≥0} ‖Ω ⊙ (α·pred − target)‖₂` on an `H×W×3` lat-long light.
pub fn light_rmse_s(pred: &Image, target: &Image) -> Result<f64> {
    if (pred.width(), pred.height(), pred.channels()) != (target.width(), target.height(), target.channels()) {
        return Err(Error::InvalidArgument("light shapes differ".into()));
    }
    let omega = solid_angle_map(pred.height(), pred.width())?.to_vec();
    let c = pred.channels();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let o2 = omega[i / c].powi(2);
        num += o2 * p as f64 * t as f64;
        den += o2 * (p as f64).powi(2);
    }
    let alpha = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
    let se: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .map(|(i, (&p, &t))| (omega[i / c] * (alpha * p as f64 - t as f64)).powi(2))
        .sum();
    Ok(se.sqrt())
}

/// Per-pixel solid angles of an `H×W` light as an `H×W×1` tensor.
pub fn solid_angle_tensor(height: usize, width: usize) -> Result<Tensor<f64>> {
    let omega = solid_angle_map(height, width)?.to_vec();
    Ok(Tensor::new(vec![height, width, 1], omega)?)
}

fn image_tensor(img: &Image) -> Tensor<f64> {
    img.to_tensor()
}

/// `‖M ⊙ (pred − target)‖₁`.
pub fn loss_image(pred: &Image, target: &Image, mask: &Image) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(image_tensor(pred));
    let t = tape.constant(image_tensor(target));
    let m = tape.constant(image_tensor(mask));
    let l = tape.masked_l1(p, t, m)?;
    Ok(tape.value(l).item())
}

/// `‖Ω ⊙ (ln(1+pred) − ln(1+target))‖₂²` with `pred` clamped above −1.
/// Also returns how many entries hit the clamp.
pub fn loss_light(pred: &Image, target: &Image) -> Result<(f64, usize)> {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(image_tensor(pred));
    let t = tape.constant(image_tensor(target));
    let w = tape.constant(solid_angle_tensor(pred.height(), pred.width())?);
    let l = tape.log_l2(p, t, w)?;
    Ok((tape.value(l).item(), tape.clamp_events()))
}

/// `target + λ_light·light + λ_self·self`.
pub fn loss_total(target: f64, light: f64, self_term: f64, lambda_light: f64, lambda_self: f64) -> f64 {
    target + lambda_light * light + lambda_self * self_term
}
