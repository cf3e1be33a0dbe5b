//! Latitude-longitude environment maps.
//!
//! Row 0 is the north pole (+y); longitude runs from +z towards +x across the
//! columns. Pixel `(r, c)` is sampled at its center: polar angle
//! `θ = (r + ½)·π/H`, longitude `φ = (c + ½)·2π/W`.

use std::f64::consts::PI;

use relight_autodiff::kernels::roll_columns;

use crate::geometry::{self, Vec3};
use crate::image::Image;
use crate::{Error, Result};

/// Linear RGB radiance on an `H×W` lat-long grid, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvMap {
    height: usize,
    width: usize,
    radiance: Vec<f64>,
}

impl EnvMap {
    /// Rejects zero extents and negative or non-finite radiance.
    pub fn new(height: usize, width: usize, radiance: Vec<f64>) -> Result<Self> {
        check_extent(height, width)?;
        if radiance.len() != height * width * 3 {
            return Err(Error::CountMismatch {
                what: "environment map samples",
                expected: height * width * 3,
                got: radiance.len(),
            });
        }
        if let Some(v) = radiance.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "environment radiance must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            radiance,
        })
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(height, width, rgb.repeat(height * width))
    }

    /// Evaluates `f` at every pixel-center direction.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(Vec3) -> [f64; 3]) -> Result<Self> {
        check_extent(height, width)?;
        let mut radiance = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                radiance.extend(f(pixel_to_direction(r, c, height, width)?));
            }
        }
        Self::new(height, width, radiance)
    }

    /// Converts a 3-channel image laid out top-down.
    pub fn from_image(image: &Image) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::InvalidArgument(format!(
                "environment maps need 3 channels, image has {}",
                image.channels()
            )));
        }
        let data = image.data().iter().map(|&v| v as f64).collect();
        Self::new(image.height(), image.width(), data)
    }

    pub fn to_image(&self) -> Image {
        let data = self.radiance.iter().map(|&v| v as f32).collect();
        Image::new(self.width, self.height, 3, data).expect("extents validated at construction")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.radiance
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.radiance[i], self.radiance[i + 1], self.radiance[i + 2]]
    }

    /// Multiplies every sample by `s ≥ 0`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.radiance.iter().map(|v| v * s).collect(),
        )
    }

    pub fn max_value(&self) -> f64 {
        self.radiance.iter().copied().fold(0.0, f64::max)
    }
}

fn check_extent(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "environment map extents must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Per-pixel solid angles of an `H×W` lat-long grid. Constant along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SolidAngleMap {
    height: usize,
    width: usize,
    rows: Vec<f64>,
}

impl SolidAngleMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, r: usize) -> f64 {
        self.rows[r]
    }

    pub fn get(&self, r: usize, _c: usize) -> f64 {
        self.rows[r]
    }

    pub fn total(&self) -> f64 {
        self.rows.iter().sum::<f64>() * self.width as f64
    }

    /// Dense `H·W` values, row-major.
    pub fn to_vec(&self) -> Vec<f64> {
        self.rows
            .iter()
            .flat_map(|&o| std::iter::repeat_n(o, self.width))
            .collect()
    }
}

pub fn solid_angle_map(height: usize, width: usize) -> Result<SolidAngleMap> {
    check_extent(height, width)?;
    let dphi = 2.0 * PI / width as f64;
    let rows = (0..height)
        .map(|r| {
            let top = r as f64 * PI / height as f64;
            let bottom = (r + 1) as f64 * PI / height as f64;
            dphi * (top.cos() - bottom.cos())
        })
        .collect();
    Ok(SolidAngleMap {
        height,
        width,
        rows,
    })
}

/// Unit direction through the center of pixel `(row, col)`.
pub fn pixel_to_direction(row: usize, col: usize, height: usize, width: usize) -> Result<Vec3> {
    check_extent(height, width)?;
    if row >= height || col >= width {
        return Err(Error::InvalidArgument(format!(
            "pixel ({row}, {col}) outside {height}x{width} map"
        )));
    }
    let theta = (row as f64 + 0.5) * PI / height as f64;
    let phi = (col as f64 + 0.5) * 2.0 * PI / width as f64;
    Ok(angles_to_direction(theta, phi))
}

pub(crate) fn angles_to_direction(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [st * sp, ct, st * cp]
}

/// Pixel `(row, col)` containing direction `dir` (need not be normalized).
pub fn direction_to_pixel(dir: Vec3, height: usize, width: usize) -> Result<(usize, usize)> {
    check_extent(height, width)?;
    let d = geometry::normalize(dir)
        .ok_or_else(|| Error::InvalidArgument(format!("cannot map direction {dir:?}")))?;
    let theta = d[1].clamp(-1.0, 1.0).acos();
    let phi = d[0].atan2(d[2]).rem_euclid(2.0 * PI);
    let row = ((theta / PI * height as f64).floor() as usize).min(height - 1);
    let col = ((phi / (2.0 * PI) * width as f64).floor() as usize) % width;
    Ok((row, col))
}

/// Rotates the map in longitude by `degrees`; content at longitude φ moves to φ + θ.
pub fn rotate_longitude(env: &EnvMap, degrees: f64) -> EnvMap {
    let shift = degrees / 360.0 * env.width as f64;
    let radiance = roll_columns(&env.radiance, env.height, env.width, 3, shift);
    EnvMap { radiance, ..*env }
}

/// Bilinear resampling at target pixel centers. Longitude wraps, latitude clamps.
pub fn resize_bilinear(env: &EnvMap, height: usize, width: usize) -> Result<EnvMap> {
    check_extent(height, width)?;
    if (height, width) == (env.height, env.width) {
        return Ok(env.clone());
    }
    let (h, w) = (env.height, env.width);
    let mut out = Vec::with_capacity(height * width * 3);
    for r in 0..height {
        let v = ((r as f64 + 0.5) * h as f64 / height as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let r0 = v.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let fv = v - r0 as f64;
        for c in 0..width {
            let u = (c as f64 + 0.5) * w as f64 / width as f64 - 0.5;
            let uf = u.floor();
            let fu = u - uf;
            let c0 = (uf as i64).rem_euclid(w as i64) as usize;
            let c1 = (c0 + 1) % w;
            let (p00, p01) = (env.pixel(r0, c0), env.pixel(r0, c1));
            let (p10, p11) = (env.pixel(r1, c0), env.pixel(r1, c1));
            for ch in 0..3 {
                let top = lerp(p00[ch], p01[ch], fu);
                let bottom = lerp(p10[ch], p11[ch], fu);
                let lo = p00[ch].min(p01[ch]).min(p10[ch]).min(p11[ch]);
                let hi = p00[ch].max(p01[ch]).max(p10[ch]).max(p11[ch]);
                out.push(lerp(top, bottom, fv).clamp(lo, hi));
            }
        }
    }
    EnvMap::new(height, width, out)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Solid-angle-weighted area average onto a coarser (or any) grid: each target
/// pixel receives the mean radiance over the part of the sphere it covers.
pub fn area_resample(env: &EnvMap, height: usize, width: usize) -> Result<EnvMap> {
    check_extent(height, width)?;
    if (height, width) == (env.height, env.width) {
        return Ok(env.clone());
    }
    // Latitude overlaps are measured in cos θ, longitude overlaps in φ.
    let row_weights = overlap_matrix(env.height, height, |i, n| (i as f64 * PI / n as f64).cos(), true);
    let col_weights = overlap_matrix(env.width, width, |i, n| i as f64 / n as f64, false);
    let mut out = vec![0.0; height * width * 3];
    for (tr, rw) in row_weights.iter().enumerate() {
        for (tc, cw) in col_weights.iter().enumerate() {
            let mut acc = [0.0; 3];
            let mut total = 0.0;
            for &(sr, a) in rw {
                for &(sc, b) in cw {
                    let wgt = a * b;
                    let p = env.pixel(sr, sc);
                    for ch in 0..3 {
                        acc[ch] += wgt * p[ch];
                    }
                    total += wgt;
                }
            }
            let o = &mut out[(tr * width + tc) * 3..(tr * width + tc + 1) * 3];
            for ch in 0..3 {
                o[ch] = acc[ch] / total;
            }
        }
    }
    EnvMap::new(height, width, out)
}

/// For each target cell, the source cells it overlaps and the overlap measure.
/// `edge(i, n)` is the coordinate of the i-th of n+1 cell edges.
fn overlap_matrix(
    src: usize,
    dst: usize,
    edge: impl Fn(usize, usize) -> f64,
    decreasing: bool,
) -> Vec<Vec<(usize, f64)>> {
    let sign = if decreasing { -1.0 } else { 1.0 };
    (0..dst)
        .map(|t| {
            let (t0, t1) = (sign * edge(t, dst), sign * edge(t + 1, dst));
            (0..src)
                .filter_map(|s| {
                    let (s0, s1) = (sign * edge(s, src), sign * edge(s + 1, src));
                    let overlap = t1.min(s1) - t0.max(s0);
                    (overlap > 0.0).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

/// `Σ radiance·Ω` per channel.
pub fn integrate(env: &EnvMap) -> [f64; 3] {
    let omega = solid_angle_map(env.height, env.width).expect("extents validated at construction");
    let mut acc = [0.0; 3];
    for r in 0..env.height {
        let o = omega.row(r);
        for c in 0..env.width {
            let p = env.pixel(r, c);
            for ch in 0..3 {
                acc[ch] += p[ch] * o;
            }
        }
    }
    acc
}

/// A sky of constant radiance plus one spherical-Gaussian "sun" of angular
/// width `sun_sigma_deg` and peak radiance `sun`.
pub fn sun_and_sky(
    height: usize,
    width: usize,
    sun_dir: Vec3,
    sun_sigma_deg: f64,
    sun: [f64; 3],
    sky: [f64; 3],
) -> Result<EnvMap> {
    let dir = geometry::normalize(sun_dir)
        .ok_or_else(|| Error::InvalidArgument("sun direction must be nonzero".into()))?;
    if !(sun_sigma_deg > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sun width must be positive, got {sun_sigma_deg}"
        )));
    }
    let s2 = 2.0 * sun_sigma_deg.to_radians().powi(2);
    EnvMap::from_fn(height, width, |d| {
        let g = (-geometry::angle_between(d, dir).powi(2) / s2).exp();
        [sky[0] + g * sun[0], sky[1] + g * sun[1], sky[2] + g * sun[2]]
    })
}
