//! The LED basis: stage layout, projection of environments onto LEDs,
//! Gaussian back-projection, OLAT relighting and a synthetic OLAT renderer.

mod olat;
mod scene;

pub use olat::{relight, relight_rect, OlatSet};
pub use scene::{render_olat_synthetic, SceneProxy};

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envmap::{self, EnvMap};
use crate::geometry::{self, Vec3};
use crate::{Error, Result};

pub const DEFAULT_LED_COUNT: usize = 304;
pub const DEFAULT_SIGMA_DEG: f64 = 8.0;
/// Resolution environments are resampled to before projection.
pub const PROJECTION_HEIGHT: usize = 128;
pub const PROJECTION_WIDTH: usize = 256;

/// Per-LED RGB weights.
pub type LedWeights = Vec<[f64; 3]>;

/// LED directions plus the angular width of each LED's Gaussian footprint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StageFile", into = "StageFile")]
pub struct LightStage {
    directions: Vec<Vec3>,
    sigma_deg: f64,
    /// `∫ exp(-α²/2σ²) dΩ` over the sphere.
    normalization: f64,
}

#[derive(Serialize, Deserialize)]
struct StageFile {
    sigma_deg: f64,
    directions: Vec<Vec3>,
}

impl TryFrom<StageFile> for LightStage {
    type Error = Error;

    fn try_from(f: StageFile) -> Result<Self> {
        LightStage::from_directions(f.directions, f.sigma_deg)
    }
}

impl From<LightStage> for StageFile {
    fn from(s: LightStage) -> Self {
        StageFile {
            sigma_deg: s.sigma_deg,
            directions: s.directions,
        }
    }
}

impl LightStage {
    /// Spherical Fibonacci layout of `n` LEDs around the vertical axis,
    /// with the default footprint width. Deterministic in `n`.
    pub fn fibonacci(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("a light stage needs at least one LED".into()));
        }
        let golden = PI * (3.0 - 5f64.sqrt());
        let directions = (0..n)
            .map(|i| {
                let y = 1.0 - (2 * i + 1) as f64 / n as f64;
                let r = (1.0 - y * y).max(0.0).sqrt();
                let (s, c) = (i as f64 * golden).sin_cos();
                [r * s, y, r * c]
            })
            .collect();
        Self::from_directions(directions, DEFAULT_SIGMA_DEG)
    }

    /// Normalizes `directions`; rejects zero or repeated directions and `σ ≤ 0`.
    pub fn from_directions(directions: Vec<Vec3>, sigma_deg: f64) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::InvalidArgument("a light stage needs at least one LED".into()));
        }
        if !(sigma_deg > 0.0 && sigma_deg.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "LED width must be positive, got {sigma_deg}"
            )));
        }
        let directions = directions
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                // Already-unit vectors are kept bit-exact so layouts round-trip.
                if (geometry::norm(d) - 1.0).abs() <= 4.0 * f64::EPSILON {
                    return Ok(d);
                }
                geometry::normalize(d)
                    .ok_or_else(|| Error::InvalidArgument(format!("LED {i} has no direction: {d:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        for i in 0..directions.len() {
            for j in 0..i {
                if directions[i] == directions[j] {
                    return Err(Error::InvalidArgument(format!("LEDs {j} and {i} coincide")));
                }
            }
        }
        Ok(Self {
            normalization: gaussian_normalization(sigma_deg),
            directions,
            sigma_deg,
        })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn sigma_deg(&self) -> f64 {
        self.sigma_deg
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    /// Index of the LED closest in angle to `dir` (lowest index on ties).
    pub fn nearest(&self, dir: Vec3) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, &d) in self.directions.iter().enumerate() {
            let c = geometry::dot(d, dir);
            if c > best.0 {
                best = (c, j);
            }
        }
        best.1
    }

    /// The stage turned about the vertical axis by `degrees` of longitude.
    pub fn rotated(&self, degrees: f64) -> Self {
        Self {
            directions: self
                .directions
                .iter()
                .map(|&d| geometry::rotate_about_up(d, degrees))
                .collect(),
            ..self.clone()
        }
    }

    /// Normalized footprint of LED `j` evaluated at direction `dir`.
    pub fn footprint(&self, j: usize, dir: Vec3) -> f64 {
        let a = geometry::angle_between(self.directions[j], dir);
        let s = self.sigma_deg.to_radians();
        (-a * a / (2.0 * s * s)).exp() / self.normalization
    }
}

/// `2π ∫₀^π exp(-α²/2σ²) sin α dα` by midpoint quadrature.
fn gaussian_normalization(sigma_deg: f64) -> f64 {
    const STEPS: usize = 100_000;
    let s = sigma_deg.to_radians();
    let h = PI / STEPS as f64;
    let sum: f64 = (0..STEPS)
        .map(|i| {
            let a = (i as f64 + 0.5) * h;
            (-a * a / (2.0 * s * s)).exp() * a.sin()
        })
        .sum();
    2.0 * PI * sum * h
}

/// Nearest-LED assignment of every pixel center of an `H×W` grid.
pub fn voronoi_assignment(stage: &LightStage, height: usize, width: usize) -> Result<Vec<usize>> {
    (0..height * width)
        .into_par_iter()
        .map(|i| Ok(stage.nearest(envmap::pixel_to_direction(i / width, i % width, height, width)?)))
        .collect()
}

/// Bins `radiance·Ω` of every pixel into its nearest LED.
pub fn project_env_to_leds(env: &EnvMap, stage: &LightStage) -> Result<LedWeights> {
    if stage.is_empty() {
        return Err(Error::InvalidArgument("empty light stage".into()));
    }
    let (h, w) = (env.height(), env.width());
    let omega = envmap::solid_angle_map(h, w)?;
    let cells = voronoi_assignment(stage, h, w)?;
    let mut weights = vec![[0.0; 3]; stage.len()];
    for (i, &j) in cells.iter().enumerate() {
        let o = omega.row(i / w);
        let p = env.pixel(i / w, i % w);
        for ch in 0..3 {
            weights[j][ch] += p[ch] * o;
        }
    }
    Ok(weights)
}

/// `map(d) = Σ_j w_j·g_j(d)` with each LED a normalized spherical Gaussian.
pub fn leds_to_envmap(weights: &[[f64; 3]], stage: &LightStage, height: usize, width: usize) -> Result<EnvMap> {
    if weights.len() != stage.len() {
        return Err(Error::CountMismatch {
            what: "LED weights",
            expected: stage.len(),
            got: weights.len(),
        });
    }
    let pixels: Vec<[f64; 3]> = (0..height * width)
        .into_par_iter()
        .map(|i| {
            let d = envmap::pixel_to_direction(i / width, i % width, height, width)?;
            let mut acc = [0.0; 3];
            for (j, wj) in weights.iter().enumerate() {
                if wj.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let g = stage.footprint(j, d);
                for ch in 0..3 {
                    acc[ch] += wj[ch] * g;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    EnvMap::new(height, width, pixels.concat())
}
