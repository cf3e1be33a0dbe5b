use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LightStage, OlatSet};
use crate::geometry::{self, Vec3};
use crate::image::Image;
use crate::{Error, Result};

/// A shaded sphere seen by an orthographic camera.
///
/// `center` and `radius` are fractions of the image side. Image x maps to the
/// camera's right, image rows run downwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneProxy {
    pub center: [f64; 2],
    pub radius: f64,
    pub albedo: [f64; 3],
    pub specular: f64,
    pub exponent: f64,
    /// Direction the camera looks along.
    pub view_dir: Vec3,
}

impl Default for SceneProxy {
    fn default() -> Self {
        Self {
            center: [0.5, 0.5],
            radius: 0.42,
            albedo: [0.8, 0.6, 0.5],
            specular: 0.3,
            exponent: 24.0,
            view_dir: [0.0, 0.0, -1.0],
        }
    }
}

impl SceneProxy {
    fn validate(&self, resolution: usize) -> Result<()> {
        if resolution < 16 {
            return Err(Error::InvalidArgument(format!(
                "synthetic OLAT resolution must be at least 16, got {resolution}"
            )));
        }
        if self.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument(format!(
                "albedo {:?} outside [0, 1]",
                self.albedo
            )));
        }
        if !(self.exponent >= 1.0) || !(self.specular >= 0.0) || !self.specular.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "specular strength {} / exponent {} invalid",
                self.specular, self.exponent
            )));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() || self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "degenerate sphere: radius {}",
                self.radius
            )));
        }
        Ok(())
    }

    /// Camera basis `(right, up, towards camera)`.
    fn frame(&self) -> Result<(Vec3, Vec3, Vec3)> {
        let back = geometry::normalize(geometry::scale(self.view_dir, -1.0))
            .ok_or_else(|| Error::InvalidArgument("view direction must be nonzero".into()))?;
        let hint = if back[1].abs() > 0.999 { [0.0, 0.0, 1.0] } else { [0.0, 1.0, 0.0] };
        let right = geometry::normalize(geometry::cross(hint, back)).expect("hint not parallel");
        let up = geometry::cross(back, right);
        Ok((right, up, back))
    }

    /// World-space normal at pixel `(x, y)`, or `None` off the sphere.
    pub fn normal_at(&self, x: usize, y: usize, resolution: usize) -> Option<Vec3> {
        let (right, up, back) = self.frame().ok()?;
        let r = self.radius * resolution as f64;
        let dx = ((x as f64 + 0.5) - self.center[0] * resolution as f64) / r;
        let dy = -((y as f64 + 0.5) - self.center[1] * resolution as f64) / r;
        let q = dx * dx + dy * dy;
        if q > 1.0 {
            return None;
        }
        let dz = (1.0 - q).sqrt();
        Some(geometry::add(
            geometry::add(geometry::scale(right, dx), geometry::scale(up, dy)),
            geometry::scale(back, dz),
        ))
    }

    /// Radiance towards the camera at normal `n` lit by a unit light from `l`.
    pub fn shade(&self, n: Vec3, l: Vec3) -> [f64; 3] {
        let v = geometry::scale(self.view_dir, -1.0);
        let v = geometry::normalize(v).unwrap_or([0.0, 0.0, 1.0]);
        let nl = geometry::dot(n, l);
        if nl <= 0.0 {
            return [0.0; 3];
        }
        let spec = match geometry::normalize(geometry::add(l, v)) {
            Some(h) => self.specular * geometry::dot(n, h).max(0.0).powf(self.exponent),
            None => 0.0,
        };
        let d = nl / std::f64::consts::PI;
        [
            self.albedo[0] * d + spec,
            self.albedo[1] * d + spec,
            self.albedo[2] * d + spec,
        ]
    }
}

/// Renders one image per LED of `stage` at `resolution²` pixels.
pub fn render_olat_synthetic(scene: &SceneProxy, stage: &LightStage, resolution: usize) -> Result<OlatSet> {
    scene.validate(resolution)?;
    scene.frame()?;
    let normals: Vec<Option<Vec3>> = (0..resolution * resolution)
        .map(|i| scene.normal_at(i % resolution, i / resolution, resolution))
        .collect();
    if normals.iter().all(Option::is_none) {
        return Err(Error::InvalidArgument(
            "degenerate sphere: it covers no pixel center".into(),
        ));
    }
    let mask_data = normals.iter().map(|n| if n.is_some() { 1.0 } else { 0.0 }).collect();
    let mask = Image::new(resolution, resolution, 1, mask_data)?;
    let images = stage
        .directions()
        .par_iter()
        .map(|&l| {
            let mut data = Vec::with_capacity(resolution * resolution * 3);
            for n in &normals {
                let rgb = n.map_or([0.0; 3], |n| scene.shade(n, l));
                data.extend(rgb.iter().map(|&v| v as f32));
            }
            Image::new(resolution, resolution, 3, data)
        })
        .collect::<Result<Vec<_>>>()?;
    OlatSet::new("synthetic", "sphere", "cam0", stage.clone(), images, mask)
}
