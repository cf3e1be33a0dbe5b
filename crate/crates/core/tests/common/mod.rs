#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relight_core::envmap::EnvMap;
use relight_core::lightstage::{render_olat_synthetic, LightStage, OlatSet, SceneProxy};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stage(n: usize) -> LightStage {
    LightStage::fibonacci(n).unwrap()
}

pub fn sphere_olat(n_leds: usize, resolution: usize) -> OlatSet {
    render_olat_synthetic(&SceneProxy::default(), &stage(n_leds), resolution).unwrap()
}

pub fn lambertian_scene() -> SceneProxy {
    SceneProxy {
        specular: 0.0,
        albedo: [0.9, 0.5, 0.3],
        ..SceneProxy::default()
    }
}

/// Positive, smooth, and non-constant in both angles.
pub fn smooth_env(height: usize, width: usize) -> EnvMap {
    EnvMap::from_fn(height, width, |d| {
        [1.0 + 0.5 * d[0], 1.2 + 0.3 * d[1] * d[2], 0.8 + 0.6 * d[2] * d[2]]
    })
    .unwrap()
}

pub fn random_env(height: usize, width: usize, seed: u64) -> EnvMap {
    let mut r = rng(seed);
    EnvMap::new(height, width, (0..height * width * 3).map(|_| r.random_range(0.0..2.0)).collect()).unwrap()
}
