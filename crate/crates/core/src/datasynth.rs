//! Training-pair synthesis: masked random crops relit under two rotated
//! environments, peak-normalized together with their lights, plus a
//! longitude-jittered re-rendering of the source.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envmap::{self, EnvMap};
use crate::image::{Image, Rect};
use crate::io::{read_json, read_pfm, write_json, write_pfm};
use crate::lightstage::{self, OlatSet, PROJECTION_HEIGHT, PROJECTION_WIDTH};
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const PRNG_NAME: &str = "ChaCha8";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Output image side `D`.
    pub image_size: usize,
    pub light_height: usize,
    pub light_width: usize,
    /// Crop side range as fractions of the smaller OLAT dimension.
    pub crop_min: f64,
    pub crop_max: f64,
    pub max_crop_attempts: usize,
}

impl SynthConfig {
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            light_height: 8,
            light_width: 16,
            crop_min: 0.28,
            crop_max: 0.57,
            max_crop_attempts: 16,
        }
    }

    pub fn paper_shaped() -> Self {
        Self {
            image_size: 256,
            light_height: 16,
            light_width: 32,
            ..Self::toy()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.light_height == 0 || self.light_width == 0 {
            return Err(Error::InvalidArgument("synthesis extents must be positive".into()));
        }
        if !(0.0 < self.crop_min && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "crop fractions [{}, {}] must satisfy 0 < min <= max <= 1",
                self.crop_min, self.crop_max
            )));
        }
        if self.max_crop_attempts == 0 {
            return Err(Error::InvalidArgument("at least one crop attempt is required".into()));
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// The random choices that, with the inputs, determine a pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairParams {
    pub crop: Rect,
    pub rotation_source_deg: f64,
    pub rotation_target_deg: f64,
    pub jitter_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub source: Image,
    pub source_light: Image,
    pub target: Image,
    pub target_light: Image,
    pub mask: Image,
    pub jitter_deg: f64,
    pub source_jittered: Image,
    pub source_jittered_light: Image,
    /// Peak of the unnormalized source crop; source image and lights were divided by it.
    pub source_peak: f32,
    pub target_peak: f32,
}

/// Draws pair parameters from `rng` and renders the pair.
pub fn synth_pair(
    olat: &OlatSet,
    env_a: &EnvMap,
    env_b: &EnvMap,
    rng: &mut impl Rng,
    config: &SynthConfig,
) -> Result<(TrainingPair, PairParams)> {
    let params = draw_params(olat, rng, config)?;
    let pair = render_pair(olat, env_a, env_b, &params, config)?;
    Ok((pair, params))
}

/// Crop (re-drawn while the mask inside it is empty), two rotations and the jitter.
pub fn draw_params(olat: &OlatSet, rng: &mut impl Rng, config: &SynthConfig) -> Result<PairParams> {
    config.validate()?;
    let s = olat.width().min(olat.height()) as f64;
    let mut crop = None;
    for _ in 0..config.max_crop_attempts {
        let frac = rng.random_range(config.crop_min..=config.crop_max);
        let side = ((frac * s).round() as usize).clamp(1, s as usize);
        let x = rng.random_range(0..=olat.width() - side);
        let y = rng.random_range(0..=olat.height() - side);
        let rect = Rect {
            x,
            y,
            width: side,
            height: side,
        };
        if olat.mask().crop(rect)?.data().iter().any(|&m| m > 0.0) {
            crop = Some(rect);
            break;
        }
    }
    let crop = crop.ok_or(Error::EmptyMask {
        attempts: config.max_crop_attempts,
    })?;
    Ok(PairParams {
        crop,
        rotation_source_deg: rng.random_range(0.0..360.0),
        rotation_target_deg: rng.random_range(0.0..360.0),
        jitter_deg: rng.random_range(0.0..360.0),
    })
}

/// Deterministic rendering of a pair from its parameters.
pub fn render_pair(
    olat: &OlatSet,
    env_a: &EnvMap,
    env_b: &EnvMap,
    params: &PairParams,
    config: &SynthConfig,
) -> Result<TrainingPair> {
    config.validate()?;
    let mask_crop = olat.mask().crop(params.crop)?;
    let env_s = envmap::rotate_longitude(env_a, params.rotation_source_deg);
    let env_t = envmap::rotate_longitude(env_b, params.rotation_target_deg);
    let env_j = envmap::rotate_longitude(&env_s, params.jitter_deg);

    let (source, source_light) = render_view(olat, &env_s, &mask_crop, params.crop, config)?;
    let (target, target_light) = render_view(olat, &env_t, &mask_crop, params.crop, config)?;
    let (jit, jit_light) = if params.jitter_deg == 0.0 {
        (source.clone(), source_light.clone())
    } else {
        render_view(olat, &env_j, &mask_crop, params.crop, config)?
    };

    let source_peak = peak(&source, "source")?;
    let target_peak = peak(&target, "target")?;
    let d = config.image_size;
    Ok(TrainingPair {
        source: divide(&source, source_peak),
        source_light: divide(&source_light, source_peak),
        target: divide(&target, target_peak),
        target_light: divide(&target_light, target_peak),
        mask: mask_crop.resample(d, d)?,
        jitter_deg: params.jitter_deg,
        source_jittered: divide(&jit, source_peak),
        source_jittered_light: divide(&jit_light, source_peak),
        source_peak,
        target_peak,
    })
}

/// Steps 4 to 7 for one environment: unnormalized `D×D` image and light.
fn render_view(
    olat: &OlatSet,
    env: &EnvMap,
    mask_crop: &Image,
    crop: Rect,
    config: &SynthConfig,
) -> Result<(Image, Image)> {
    let stage = olat.stage();
    let resized = envmap::resize_bilinear(env, PROJECTION_HEIGHT, PROJECTION_WIDTH)?;
    let weights = lightstage::project_env_to_leds(&resized, stage)?;
    let relit = lightstage::relight_rect(olat, &weights, crop)?.masked(mask_crop)?;
    let light = lightstage::leds_to_envmap(&weights, stage, config.light_height, config.light_width)?;
    let d = config.image_size;
    Ok((relit.resample(d, d)?, light.to_image()))
}

fn peak(image: &Image, what: &str) -> Result<f32> {
    let m = image.max_value();
    if m > 0.0 && m.is_finite() {
        Ok(m)
    } else {
        Err(Error::Dataset(format!("{what} image has no positive pixel to normalize by")))
    }
}

/// Divides in `f64` so the peak pixel becomes exactly 1.
fn divide(image: &Image, by: f32) -> Image {
    image.map(|v| (v as f64 / by as f64) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

/// Disjoint assignment of OLAT and environment ids to splits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub train_olats: BTreeSet<String>,
    pub train_envs: BTreeSet<String>,
    pub validation_olats: BTreeSet<String>,
    pub validation_envs: BTreeSet<String>,
}

impl SplitRule {
    pub fn validate(&self) -> Result<()> {
        let olats: Vec<_> = self.train_olats.intersection(&self.validation_olats).collect();
        let envs: Vec<_> = self.train_envs.intersection(&self.validation_envs).collect();
        if !olats.is_empty() || !envs.is_empty() {
            return Err(Error::SplitOverlap(format!(
                "OLAT ids {olats:?} and environment ids {envs:?} are in both splits"
            )));
        }
        Ok(())
    }

    pub fn olats(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Train => &self.train_olats,
            Split::Validation => &self.validation_olats,
        }
    }

    pub fn envs(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Train => &self.train_envs,
            Split::Validation => &self.validation_envs,
        }
    }
}

/// An input with an id and, when it came from disk, its location.
#[derive(Clone, Debug)]
pub struct Source<T> {
    pub id: String,
    pub path: Option<PathBuf>,
    pub data: T,
}

impl<T> Source<T> {
    pub fn reference(&self) -> SourceRef {
        SourceRef {
            id: self.id.clone(),
            path: self.path.clone(),
        }
    }
}

pub type OlatSource = Source<OlatSet>;
pub type EnvSource = Source<EnvMap>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub id: String,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairFiles {
    pub source: PathBuf,
    pub target: PathBuf,
    pub source_light: PathBuf,
    pub target_light: PathBuf,
    pub mask: PathBuf,
    pub source_jittered: PathBuf,
    pub source_jittered_light: PathBuf,
}

impl PairFiles {
    fn for_index(index: usize) -> Self {
        let dir = PathBuf::from("pairs").join(index.to_string());
        Self {
            source: dir.join("src.pfm"),
            target: dir.join("tgt.pfm"),
            source_light: dir.join("light_src.pfm"),
            target_light: dir.join("light_tgt.pfm"),
            mask: dir.join("mask.pfm"),
            source_jittered: dir.join("src_jit.pfm"),
            source_jittered_light: dir.join("light_src_jit.pfm"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub index: usize,
    /// Stream of the seeded generator this pair was drawn from.
    pub stream: u64,
    pub olat_id: String,
    pub env_source_id: String,
    pub env_target_id: String,
    #[serde(flatten)]
    pub params: PairParams,
    pub source_peak: f32,
    pub target_peak: f32,
    pub files: PairFiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: Split,
    pub seed: u64,
    pub prng: String,
    pub synth: SynthConfig,
    pub olats: Vec<SourceRef>,
    pub envs: Vec<SourceRef>,
    pub pairs: Vec<PairRecord>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Self = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "{}: unsupported dataset format version {}",
                dir.display(),
                manifest.format_version
            )));
        }
        Ok(manifest)
    }
}

/// The per-pair generator: `seed` selects the key, the pair index the stream.
pub fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Synthesizes `count` pairs of `split` into `out_dir` and writes the manifest.
/// Pair files appear under `pairs/<index>/`; with `count = 0` only the
/// manifest is written.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    olats: &[OlatSource],
    envs: &[EnvSource],
    count: usize,
    seed: u64,
    rule: &SplitRule,
    split: Split,
    config: &SynthConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    rule.validate()?;
    let olats = select(olats, rule.olats(split), "OLAT")?;
    let envs = select(envs, rule.envs(split), "environment")?;
    if count > 0 && (olats.is_empty() || envs.len() < 2) {
        return Err(Error::Insufficient(format!(
            "{split} split needs at least 1 OLAT set and 2 environments, has {} and {}",
            olats.len(),
            envs.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let pairs = (0..count)
        .into_par_iter()
        .map(|index| {
            let mut rng = pair_rng(seed, index);
            let o = rng.random_range(0..olats.len());
            let a = rng.random_range(0..envs.len());
            let mut b = rng.random_range(0..envs.len() - 1);
            if b >= a {
                b += 1;
            }
            let (pair, params) = synth_pair(&olats[o].data, &envs[a].data, &envs[b].data, &mut rng, config)?;
            let files = PairFiles::for_index(index);
            write_pair(out_dir, &files, &pair)?;
            Ok(PairRecord {
                index,
                stream: index as u64,
                olat_id: olats[o].id.clone(),
                env_source_id: envs[a].id.clone(),
                env_target_id: envs[b].id.clone(),
                params,
                source_peak: pair.source_peak,
                target_peak: pair.target_peak,
                files,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        split,
        seed,
        prng: PRNG_NAME.into(),
        synth: config.clone(),
        olats: olats.iter().map(|s| s.reference()).collect(),
        envs: envs.iter().map(|s| s.reference()).collect(),
        pairs,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn select<'a, T>(sources: &'a [Source<T>], ids: &BTreeSet<String>, what: &str) -> Result<Vec<&'a Source<T>>> {
    let mut seen = BTreeSet::new();
    for s in sources {
        if !seen.insert(&s.id) {
            return Err(Error::InvalidArgument(format!("duplicate {what} id {:?}", s.id)));
        }
    }
    if let Some(missing) = ids.iter().find(|id| !seen.contains(id)) {
        return Err(Error::Insufficient(format!("declared {what} id {missing:?} was not provided")));
    }
    Ok(sources.iter().filter(|s| ids.contains(&s.id)).collect())
}

fn write_pair(root: &Path, files: &PairFiles, pair: &TrainingPair) -> Result<()> {
    let dir = root.join(files.source.parent().expect("pair files live in a directory"));
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    write_pfm(&root.join(&files.source), &pair.source)?;
    write_pfm(&root.join(&files.target), &pair.target)?;
    write_pfm(&root.join(&files.source_light), &pair.source_light)?;
    write_pfm(&root.join(&files.target_light), &pair.target_light)?;
    write_pfm(&root.join(&files.mask), &pair.mask)?;
    write_pfm(&root.join(&files.source_jittered), &pair.source_jittered)?;
    write_pfm(&root.join(&files.source_jittered_light), &pair.source_jittered_light)
}

/// Reads one stored pair.
pub fn load_pair(root: &Path, record: &PairRecord) -> Result<TrainingPair> {
    let f = &record.files;
    Ok(TrainingPair {
        source: read_pfm(&root.join(&f.source))?,
        source_light: read_pfm(&root.join(&f.source_light))?,
        target: read_pfm(&root.join(&f.target))?,
        target_light: read_pfm(&root.join(&f.target_light))?,
        mask: read_pfm(&root.join(&f.mask))?,
        jitter_deg: record.params.jitter_deg,
        source_jittered: read_pfm(&root.join(&f.source_jittered))?,
        source_jittered_light: read_pfm(&root.join(&f.source_jittered_light))?,
        source_peak: record.source_peak,
        target_peak: record.target_peak,
    })
}

/// Manifest plus every pair, in index order.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<TrainingPair>)> {
    let manifest = DatasetManifest::load(root)?;
    let pairs = manifest
        .pairs
        .par_iter()
        .map(|r| load_pair(root, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, pairs))
}

/// Re-renders a recorded pair from its sources.
pub fn regenerate_pair(
    manifest: &DatasetManifest,
    record: &PairRecord,
    olats: &[OlatSource],
    envs: &[EnvSource],
) -> Result<TrainingPair> {
    let find = |id: &str, what: &str| Error::Insufficient(format!("{what} {id:?} not provided"));
    let olat = olats
        .iter()
        .find(|s| s.id == record.olat_id)
        .ok_or_else(|| find(&record.olat_id, "OLAT set"))?;
    let env = |id: &String| {
        envs.iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| find(id, "environment"))
    };
    render_pair(
        &olat.data,
        &env(&record.env_source_id)?.data,
        &env(&record.env_target_id)?.data,
        &record.params,
        &manifest.synth,
    )
}

/// A procedural environment with one dominant light.
#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralEnv {
    pub env: EnvMap,
    pub sun_dir: crate::geometry::Vec3,
}

/// Sun-and-sky environment number `index` of the family keyed by `seed`: a
/// 4° sun at 15° to 60° elevation and random longitude, carrying several
/// times the energy of a dim tinted sky.
pub fn procedural_env(seed: u64, index: usize, height: usize, width: usize) -> Result<ProceduralEnv> {
    let mut rng = pair_rng(seed, index);
    let elevation = rng.random_range(15.0f64..60.0).to_radians();
    let longitude = rng.random_range(0.0f64..360.0).to_radians();
    let theta = std::f64::consts::FRAC_PI_2 - elevation;
    let sun_dir = envmap::angles_to_direction(theta, longitude);
    let tint = |rng: &mut ChaCha8Rng| [rng.random_range(0.7..1.0), rng.random_range(0.7..1.0), rng.random_range(0.7..1.0)];
    let sun_tint = tint(&mut rng);
    let sky_tint = tint(&mut rng);
    let strength = rng.random_range(150.0..250.0);
    let sun = sun_tint.map(|t| t * strength);
    let sky = sky_tint.map(|t| t * 0.1);
    let env = envmap::sun_and_sky(height, width, sun_dir, 4.0, sun, sky)?;
    Ok(ProceduralEnv { env, sun_dir })
}
