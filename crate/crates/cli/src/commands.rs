use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use relight_autodiff::{primitive_suite, GradCheckOptions, Tensor};
use relight_core::datasynth::{
    build_dataset, load_dataset, procedural_env, EnvSource, OlatSource, Source, Split, SplitRule, SynthConfig,
};
use relight_core::envmap::{self, EnvMap};
use relight_core::image::Image;
use relight_core::io::checkpoint::load_checkpoint;
use relight_core::io::{export_png, read_json, read_olat_dir, read_pfm, write_json, write_olat_dir, write_pfm};
use relight_core::lightstage::{self, LightStage, SceneProxy, PROJECTION_HEIGHT, PROJECTION_WIDTH};
use relight_core::prnet::{self, PrNetConfig, PrNetParams};
use relight_core::train::{evaluate, fit, GroundTruth, NetworkPredictor, Predictor, TrainConfig};
use relight_core::Error;
use serde::Serialize;

/// A check that ran and failed, as opposed to bad input.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn usage(message: String) -> anyhow::Error {
    Error::InvalidArgument(message).into()
}

#[derive(Args, Serialize)]
pub struct GenStage {
    /// Number of LEDs.
    #[arg(long, default_value_t = lightstage::DEFAULT_LED_COUNT)]
    pub leds: usize,
    /// Angular width of each LED footprint, degrees.
    #[arg(long, default_value_t = lightstage::DEFAULT_SIGMA_DEG)]
    pub sigma: f64,
    #[arg(long)]
    pub out: PathBuf,
}

impl GenStage {
    /// The layout is deterministic; the seed is accepted for uniformity.
    pub fn run(self, _seed: u64) -> Result<()> {
        let stage = LightStage::fibonacci(self.leds)?;
        let stage = LightStage::from_directions(stage.directions().to_vec(), self.sigma)?;
        write_json(&self.out, &stage)?;
        println!("wrote {} LEDs to {}", stage.len(), self.out.display());
        Ok(())
    }
}

#[derive(Args, Serialize)]
pub struct RenderOlat {
    /// Light-stage layout written by `gen-stage`.
    #[arg(long)]
    pub stage: PathBuf,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Scene description (JSON); defaults to the built-in sphere.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Identifier recorded in the OLAT manifest.
    #[arg(long, default_value = "synthetic")]
    pub id: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl RenderOlat {
    pub fn run(self, _seed: u64) -> Result<()> {
        let stage: LightStage = read_json(&self.stage)?;
        let scene: SceneProxy = match &self.scene {
            Some(p) => read_json(p)?,
            None => SceneProxy::default(),
        };
        let mut olat = lightstage::render_olat_synthetic(&scene, &stage, self.resolution)?;
        olat.id = self.id.clone();
        write_olat_dir(&self.out, &olat)?;
        println!("wrote {} OLAT images to {}", olat.images().len(), self.out.display());
        Ok(())
    }
}

#[derive(Args, Serialize)]
pub struct ProjectEnv {
    /// Lat-long environment (PFM).
    #[arg(long)]
    pub env: PathBuf,
    #[arg(long)]
    pub stage: PathBuf,
    /// Per-LED RGB weights (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the LED-basis reconstruction of the environment (PFM).
    #[arg(long)]
    pub light_out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub light_height: usize,
    #[arg(long, default_value_t = 32)]
    pub light_width: usize,
}

impl ProjectEnv {
    pub fn run(self, _seed: u64) -> Result<()> {
        let stage: LightStage = read_json(&self.stage)?;
        let env = EnvMap::from_image(&read_pfm(&self.env)?)?;
        let env = envmap::resize_bilinear(&env, PROJECTION_HEIGHT, PROJECTION_WIDTH)?;
        let weights = lightstage::project_env_to_leds(&env, &stage)?;
        write_json(&self.out, &weights)?;
        if let Some(path) = &self.light_out {
            let map = lightstage::leds_to_envmap(&weights, &stage, self.light_height, self.light_width)?;
            write_pfm(path, &map.to_image())?;
        }
        let total: [f64; 3] = std::array::from_fn(|c| weights.iter().map(|w| w[c]).sum());
        println!("projected onto {} LEDs, total irradiance {:?}", weights.len(), total);
        Ok(())
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Validation,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    PaperShaped,
    Tiny,
}

impl Preset {
    fn network(self) -> PrNetConfig {
        match self {
            Preset::Toy => PrNetConfig::toy(),
            Preset::PaperShaped => PrNetConfig::paper_shaped(),
            Preset::Tiny => PrNetConfig::tiny(),
        }
    }

    fn synth(self) -> SynthConfig {
        let net = self.network();
        SynthConfig {
            image_size: net.input_size,
            light_height: net.light_height,
            light_width: net.light_width,
            ..SynthConfig::toy()
        }
    }
}

#[derive(Args, Serialize)]
pub struct SynthPairs {
    /// OLAT directory written by `render-olat`; repeat for several subjects.
    #[arg(long = "olat", required = true)]
    pub olats: Vec<PathBuf>,
    /// Directory of lat-long environments (`*.pfm`, id = file stem).
    #[arg(long, conflicts_with = "procedural_envs", required_unless_present = "procedural_envs")]
    pub envs: Option<PathBuf>,
    /// Generate this many sun-and-sky environments instead.
    #[arg(long)]
    pub procedural_envs: Option<usize>,
    /// Height of procedural environments (width is twice this).
    #[arg(long, default_value_t = 64)]
    pub env_height: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// Split assignment (JSON); by default every input belongs to `--split`.
    #[arg(long)]
    pub split_rule: Option<PathBuf>,
    /// Network preset whose image and light sizes the pairs follow.
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
}

fn env_dir(dir: &Path) -> Result<Vec<EnvSource>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "pfm"));
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let data = EnvMap::from_image(&read_pfm(&path)?)?;
            Ok(Source { id, path: Some(path), data })
        })
        .collect()
}

impl SynthPairs {
    pub fn run(self, seed: u64) -> Result<()> {
        let olats: Vec<OlatSource> = self
            .olats
            .iter()
            .map(|p| {
                let data = read_olat_dir(p)?;
                Ok(Source { id: data.id.clone(), path: Some(p.clone()), data })
            })
            .collect::<Result<_>>()?;
        let envs = match (&self.envs, self.procedural_envs) {
            (Some(dir), _) => env_dir(dir)?,
            (None, Some(n)) => (0..n)
                .map(|i| {
                    let env = procedural_env(seed, i, self.env_height, 2 * self.env_height)?.env;
                    Ok(Source { id: format!("sun-{i:03}"), path: None, data: env })
                })
                .collect::<Result<_>>()?,
            (None, None) => bail!(usage("one of --envs or --procedural-envs is required".into())),
        };
        let split = Split::from(self.split);
        let rule = match &self.split_rule {
            Some(p) => read_json(p)?,
            None => {
                let olat_ids: BTreeSet<String> = olats.iter().map(|s| s.id.clone()).collect();
                let env_ids: BTreeSet<String> = envs.iter().map(|s| s.id.clone()).collect();
                match split {
                    Split::Train => SplitRule { train_olats: olat_ids, train_envs: env_ids, ..SplitRule::default() },
                    Split::Validation => SplitRule {
                        validation_olats: olat_ids,
                        validation_envs: env_ids,
                        ..SplitRule::default()
                    },
                }
            }
        };
        let manifest = build_dataset(&olats, &envs, self.count, seed, &rule, split, &self.preset.synth(), &self.out)?;
        println!("wrote {} {split} pairs to {}", manifest.pairs.len(), self.out.display());
        Ok(())
    }
}

#[derive(Args, Serialize)]
pub struct Train {
    /// Dataset directory written by `synth-pairs`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the log and checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.8)]
    pub lambda_light: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_self: f64,
    /// Save a checkpoint every this many steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

impl Train {
    pub fn run(self, seed: u64) -> Result<()> {
        let train = TrainConfig {
            lambda_light: self.lambda_light,
            lambda_self: self.lambda_self,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            steps: self.steps,
            seed,
            checkpoint_every: self.checkpoint_every,
        };
        let summary = fit(&self.data, &self.preset.network(), &train, &self.out, self.resume.as_deref())?;
        if let (Some(first), Some(last)) = (summary.losses.first(), summary.losses.last()) {
            println!("step {} loss_total {:.6}", summary.first_step + 1, first.total);
            println!("step {} loss_total {:.6}", summary.first_step + summary.losses.len(), last.total);
        }
        println!("checkpoint: {}", summary.checkpoint.display());
        Ok(())
    }
}

/// Network input prepared from files: resampled to `D×D`, masked, peak 1.
struct Input {
    image: Image,
    mask: Option<Image>,
}

fn load_input(path: &Path, mask: Option<&Path>, config: &PrNetConfig) -> Result<Input> {
    let d = config.input_size;
    let mut image = read_pfm(path)?;
    if image.channels() != 3 {
        bail!(usage(format!("{} has {} channels, expected RGB", path.display(), image.channels())));
    }
    if (image.width(), image.height()) != (d, d) {
        image = image.resample(d, d)?;
    }
    let mask = match mask {
        Some(p) => {
            let m = read_pfm(p)?;
            let m = if (m.width(), m.height()) != (d, d) { m.resample(d, d)? } else { m };
            image = image.masked(&m)?;
            Some(m)
        }
        None => None,
    };
    let peak = image.max_value();
    if !(peak > 0.0) {
        bail!(usage(format!("{} has no positive foreground pixel", path.display())));
    }
    let image = image.map(|v| (v as f64 / peak as f64) as f32);
    Ok(Input { image, mask })
}

fn load_model(ckpt: &Path) -> Result<(PrNetConfig, PrNetParams)> {
    let c = load_checkpoint(ckpt, None)?;
    Ok((c.config, c.params))
}

/// Writes the network image, restricted to the mask when one was given.
fn write_output(out: &Path, image: &Tensor<f32>, mask: Option<&Image>, png: Option<&Path>) -> Result<Image> {
    let mut img = Image::from_tensor(image)?;
    if let Some(m) = mask {
        img = img.masked(m)?;
    }
    if !img.data().iter().all(|v| v.is_finite()) {
        bail!(NumericFailure("network produced non-finite pixels".into()));
    }
    write_pfm(out, &img)?;
    if let Some(p) = png {
        export_png(&img, p)?;
    }
    Ok(img)
}

#[derive(Args, Serialize)]
pub struct Relight {
    /// Input portrait (PFM, linear RGB).
    #[arg(long)]
    pub input: PathBuf,
    /// Foreground mask (PFM, one channel).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Target lat-long environment (PFM, any resolution).
    #[arg(long)]
    pub light: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the output composited over the upsampled target light.
    #[arg(long)]
    pub composite: Option<PathBuf>,
    /// Also write an 8-bit preview.
    #[arg(long)]
    pub png: Option<PathBuf>,
}

impl Relight {
    pub fn run(self, _seed: u64) -> Result<()> {
        let (config, params) = load_model(&self.ckpt)?;
        let input = load_input(&self.input, self.mask.as_deref(), &config)?;
        let env = EnvMap::from_image(&read_pfm(&self.light)?)?;
        let light = envmap::area_resample(&env, config.light_height, config.light_width)?.to_image();
        let out = prnet::forward(&params, &config, &input.image.to_tensor(), &light.to_tensor())?;
        let fg = write_output(&self.out, &out.image, input.mask.as_ref(), self.png.as_deref())?;
        if let Some(path) = &self.composite {
            let d = config.input_size;
            let background = light.resample(d, d)?;
            let m = match &input.mask {
                Some(m) => m.clone(),
                None => Image::from_fn(d, d, 1, |_, _, _| 1.0)?,
            };
            let comp = Image::from_fn(d, d, 3, |x, y, c| {
                let a = m.get(x, y, 0);
                fg.get(x, y, c) + (1.0 - a) * background.get(x, y, c)
            })?;
            write_pfm(path, &comp)?;
        }
        println!("wrote {}", self.out.display());
        Ok(())
    }
}

#[derive(Args, Serialize)]
pub struct Retarget {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Longitude rotation of the estimated light, degrees.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: f64,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the estimated (unrotated) light.
    #[arg(long)]
    pub light_out: Option<PathBuf>,
    #[arg(long)]
    pub png: Option<PathBuf>,
}

impl Retarget {
    pub fn run(self, _seed: u64) -> Result<()> {
        let (config, params) = load_model(&self.ckpt)?;
        let input = load_input(&self.input, self.mask.as_deref(), &config)?;
        let out = prnet::retarget(&params, &config, &input.image.to_tensor(), self.theta)?;
        write_output(&self.out, &out.image, input.mask.as_ref(), self.png.as_deref())?;
        if let Some(path) = &self.light_out {
            write_pfm(path, &Image::from_tensor(&out.light)?.map(|v| v.max(0.0)))?;
        }
        println!("wrote {}", self.out.display());
        Ok(())
    }
}

#[derive(Args, Serialize)]
pub struct EstimateLight {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Estimated lat-long light (PFM); negative predictions are clamped to 0.
    #[arg(long)]
    pub out: PathBuf,
}

impl EstimateLight {
    pub fn run(self, _seed: u64) -> Result<()> {
        let (config, params) = load_model(&self.ckpt)?;
        let input = load_input(&self.input, self.mask.as_deref(), &config)?;
        let out = prnet::retarget(&params, &config, &input.image.to_tensor(), 0.0)?;
        let light = Image::from_tensor(&out.light)?;
        let negative = light.data().iter().filter(|&&v| v < 0.0).count();
        write_pfm(&self.out, &light.map(|v| v.max(0.0)))?;
        println!(
            "wrote {}x{} light to {} ({negative} negative values clamped)",
            config.light_height,
            config.light_width,
            self.out.display()
        );
        Ok(())
    }
}

#[derive(Args, Serialize)]
pub struct Eval {
    /// Dataset directory written by `synth-pairs`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    /// Score the ground truth itself instead of a network.
    #[arg(long)]
    pub oracle: bool,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Row label for the checkpoint in the table.
    #[arg(long, default_value = "Ours")]
    pub name: String,
}

impl Eval {
    pub fn run(self, _seed: u64) -> Result<()> {
        let (_, pairs) = load_dataset(&self.data)?;
        let report = if self.oracle {
            evaluate(&pairs, &GroundTruth)?
        } else {
            let ckpt = self.ckpt.as_deref().ok_or_else(|| usage("--ckpt is required".into()))?;
            let (config, params) = load_model(ckpt)?;
            let model = NetworkPredictor { params: &params, config: &config, name: self.name.clone() };
            evaluate(&pairs, &model as &dyn Predictor)?
        };
        if let Some(p) = &self.json {
            write_json(p, &report)?;
        }
        print!("{}", report.table());
        Ok(())
    }
}

#[derive(Args, Serialize)]
pub struct Gradcheck {
    /// Network preset to check end to end.
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub preset: Preset,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Check at most this many entries per tensor (default: all).
    #[arg(long)]
    pub max_entries: Option<usize>,
}

impl Gradcheck {
    pub fn run(self, seed: u64) -> Result<()> {
        let opts = GradCheckOptions {
            step: self.step,
            tolerance: self.tolerance,
            max_entries: self.max_entries,
            seed,
            ..GradCheckOptions::default()
        };
        let mut failed = Vec::new();
        let mut results = primitive_suite(seed, &opts)?;
        results.push(("network", prnet::gradient_check(&self.preset.network(), seed, &opts)?));
        for (name, report) in &results {
            println!("{name:<26} {report}");
            if !report.passed {
                failed.push(*name);
            }
        }
        if !failed.is_empty() {
            bail!(NumericFailure(format!("gradient check failed for {}", failed.join(", "))));
        }
        Ok(())
    }
}
