//! Training losses, the optimization step, the fit loop and evaluation.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relight_autodiff::{AdamConfig, AdamState, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::datasynth::{load_dataset, DatasetManifest, TrainingPair};
use crate::image::Image;
use crate::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::metrics::{image_metrics, light_rmse_s, solid_angle_tensor, ImageMetrics};
use crate::prnet::{self, Bound, PrNetConfig, PrNetParams};
use crate::{Error, Result};

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
const LOG_HEADER: &str = "step,epoch,loss_total,loss_target,loss_light,loss_self,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_light: f64,
    pub lambda_self: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Total optimizer steps.
    pub steps: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_light: 0.8,
            lambda_self: 1.0,
            learning_rate: 1e-3,
            batch_size: 1,
            steps: 500,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.lambda_light) || !ok(self.lambda_self) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and nonnegative, got {} and {}",
                self.lambda_light, self.lambda_self
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} invalid", self.learning_rate)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("step budget and batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Loss terms of one step, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub target: f64,
    pub light: f64,
    /// Zero when the self branch is disabled.
    pub self_term: f64,
    /// Predicted light entries that hit the `log1p` clamp.
    pub clamped: usize,
}

/// Variables of one pair's loss graph.
pub struct PairGraph {
    pub total: Var,
    pub target: Var,
    pub light: Var,
    pub self_term: Option<Var>,
    pub predicted_target: Var,
    pub predicted_light: Var,
    /// Decode under the rotated predicted light, when the self branch runs.
    pub predicted_self: Option<Var>,
}

fn check_pair(pair: &TrainingPair, config: &PrNetConfig) -> Result<()> {
    let d = config.input_size;
    let lights = [&pair.source_light, &pair.target_light, &pair.source_jittered_light];
    let images = [&pair.source, &pair.target, &pair.source_jittered];
    let ok = images.iter().all(|i| (i.width(), i.height(), i.channels()) == (d, d, 3))
        && (pair.mask.width(), pair.mask.height(), pair.mask.channels()) == (d, d, 1)
        && lights
            .iter()
            .all(|l| (l.width(), l.height(), l.channels()) == (config.light_width, config.light_height, 3));
    if ok {
        Ok(())
    } else {
        Err(Error::Dataset(format!(
            "pair does not match the network: expected {d}x{d} images and {}x{} lights",
            config.light_height, config.light_width
        )))
    }
}

/// `target + λ_light·light + λ_self·self` for one pair. The self branch decodes
/// the predicted light rotated by the pair's jitter and is omitted when `λ_self = 0`.
pub fn pair_loss<T: relight_autodiff::Real>(
    tape: &mut Tape<T>,
    net: &Bound,
    config: &PrNetConfig,
    pair: &TrainingPair,
    lambda_light: f64,
    lambda_self: f64,
) -> Result<PairGraph> {
    check_pair(pair, config)?;
    let x = tape.constant(pair.source.to_tensor());
    let lt = tape.constant(pair.target_light.to_tensor());
    let it = tape.constant(pair.target.to_tensor());
    let ls = tape.constant(pair.source_light.to_tensor());
    let mask = tape.constant(pair.mask.to_tensor());
    let omega = tape.constant(solid_angle_tensor(config.light_height, config.light_width)?.cast());

    let enc = prnet::encode(tape, net, config, x)?;
    let (light, _) = prnet::predict_light(tape, net, config, enc.bottleneck)?;
    let out_t = prnet::decode(tape, net, config, &enc, lt)?;
    let target = tape.masked_l1(out_t, it, mask)?;
    let light_loss = tape.log_l2(light, ls, omega)?;
    let mut total = target;
    if lambda_light > 0.0 {
        let l = tape.scale(light_loss, lambda_light)?;
        total = tape.add(total, l)?;
    }
    let (mut self_term, mut predicted_self) = (None, None);
    if lambda_self > 0.0 {
        let rotated = tape.rotate_longitude(light, pair.jitter_deg)?;
        let out_s = prnet::decode(tape, net, config, &enc, rotated)?;
        let jit = tape.constant(pair.source_jittered.to_tensor());
        let s = tape.masked_l1(out_s, jit, mask)?;
        self_term = Some(s);
        predicted_self = Some(out_s);
        let s = tape.scale(s, lambda_self)?;
        total = tape.add(total, s)?;
    }
    Ok(PairGraph {
        total,
        target,
        light: light_loss,
        self_term,
        predicted_target: out_t,
        predicted_light: light,
        predicted_self,
    })
}

/// One forward/backward pass over `batch` and one Adam update.
pub fn train_step(
    batch: &[&TrainingPair],
    params: &mut PrNetParams,
    adam: &mut AdamState<f32>,
    config: &PrNetConfig,
    train: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut tape = Tape::<f32>::new();
    let net = Bound::new(&mut tape, params, true);
    let mut totals = Vec::with_capacity(batch.len());
    let mut out = LossBreakdown::default();
    for pair in batch {
        let g = pair_loss(&mut tape, &net, config, pair, train.lambda_light, train.lambda_self)?;
        out.target += tape.value(g.target).item() as f64;
        out.light += tape.value(g.light).item() as f64;
        out.self_term += g.self_term.map_or(0.0, |s| tape.value(s).item() as f64);
        totals.push(g.total);
    }
    let mut loss = totals[0];
    for &t in &totals[1..] {
        loss = tape.add(loss, t)?;
    }
    let n = batch.len() as f64;
    if batch.len() > 1 {
        loss = tape.scale(loss, 1.0 / n)?;
    }
    out.total = tape.value(loss).item() as f64;
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {}", out.total)));
    }
    out.target /= n;
    out.light /= n;
    out.self_term /= n;
    out.clamped = tape.clamp_events();
    let grads = tape.backward(loss)?;
    let grads: Vec<Tensor<f32>> = net.vars().iter().map(|&v| grads.get(v)).collect();
    adam.step(params.tensors_mut(), &grads)?;
    Ok(out)
}

/// Pair indices used at `step`: consecutive batches drawn from one seeded
/// permutation of the dataset per epoch.
pub struct Schedule {
    seed: u64,
    len: usize,
    batch: usize,
    cached: Option<(usize, Vec<usize>)>,
}

impl Schedule {
    pub fn new(seed: u64, len: usize, batch: usize) -> Self {
        Self {
            seed,
            len,
            batch,
            cached: None,
        }
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch as u64);
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut rng);
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    /// `(epoch of the first sample, indices)`.
    pub fn batch(&mut self, step: usize) -> (usize, Vec<usize>) {
        let first = step * self.batch;
        let indices = (first..first + self.batch)
            .map(|k| {
                let len = self.len;
                self.permutation(k / len)[k % len]
            })
            .collect();
        (first / self.len, indices)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    /// Losses of the steps run in this call, in order.
    pub losses: Vec<LossBreakdown>,
    pub first_step: usize,
    pub params: PrNetParams,
    pub checkpoint: PathBuf,
}

/// Trains on the dataset in `data_dir`, writing `train_log.csv` and
/// `checkpoint/` under `out_dir`. With `resume`, continues from that
/// checkpoint's step and appends to the log.
pub fn fit(
    data_dir: &Path,
    config: &PrNetConfig,
    train: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitSummary> {
    train.validate()?;
    let (manifest, pairs) = load_dataset(data_dir)?;
    fit_pairs(&manifest, &pairs, config, train, out_dir, resume)
}

/// [`fit`] on pairs already in memory.
pub fn fit_pairs(
    manifest: &DatasetManifest,
    pairs: &[TrainingPair],
    config: &PrNetConfig,
    train: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitSummary> {
    train.validate()?;
    if pairs.is_empty() {
        return Err(Error::Dataset("dataset has no pairs".into()));
    }
    let s = &manifest.synth;
    if (s.image_size, s.light_height, s.light_width) != (config.input_size, config.light_height, config.light_width) {
        return Err(Error::InvalidArgument(format!(
            "dataset has {}² images and {}x{} lights, network expects {}² and {}x{}",
            s.image_size, s.light_height, s.light_width, config.input_size, config.light_height, config.light_width
        )));
    }
    let (mut params, mut adam, start) = match resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir, Some(config))?;
            let adam = ckpt
                .adam
                .ok_or_else(|| Error::Checkpoint(format!("{}: no optimizer state to resume from", dir.display())))?;
            (ckpt.params, adam, ckpt.step as usize)
        }
        None => {
            let params = prnet::init_params(config, train.seed)?;
            let adam = AdamState::new(train.adam(), params.tensors().iter().map(|t| t.shape()));
            (params, adam, 0)
        }
    };
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = if resume.is_some() && log_path.exists() {
        OpenOptions::new().append(true).open(&log_path)
    } else {
        std::fs::File::create(&log_path).and_then(|mut f| writeln!(f, "{LOG_HEADER}").map(|_| f))
    }
    .map_err(Error::io(&log_path))?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    let save = |params: &PrNetParams, adam: &AdamState<f32>, step: usize| {
        save_checkpoint(
            &ckpt_dir,
            &Checkpoint {
                config: config.clone(),
                params: params.clone(),
                adam: Some(adam.clone()),
                step: step as u64,
            },
        )
    };
    let mut schedule = Schedule::new(train.seed, pairs.len(), train.batch_size);
    let mut losses = Vec::new();
    for step in start..train.steps {
        let (epoch, idx) = schedule.batch(step);
        let batch: Vec<&TrainingPair> = idx.iter().map(|&i| &pairs[i]).collect();
        let t0 = Instant::now();
        let l = train_step(&batch, &mut params, &mut adam, config, train)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        writeln!(
            log,
            "{},{},{},{},{},{},{:.3}",
            step + 1,
            epoch,
            l.total,
            l.target,
            l.light,
            l.self_term,
            ms
        )
        .map_err(Error::io(&log_path))?;
        losses.push(l);
        let done = step + 1;
        if train.checkpoint_every > 0 && done % train.checkpoint_every == 0 && done < train.steps {
            save(&params, &adam, done)?;
        }
    }
    save(&params, &adam, train.steps.max(start))?;
    Ok(FitSummary {
        losses,
        first_step: start,
        params,
        checkpoint: ckpt_dir,
    })
}

/// What a model produces for one evaluation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub target: Image,
    /// Reconstruction of the input from the predicted light.
    pub source: Option<Image>,
    pub light: Option<Image>,
    /// Wall time of the relighting forward pass.
    pub seconds: Option<f64>,
}

pub trait Predictor {
    fn name(&self) -> String;
    fn predict(&self, pair: &TrainingPair) -> Result<Prediction>;
}

/// The network; the source reconstruction decodes the predicted light unrotated.
pub struct NetworkPredictor<'a> {
    pub params: &'a PrNetParams,
    pub config: &'a PrNetConfig,
    pub name: String,
}

impl Predictor for NetworkPredictor<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn predict(&self, pair: &TrainingPair) -> Result<Prediction> {
        check_pair(pair, self.config)?;
        let t0 = Instant::now();
        let out = prnet::forward(self.params, self.config, &pair.source.to_tensor(), &pair.target_light.to_tensor())?;
        let seconds = t0.elapsed().as_secs_f64();
        let own = prnet::retarget(self.params, self.config, &pair.source.to_tensor(), 0.0)?;
        Ok(Prediction {
            target: Image::from_tensor(&out.image)?,
            source: Some(Image::from_tensor(&own.image)?),
            light: Some(Image::from_tensor(&out.light)?),
            seconds: Some(seconds),
        })
    }
}

/// Returns the ground truth itself.
pub struct GroundTruth;

impl Predictor for GroundTruth {
    fn name(&self) -> String {
        "Ground truth".into()
    }

    fn predict(&self, pair: &TrainingPair) -> Result<Prediction> {
        Ok(Prediction {
            target: pair.target.clone(),
            source: Some(pair.source.clone()),
            light: Some(pair.source_light.clone()),
            seconds: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub index: usize,
    pub target: ImageMetrics,
    pub source: Option<ImageMetrics>,
    pub light_rmse_s: Option<f64>,
    pub seconds: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub rmse: f64,
    pub rmse_s: f64,
    pub dssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub examples: Vec<ExampleMetrics>,
    pub target: MeanMetrics,
    pub source: Option<MeanMetrics>,
    pub light_rmse_s: Option<f64>,
    pub seconds: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

fn mean_metrics<'a>(m: impl Iterator<Item = &'a ImageMetrics> + Clone) -> MeanMetrics {
    MeanMetrics {
        rmse: mean(m.clone().map(|x| x.rmse)),
        rmse_s: mean(m.clone().map(|x| x.rmse_s)),
        dssim: mean(m.map(|x| x.dssim)),
    }
}

/// Scores `predictor` on every pair. Means are arithmetic means over examples;
/// a column is reported only when every example provides it.
pub fn evaluate(pairs: &[TrainingPair], predictor: &dyn Predictor) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut examples = Vec::with_capacity(pairs.len());
    for (index, pair) in pairs.iter().enumerate() {
        let p = predictor.predict(pair)?;
        examples.push(ExampleMetrics {
            index,
            target: image_metrics(&p.target, &pair.target, &pair.mask)?,
            source: p.source.as_ref().map(|s| image_metrics(s, &pair.source, &pair.mask)).transpose()?,
            light_rmse_s: p.light.as_ref().map(|l| light_rmse_s(l, &pair.source_light)).transpose()?,
            seconds: p.seconds,
        });
    }
    let all = |f: fn(&ExampleMetrics) -> bool| examples.iter().all(f);
    Ok(MetricsReport {
        model: predictor.name(),
        target: mean_metrics(examples.iter().map(|e| &e.target)),
        source: all(|e| e.source.is_some())
            .then(|| mean_metrics(examples.iter().filter_map(|e| e.source.as_ref()))),
        light_rmse_s: all(|e| e.light_rmse_s.is_some()).then(|| mean(examples.iter().filter_map(|e| e.light_rmse_s))),
        seconds: all(|e| e.seconds.is_some()).then(|| mean(examples.iter().filter_map(|e| e.seconds))),
        examples,
    })
}

impl MetricsReport {
    /// Aligned text table: target and source image metrics, light error, time.
    pub fn table(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let name_w = self.model.len().max(9);
        let mut s = String::new();
        s.push_str(&format!(
            "{:name_w$} || {:^26} || {:^26} || {:>12} || {:>11}\n",
            "", "Target", "Source", "Light", ""
        ));
        s.push_str(&format!(
            "{:name_w$} || {:>8} {:>8} {:>8} || {:>8} {:>8} {:>8} || {:>12} || {:>11}\n",
            "Algorithm", "RMSE", "RMSE-s", "DSSIM", "RMSE", "RMSE-s", "DSSIM", "RMSE-s", "Time (sec.)"
        ));
        s.push_str(&format!("{}\n", "-".repeat(name_w + 97)));
        let t = self.target;
        let src = self.source;
        s.push_str(&format!(
            "{:name_w$} || {:>8} {:>8} {:>8} || {:>8} {:>8} {:>8} || {:>12} || {:>11}\n",
            self.model,
            f(Some(t.rmse)),
            f(Some(t.rmse_s)),
            f(Some(t.dssim)),
            f(src.map(|m| m.rmse)),
            f(src.map(|m| m.rmse_s)),
            f(src.map(|m| m.dssim)),
            f(self.light_rmse_s),
            f(self.seconds),
        ));
        s
    }
}
