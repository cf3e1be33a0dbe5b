//! The relighting network: a U-shaped encoder/decoder whose bottleneck both
//! predicts the input's illumination (confidence-weighted across locations)
//! and receives the target illumination.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use relight_autodiff::{grad_check, GradCheckOptions, GradCheckReport, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const GN_EPS: f64 = 1e-5;
const PRELU_INIT: f32 = 0.25;

/// How the light head weighs locations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceMode {
    /// One confidence per location and light pixel.
    PerPixel,
    /// One confidence per location shared by all light pixels.
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrNetConfig {
    pub input_size: usize,
    /// Channel width of each encoder stage.
    pub widths: Vec<usize>,
    /// Downsampling factor of each encoder stage.
    pub strides: Vec<usize>,
    pub light_height: usize,
    pub light_width: usize,
    pub groups: usize,
    pub kernel: usize,
    /// Width of the two layers encoding the target light.
    pub light_features: usize,
    pub confidence: ConfidenceMode,
}

impl PrNetConfig {
    /// 64² input, 8×16 light, under a million parameters.
    pub fn toy() -> Self {
        Self {
            input_size: 64,
            widths: vec![16, 32, 64, 128],
            strides: vec![2, 2, 2, 2],
            light_height: 8,
            light_width: 16,
            groups: 8,
            kernel: 3,
            light_features: 64,
            confidence: ConfidenceMode::PerPixel,
        }
    }

    /// 256² input and a 16×32 light.
    pub fn paper_shaped() -> Self {
        Self {
            input_size: 256,
            widths: vec![32, 64, 128, 256, 512],
            strides: vec![2, 2, 2, 2, 2],
            light_height: 16,
            light_width: 32,
            groups: 8,
            kernel: 3,
            light_features: 512,
            confidence: ConfidenceMode::PerPixel,
        }
    }

    /// 16² input and a 4×8 light, small enough for finite differences.
    pub fn tiny() -> Self {
        Self {
            input_size: 16,
            widths: vec![4, 8],
            strides: vec![2, 2],
            light_height: 4,
            light_width: 8,
            groups: 2,
            kernel: 3,
            light_features: 8,
            confidence: ConfidenceMode::PerPixel,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper-shaped" => Ok(Self::paper_shaped()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::InvalidArgument(format!(
                "unknown network preset {other:?} (expected toy, paper-shaped or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return bad(format!(
                "{} stage widths but {} strides",
                self.widths.len(),
                self.strides.len()
            ));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return bad("stage widths and strides must be positive".into());
        }
        let total: usize = self.strides.iter().product();
        if self.input_size == 0 || !self.input_size.is_multiple_of(total) {
            return bad(format!(
                "input size {} is not divisible by the total stride {total}",
                self.input_size
            ));
        }
        if self.light_height == 0 || self.light_width == 0 || self.light_features == 0 || self.groups == 0 {
            return bad("light extents, light features and group count must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size / self.strides.iter().product::<usize>()
    }

    pub fn light_pixels(&self) -> usize {
        self.light_height * self.light_width
    }

    fn confidence_channels(&self) -> usize {
        match self.confidence {
            ConfidenceMode::PerPixel => self.light_pixels(),
            ConfidenceMode::Scalar => 1,
        }
    }

    /// Largest group count not above the configured one that divides `channels`.
    pub fn groups_for(&self, channels: usize) -> usize {
        (1..=self.groups.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
    }
}

/// Role of a parameter, which fixes its initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Kernel with the given fan-in.
    Kernel { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    Alpha,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    kernel: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) {
        self.specs.push(ParamSpec { name, shape, kind });
    }

    /// Kernel and bias of a convolution with square `k×k` support.
    fn conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize, transposed: bool) {
        let shape = if transposed { vec![k, k, cout, cin] } else { vec![k, k, cin, cout] };
        self.push(format!("{prefix}.w"), shape, ParamKind::Kernel { fan_in: k * k * cin });
        self.push(format!("{prefix}.b"), vec![cout], ParamKind::Bias);
    }

    /// Convolution followed by group norm and PReLU.
    fn block(&mut self, prefix: &str, cin: usize, cout: usize, transposed: bool) {
        self.conv(prefix, self.kernel, cin, cout, transposed);
        self.push(format!("{prefix}.gamma"), vec![cout], ParamKind::Gamma);
        self.push(format!("{prefix}.beta"), vec![cout], ParamKind::Beta);
        self.push(format!("{prefix}.alpha"), vec![cout], ParamKind::Alpha);
    }
}

/// Every parameter of the network in a fixed order.
pub fn param_layout(config: &PrNetConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let mut b = LayoutBuilder {
        specs: Vec::new(),
        kernel: config.kernel,
    };
    let mut cin = 3;
    for (i, &w) in config.widths.iter().enumerate() {
        b.block(&format!("enc.{i}.conv1"), cin, w, false);
        b.block(&format!("enc.{i}.conv2"), w, w, false);
        cin = w;
    }
    let bottleneck = cin;
    let p3 = 3 * config.light_pixels();
    b.conv("light_head", 1, bottleneck, p3 + config.confidence_channels(), false);
    let f = config.light_features;
    for (i, fin) in [p3, f].into_iter().enumerate() {
        b.conv(&format!("light_enc.{i}"), 1, fin, f, false);
        b.push(format!("light_enc.{i}.alpha"), vec![f], ParamKind::Alpha);
    }
    let mut cin = bottleneck + f;
    for i in (0..config.widths.len()).rev() {
        let w = config.widths[i];
        let next = config.widths[i.saturating_sub(1)];
        b.block(&format!("dec.{i}.up"), cin, w, true);
        b.block(&format!("dec.{i}.conv"), 2 * w, next, false);
        cin = next;
    }
    b.conv("out", 1, cin, 3, false);
    Ok(b.specs)
}

/// Named parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrNetParams {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl PrNetParams {
    /// Checks names and shapes against the layout of `config`.
    pub fn new(config: &PrNetConfig, names: Vec<String>, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        let layout = param_layout(config)?;
        if names.len() != layout.len() || tensors.len() != layout.len() {
            return Err(Error::CountMismatch {
                what: "network parameters",
                expected: layout.len(),
                got: names.len().min(tensors.len()),
            });
        }
        for ((spec, name), t) in layout.iter().zip(&names).zip(&tensors) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Kernels `N(0, 2/fan_in)`, biases and betas 0, gammas 1, PReLU slopes 0.25.
pub fn init_params(config: &PrNetConfig, seed: u64) -> Result<PrNetParams> {
    let layout = param_layout(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout
        .iter()
        .map(|spec| match spec.kind {
            ParamKind::Kernel { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&spec.shape, |_| normal.sample(&mut rng) as f32)
            }
            ParamKind::Bias | ParamKind::Beta => Tensor::zeros(&spec.shape),
            ParamKind::Gamma => Tensor::full(&spec.shape, 1.0),
            ParamKind::Alpha => Tensor::full(&spec.shape, PRELU_INIT),
        })
        .collect();
    PrNetParams::new(config, layout.into_iter().map(|s| s.name).collect(), tensors)
}

/// Parameters placed on a tape.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Adds `tensors` (in layout order) to `tape` as trainable or constant leaves.
    pub fn new<T: Real>(tape: &mut Tape<T>, params: &PrNetParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.cast(), trainable))
            .collect();
        Self::from_vars(params.names.clone(), vars)
    }

    pub fn from_vars(names: Vec<String>, vars: Vec<Var>) -> Self {
        let index = names.into_iter().enumerate().map(|(i, n)| (n, i)).collect();
        Self { vars, index }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

/// Encoder activations kept for the decoder.
pub struct Encoded {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

fn conv_block<T: Real>(
    tape: &mut Tape<T>,
    net: &Bound,
    config: &PrNetConfig,
    prefix: &str,
    x: Var,
    stride: usize,
    transposed: bool,
) -> Result<Var> {
    let (w, b) = (net.get(&format!("{prefix}.w")), net.get(&format!("{prefix}.b")));
    let y = if transposed {
        tape.conv2d_transpose(x, w, b, stride)?
    } else {
        tape.conv2d(x, w, b, stride)?
    };
    let c = tape.value(y).shape()[2];
    let y = tape.group_norm(
        y,
        config.groups_for(c),
        net.get(&format!("{prefix}.gamma")),
        net.get(&format!("{prefix}.beta")),
        GN_EPS,
    )?;
    Ok(tape.prelu(y, net.get(&format!("{prefix}.alpha")))?)
}

fn check_shape<T: Real>(tape: &Tape<T>, v: Var, expected: [usize; 3], what: &str) -> Result<()> {
    if tape.value(v).shape() != expected {
        return Err(Error::InvalidArgument(format!(
            "{what} has shape {:?}, network expects {expected:?}",
            tape.value(v).shape()
        )));
    }
    Ok(())
}

pub fn encode<T: Real>(tape: &mut Tape<T>, net: &Bound, config: &PrNetConfig, image: Var) -> Result<Encoded> {
    let d = config.input_size;
    check_shape(tape, image, [d, d, 3], "input image")?;
    let mut x = image;
    let mut skips = Vec::with_capacity(config.widths.len());
    for (i, &s) in config.strides.iter().enumerate() {
        let skip = conv_block(tape, net, config, &format!("enc.{i}.conv1"), x, 1, false)?;
        skips.push(skip);
        x = conv_block(tape, net, config, &format!("enc.{i}.conv2"), skip, s, false)?;
    }
    Ok(Encoded { skips, bottleneck: x })
}

/// Returns `(light H_L×W_L×3, confidences Hb×Wb×P)`; confidences are post-softplus.
pub fn predict_light<T: Real>(tape: &mut Tape<T>, net: &Bound, config: &PrNetConfig, bottleneck: Var) -> Result<(Var, Var)> {
    let head = tape.conv2d(bottleneck, net.get("light_head.w"), net.get("light_head.b"), 1)?;
    let p3 = 3 * config.light_pixels();
    let light = tape.slice_channels(head, 0, p3)?;
    let logits = tape.slice_channels(head, p3, config.confidence_channels())?;
    let conf = tape.softplus(logits)?;
    let pooled = tape.confidence_pool(light, conf, config.light_height, config.light_width)?;
    Ok((pooled, conf))
}

/// Decodes `encoded` under `light` (`H_L×W_L×3`) to a `D×D×3` image in `(0, 1)`.
pub fn decode<T: Real>(tape: &mut Tape<T>, net: &Bound, config: &PrNetConfig, encoded: &Encoded, light: Var) -> Result<Var> {
    check_shape(tape, light, [config.light_height, config.light_width, 3], "light")?;
    let flat = tape.reshape(light, &[1, 1, 3 * config.light_pixels()])?;
    let mut f = flat;
    for i in 0..2 {
        let p = format!("light_enc.{i}");
        f = tape.conv2d(f, net.get(&format!("{p}.w")), net.get(&format!("{p}.b")), 1)?;
        f = tape.prelu(f, net.get(&format!("{p}.alpha")))?;
    }
    let b = config.bottleneck_size();
    let f = tape.broadcast_spatial(f, b, b)?;
    let mut x = tape.concat_channels(&[encoded.bottleneck, f])?;
    for i in (0..config.widths.len()).rev() {
        x = conv_block(tape, net, config, &format!("dec.{i}.up"), x, config.strides[i], true)?;
        x = tape.concat_channels(&[x, encoded.skips[i]])?;
        x = conv_block(tape, net, config, &format!("dec.{i}.conv"), x, 1, false)?;
    }
    let y = tape.conv2d(x, net.get("out.w"), net.get("out.b"), 1)?;
    Ok(tape.sigmoid(y)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrNetOutput {
    pub image: Tensor<f32>,
    pub light: Tensor<f32>,
    pub confidence: Tensor<f32>,
}

/// Inference: relights `image` (`D×D×3`) under `target_light` (`H_L×W_L×3`).
pub fn forward(params: &PrNetParams, config: &PrNetConfig, image: &Tensor<f32>, target_light: &Tensor<f32>) -> Result<PrNetOutput> {
    let mut tape = Tape::<f32>::new();
    let net = Bound::new(&mut tape, params, false);
    let x = tape.constant(image.clone());
    let l = tape.constant(target_light.clone());
    let enc = encode(&mut tape, &net, config, x)?;
    let (light, conf) = predict_light(&mut tape, &net, config, enc.bottleneck)?;
    let out = decode(&mut tape, &net, config, &enc, l)?;
    Ok(PrNetOutput {
        image: tape.value(out).clone(),
        light: tape.value(light).clone(),
        confidence: tape.value(conf).clone(),
    })
}

/// Estimates the input's light, rotates it by `degrees` of longitude and
/// decodes under the result. `degrees = 0` is the self-reconstruction.
pub fn retarget(params: &PrNetParams, config: &PrNetConfig, image: &Tensor<f32>, degrees: f64) -> Result<PrNetOutput> {
    let mut tape = Tape::<f32>::new();
    let net = Bound::new(&mut tape, params, false);
    let x = tape.constant(image.clone());
    let enc = encode(&mut tape, &net, config, x)?;
    let (light, conf) = predict_light(&mut tape, &net, config, enc.bottleneck)?;
    let rotated = tape.rotate_longitude(light, degrees)?;
    let out = decode(&mut tape, &net, config, &enc, rotated)?;
    Ok(PrNetOutput {
        image: tape.value(out).clone(),
        light: tape.value(light).clone(),
        confidence: tape.value(conf).clone(),
    })
}

/// Finite-difference check of every parameter, the input image and the target
/// light through the full network in 64-bit. Biases and norm offsets are
/// randomized so pre-activations sit away from the PReLU kink.
pub fn gradient_check(config: &PrNetConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let params = init_params(config, seed)?;
    let names = params.names().to_vec();
    let n = names.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut inputs: Vec<Tensor<f64>> = params.tensors().iter().map(|t| t.cast()).collect();
    for (name, t) in names.iter().zip(inputs.iter_mut()) {
        if name.ends_with(".b") || name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let d = config.input_size;
    let (lh, lw) = (config.light_height, config.light_width);
    inputs.push(Tensor::from_fn(&[d, d, 3], |_| rng.random_range(0.0..1.0)));
    inputs.push(Tensor::from_fn(&[lh, lw, 3], |_| rng.random_range(0.0..1.0)));
    config.validate()?;
    let report = grad_check(
        &inputs,
        |tape, v| {
            let net = Bound::from_vars(names.clone(), v[..n].to_vec());
            let enc = encode(tape, &net, config, v[n]).expect("validated shapes");
            let (light, _) = predict_light(tape, &net, config, enc.bottleneck).expect("validated shapes");
            let image = decode(tape, &net, config, &enc, v[n + 1]).expect("validated shapes");
            let a = tape.reshape(image, &[1, 1, d * d * 3])?;
            let b = tape.reshape(light, &[1, 1, lh * lw * 3])?;
            tape.concat_channels(&[a, b])
        },
        opts,
    )?;
    Ok(report)
}
