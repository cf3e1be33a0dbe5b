use crate::kernels::{self, ConvGeometry};
use crate::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smallest value the light loss feeds into `ln(1 + x)`.
pub const LOG1P_FLOOR: f64 = -1.0 + 1e-6;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeometry,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
    },
    Prelu {
        x: Var,
        alpha: Var,
    },
    Softplus {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Sum {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Broadcast {
        x: Var,
    },
    ConfidencePool {
        light: Var,
        conf: Var,
    },
    Roll {
        x: Var,
        shift: f64,
    },
    MaskedL1 {
        pred: Var,
        target: Var,
        mask: Var,
    },
    LogL2 {
        pred: Var,
        target: Var,
        weights: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass. Values are immutable once pushed; inputs always
/// precede the operations that consume them.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    clamped: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `var`; all zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor<T> {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: a.to_vec(),
            got: b.to_vec(),
        });
    }
    Ok(())
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(TensorError::InvalidStride { op, stride })
    }
}

fn kernel_dims(op: &'static str, k: &Tensor<impl Real>) -> Result<(usize, usize, usize, usize)> {
    match *k.shape() {
        [kh, kw, a, b] => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(TensorError::EvenKernel { op, kh, kw });
            }
            Ok((kh, kw, a, b))
        }
        _ => Err(TensorError::Rank {
            op,
            expected: 4,
            shape: k.shape().to_vec(),
        }),
    }
}

fn dims3(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(TensorError::Rank {
            op,
            expected: 3,
            shape: t.shape().to_vec(),
        }),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            clamped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of light-loss entries clamped at [`LOG1P_FLOOR`] so far.
    pub fn clamp_events(&self) -> usize {
        self.clamped
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name.to_string() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Strided "same" cross-correlation. `x: H×W×Cin`, `k: kh×kw×Cin×Cout`, `b: Cout`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        check_stride(OP, stride)?;
        let (h, w, c) = dims3(OP, self.value(x))?;
        let (kh, kw, kin, kout) = kernel_dims(OP, self.value(k))?;
        if kin != c {
            return Err(TensorError::ChannelMismatch {
                op: OP,
                input: c,
                kernel: kin,
            });
        }
        same_shape(OP, &[kout], self.value(b).shape())?;
        let geom = ConvGeometry::forward(h, w, c, kh, kw, kout, stride);
        let mut out = kernels::conv_forward(self.value(x).data(), self.value(k).data(), &geom);
        kernels::add_bias(&mut out, self.value(b).data());
        let value = Tensor::new(vec![geom.out_h, geom.out_w, kout], out)?;
        self.push(OP, value, Op::Conv2d { x, k, b, geom }, &[x, k, b])
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with the same
    /// kernel array. `x: H×W×Cin`, `k: kh×kw×Cout×Cin`, `b: Cout`; output is
    /// `(H·stride)×(W·stride)×Cout`.
    pub fn conv2d_transpose(&mut self, x: Var, k: Var, b: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv2d_transpose";
        check_stride(OP, stride)?;
        let (h, w, c) = dims3(OP, self.value(x))?;
        let (kh, kw, kout, kin) = kernel_dims(OP, self.value(k))?;
        if kin != c {
            return Err(TensorError::ChannelMismatch {
                op: OP,
                input: c,
                kernel: kin,
            });
        }
        same_shape(OP, &[kout], self.value(b).shape())?;
        // Geometry of the conv this op is the adjoint of.
        let geom = ConvGeometry {
            in_h: h * stride,
            in_w: w * stride,
            in_c: kout,
            out_h: h,
            out_w: w,
            out_c: c,
            kh,
            kw,
            stride,
        };
        let mut out = kernels::conv_adjoint(self.value(x).data(), self.value(k).data(), &geom);
        kernels::add_bias(&mut out, self.value(b).data());
        let value = Tensor::new(vec![geom.in_h, geom.in_w, kout], out)?;
        self.push(OP, value, Op::ConvTranspose2d { x, k, b, geom }, &[x, k, b])
    }

    /// Group normalization over `H×W×(C/G)` blocks followed by a per-channel affine map.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        const OP: &str = "group_norm";
        let (h, w, c) = dims3(OP, self.value(x))?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::InvalidGroups { channels: c, groups });
        }
        same_shape(OP, &[c], self.value(gamma).shape())?;
        same_shape(OP, &[c], self.value(beta).shape())?;
        let cg = c / groups;
        let n = (h * w * cg) as f64;
        let xs = self.value(x).data();
        let mut mean = vec![0.0f64; groups];
        for px in xs.chunks_exact(c) {
            for (ch, &v) in px.iter().enumerate() {
                mean[ch / cg] += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; groups];
        for px in xs.chunks_exact(c) {
            for (ch, &v) in px.iter().enumerate() {
                let d = v.as_f64() - mean[ch / cg];
                var[ch / cg] += d * d;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n + eps).sqrt()).collect();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for px in xs.chunks_exact(c) {
            for (ch, &v) in px.iter().enumerate() {
                let g = ch / cg;
                let xh = (v.as_f64() - mean[g]) * inv_std[g];
                xhat.push(T::of(xh));
                out.push(T::of(gam[ch].as_f64() * xh + bet[ch].as_f64()));
            }
        }
        let value = Tensor::new(vec![h, w, c], out)?;
        self.push(
            OP,
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// PReLU with one slope per channel (last axis).
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        const OP: &str = "prelu";
        let c = *self.value(x).shape().last().unwrap_or(&1);
        same_shape(OP, &[c], self.value(alpha).shape())?;
        let a = self.value(alpha).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|px| px.iter().zip(a).map(|(&v, &s)| if v > T::ZERO { v } else { s * v }))
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(OP, value, Op::Prelu { x, alpha }, &[x, alpha])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let out = src.data().iter().map(|&v| T::of(kernels::softplus(v.as_f64()))).collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push("softplus", value, Op::Softplus { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let out = src.data().iter().map(|&v| T::of(kernels::sigmoid(v.as_f64()))).collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push("sigmoid", value, Op::Sigmoid { x }, &[x])
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        same_shape(op, self.value(a).shape(), self.value(b).shape())?;
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push("sub", value, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let factor = T::of(factor);
        let src = self.value(a);
        let out = src.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push("scale", value, Op::Scale { a, factor }, &[a])
    }

    /// Sum of all elements, accumulated in `f64` in storage order.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        self.push("sum", Tensor::scalar(T::of(s)), Op::Sum { a }, &[a])
    }

    /// Concatenation of `H×W×Ci` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = parts.first().ok_or(TensorError::Invalid {
            op: OP,
            message: "nothing to concatenate".into(),
        })?;
        let (h, w, _) = dims3(OP, self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (ph, pw, pc) = dims3(OP, self.value(p))?;
            same_shape(OP, &[h, w], &[ph, pw])?;
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for (&p, &pc) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[px * pc..(px + 1) * pc]);
            }
        }
        let value = Tensor::new(vec![h, w, total], out)?;
        self.push(OP, value, Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Channels `start..start+len` of an `H×W×C` map.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "slice_channels";
        let (h, w, c) = dims3(OP, self.value(x))?;
        if len == 0 || start + len > c {
            return Err(TensorError::Invalid {
                op: OP,
                message: format!("range {start}..{} outside {c} channels", start + len),
            });
        }
        let out = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|px| px[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![h, w, len], out)?;
        self.push(OP, value, Op::Slice { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Tiles a `1×1×C` feature over an `h×w` grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        const OP: &str = "broadcast_spatial";
        let (xh, xw, c) = dims3(OP, self.value(x))?;
        same_shape(OP, &[1, 1], &[xh, xw])?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(h * w * c);
        for _ in 0..h * w {
            out.extend_from_slice(src);
        }
        let value = Tensor::new(vec![h, w, c], out)?;
        self.push(OP, value, Op::Broadcast { x }, &[x])
    }

    /// Confidence-weighted spatial average.
    ///
    /// `light` is `Hb×Wb×(3P)` with pixel-major RGB triples, `conf` is
    /// `Hb×Wb×P` (one confidence per light pixel) or `Hb×Wb×1` (one per
    /// location). Output pixel `p`, channel `c` is
    /// `Σ_s conf[s,p]·light[s,p,c] / Σ_s conf[s,p]`, reshaped to `out_h×out_w×3`.
    pub fn confidence_pool(&mut self, light: Var, conf: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "confidence_pool";
        let (h, w, lc) = dims3(OP, self.value(light))?;
        let (ch, cw, cc) = dims3(OP, self.value(conf))?;
        same_shape(OP, &[h, w], &[ch, cw])?;
        let p = out_h * out_w;
        if lc != 3 * p || (cc != p && cc != 1) {
            return Err(TensorError::Invalid {
                op: OP,
                message: format!("light has {lc} channels and confidence {cc} for {p} light pixels"),
            });
        }
        let (ls, cs) = (self.value(light).data(), self.value(conf).data());
        let mut num = vec![0.0f64; 3 * p];
        let mut den = vec![0.0f64; p];
        for s in 0..h * w {
            let lrow = &ls[s * lc..(s + 1) * lc];
            let crow = &cs[s * cc..(s + 1) * cc];
            for q in 0..p {
                let wgt = crow[if cc == 1 { 0 } else { q }].as_f64();
                den[q] += wgt;
                for c in 0..3 {
                    num[q * 3 + c] += wgt * lrow[q * 3 + c].as_f64();
                }
            }
        }
        let out = (0..3 * p).map(|i| T::of(num[i] / den[i / 3])).collect();
        let value = Tensor::new(vec![out_h, out_w, 3], out)?;
        self.push(OP, value, Op::ConfidencePool { light, conf }, &[light, conf])
    }

    /// Longitude rotation of an `H×W×C` lat-long map by `degrees`.
    pub fn rotate_longitude(&mut self, x: Var, degrees: f64) -> Result<Var> {
        let (h, w, c) = dims3("rotate_longitude", self.value(x))?;
        let shift = degrees / 360.0 * w as f64;
        let out = kernels::roll_columns(self.value(x).data(), h, w, c, shift);
        let value = Tensor::new(vec![h, w, c], out)?;
        self.push("rotate_longitude", value, Op::Roll { x, shift }, &[x])
    }

    /// `Σ m·|pred - target|`; `mask` is `H×W×1` and broadcasts over channels.
    pub fn masked_l1(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        const OP: &str = "masked_l1";
        let (h, w, c) = dims3(OP, self.value(pred))?;
        same_shape(OP, &[h, w, c], self.value(target).shape())?;
        same_shape(OP, &[h, w, 1], self.value(mask).shape())?;
        let (p, t, m) = (self.value(pred).data(), self.value(target).data(), self.value(mask).data());
        let mut s = 0.0f64;
        for (i, (&a, &b)) in p.iter().zip(t).enumerate() {
            s += m[i / c].as_f64() * (a.as_f64() - b.as_f64()).abs();
        }
        self.push(OP, Tensor::scalar(T::of(s)), Op::MaskedL1 { pred, target, mask }, &[pred, target])
    }

    /// `Σ (ω·(ln(1+max(pred, floor)) - ln(1+target)))²` with per-pixel weights
    /// `ω` of shape `H×W×1`. `target` is treated as data. Entries below the
    /// floor are counted and backpropagate the clamped residual with unit slope,
    /// so they are pulled back into range instead of going dead.
    pub fn log_l2(&mut self, pred: Var, target: Var, weights: Var) -> Result<Var> {
        const OP: &str = "log_l2";
        let (h, w, c) = dims3(OP, self.value(pred))?;
        same_shape(OP, &[h, w, c], self.value(target).shape())?;
        same_shape(OP, &[h, w, 1], self.value(weights).shape())?;
        let (p, t, om) = (self.value(pred).data(), self.value(target).data(), self.value(weights).data());
        let mut s = 0.0f64;
        let mut clamped = 0;
        for (i, (&a, &b)) in p.iter().zip(t).enumerate() {
            let a = a.as_f64();
            if a < LOG1P_FLOOR {
                clamped += 1;
            }
            let d = om[i / c].as_f64() * (a.max(LOG1P_FLOOR).ln_1p() - b.as_f64().ln_1p());
            s += d * d;
        }
        self.clamped += clamped;
        self.push(OP, Tensor::scalar(T::of(s)), Op::LogL2 { pred, target, weights }, &[pred])
    }

    /// Reverse pass from a scalar `loss`. Every node reachable from the loss
    /// receives its gradient exactly once, after all of its consumers.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>, op: &str) -> Result<()> {
        if contrib.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite {
                op: format!("{op} backward"),
            });
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, geom } => {
                if self.wants(*x) {
                    let dx = kernels::conv_adjoint(g, self.value(*k).data(), geom);
                    self.accumulate(grads, *x, dx, "conv2d")?;
                }
                if self.wants(*k) {
                    let dk = kernels::conv_kernel_grad(self.value(*x).data(), g, geom);
                    self.accumulate(grads, *k, dk, "conv2d")?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, kernels::channel_sums(g, geom.out_c), "conv2d")?;
                }
            }
            Op::ConvTranspose2d { x, k, b, geom } => {
                if self.wants(*x) {
                    let dx = kernels::conv_forward(g, self.value(*k).data(), geom);
                    self.accumulate(grads, *x, dx, "conv2d_transpose")?;
                }
                if self.wants(*k) {
                    let dk = kernels::conv_kernel_grad(g, self.value(*x).data(), geom);
                    self.accumulate(grads, *k, dk, "conv2d_transpose")?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, kernels::channel_sums(g, geom.in_c), "conv2d_transpose")?;
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).len();
                let cg = c / groups;
                if self.wants(*gamma) {
                    let mut dg = vec![T::ZERO; c];
                    for (gp, xp) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            dg[ch] += gp[ch] * xp[ch];
                        }
                    }
                    self.accumulate(grads, *gamma, dg, "group_norm")?;
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, kernels::channel_sums(g, c), "group_norm")?;
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let n = (g.len() / c * cg) as f64;
                    let mut sum_d = vec![0.0f64; *groups];
                    let mut sum_dx = vec![0.0f64; *groups];
                    for (gp, xp) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            let d = gp[ch].as_f64() * gam[ch].as_f64();
                            sum_d[ch / cg] += d;
                            sum_dx[ch / cg] += d * xp[ch].as_f64();
                        }
                    }
                    let mut dx = Vec::with_capacity(g.len());
                    for (gp, xp) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            let grp = ch / cg;
                            let d = gp[ch].as_f64() * gam[ch].as_f64();
                            let v = inv_std[grp] / n * (n * d - sum_d[grp] - xp[ch].as_f64() * sum_dx[grp]);
                            dx.push(T::of(v));
                        }
                    }
                    self.accumulate(grads, *x, dx, "group_norm")?;
                }
            }
            Op::Prelu { x, alpha } => {
                let a = self.value(*alpha).data();
                let c = a.len();
                let xs = self.value(*x).data();
                if self.wants(*x) {
                    let dx = xs
                        .iter()
                        .zip(g)
                        .enumerate()
                        .map(|(j, (&v, &gv))| if v > T::ZERO { gv } else { a[j % c] * gv })
                        .collect();
                    self.accumulate(grads, *x, dx, "prelu")?;
                }
                if self.wants(*alpha) {
                    let mut da = vec![T::ZERO; c];
                    for (j, (&v, &gv)) in xs.iter().zip(g).enumerate() {
                        if v <= T::ZERO {
                            da[j % c] += gv * v;
                        }
                    }
                    self.accumulate(grads, *alpha, da, "prelu")?;
                }
            }
            Op::Softplus { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * T::of(kernels::sigmoid(v.as_f64())))
                    .collect();
                self.accumulate(grads, *x, dx, "softplus")?;
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (T::ONE - y))
                    .collect();
                self.accumulate(grads, *x, dx, "sigmoid")?;
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.to_vec(), "add")?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.to_vec(), "add")?;
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.to_vec(), "sub")?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().map(|&v| -v).collect(), "sub")?;
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                    self.accumulate(grads, *a, d, "mul")?;
                }
                if self.wants(*b) {
                    let d = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    self.accumulate(grads, *b, d, "mul")?;
                }
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *factor).collect(), "scale")?;
            }
            Op::Sum { a } => {
                self.accumulate(grads, *a, vec![g[0]; self.value(*a).len()], "sum")?;
            }
            Op::Concat { parts } => {
                let total = *node.value.shape().last().expect("rank-3");
                let mut offset = 0;
                for &p in parts {
                    let pc = *self.value(p).shape().last().expect("rank-3");
                    if self.wants(p) {
                        let d = g
                            .chunks_exact(total)
                            .flat_map(|px| px[offset..offset + pc].iter().copied())
                            .collect();
                        self.accumulate(grads, p, d, "concat_channels")?;
                    }
                    offset += pc;
                }
            }
            Op::Slice { x, start } => {
                let c = *self.value(*x).shape().last().expect("rank-3");
                let len = *node.value.shape().last().expect("rank-3");
                let mut d = vec![T::ZERO; self.value(*x).len()];
                for (dst, src) in d.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                self.accumulate(grads, *x, d, "slice_channels")?;
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.to_vec(), "reshape")?;
            }
            Op::Broadcast { x } => {
                let c = self.value(*x).len();
                self.accumulate(grads, *x, kernels::channel_sums(g, c), "broadcast_spatial")?;
            }
            Op::ConfidencePool { light, conf } => {
                let (h, w, lc) = self.value(*light).dims3()?;
                let cc = *self.value(*conf).shape().last().expect("rank-3");
                let p = lc / 3;
                let (ls, cs) = (self.value(*light).data(), self.value(*conf).data());
                let out = node.value.data();
                let q_of = |q: usize| if cc == 1 { 0 } else { q };
                let mut den = vec![0.0f64; p];
                for s in 0..h * w {
                    for (q, d) in den.iter_mut().enumerate() {
                        *d += cs[s * cc + q_of(q)].as_f64();
                    }
                }
                if self.wants(*light) {
                    let mut dl = vec![T::ZERO; ls.len()];
                    for s in 0..h * w {
                        for q in 0..p {
                            let wgt = cs[s * cc + q_of(q)].as_f64() / den[q];
                            for c in 0..3 {
                                dl[s * lc + q * 3 + c] = T::of(g[q * 3 + c].as_f64() * wgt);
                            }
                        }
                    }
                    self.accumulate(grads, *light, dl, "confidence_pool")?;
                }
                if self.wants(*conf) {
                    let mut dc = vec![0.0f64; cs.len()];
                    for s in 0..h * w {
                        for q in 0..p {
                            let mut acc = 0.0;
                            for c in 0..3 {
                                let j = q * 3 + c;
                                acc += g[j].as_f64() * (ls[s * lc + j].as_f64() - out[j].as_f64());
                            }
                            dc[s * cc + q_of(q)] += acc / den[q];
                        }
                    }
                    self.accumulate(grads, *conf, dc.into_iter().map(T::of).collect(), "confidence_pool")?;
                }
            }
            Op::Roll { x, shift } => {
                let (h, w, c) = self.value(*x).dims3()?;
                let d = kernels::roll_columns_adjoint(g, h, w, c, *shift);
                self.accumulate(grads, *x, d, "rotate_longitude")?;
            }
            Op::MaskedL1 { pred, target, mask } => {
                let c = *self.value(*pred).shape().last().expect("rank-3");
                let (p, t, m) = (self.value(*pred).data(), self.value(*target).data(), self.value(*mask).data());
                let sign: Vec<T> = p
                    .iter()
                    .zip(t)
                    .enumerate()
                    .map(|(j, (&a, &b))| {
                        let s = if a > b {
                            T::ONE
                        } else if a < b {
                            -T::ONE
                        } else {
                            T::ZERO
                        };
                        g[0] * m[j / c] * s
                    })
                    .collect();
                if self.wants(*target) {
                    self.accumulate(grads, *target, sign.iter().map(|&v| -v).collect(), "masked_l1")?;
                }
                if self.wants(*pred) {
                    self.accumulate(grads, *pred, sign, "masked_l1")?;
                }
            }
            Op::LogL2 { pred, target, weights } => {
                let c = *self.value(*pred).shape().last().expect("rank-3");
                let (p, t, om) = (self.value(*pred).data(), self.value(*target).data(), self.value(*weights).data());
                let d = p
                    .iter()
                    .zip(t)
                    .enumerate()
                    .map(|(j, (&a, &b))| {
                        let a = a.as_f64();
                        let w2 = om[j / c].as_f64().powi(2);
                        let r = 2.0 * w2 * (a.max(LOG1P_FLOOR).ln_1p() - b.as_f64().ln_1p());
                        // Below the floor the residual passes straight through with unit slope.
                        let slope = if a < LOG1P_FLOOR { 1.0 } else { 1.0 / (1.0 + a) };
                        T::of(g[0].as_f64() * r * slope)
                    })
                    .collect();
                self.accumulate(grads, *pred, d, "log_l2")?;
            }
        }
        Ok(())
    }
}
