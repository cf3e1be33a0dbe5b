use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Result, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor so entries with (near) zero gradient are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced entries of each input.
    pub max_entries: Option<usize>,
    /// Seed of the fixed projection applied to non-scalar outputs.
    pub seed: u64,
    /// Further steps tried, in order, for an entry that misses the tolerance at
    /// `step`. The best agreement counts. A stencil straddling a kink of an
    /// L1 or PReLU term disagrees at one step but not at all of them.
    pub fallback_steps: Vec<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            floor: 1e-6,
            max_entries: None,
            seed: 0x5eed,
            fallback_steps: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, entry)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub per_input: Vec<f64>,
    pub entries_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} entries, max rel err {:.3e} (abs {:.3e}), tolerance {:.0e}: {}",
            self.entries_checked,
            self.max_rel_error,
            self.max_abs_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one trainable [`Var`] per input. A non-scalar
/// output is reduced with a fixed random projection so every output element
/// contributes.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut projection: Option<Tensor<f64>> = None;
    let mut objective = |values: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = if tape.value(out).len() == 1 {
            out
        } else {
            let shape = tape.value(out).shape().to_vec();
            let proj = projection
                .get_or_insert_with(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                    Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))
                })
                .clone();
            let r = tape.constant(proj);
            let prod = tape.mul(out, r)?;
            tape.sum(prod)?
        };
        let value = tape.value(loss).item();
        let grads = if want_grads {
            let g = tape.backward(loss)?;
            vars.iter().map(|&v| g.get(v)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = objective(inputs, true)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        per_input: vec![0.0; inputs.len()],
        entries_checked: 0,
        tolerance: opts.tolerance,
        passed: true,
    };
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = opts.max_entries.map_or(1, |m| n.div_ceil(m.max(1)));
        for j in (0..n).step_by(stride) {
            let orig = input.data()[j];
            let a = analytic[i].data()[j];
            let (mut abs, mut rel) = (f64::INFINITY, f64::INFINITY);
            for &h in std::iter::once(&opts.step).chain(&opts.fallback_steps) {
                work[i].data_mut()[j] = orig + h;
                let (plus, _) = objective(&work, false)?;
                work[i].data_mut()[j] = orig - h;
                let (minus, _) = objective(&work, false)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let e = (a - numeric).abs();
                let r = e / a.abs().max(numeric.abs()).max(opts.floor);
                if r < rel {
                    (abs, rel) = (e, r);
                }
                if rel < opts.tolerance {
                    break;
                }
            }
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            report.per_input[i] = report.per_input[i].max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

/// Checks every differentiable primitive on small random inputs.
pub fn primitive_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let positive = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::from_fn(shape, |_| r.random_range(0.2..1.5));
    let target = random(&[3, 3, 3], r);
    let mask = positive(&[3, 3, 1], r);
    let light_target = positive(&[2, 4, 3], r);
    let weights = positive(&[2, 4, 1], r);
    let cases: Vec<Case> = vec![
        (
            "conv2d/stride1",
            vec![random(&[5, 5, 2], r), random(&[3, 3, 2, 3], r), random(&[3], r)],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1)),
        ),
        (
            "conv2d/stride2",
            vec![random(&[5, 5, 2], r), random(&[3, 3, 2, 3], r), random(&[3], r)],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2)),
        ),
        (
            "conv2d_transpose/stride1",
            vec![random(&[3, 3, 2], r), random(&[3, 3, 3, 2], r), random(&[3], r)],
            Box::new(|t, v| t.conv2d_transpose(v[0], v[1], v[2], 1)),
        ),
        (
            "conv2d_transpose/stride2",
            vec![random(&[3, 3, 2], r), random(&[3, 3, 3, 2], r), random(&[3], r)],
            Box::new(|t, v| t.conv2d_transpose(v[0], v[1], v[2], 2)),
        ),
        (
            "group_norm",
            vec![random(&[4, 4, 4], r), random(&[4], r), random(&[4], r)],
            Box::new(|t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5)),
        ),
        ("prelu", vec![random(&[3, 3, 4], r), random(&[4], r)], Box::new(|t, v| t.prelu(v[0], v[1]))),
        ("softplus", vec![random(&[3, 3, 4], r)], Box::new(|t, v| t.softplus(v[0]))),
        ("sigmoid", vec![random(&[3, 3, 4], r)], Box::new(|t, v| t.sigmoid(v[0]))),
        (
            "add/sub/mul/scale",
            vec![random(&[2, 3, 2], r), random(&[2, 3, 2], r)],
            Box::new(|t, v| {
                let p = t.mul(v[0], v[1])?;
                let q = t.sub(p, v[1])?;
                let s = t.add(q, v[0])?;
                t.scale(s, -0.3)
            }),
        ),
        ("sum", vec![random(&[2, 3, 2], r)], Box::new(|t, v| t.sum(v[0]))),
        (
            "concat/slice",
            vec![random(&[2, 3, 2], r), random(&[2, 3, 3], r)],
            Box::new(|t, v| {
                let c = t.concat_channels(&[v[0], v[1]])?;
                t.slice_channels(c, 1, 3)
            }),
        ),
        (
            "reshape/broadcast",
            vec![random(&[1, 2, 3], r)],
            Box::new(|t, v| {
                let f = t.reshape(v[0], &[1, 1, 6])?;
                t.broadcast_spatial(f, 3, 2)
            }),
        ),
        ("rotate_longitude", vec![random(&[4, 8, 3], r)], Box::new(|t, v| t.rotate_longitude(v[0], 37.3))),
        (
            "confidence_pool",
            vec![random(&[2, 3, 12], r), positive(&[2, 3, 4], r)],
            Box::new(|t, v| t.confidence_pool(v[0], v[1], 2, 2)),
        ),
        (
            "masked_l1",
            vec![random(&[3, 3, 3], r)],
            Box::new(move |t, v| {
                let (tg, m) = (t.constant(target.clone()), t.constant(mask.clone()));
                t.masked_l1(v[0], tg, m)
            }),
        ),
        (
            "log_l2",
            vec![Tensor::from_fn(&[2, 4, 3], |_| r.random_range(-0.8..2.0))],
            Box::new(move |t, v| {
                let (tg, w) = (t.constant(light_target.clone()), t.constant(weights.clone()));
                t.log_l2(v[0], tg, w)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, grad_check(&inputs, f, opts)?)))
        .collect()
}
