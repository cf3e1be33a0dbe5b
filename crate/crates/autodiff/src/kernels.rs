//! Raw slice kernels behind the tape operations.
//!
//! All feature maps are channels-last. Convolutions use "same" zero padding of
//! `(k - 1) / 2` on each side and sample input rows `oy * stride + u - pad`, so a
//! stride-2 convolution of an `H×W` map yields `ceil(H/2)×ceil(W/2)` and the
//! transposed kernel is its exact adjoint. Every inner loop is an axpy over a
//! contiguous channel run; parallel loops split over output rows or kernel taps
//! and never share an accumulator, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::Real;

/// Spatial geometry of a strided "same" convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeometry {
    /// Geometry of a convolution reading an `in_h×in_w×in_c` map.
    pub fn forward(
        in_h: usize,
        in_w: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
        out_c: usize,
        stride: usize,
    ) -> Self {
        Self {
            in_h,
            in_w,
            in_c,
            out_h: in_h.div_ceil(stride),
            out_w: in_w.div_ceil(stride),
            out_c,
            kh,
            kw,
            stride,
        }
    }

    fn pad_h(&self) -> isize {
        (self.kh as isize - 1) / 2
    }

    fn pad_w(&self) -> isize {
        (self.kw as isize - 1) / 2
    }
}

#[inline(always)]
fn axpy<T: Real>(acc: &mut [T], a: T, x: &[T]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `out[oy,ox,co] = Σ x[oy·s+u-p, ox·s+v-p, ci] · k[u,v,ci,co]`, kernel laid out `kh×kw×in_c×out_c`.
pub fn conv_forward<T: Real>(x: &[T], k: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::ZERO; g.out_h * g.out_w * g.out_c];
    let (ph, pw) = (g.pad_h(), g.pad_w());
    out.par_chunks_mut(g.out_w * g.out_c)
        .enumerate()
        .for_each(|(oy, row)| {
            for ox in 0..g.out_w {
                let acc = &mut row[ox * g.out_c..(ox + 1) * g.out_c];
                for u in 0..g.kh {
                    let iy = (oy * g.stride) as isize + u as isize - ph;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for v in 0..g.kw {
                        let ix = (ox * g.stride) as isize + v as isize - pw;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let base = (iy as usize * g.in_w + ix as usize) * g.in_c;
                        let xin = &x[base..base + g.in_c];
                        let slab = &k[(u * g.kw + v) * g.in_c * g.out_c..][..g.in_c * g.out_c];
                        for (ci, &a) in xin.iter().enumerate() {
                            axpy(acc, a, &slab[ci * g.out_c..(ci + 1) * g.out_c]);
                        }
                    }
                }
            }
        });
    out
}

/// Adjoint of [`conv_forward`] with respect to its input: maps an
/// `out_h×out_w×out_c` map back to `in_h×in_w×in_c`.
pub fn conv_adjoint<T: Real>(y: &[T], k: &[T], g: &ConvGeometry) -> Vec<T> {
    // kt[u,v,co,ci] so the inner loop runs over input channels.
    let taps = g.kh * g.kw;
    let mut kt = vec![T::ZERO; k.len()];
    for t in 0..taps {
        let src = &k[t * g.in_c * g.out_c..][..g.in_c * g.out_c];
        let dst = &mut kt[t * g.in_c * g.out_c..][..g.in_c * g.out_c];
        for ci in 0..g.in_c {
            for co in 0..g.out_c {
                dst[co * g.in_c + ci] = src[ci * g.out_c + co];
            }
        }
    }
    let mut out = vec![T::ZERO; g.in_h * g.in_w * g.in_c];
    let (ph, pw) = (g.pad_h(), g.pad_w());
    let s = g.stride as isize;
    out.par_chunks_mut(g.in_w * g.in_c)
        .enumerate()
        .for_each(|(iy, row)| {
            for ix in 0..g.in_w {
                let acc = &mut row[ix * g.in_c..(ix + 1) * g.in_c];
                for u in 0..g.kh {
                    let t = iy as isize + ph - u as isize;
                    if t < 0 || t % s != 0 || (t / s) as usize >= g.out_h {
                        continue;
                    }
                    let oy = (t / s) as usize;
                    for v in 0..g.kw {
                        let t = ix as isize + pw - v as isize;
                        if t < 0 || t % s != 0 || (t / s) as usize >= g.out_w {
                            continue;
                        }
                        let ox = (t / s) as usize;
                        let base = (oy * g.out_w + ox) * g.out_c;
                        let yv = &y[base..base + g.out_c];
                        let slab = &kt[(u * g.kw + v) * g.in_c * g.out_c..][..g.in_c * g.out_c];
                        for (co, &a) in yv.iter().enumerate() {
                            axpy(acc, a, &slab[co * g.in_c..(co + 1) * g.in_c]);
                        }
                    }
                }
            }
        });
    out
}

/// Gradient of [`conv_forward`] with respect to the kernel:
/// `dk[u,v,ci,co] = Σ x[oy·s+u-p, ox·s+v-p, ci] · dy[oy,ox,co]`.
pub fn conv_kernel_grad<T: Real>(x: &[T], dy: &[T], g: &ConvGeometry) -> Vec<T> {
    let slab_len = g.in_c * g.out_c;
    let mut dk = vec![T::ZERO; g.kh * g.kw * slab_len];
    let (ph, pw) = (g.pad_h(), g.pad_w());
    dk.par_chunks_mut(slab_len).enumerate().for_each(|(tap, slab)| {
        let (u, v) = (tap / g.kw, tap % g.kw);
        for oy in 0..g.out_h {
            let iy = (oy * g.stride) as isize + u as isize - ph;
            if iy < 0 || iy >= g.in_h as isize {
                continue;
            }
            for ox in 0..g.out_w {
                let ix = (ox * g.stride) as isize + v as isize - pw;
                if ix < 0 || ix >= g.in_w as isize {
                    continue;
                }
                let base = (iy as usize * g.in_w + ix as usize) * g.in_c;
                let xin = &x[base..base + g.in_c];
                let gy = &dy[(oy * g.out_w + ox) * g.out_c..][..g.out_c];
                for (ci, &a) in xin.iter().enumerate() {
                    axpy(&mut slab[ci * g.out_c..(ci + 1) * g.out_c], a, gy);
                }
            }
        }
    });
    dk
}

/// Adds a per-channel bias in place.
pub fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for px in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in px.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Per-channel sum over all pixels.
pub fn channel_sums<T: Real>(x: &[T], channels: usize) -> Vec<T> {
    let mut acc = vec![T::ZERO; channels];
    for px in x.chunks_exact(channels) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v;
        }
    }
    acc
}

/// Split of a fractional column shift into whole pixels and a remainder in `[0, 1)`.
/// Shifts within `1e-9` of an integer are snapped so whole-pixel rotations stay exact.
pub fn split_shift(shift: f64, width: usize) -> (usize, f64) {
    let rounded = shift.round();
    let shift = if (shift - rounded).abs() < 1e-9 {
        rounded
    } else {
        shift
    };
    let whole = shift.floor();
    let frac = shift - whole;
    let k = (whole as i64).rem_euclid(width as i64) as usize;
    (k, frac)
}

/// Cyclic column shift of an `H×W×C` map by `shift` pixels towards larger
/// column indices, linearly interpolating fractional shifts:
/// `out[r,c] = (1-f)·x[r,c-k] + f·x[r,c-k-1]` with wraparound.
pub fn roll_columns<T: Real>(x: &[T], h: usize, w: usize, c: usize, shift: f64) -> Vec<T> {
    let (k, f) = split_shift(shift, w);
    let mut out = vec![T::ZERO; x.len()];
    let (a, b) = (T::of(1.0 - f), T::of(f));
    for r in 0..h {
        let row_in = &x[r * w * c..(r + 1) * w * c];
        let row_out = &mut out[r * w * c..(r + 1) * w * c];
        for col in 0..w {
            let src0 = (col + w - k) % w;
            let dst = &mut row_out[col * c..(col + 1) * c];
            let p0 = &row_in[src0 * c..(src0 + 1) * c];
            if f == 0.0 {
                dst.copy_from_slice(p0);
            } else {
                let src1 = (src0 + w - 1) % w;
                let p1 = &row_in[src1 * c..(src1 + 1) * c];
                for ch in 0..c {
                    dst[ch] = a * p0[ch] + b * p1[ch];
                }
            }
        }
    }
    out
}

/// Adjoint of [`roll_columns`].
pub fn roll_columns_adjoint<T: Real>(g: &[T], h: usize, w: usize, c: usize, shift: f64) -> Vec<T> {
    let (k, f) = split_shift(shift, w);
    let mut out = vec![T::ZERO; g.len()];
    let (a, b) = (T::of(1.0 - f), T::of(f));
    for r in 0..h {
        let row_g = &g[r * w * c..(r + 1) * w * c];
        let row_out = &mut out[r * w * c..(r + 1) * w * c];
        for col in 0..w {
            let src0 = (col + w - k) % w;
            let gv = &row_g[col * c..(col + 1) * c];
            if f == 0.0 {
                for ch in 0..c {
                    row_out[src0 * c + ch] += gv[ch];
                }
            } else {
                let src1 = (src0 + w - 1) % w;
                for ch in 0..c {
                    row_out[src0 * c + ch] += a * gv[ch];
                    row_out[src1 * c + ch] += b * gv[ch];
                }
            }
        }
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
