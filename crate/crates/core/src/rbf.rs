//! Gaussian kernel sums over sample pairs.
//!
//! Rows are processed one at a time against every later row, with the inner
//! loops written over contiguous column-major buffers so they vectorize.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest number of bandwidths a kernel carries.
pub const MAX_BANDWIDTHS: usize = 8;

/// Exponent coefficients `c = −1/(2σ²)` of a Gaussian kernel sum.
///
/// Coefficients within rounding of the widest bandwidth's coefficient times
/// `2^p` are snapped to exactly that value and evaluated by `p` repeated
/// squarings of a single exponential.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbfCoeffs {
    /// Powered coefficients first, by ascending `p`.
    coeffs: [f64; MAX_BANDWIDTHS],
    /// Extra squarings relative to the previous powered coefficient.
    steps: [u32; MAX_BANDWIDTHS],
    powered: usize,
    len: usize,
    base: f64,
}

/// `exp(x)` for `x ≤ 0` without branches, so buffer loops vectorize.
///
/// Relative error is a few ulp; arguments below −700 are clamped there.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let x = x.max(-700.0);
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let k = t - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series on |r| ≤ ln2 / 2
    let p = 1.0 / 6_227_020_800.0;
    let p = p * r + 1.0 / 479_001_600.0;
    let p = p * r + 1.0 / 39_916_800.0;
    let p = p * r + 1.0 / 3_628_800.0;
    let p = p * r + 1.0 / 362_880.0;
    let p = p * r + 1.0 / 40_320.0;
    let p = p * r + 1.0 / 5_040.0;
    let p = p * r + 1.0 / 720.0;
    let p = p * r + 1.0 / 120.0;
    let p = p * r + 1.0 / 24.0;
    let p = p * r + 1.0 / 6.0;
    let p = p * r + 0.5;
    let p = p * r + 1.0;
    let p = p * r + 1.0;
    let bits = t.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(1023) << 52;
    p * f64::from_bits(bits)
}

impl RbfCoeffs {
    pub fn from_bandwidths(bandwidths: &[f64]) -> Result<Self> {
        if bandwidths.is_empty()
            || bandwidths.len() > MAX_BANDWIDTHS
            || bandwidths.iter().any(|&s| !(s > 0.0) || !s.is_finite())
        {
            return Err(Error::invalid(format!(
                "need 1..={MAX_BANDWIDTHS} positive bandwidths, got {bandwidths:?}"
            )));
        }
        let widest = bandwidths.iter().copied().fold(0.0, f64::max);
        let base = -1.0 / (2.0 * widest * widest);
        let mut powered = Vec::new();
        let mut plain = Vec::new();
        for &s in bandwidths {
            let c = -1.0 / (2.0 * s * s);
            let ratio = c / base;
            let p = ratio.log2().round();
            if (0.0..=16.0).contains(&p) && (ratio / 2f64.powi(p as i32) - 1.0).abs() < 1e-9 {
                powered.push((p as u32, base * 2f64.powi(p as i32)));
            } else {
                plain.push(c);
            }
        }
        powered.sort_by_key(|&(p, _)| p);
        let mut coeffs = [0.0; MAX_BANDWIDTHS];
        let mut steps = [0; MAX_BANDWIDTHS];
        let mut prev = 0;
        for (k, &(p, c)) in powered.iter().enumerate() {
            coeffs[k] = c;
            steps[k] = p - prev;
            prev = p;
        }
        coeffs[powered.len()..bandwidths.len()].copy_from_slice(&plain);
        Ok(Self {
            coeffs,
            steps,
            powered: powered.len(),
            len: bandwidths.len(),
            base,
        })
    }

    /// Exponent coefficients, powered ones first.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs[..self.len]
    }

    /// `(Σ_c exp(c·d2), Σ_c c·exp(c·d2))`
    pub fn eval_with_slope(&self, d2: f64) -> (f64, f64) {
        let mut x = [0.0; LANES];
        x[0] = d2;
        let (v, s) = self.eval_lanes::<true>(&x);
        (v[0], s[0])
    }

    pub fn eval(&self, d2: f64) -> f64 {
        self.eval_with_slope(d2).0
    }

    /// Kernel values (and optionally slopes) for a buffer of squared distances.
    fn eval_into(&self, d2: &[f64], value: &mut [f64], slope: Option<&mut [f64]>) {
        match slope {
            Some(slope) => self.eval_buffer::<true>(d2, value, slope),
            None => self.eval_buffer::<false>(d2, value, &mut []),
        }
    }

    fn eval_buffer<const SLOPE: bool>(&self, d2: &[f64], value: &mut [f64], slope: &mut [f64]) {
        let n = d2.len();
        let full = n - n % LANES;
        for j in (0..full).step_by(LANES) {
            let x: &[f64; LANES] = d2[j..j + LANES].try_into().expect("chunk");
            let (v, s) = self.eval_lanes::<SLOPE>(x);
            value[j..j + LANES].copy_from_slice(&v);
            if SLOPE {
                slope[j..j + LANES].copy_from_slice(&s);
            }
        }
        if full < n {
            let mut x = [0.0; LANES];
            x[..n - full].copy_from_slice(&d2[full..]);
            let (v, s) = self.eval_lanes::<SLOPE>(&x);
            value[full..n].copy_from_slice(&v[..n - full]);
            if SLOPE {
                slope[full..n].copy_from_slice(&s[..n - full]);
            }
        }
    }

    #[inline(always)]
    fn eval_lanes<const SLOPE: bool>(&self, x: &[f64; LANES]) -> ([f64; LANES], [f64; LANES]) {
        let (mut v, mut s, mut e) = ([0.0; LANES], [0.0; LANES], [0.0; LANES]);
        if self.powered > 0 {
            for l in 0..LANES {
                e[l] = exp_nonpositive(self.base * x[l]);
            }
        }
        for k in 0..self.len {
            let c = self.coeffs[k];
            if k < self.powered {
                for _ in 0..self.steps[k] {
                    for l in 0..LANES {
                        e[l] *= e[l];
                    }
                }
                for l in 0..LANES {
                    v[l] += e[l];
                    if SLOPE {
                        s[l] += c * e[l];
                    }
                }
            } else {
                for l in 0..LANES {
                    let t = exp_nonpositive(c * x[l]);
                    v[l] += t;
                    if SLOPE {
                        s[l] += c * t;
                    }
                }
            }
        }
        (v, s)
    }
}

const LANES: usize = 8;

/// Sum with element `j` accumulated in lane `j % LANES`, lanes reduced last.
fn lane_sum(xs: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    for (a, &x) in acc.iter_mut().zip(chunks.remainder()) {
        *a += x;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

fn columns(x: &Tensor) -> Vec<f64> {
    let (m, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        for (k, &v) in x.row(i).iter().enumerate() {
            out[k * m + i] = v;
        }
    }
    out
}

fn rows_from_columns(cols: &[f64], m: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * d];
    for k in 0..d {
        for i in 0..m {
            out[i * d + k] = cols[k * m + i];
        }
    }
    out
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if !a.is_matrix() || a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "kernel-pairs",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Squared distances from column `i` of `x` to columns `i+1..` of `y`.
fn sq_dists_after(x: &[f64], y: &[f64], m: usize, d: usize, i: usize, out: &mut [f64]) {
    out.fill(0.0);
    for k in 0..d {
        let xi = x[k * m + i];
        for (o, &yj) in out.iter_mut().zip(&y[k * m + i + 1..(k + 1) * m]) {
            let t = xi - yj;
            *o += t * t;
        }
    }
}

/// Row buffers reused across the pair sweep.
struct Buffers {
    d2: Vec<f64>,
    value: Vec<f64>,
    slope: Vec<f64>,
}

impl Buffers {
    fn new(m: usize) -> Self {
        Self {
            d2: vec![0.0; m],
            value: vec![0.0; m],
            slope: vec![0.0; m],
        }
    }
}

/// `Σ_{i<j} k(x_i, x_j)` and, when `grad` is given, its derivative with
/// respect to `x` scaled by `scale` and added in row-major order.
pub(crate) fn within_sum(kernel: &RbfCoeffs, x: &Tensor, grad: Option<(&mut [f64], f64)>) -> Result<f64> {
    check_pair(x, x)?;
    let (m, d) = (x.rows(), x.cols());
    let xc = columns(x);
    let mut buf = Buffers::new(m);
    let mut gc = grad.as_ref().map(|_| vec![0.0; m * d]);
    let mut total = 0.0;
    for i in 0..m.saturating_sub(1) {
        let n = m - i - 1;
        sq_dists_after(&xc, &xc, m, d, i, &mut buf.d2[..n]);
        let want_slope = gc.is_some();
        kernel.eval_into(&buf.d2[..n], &mut buf.value, want_slope.then_some(&mut buf.slope[..]));
        total += lane_sum(&buf.value[..n]);
        if let Some(gc) = gc.as_mut() {
            // ∂k/∂x_i = 2·slope·(x_i − x_j) = −∂k/∂x_j
            for k in 0..d {
                let xi = xc[k * m + i];
                let col = &xc[k * m + i + 1..(k + 1) * m];
                let (head, tail) = gc[k * m..(k + 1) * m].split_at_mut(i + 1);
                let mut own = 0.0;
                for ((g, &xj), &s) in tail.iter_mut().zip(col).zip(&buf.slope[..n]) {
                    let w = 2.0 * s * (xi - xj);
                    own += w;
                    *g -= w;
                }
                head[i] += own;
            }
        }
    }
    if let (Some((out, scale)), Some(gc)) = (grad, gc) {
        for (o, g) in out.iter_mut().zip(rows_from_columns(&gc, m, d)) {
            *o += scale * g;
        }
    }
    Ok(total)
}

/// `Σ_{i<j} [k(a_i, b_j) + k(a_j, b_i)] = Σ_{i≠j} k(a_i, b_j)`, with optional
/// scaled derivatives with respect to `a` and `b`.
///
/// When `a == b` every pair term is exactly twice the matching
/// [`within_sum`] term, summed in the same order.
pub(crate) fn cross_sum(
    kernel: &RbfCoeffs,
    a: &Tensor,
    b: &Tensor,
    grad: Option<(&mut [f64], &mut [f64], f64)>,
) -> Result<f64> {
    check_pair(a, b)?;
    let (m, d) = (a.rows(), a.cols());
    let (ac, bc) = (columns(a), columns(b));
    let mut fwd = Buffers::new(m);
    let mut rev = Buffers::new(m);
    let mut grads = grad.as_ref().map(|_| (vec![0.0; m * d], vec![0.0; m * d]));
    let want_slope = grads.is_some();
    let mut total = 0.0;
    for i in 0..m.saturating_sub(1) {
        let n = m - i - 1;
        // k(a_i, b_j) and k(a_j, b_i) for j > i
        sq_dists_after(&ac, &bc, m, d, i, &mut fwd.d2[..n]);
        sq_dists_after(&bc, &ac, m, d, i, &mut rev.d2[..n]);
        for buf in [&mut fwd, &mut rev] {
            kernel.eval_into(&buf.d2[..n], &mut buf.value, want_slope.then_some(&mut buf.slope[..]));
        }
        for (f, &r) in fwd.value[..n].iter_mut().zip(&rev.value[..n]) {
            *f += r;
        }
        total += lane_sum(&fwd.value[..n]);
        if let Some((ga, gb)) = grads.as_mut() {
            for k in 0..d {
                let (ai, bi) = (ac[k * m + i], bc[k * m + i]);
                let a_after = &ac[k * m + i + 1..(k + 1) * m];
                let b_after = &bc[k * m + i + 1..(k + 1) * m];
                let (ga_head, ga_tail) = ga[k * m..(k + 1) * m].split_at_mut(i + 1);
                let (gb_head, gb_tail) = gb[k * m..(k + 1) * m].split_at_mut(i + 1);
                let (mut own_a, mut own_b) = (0.0, 0.0);
                for j in 0..n {
                    let w = 2.0 * fwd.slope[j] * (ai - b_after[j]);
                    own_a += w;
                    gb_tail[j] -= w;
                    let w = 2.0 * rev.slope[j] * (bi - a_after[j]);
                    own_b += w;
                    ga_tail[j] -= w;
                }
                ga_head[i] += own_a;
                gb_head[i] += own_b;
            }
        }
    }
    if let (Some((out_a, out_b, scale)), Some((ga, gb))) = (grad, grads) {
        for (o, g) in out_a.iter_mut().zip(rows_from_columns(&ga, m, d)) {
            *o += scale * g;
        }
        for (o, g) in out_b.iter_mut().zip(rows_from_columns(&gb, m, d)) {
            *o += scale * g;
        }
    }
    Ok(total)
}
