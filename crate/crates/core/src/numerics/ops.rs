//! Forward kernels for the primitive set used by the attention stages.
//!
//! Every function here is pure. The differentiable versions in
//! [`graph`](super::graph) call these for their forward values, so tensor-level
//! and graph-level results are bit-identical.

use crate::error::{CcraError, Result};

use super::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(CcraError::shape(op, other, &[0, 0])),
    }
}

/// `C[i][j] = Σ_t A[i][t]·B[t][j]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_rank2("matmul", a)?;
    let (k2, n) = require_rank2("matmul", b)?;
    if k != k2 {
        return Err(CcraError::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_op("matmul", vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_rank2("transpose", a)?;
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Ok(Tensor::from_op("transpose", vec![n, m], out))
}

fn zip_same(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(CcraError::shape(op, a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(Tensor::from_op(op, a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v + c)
}

/// Numerically stable softmax over the last axis. A vector is normalized as a
/// whole; a matrix row by row.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.is_empty() || v.rank() == 0 {
        return Err(CcraError::EmptyInput("softmax"));
    }
    let (rows, d) = v.as_matrix_dims();
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let row = v.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|&x| (x - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    Ok(Tensor::from_op("softmax", v.shape().to_vec(), out))
}

/// Cached per-row statistics of a layer norm; reused by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerNormStats {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormStats)> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(CcraError::InvalidArgument(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let (rows, d) = x.as_matrix_dims();
    if gamma.shape() != [d] {
        return Err(CcraError::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if beta.shape() != [d] {
        return Err(CcraError::shape("layer_norm", x.shape(), beta.shape()));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![0.0; rows * d];
    let mut normalized = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std[r] = rstd;
        for j in 0..d {
            let xh = (row[j] - mean) * rstd;
            normalized[r * d + j] = xh;
            out[r * d + j] = g[j] * xh + b[j];
        }
    }
    Ok((
        Tensor::from_op("layer_norm", x.shape().to_vec(), out),
        LayerNormStats {
            normalized,
            inv_std,
        },
    ))
}

/// Layer normalization over the last axis with biased variance.
///
/// A vector is treated as a single row; higher-rank inputs are normalized
/// row by row.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Column means of an `n×d` matrix.
pub fn avg_pool_rows(m: &Tensor) -> Result<Tensor> {
    if m.rank() == 0 {
        return Err(CcraError::EmptyInput("avg_pool_rows"));
    }
    let (n, d) = m.as_matrix_dims();
    let mut out = vec![0.0; d];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(Tensor::from_op("avg_pool_rows", vec![d], out))
}

/// Normalized, symmetric Gaussian kernel of odd size `k`.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Tensor> {
    if k == 0 || k % 2 == 0 {
        return Err(CcraError::EvenKernel(k));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(CcraError::NonPositiveSigma(sigma));
    }
    let r = (k / 2) as isize;
    let mut g: Vec<f64> = (0..k as isize)
        .map(|i| {
            let x = (i - r) as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    // Exact palindrome regardless of summation order above.
    for i in 0..k / 2 {
        g[k - 1 - i] = g[i];
    }
    Ok(Tensor::from_op("gaussian_kernel", vec![k], g))
}

/// Maps an out-of-range index onto `0..n` by mirroring about the half-sample
/// boundary: `-1 → 0`, `-2 → 1`, `n → n-1`, `n+1 → n-2`.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Same-length 1-D correlation of `v` with an odd kernel `g` using mirrored
/// padding. For a normalized symmetric kernel the output has the same total
/// mass as the input.
pub fn conv1d_reflect(v: &Tensor, g: &Tensor) -> Result<Tensor> {
    let n = v.len();
    let k = g.len();
    if v.rank() != 1 || g.rank() != 1 {
        return Err(CcraError::shape("conv1d_reflect", v.shape(), g.shape()));
    }
    if k % 2 == 0 {
        return Err(CcraError::EvenKernel(k));
    }
    if k > 2 * n - 1 {
        return Err(CcraError::KernelTooLarge { k, n });
    }
    let r = (k / 2) as isize;
    let (vd, gd) = (v.data(), g.data());
    let out = (0..n as isize)
        .map(|i| {
            gd.iter()
                .enumerate()
                .map(|(j, &w)| w * vd[reflect_index(i + j as isize - r, n)])
                .sum()
        })
        .collect();
    Ok(Tensor::from_op("conv1d_reflect", vec![n], out))
}

/// Multiplies row `i` of `x` by `s[i]`.
pub fn scale_rows(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (n, d) = x.as_matrix_dims();
    if s.len() != n || s.rank() > 1 && s.as_matrix_dims().1 != 1 {
        return Err(CcraError::shape("scale_rows", x.shape(), s.shape()));
    }
    let mut out = x.data().to_vec();
    for (i, &si) in s.data().iter().enumerate() {
        out[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= si);
    }
    Ok(Tensor::from_op("scale_rows", x.shape().to_vec(), out))
}

/// Adds the vector `b` to every row of `x`.
pub fn add_row_vector(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, d) = x.as_matrix_dims();
    if b.shape() != [d] {
        return Err(CcraError::shape("add_row_vector", x.shape(), b.shape()));
    }
    let bd = b.data();
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| v + bd[idx % d])
        .collect();
    Ok(Tensor::from_op("add_row_vector", x.shape().to_vec(), out))
}

/// Rowwise concatenation `[a | b]` of two matrices with equal row counts.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, da) = require_rank2("concat_cols", a)?;
    let (n2, db) = require_rank2("concat_cols", b)?;
    if n != n2 {
        return Err(CcraError::shape("concat_cols", a.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(n * (da + db));
    for i in 0..n {
        out.extend_from_slice(a.row(i));
        out.extend_from_slice(b.row(i));
    }
    Ok(Tensor::from_op("concat_cols", vec![n, da + db], out))
}

/// Stacks matrices (or vectors, as single rows) of equal width vertically.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(CcraError::EmptyInput("concat_rows"))?;
    let (_, d) = first.as_matrix_dims();
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        let (pn, pd) = p.as_matrix_dims();
        if pd != d || p.rank() > 2 {
            return Err(CcraError::shape("concat_rows", first.shape(), p.shape()));
        }
        rows += pn;
        out.extend_from_slice(p.data());
    }
    Ok(Tensor::from_op("concat_rows", vec![rows, d], out))
}

/// Rows `start..start+len` of a matrix.
pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, d) = require_rank2("slice_rows", x)?;
    if len == 0 || start + len > n {
        return Err(CcraError::shape("slice_rows", x.shape(), &[start, len]));
    }
    Ok(Tensor::from_op(
        "slice_rows",
        vec![len, d],
        x.data()[start * d..(start + len) * d].to_vec(),
    ))
}

/// `log Σ exp(z) − z[target]`.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(CcraError::EmptyInput("cross_entropy"));
    }
    if target >= logits.len() {
        return Err(CcraError::InvalidArgument(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    let z = logits.data();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - z[target])
}
