//! Straight-line loop implementation of the default pipeline, written against
//! raw parameter values only.

#![allow(clippy::needless_range_loop)]

use ccra_core::pipeline::{CcraConfig, CcraParams};
use ccra_core::Tensor;

type Mat = Vec<Vec<f64>>;

pub struct OracleTrace {
    pub alpha: Vec<f64>,
    pub w_lp: Vec<f64>,
    pub wl_raw: Vec<f64>,
    pub wl_smoothed: Vec<f64>,
    pub w_p: Vec<f64>,
    pub f_lp: Vec<f64>,
    pub f_semantic: Vec<f64>,
    pub f_regional: Vec<f64>,
    pub fused: Vec<f64>,
    pub projected: Vec<f64>,
    pub logits: Vec<f64>,
}

fn rows(t: &Tensor) -> Mat {
    let (n, d) = t.as_matrix_dims();
    (0..n)
        .map(|i| t.data()[i * d..(i + 1) * d].to_vec())
        .collect()
}

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    (0..x.len())
        .map(|c| gamma[c] * (x[c] - mu) * inv + beta[c])
        .collect()
}

pub fn gaussian(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|j| (-((j as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|v| v / z).collect()
}

/// Mirror about the half-sample boundary until the index lands in range.
pub fn mirror(mut j: i64, n: i64) -> usize {
    while j < 0 || j >= n {
        if j < 0 {
            j = -j - 1;
        } else {
            j = 2 * n - 1 - j;
        }
    }
    j as usize
}

pub fn smooth(p: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = p.len() as i64;
    let r = (kernel.len() / 2) as i64;
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for (j, g) in kernel.iter().enumerate() {
                s += g * p[mirror(i + j as i64 - r, n)];
            }
            s
        })
        .collect()
}

/// `Σ_t α_t · s · q_t · key`.
fn weighted_score(alpha: &[f64], q: &Mat, key: &[f64], s: f64) -> f64 {
    let mut acc = 0.0;
    for t in 0..alpha.len() {
        acc += alpha[t] * s * dot(&q[t], key);
    }
    acc
}

/// Runs the default order with a raw gate and softmax-then-smooth layer
/// weights. `visual` is `L×N×d`, `text` is `T×d`.
pub fn oracle_forward(
    text: &Tensor,
    visual: &Tensor,
    p: &CcraParams,
    cfg: &CcraConfig,
) -> OracleTrace {
    let (l_n, n_n, d, t_n) = (cfg.layers, cfg.patches, cfg.d, cfg.tokens);
    let s = 1.0 / (cfg.d_hidden as f64).sqrt();
    let ft = rows(text);
    let f: Vec<Mat> = (0..l_n)
        .map(|l| {
            (0..n_n)
                .map(|i| visual.data()[(l * n_n + i) * d..(l * n_n + i + 1) * d].to_vec())
                .collect()
        })
        .collect();
    let c = &p.conditioning;
    let (wq, wk, wv) = (rows(&c.w_q_sa), rows(&c.w_k_sa), rows(&c.w_v_sa));
    let w_s = c.w_score.data().to_vec();

    // Token importance.
    let q_sa: Mat = ft.iter().map(|x| vecmat(x, &wq)).collect();
    let k_sa: Mat = ft.iter().map(|x| vecmat(x, &wk)).collect();
    let v_sa: Mat = ft.iter().map(|x| vecmat(x, &wv)).collect();
    let mut token_logits = vec![0.0; t_n];
    for a in 0..t_n {
        let scores: Vec<f64> = (0..t_n).map(|b| s * dot(&q_sa[a], &k_sa[b])).collect();
        let attn = softmax(&scores);
        let mut ctx = vec![0.0; cfg.d_hidden];
        for b in 0..t_n {
            for h in 0..cfg.d_hidden {
                ctx[h] += attn[b] * v_sa[b][h];
            }
        }
        token_logits[a] = dot(&ctx, &w_s);
    }
    let alpha = softmax(&token_logits);

    // Layer-patch gating.
    let q_lp: Mat = ft.iter().map(|x| vecmat(x, &rows(&c.w_q_lp))).collect();
    let wk_lp = rows(&p.lpwca.w_k);
    let mut w_lp = Vec::new();
    let mut f_lp: Vec<Mat> = Vec::new();
    for l in 0..l_n {
        let mut layer = Vec::new();
        for i in 0..n_n {
            let key = vecmat(&f[l][i], &wk_lp);
            let w = weighted_score(&alpha, &q_lp, &key, s);
            w_lp.push(w);
            let gated: Vec<f64> = f[l][i].iter().map(|v| v * w + v).collect();
            layer.push(layer_norm(
                &gated,
                p.lpwca.gamma.data(),
                p.lpwca.beta.data(),
                p.lpwca.ln_eps,
            ));
        }
        f_lp.push(layer);
    }

    // Layer weights and semantic aggregation.
    let q_l: Mat = ft.iter().map(|x| vecmat(x, &rows(&c.w_q_l))).collect();
    let wk_l = rows(&p.lwca.w_k);
    let mut wl_raw = Vec::new();
    for layer in &f_lp {
        let mut desc = vec![0.0; d];
        for row in layer {
            for ch in 0..d {
                desc[ch] += row[ch] / n_n as f64;
            }
        }
        wl_raw.push(weighted_score(&alpha, &q_l, &vecmat(&desc, &wk_l), s));
    }
    let sigma = cfg.sigma.unwrap_or(cfg.k as f64 / 3.0);
    let wl_smoothed = smooth(&softmax(&wl_raw), &gaussian(cfg.k, sigma));
    let mut mixed = vec![vec![0.0; d]; n_n];
    for i in 0..n_n {
        for l in 0..l_n {
            for ch in 0..d {
                mixed[i][ch] += wl_smoothed[l] * f_lp[l][i][ch];
            }
        }
    }
    let mut pooled = vec![0.0; d];
    for row in &mixed {
        for ch in 0..d {
            pooled[ch] += row[ch] / n_n as f64;
        }
    }
    let f_sem: Mat = mixed
        .iter()
        .map(|row| {
            let r: Vec<f64> = (0..d).map(|ch| row[ch] + pooled[ch]).collect();
            layer_norm(&r, p.lwca.gamma.data(), p.lwca.beta.data(), p.lwca.ln_eps)
        })
        .collect();

    // Patch gating.
    let q_p: Mat = ft.iter().map(|x| vecmat(x, &rows(&c.w_q_p))).collect();
    let wk_p = rows(&p.pwca.w_k);
    let w_p: Vec<f64> = f_sem
        .iter()
        .map(|row| weighted_score(&alpha, &q_p, &vecmat(row, &wk_p), s))
        .collect();
    let f_reg: Mat = (0..n_n)
        .map(|i| {
            let r: Vec<f64> = f_sem[i].iter().map(|v| v * (1.0 + w_p[i])).collect();
            layer_norm(&r, p.pwca.gamma.data(), p.pwca.beta.data(), p.pwca.ln_eps)
        })
        .collect();

    // Fusion, projection and pooled logits.
    let fused: Mat = (0..n_n)
        .map(|i| f_reg[i].iter().chain(&f[l_n - 1][i]).cloned().collect())
        .collect();
    let w_proj = rows(&p.w_proj);
    let projected: Mat = fused
        .iter()
        .map(|x| {
            vecmat(x, &w_proj)
                .iter()
                .zip(p.b_proj.data())
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    let text_proj = rows(&p.text_proj);
    let mut seq: Mat = ft.iter().map(|x| vecmat(x, &text_proj)).collect();
    seq.extend(projected.iter().cloned());
    let mut mean = vec![0.0; cfg.d_llm];
    for row in &seq {
        for j in 0..cfg.d_llm {
            mean[j] += row[j] / seq.len() as f64;
        }
    }
    let logits = vecmat(&mean, &rows(&p.w_dec));

    OracleTrace {
        alpha,
        w_lp,
        wl_raw,
        wl_smoothed,
        w_p,
        f_lp: f_lp.concat().concat(),
        f_semantic: f_sem.concat(),
        f_regional: f_reg.concat(),
        fused: fused.concat(),
        projected: projected.concat(),
        logits,
    }
}
