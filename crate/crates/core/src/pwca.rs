//! Patch-wise cross attention: one text-conditioned gate per patch of the
//! semantically aggregated features.

use crate::conditioning::{
    aggregate_scores_node, cross_scores_node, hidden_scale, StageNodes, TokenImportance,
};
use crate::error::{CcraError, Result};
use crate::numerics::{Graph, NodeId, Tensor, DEFAULT_LN_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchWeights {
    weights: Tensor,
}

impl PatchWeights {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 1 {
            return Err(CcraError::shape("PatchWeights", weights.shape(), &[0]));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PwcaParams {
    pub w_k: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub ln_eps: f64,
}

impl PwcaParams {
    pub fn identity(d: usize, d_hidden: usize) -> Self {
        Self {
            w_k: Tensor::zeros(&[d, d_hidden]),
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> StageNodes {
        StageNodes {
            w_k: g.leaf(self.w_k.clone()),
            gamma: g.leaf(self.gamma.clone()),
            beta: g.leaf(self.beta.clone()),
        }
    }
}

/// `w_p = αᵀ·A_p`, with keys computed from `features`.
pub fn patch_weights_node(
    g: &mut Graph,
    q: NodeId,
    features: NodeId,
    alpha: NodeId,
    w_k: NodeId,
    scale: f64,
) -> Result<NodeId> {
    let scores = cross_scores_node(g, q, features, w_k, scale)?;
    aggregate_scores_node(g, alpha, scores)
}

/// `LN(f ⊙ (1 + w_p))`, row `i` scaled by `1 + w_p[i]`. There is no separate
/// residual term.
pub fn regional_node(
    g: &mut Graph,
    features: NodeId,
    wp: NodeId,
    p: &StageNodes,
    eps: f64,
) -> Result<NodeId> {
    let gate = g.add_scalar(wp, 1.0);
    let gated = g.scale_rows(features, gate)?;
    g.layer_norm(gated, p.gamma, p.beta, eps)
}

pub fn patch_weights(
    q: &Tensor,
    f_sem: &Tensor,
    alpha: &TokenImportance,
    params: &PwcaParams,
) -> Result<PatchWeights> {
    let mut g = Graph::new();
    let qn = g.leaf(q.clone());
    let f = g.leaf(f_sem.clone());
    let a = g.leaf(alpha.weights().clone());
    let w = g.leaf(params.w_k.clone());
    let out = patch_weights_node(&mut g, qn, f, a, w, hidden_scale(params.w_k.shape()[1]))?;
    PatchWeights::new(g.value(out).clone())
}

pub fn regional_modulate(f_sem: &Tensor, wp: &PatchWeights, params: &PwcaParams) -> Result<Tensor> {
    let (n, _) = f_sem.as_matrix_dims();
    if f_sem.rank() != 2 || wp.weights.len() != n {
        return Err(CcraError::shape(
            "regional_modulate",
            f_sem.shape(),
            wp.weights.shape(),
        ));
    }
    let mut g = Graph::new();
    let f = g.leaf(f_sem.clone());
    let w = g.leaf(wp.weights.clone());
    let nodes = params.bind(&mut g);
    let out = regional_node(&mut g, f, w, &nodes, params.ln_eps)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference, layer_norm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn alpha(weights: &[f64]) -> TokenImportance {
        TokenImportance::new(Tensor::vector(weights.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn patch_weight_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = PwcaParams {
            w_k: random(&[2, 3], &mut rng),
            ..PwcaParams::identity(2, 3)
        };
        let f = random(&[4, 2], &mut rng);
        let a = alpha(&[0.5, 0.5]);
        let zero = patch_weights(&Tensor::zeros(&[2, 3]), &f, &a, &params).unwrap();
        assert_eq!(zero.weights(), &Tensor::zeros(&[4]));

        let same = Tensor::from_rows(&vec![vec![0.4, -0.9]; 4]).unwrap();
        let wp = patch_weights(&random(&[2, 3], &mut rng), &same, &a, &params).unwrap();
        assert!(wp
            .weights()
            .data()
            .iter()
            .all(|&v| v == wp.weights().data()[0]));
    }

    #[test]
    fn patch_weights_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, n, d, dh) = (2, 3, 4, 2);
        let params = PwcaParams {
            w_k: random(&[d, dh], &mut rng),
            ..PwcaParams::identity(d, dh)
        };
        let f = random(&[n, d], &mut rng);
        let q = random(&[t, dh], &mut rng);
        let a = alpha(&[0.8, 0.2]);
        let got = patch_weights(&q, &f, &a, &params).unwrap();
        for i in 0..n {
            let mut expected = 0.0;
            for tok in 0..t {
                for h in 0..dh {
                    let key: f64 = (0..d).map(|c| f.at2(i, c) * params.w_k.at2(c, h)).sum();
                    expected += a.weights().data()[tok] * q.at2(tok, h) * key;
                }
            }
            expected /= (dh as f64).sqrt();
            assert!((got.weights().data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn neutral_gate_is_rowwise_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(&[3, 4], &mut rng);
        let params = PwcaParams {
            gamma: random(&[4], &mut rng),
            beta: random(&[4], &mut rng),
            ..PwcaParams::identity(4, 2)
        };
        let wp = PatchWeights::new(Tensor::zeros(&[3])).unwrap();
        let out = regional_modulate(&f, &wp, &params).unwrap();
        assert_eq!(
            out,
            layer_norm(&f, &params.gamma, &params.beta, params.ln_eps).unwrap()
        );
    }

    #[test]
    fn gate_of_minus_one_yields_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random(&[3, 2], &mut rng);
        let params = PwcaParams {
            beta: Tensor::vector(vec![0.3, -0.7]).unwrap(),
            ..PwcaParams::identity(2, 1)
        };
        let wp = PatchWeights::new(Tensor::vector(vec![0.2, -1.0, 0.0]).unwrap()).unwrap();
        let out = regional_modulate(&f, &wp, &params).unwrap();
        assert_eq!(out.row(1), &[0.3, -0.7]);
    }

    #[test]
    fn regional_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (3, 2);
        let f = random(&[n, d], &mut rng);
        let wp = PatchWeights::new(random(&[n], &mut rng)).unwrap();
        let params = PwcaParams {
            gamma: random(&[d], &mut rng),
            beta: random(&[d], &mut rng),
            ..PwcaParams::identity(d, 1)
        };
        let out = regional_modulate(&f, &wp, &params).unwrap();
        for i in 0..n {
            let x: Vec<f64> = (0..d)
                .map(|c| f.at2(i, c) * (1.0 + wp.weights().data()[i]))
                .collect();
            let mu = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            for c in 0..d {
                let e = params.gamma.data()[c] * (x[c] - mu) / (var + params.ln_eps).sqrt()
                    + params.beta.data()[c];
                assert!((out.at2(i, c) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positive_row_scaling_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random(&[4, 5], &mut rng);
        let wp = PatchWeights::new(Tensor::vector(vec![0.5, -0.3, 2.0, 0.9]).unwrap()).unwrap();
        let params = PwcaParams {
            ln_eps: 1e-12,
            ..PwcaParams::identity(5, 2)
        };
        let base = regional_modulate(&f, &wp, &params).unwrap();
        for c in [0.1, 3.0, 17.0] {
            let scaled = regional_modulate(&f.map(|v| v * c), &wp, &params).unwrap();
            assert!(base.max_abs_diff(&scaled).unwrap() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let wp = PatchWeights::new(Tensor::zeros(&[2])).unwrap();
        let r = regional_modulate(&Tensor::zeros(&[3, 2]), &wp, &PwcaParams::identity(2, 1));
        assert!(matches!(r, Err(CcraError::ShapeMismatch { .. })));
    }

    #[test]
    fn regional_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random(&[3, 4], &mut rng);
        let wp = random(&[3], &mut rng);
        let params = PwcaParams {
            gamma: random(&[4], &mut rng),
            beta: random(&[4], &mut rng),
            ..PwcaParams::identity(4, 1)
        };
        let probe = random(&[3, 4], &mut rng);
        let loss = |wp: &Tensor| -> Result<f64> {
            let out = regional_modulate(&f, &PatchWeights::new(wp.clone())?, &params)?;
            Ok(crate::numerics::ops::mul(&out, &probe)?.sum())
        };
        let mut g = Graph::new();
        let fn_ = g.leaf(f.clone());
        let wn = g.leaf(wp.clone());
        let nodes = params.bind(&mut g);
        let out = regional_node(&mut g, fn_, wn, &nodes, params.ln_eps).unwrap();
        let pr = g.leaf(probe.clone());
        let m = g.mul(out, pr).unwrap();
        let s = g.sum(m);
        let analytic = g.backward(s).unwrap().wrt(wn);
        let numeric = finite_difference(loss, &wp, 1e-5).unwrap();
        assert!(analytic.max_abs_diff(&numeric).unwrap() < 1e-8);
    }

    #[test]
    fn output_shape_equals_input_shape() {
        for (n, d) in [(1, 1), (4, 3), (9, 2)] {
            let f = Tensor::ones(&[n, d]);
            let wp = PatchWeights::new(Tensor::zeros(&[n])).unwrap();
            let out = regional_modulate(&f, &wp, &PwcaParams::identity(d, 1)).unwrap();
            assert_eq!(out.shape(), &[n, d]);
        }
    }
}
