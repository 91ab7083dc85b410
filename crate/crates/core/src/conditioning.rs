//! Token importance weights and the text query projections shared by all
//! three attention stages.

use crate::error::{CcraError, Result};
use crate::numerics::{ops, Graph, NodeId, Tensor};

/// Query tokens `F_t`, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    tokens: Tensor,
}

impl TextEmbeddings {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(CcraError::shape("TextEmbeddings", tokens.shape(), &[0, 0]));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn token_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Softmax distribution over text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenImportance {
    weights: Tensor,
}

impl TokenImportance {
    /// Wraps weights that must already be nonnegative and sum to one.
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 1 {
            return Err(CcraError::shape("TokenImportance", weights.shape(), &[0]));
        }
        let total = weights.sum();
        if weights.data().iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(CcraError::InvalidArgument(format!(
                "token importance must be a probability vector (sum {total})"
            )));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }
}

/// Self-attention used for token importance plus the per-stage query
/// projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningParams {
    pub w_q_sa: Tensor,
    pub w_k_sa: Tensor,
    pub w_v_sa: Tensor,
    /// Reduces each contextualized token to a scalar logit.
    pub w_score: Tensor,
    pub w_q_lp: Tensor,
    pub w_q_l: Tensor,
    pub w_q_p: Tensor,
}

impl ConditioningParams {
    pub fn zeros(d: usize, d_hidden: usize) -> Self {
        let proj = || Tensor::zeros(&[d, d_hidden]);
        Self {
            w_q_sa: proj(),
            w_k_sa: proj(),
            w_v_sa: proj(),
            w_score: Tensor::zeros(&[d_hidden]),
            w_q_lp: proj(),
            w_q_l: proj(),
            w_q_p: proj(),
        }
    }

    pub fn d_hidden(&self) -> usize {
        self.w_score.len()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let dh = self.d_hidden();
        for w in [
            &self.w_q_sa,
            &self.w_k_sa,
            &self.w_v_sa,
            &self.w_q_lp,
            &self.w_q_l,
            &self.w_q_p,
        ] {
            if w.shape() != [d, dh] {
                return Err(CcraError::shape("ConditioningParams", w.shape(), &[d, dh]));
            }
        }
        if self.w_score.rank() != 1 {
            return Err(CcraError::shape(
                "ConditioningParams",
                self.w_score.shape(),
                &[dh],
            ));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph) -> ConditioningNodes {
        ConditioningNodes {
            w_q_sa: g.leaf(self.w_q_sa.clone()),
            w_k_sa: g.leaf(self.w_k_sa.clone()),
            w_v_sa: g.leaf(self.w_v_sa.clone()),
            w_score: g.leaf(self.w_score.clone()),
            w_q_lp: g.leaf(self.w_q_lp.clone()),
            w_q_l: g.leaf(self.w_q_l.clone()),
            w_q_p: g.leaf(self.w_q_p.clone()),
        }
    }
}

/// Graph handles for [`ConditioningParams`].
#[derive(Debug, Clone, Copy)]
pub struct ConditioningNodes {
    pub w_q_sa: NodeId,
    pub w_k_sa: NodeId,
    pub w_v_sa: NodeId,
    pub w_score: NodeId,
    pub w_q_lp: NodeId,
    pub w_q_l: NodeId,
    pub w_q_p: NodeId,
}

/// Graph handles for a stage's key projection and layer-norm affine.
#[derive(Debug, Clone, Copy)]
pub struct StageNodes {
    pub w_k: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
}

/// Default attention scale `1/√d_hidden`.
pub fn hidden_scale(d_hidden: usize) -> f64 {
    1.0 / (d_hidden as f64).sqrt()
}

/// `α = softmax(C·w_s)` where `C` is single-head scaled dot-product
/// self-attention over the tokens.
pub fn token_importance_node(
    g: &mut Graph,
    text: NodeId,
    p: &ConditioningNodes,
    scale: f64,
) -> Result<NodeId> {
    let q = g.matmul(text, p.w_q_sa)?;
    let k = g.matmul(text, p.w_k_sa)?;
    let v = g.matmul(text, p.w_v_sa)?;
    let kt = g.transpose(k)?;
    let qk = g.matmul(q, kt)?;
    let scores = g.scale(qk, scale);
    let attn = g.softmax(scores)?;
    let ctx = g.matmul(attn, v)?;

    let dh = g.value(p.w_score).len();
    let t = g.value(text).shape()[0];
    let w_col = g.reshape(p.w_score, &[dh, 1])?;
    let logits = g.matmul(ctx, w_col)?;
    let logits = g.reshape(logits, &[t])?;
    g.softmax(logits)
}

pub fn token_importance(
    text: &TextEmbeddings,
    params: &ConditioningParams,
) -> Result<TokenImportance> {
    params.validate(text.width())?;
    let mut g = Graph::new();
    let t = g.leaf(text.tokens().clone());
    let nodes = params.bind(&mut g);
    let alpha = token_importance_node(&mut g, t, &nodes, hidden_scale(params.d_hidden()))?;
    Ok(TokenImportance {
        weights: g.value(alpha).clone(),
    })
}

/// Scaled cross-attention scores `scale · q · (features · w_k)ᵀ`, one row per
/// text token and one column per key row.
pub fn cross_scores_node(
    g: &mut Graph,
    q: NodeId,
    features: NodeId,
    w_k: NodeId,
    scale: f64,
) -> Result<NodeId> {
    let keys = g.matmul(features, w_k)?;
    let kt = g.transpose(keys)?;
    let raw = g.matmul(q, kt)?;
    Ok(g.scale(raw, scale))
}

/// Token-importance weighted sum of score rows, `αᵀ·A`, as a vector.
pub fn aggregate_scores_node(g: &mut Graph, alpha: NodeId, scores: NodeId) -> Result<NodeId> {
    let t = g.value(alpha).len();
    let m = g.value(scores).as_matrix_dims().1;
    let row = g.reshape(alpha, &[1, t])?;
    let agg = g.matmul(row, scores)?;
    g.reshape(agg, &[m])
}

/// `Q = F_t · W`.
pub fn project_queries(text: &TextEmbeddings, w: &Tensor) -> Result<Tensor> {
    ops::matmul(text.tokens(), w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_params(d: usize, dh: usize, seed: u64) -> ConditioningParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConditioningParams {
            w_q_sa: random(&[d, dh], &mut rng),
            w_k_sa: random(&[d, dh], &mut rng),
            w_v_sa: random(&[d, dh], &mut rng),
            w_score: random(&[dh], &mut rng),
            w_q_lp: random(&[d, dh], &mut rng),
            w_q_l: random(&[d, dh], &mut rng),
            w_q_p: random(&[d, dh], &mut rng),
        }
    }

    fn text(rows: &[Vec<f64>]) -> TextEmbeddings {
        TextEmbeddings::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn single_token_gets_all_weight() {
        let p = random_params(3, 2, 1);
        let a = token_importance(&text(&[vec![0.3, -1.0, 2.0]]), &p).unwrap();
        assert_eq!(a.weights().data(), &[1.0]);
    }

    #[test]
    fn identical_tokens_are_uniform() {
        let p = random_params(2, 4, 2);
        let row = vec![0.7, -0.2];
        let a = token_importance(&text(&[row.clone(), row.clone(), row]), &p).unwrap();
        for w in a.weights().data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_two_token_case() {
        // d=2, d_hidden=1. Scalar-arithmetic oracle of the five steps.
        let p = ConditioningParams {
            w_q_sa: Tensor::new(&[2, 1], vec![1.0, 0.5]).unwrap(),
            w_k_sa: Tensor::new(&[2, 1], vec![-1.0, 2.0]).unwrap(),
            w_v_sa: Tensor::new(&[2, 1], vec![0.5, 1.0]).unwrap(),
            w_score: Tensor::vector(vec![2.0]).unwrap(),
            ..ConditioningParams::zeros(2, 1)
        };
        let f = [[1.0, 0.0], [0.0, 1.0]];
        let q: [f64; 2] = [1.0, 0.5];
        let k: [f64; 2] = [-1.0, 2.0];
        let v = [0.5, 1.0];
        let mut ctx = [0.0; 2];
        for i in 0..2 {
            let s0 = q[i] * k[0];
            let s1 = q[i] * k[1];
            let (e0, e1) = (s0.exp(), s1.exp());
            ctx[i] = (e0 * v[0] + e1 * v[1]) / (e0 + e1);
        }
        let (l0, l1) = (2.0 * ctx[0], 2.0 * ctx[1]);
        let a0 = l0.exp() / (l0.exp() + l1.exp());
        let a = token_importance(&text(&[f[0].to_vec(), f[1].to_vec()]), &p).unwrap();
        assert!((a.weights().data()[0] - a0).abs() < 1e-14);
        assert!((a.weights().data()[1] - (1.0 - a0)).abs() < 1e-14);
    }

    #[test]
    fn permutation_equivariance() {
        let p = random_params(3, 4, 3);
        let rows = vec![
            vec![0.1, 0.9, -0.4],
            vec![-1.2, 0.3, 0.8],
            vec![0.5, 0.5, 0.0],
        ];
        let a = token_importance(&text(&rows), &p).unwrap();
        let perm = [2, 0, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let b = token_importance(&text(&permuted), &p).unwrap();
        for (pos, &src) in perm.iter().enumerate() {
            assert!((b.weights().data()[pos] - a.weights().data()[src]).abs() < 1e-14);
        }
    }

    #[test]
    fn score_scaling_preserves_argmax() {
        let mut p = random_params(3, 5, 4);
        let rows = vec![
            vec![1.0, -0.5, 0.2],
            vec![0.0, 0.4, -1.1],
            vec![0.7, 0.7, 0.7],
        ];
        let base = token_importance(&text(&rows), &p).unwrap();
        p.w_score = p.w_score.map(|v| v * 3.7);
        let scaled = token_importance(&text(&rows), &p).unwrap();
        assert_ne!(base, scaled);
        assert_eq!(base.weights().argmax(), scaled.weights().argmax());
    }

    #[test]
    fn importance_gradient_matches_finite_differences() {
        let p = random_params(3, 2, 5);
        let tokens = Tensor::from_rows(&[vec![0.2, -0.7, 1.1], vec![0.9, 0.1, -0.3]]).unwrap();
        let weights = Tensor::vector(vec![1.5, -0.8]).unwrap();
        let loss = |w_k: &Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let t = g.leaf(tokens.clone());
            let nodes = ConditioningParams {
                w_k_sa: w_k.clone(),
                ..p.clone()
            }
            .bind(&mut g);
            let a = token_importance_node(&mut g, t, &nodes, hidden_scale(2))?;
            Ok(ops::mul(g.value(a), &weights)?.sum())
        };
        let mut g = Graph::new();
        let t = g.leaf(tokens.clone());
        let nodes = p.bind(&mut g);
        let a = token_importance_node(&mut g, t, &nodes, hidden_scale(2)).unwrap();
        let w = g.leaf(weights.clone());
        let prod = g.mul(a, w).unwrap();
        let out = g.sum(prod);
        let analytic = g.backward(out).unwrap().wrt(nodes.w_k_sa);
        let numeric = finite_difference(loss, &p.w_k_sa, 1e-5).unwrap();
        assert!(analytic.max_abs_diff(&numeric).unwrap() < 1e-9);
    }

    #[test]
    fn project_queries_examples() {
        let t = text(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert_eq!(
            project_queries(&t, &Tensor::zeros(&[2, 3])).unwrap(),
            Tensor::zeros(&[2, 3])
        );
        assert_eq!(
            project_queries(&t, &Tensor::identity(2)).unwrap(),
            *t.tokens()
        );
        let one = text(&[vec![2.0, 3.0]]);
        let w = Tensor::new(&[2, 1], vec![4.0, -1.0]).unwrap();
        assert_eq!(project_queries(&one, &w).unwrap().data(), &[5.0]);
        assert!(project_queries(&one, &Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn mismatched_params_rejected() {
        let p = random_params(4, 2, 6);
        let r = token_importance(&text(&[vec![1.0, 2.0]]), &p);
        assert!(matches!(r, Err(CcraError::ShapeMismatch { .. })));
    }
}
