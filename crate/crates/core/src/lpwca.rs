//! Layer-patch-wise cross attention: one text-conditioned scalar gate for
//! every (layer, patch) token of the visual stack.

use crate::conditioning::{
    aggregate_scores_node, cross_scores_node, hidden_scale, token_importance_node,
    ConditioningParams, StageNodes, TextEmbeddings, TokenImportance,
};
use crate::error::{CcraError, Result};
use crate::numerics::{Graph, NodeId, Tensor, DEFAULT_LN_EPS};

/// Per-layer patch embeddings, each `N×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualStack {
    layers: Vec<Tensor>,
}

impl VisualStack {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or(CcraError::EmptyInput("VisualStack"))?
            .shape()
            .to_vec();
        if first.len() != 2 {
            return Err(CcraError::shape("VisualStack", &first, &[0, 0]));
        }
        for (index, layer) in layers.iter().enumerate().skip(1) {
            if layer.shape() != first.as_slice() {
                return Err(CcraError::InconsistentLayerShapes {
                    first,
                    index,
                    other: layer.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Splits an `L×N×d` tensor into layers.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [l, n, d] = t.shape() else {
            return Err(CcraError::shape(
                "VisualStack::from_tensor",
                t.shape(),
                &[0, 0, 0],
            ));
        };
        let (l, n, d) = (*l, *n, *d);
        let layers = (0..l)
            .map(|i| Tensor::new(&[n, d], t.data()[i * n * d..(i + 1) * n * d].to_vec()))
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn patch_count(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn width(&self) -> usize {
        self.layers[0].shape()[1]
    }

    pub fn last(&self) -> &Tensor {
        self.layers.last().expect("non-empty by construction")
    }

    /// The stack as a single `L×N×d` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .layers
            .iter()
            .flat_map(|l| l.data().iter().copied())
            .collect();
        Tensor::new(
            &[self.layer_count(), self.patch_count(), self.width()],
            data,
        )
        .expect("consistent by construction")
    }
}

/// All `L·N` patch-layer tokens, layer-major: token `(l, i)` is row `l·N + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedFeatures {
    tokens: Tensor,
    layers: usize,
    patches: usize,
}

impl StackedFeatures {
    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn patches(&self) -> usize {
        self.patches
    }
}

pub fn stack_layers(vs: &VisualStack) -> StackedFeatures {
    let (l, n, d) = (vs.layer_count(), vs.patch_count(), vs.width());
    let tokens = vs
        .to_tensor()
        .reshape(&[l * n, d])
        .expect("same element count");
    StackedFeatures {
        tokens,
        layers: l,
        patches: n,
    }
}

pub fn unstack_layers(fs: &StackedFeatures) -> Result<VisualStack> {
    let d = fs.tokens.shape()[1];
    VisualStack::from_tensor(&fs.tokens.reshape(&[fs.layers, fs.patches, d])?)
}

/// The `L×N` gate map.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPatchMap {
    weights: Tensor,
}

impl LayerPatchMap {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(CcraError::shape("LayerPatchMap", weights.shape(), &[0, 0]));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn at(&self, layer: usize, patch: usize) -> f64 {
        self.weights.at2(layer, patch)
    }
}

/// How the aggregated layer-patch scores become gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateNormalization {
    /// Scores gate the features as they are (may be negative).
    #[default]
    Raw,
    /// Scores are softmax-normalized over all `L·N` tokens first.
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpwcaParams {
    pub w_k: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Layer-norm epsilon; not learned.
    pub ln_eps: f64,
}

impl LpwcaParams {
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

/// Aggregated layer-patch scores `αᵀ·A_lp` as a flat `L·N` vector.
pub fn lpwca_map_node(
    g: &mut Graph,
    q: NodeId,
    stacked: NodeId,
    alpha: NodeId,
    w_k: NodeId,
    scale: f64,
) -> Result<NodeId> {
    let scores = cross_scores_node(g, q, stacked, w_k, scale)?;
    aggregate_scores_node(g, alpha, scores)
}

/// Gates each stacked token by its map value and applies the residual and
/// per-token layer norm: `LN(f·W_lp + f)`. Returns `(F_lp, gate)` where
/// `F_lp` is `(L·N)×d` and `gate` is the flat map actually applied.
#[allow(clippy::too_many_arguments)]
pub fn lpwca_node(
    g: &mut Graph,
    q: NodeId,
    stacked: NodeId,
    alpha: NodeId,
    p: &StageNodes,
    scale: f64,
    eps: f64,
    gate: GateNormalization,
) -> Result<(NodeId, NodeId)> {
    let raw = lpwca_map_node(g, q, stacked, alpha, p.w_k, scale)?;
    let w = match gate {
        GateNormalization::Raw => raw,
        GateNormalization::Softmax => g.softmax(raw)?,
    };
    let modulated = g.scale_rows(stacked, w)?;
    let residual = g.add(modulated, stacked)?;
    let f_lp = g.layer_norm(residual, p.gamma, p.beta, eps)?;
    Ok((f_lp, w))
}

/// `A_lp = (1/√d_hidden) · q · (F_stack·W_k)ᵀ`, shape `T×(L·N)`.
pub fn lpwca_scores(q: &Tensor, fs: &StackedFeatures, params: &LpwcaParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let qn = g.leaf(q.clone());
    let f = g.leaf(fs.tokens.clone());
    let w = g.leaf(params.w_k.clone());
    let s = cross_scores_node(&mut g, qn, f, w, hidden_scale(params.w_k.shape()[1]))?;
    Ok(g.value(s).clone())
}

/// `W_lp = αᵀ·A_lp` reshaped layer-major to `L×N`.
pub fn aggregate_map(
    alpha: &TokenImportance,
    scores: &Tensor,
    layers: usize,
    patches: usize,
) -> Result<LayerPatchMap> {
    let t = alpha.weights().len();
    if scores.shape() != [t, layers * patches] {
        return Err(CcraError::shape(
            "aggregate_map",
            scores.shape(),
            &[t, layers * patches],
        ));
    }
    let mut g = Graph::new();
    let a = g.leaf(alpha.weights().clone());
    let s = g.leaf(scores.clone());
    let flat = aggregate_scores_node(&mut g, a, s)?;
    Ok(LayerPatchMap {
        weights: g.value(flat).reshape(&[layers, patches])?,
    })
}

/// Full stage: token importance, layer-patch map, gated residual and layer
/// norm. Returns `F_lp` as `L×N×d` and the map that was applied.
pub fn lpwca_forward(
    text: &TextEmbeddings,
    vs: &VisualStack,
    cond: &ConditioningParams,
    params: &LpwcaParams,
) -> Result<(Tensor, LayerPatchMap)> {
    cond.validate(text.width())?;
    if vs.width() != text.width() {
        return Err(CcraError::shape(
            "lpwca_forward",
            text.tokens().shape(),
            vs.layers()[0].shape(),
        ));
    }
    let (l, n, d) = (vs.layer_count(), vs.patch_count(), vs.width());
    let scale = hidden_scale(cond.d_hidden());
    let mut g = Graph::new();
    let t = g.leaf(text.tokens().clone());
    let stacked = g.leaf(stack_layers(vs).tokens);
    let cn = cond.bind(&mut g);
    let pn = params.bind(&mut g);
    let alpha = token_importance_node(&mut g, t, &cn, scale)?;
    let q = g.matmul(t, cn.w_q_lp)?;
    let (f_lp, w) = lpwca_node(
        &mut g,
        q,
        stacked,
        alpha,
        &pn,
        scale,
        params.ln_eps,
        GateNormalization::Raw,
    )?;
    Ok((
        g.value(f_lp).reshape(&[l, n, d])?,
        LayerPatchMap {
            weights: g.value(w).reshape(&[l, n])?,
        },
    ))
}
