//! Layer-wise cross attention with Gaussian smoothing across depth.
//!
//! Layers are summarized by their spatial mean, scored against the text, turned
//! into a distribution over layers and smoothed with a normalized Gaussian so
//! adjacent layers receive similar weight. The smoothed distribution then mixes
//! the layer features into a single `N×d` map.

use crate::conditioning::{
    aggregate_scores_node, cross_scores_node, hidden_scale, StageNodes, TokenImportance,
};
use crate::error::{CcraError, Result};
use crate::numerics::{gaussian_kernel, Graph, NodeId, Tensor, DEFAULT_LN_EPS};

/// Spatial means of each layer, `L×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDescriptors {
    descriptors: Tensor,
}

impl LayerDescriptors {
    pub fn new(descriptors: Tensor) -> Result<Self> {
        if descriptors.rank() != 2 {
            return Err(CcraError::shape(
                "LayerDescriptors",
                descriptors.shape(),
                &[0, 0],
            ));
        }
        Ok(Self { descriptors })
    }

    pub fn descriptors(&self) -> &Tensor {
        &self.descriptors
    }
}

/// Raw and smoothed per-layer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub raw: Tensor,
    pub smoothed: Tensor,
    pub k: usize,
    pub sigma: f64,
}

/// Where the softmax sits relative to the smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmoothingOrder {
    /// `conv(softmax(w))`: smoothing a distribution keeps it a distribution.
    #[default]
    SoftmaxThenSmooth,
    /// `softmax(conv(w))`: smooth the logits, then normalize.
    SmoothThenSoftmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LwcaParams {
    pub w_k: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub ln_eps: f64,
}

impl LwcaParams {
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

/// Default kernel width for a kernel of size `k`.
pub fn default_sigma(k: usize) -> f64 {
    k as f64 / 3.0
}

/// Per-layer spatial means of `(L·N)×d` stacked features, giving `L×d`.
pub fn descriptors_node(g: &mut Graph, stacked: NodeId, layers: usize) -> Result<NodeId> {
    let rows = g.value(stacked).shape()[0];
    if layers == 0 || rows % layers != 0 {
        return Err(CcraError::shape(
            "layer_descriptors",
            g.value(stacked).shape(),
            &[layers],
        ));
    }
    let n = rows / layers;
    let means = (0..layers)
        .map(|l| {
            let layer = g.slice_rows(stacked, l * n, n)?;
            g.mean_rows(layer)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&means)
}

pub fn smooth_node(
    g: &mut Graph,
    raw: NodeId,
    kernel: &Tensor,
    order: SmoothingOrder,
) -> Result<NodeId> {
    match order {
        SmoothingOrder::SoftmaxThenSmooth => {
            let p = g.softmax(raw)?;
            g.conv1d_reflect(p, kernel)
        }
        SmoothingOrder::SmoothThenSoftmax => {
            let s = g.conv1d_reflect(raw, kernel)?;
            g.softmax(s)
        }
    }
}

/// `Σ_l w_l·F[l]` over the layers of `(L·N)×d` stacked features, giving `N×d`.
pub fn mix_layers_node(g: &mut Graph, stacked: NodeId, weights: NodeId) -> Result<NodeId> {
    let layers = g.value(weights).len();
    let (rows, d) = g.value(stacked).as_matrix_dims();
    if layers == 0 || rows % layers != 0 || g.value(weights).rank() != 1 {
        return Err(CcraError::shape(
            "mix_layers",
            g.value(stacked).shape(),
            g.value(weights).shape(),
        ));
    }
    let n = rows / layers;
    let by_layer = g.reshape(stacked, &[layers, n * d])?;
    let w_row = g.reshape(weights, &[1, layers])?;
    let mixed = g.matmul(w_row, by_layer)?;
    g.reshape(mixed, &[n, d])
}

/// `F̂ = Σ_l ŵ_l·F_lp[l]` followed by `LN(F̂ + mean_patches(F̂))`.
pub fn semantic_node(
    g: &mut Graph,
    stacked: NodeId,
    smoothed: NodeId,
    p: &StageNodes,
    eps: f64,
) -> Result<NodeId> {
    let mixed = mix_layers_node(g, stacked, smoothed)?;
    let pooled = g.mean_rows(mixed)?;
    let residual = g.add_row_vector(mixed, pooled)?;
    g.layer_norm(residual, p.gamma, p.beta, eps)
}

fn stacked_from_lnd(f_lp: &Tensor) -> Result<(Tensor, usize, usize, usize)> {
    let [l, n, d] = f_lp.shape() else {
        return Err(CcraError::shape("lwca", f_lp.shape(), &[0, 0, 0]));
    };
    let (l, n, d) = (*l, *n, *d);
    Ok((f_lp.reshape(&[l * n, d])?, l, n, d))
}

pub fn layer_descriptors(f_lp: &Tensor) -> Result<LayerDescriptors> {
    let (stacked, l, _, _) = stacked_from_lnd(f_lp)?;
    let mut g = Graph::new();
    let s = g.leaf(stacked);
    let out = descriptors_node(&mut g, s, l)?;
    LayerDescriptors::new(g.value(out).clone())
}

/// Raw layer scores `w_l = αᵀ·A_l` with `A_l = (1/√d_hidden)·q·(F_layer·W_k)ᵀ`.
pub fn layer_weights(
    q: &Tensor,
    ld: &LayerDescriptors,
    alpha: &TokenImportance,
    params: &LwcaParams,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let qn = g.leaf(q.clone());
    let f = g.leaf(ld.descriptors.clone());
    let w = g.leaf(params.w_k.clone());
    let a = g.leaf(alpha.weights().clone());
    let scores = cross_scores_node(&mut g, qn, f, w, hidden_scale(params.w_k.shape()[1]))?;
    let out = aggregate_scores_node(&mut g, a, scores)?;
    Ok(g.value(out).clone())
}

/// `ŵ = conv1d_reflect(softmax(w), gaussian_kernel(k, σ))`.
pub fn smooth_layer_weights(w: &Tensor, k: usize, sigma: f64) -> Result<LayerWeights> {
    smooth_layer_weights_with(w, k, sigma, SmoothingOrder::SoftmaxThenSmooth)
}

pub fn smooth_layer_weights_with(
    w: &Tensor,
    k: usize,
    sigma: f64,
    order: SmoothingOrder,
) -> Result<LayerWeights> {
    if w.rank() != 1 {
        return Err(CcraError::shape("smooth_layer_weights", w.shape(), &[0]));
    }
    let kernel = gaussian_kernel(k, sigma)?;
    let mut g = Graph::new();
    let raw = g.leaf(w.clone());
    let out = smooth_node(&mut g, raw, &kernel, order)?;
    Ok(LayerWeights {
        raw: w.clone(),
        smoothed: g.value(out).clone(),
        k,
        sigma,
    })
}

pub fn semantic_aggregate(f_lp: &Tensor, wl: &LayerWeights, params: &LwcaParams) -> Result<Tensor> {
    let (stacked, l, _, _) = stacked_from_lnd(f_lp)?;
    if wl.smoothed.shape() != [l] {
        return Err(CcraError::shape(
            "semantic_aggregate",
            f_lp.shape(),
            wl.smoothed.shape(),
        ));
    }
    let mut g = Graph::new();
    let s = g.leaf(stacked);
    let w = g.leaf(wl.smoothed.clone());
    let nodes = params.bind(&mut g);
    let out = semantic_node(&mut g, s, w, &nodes, params.ln_eps)?;
    Ok(g.value(out).clone())
}

/// Discrete total variation `Σ |v[i+1] − v[i]|`.
pub fn total_variation(v: &Tensor) -> f64 {
    v.data().windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}
