use crate::conditioning::{
    aggregate_scores_node, cross_scores_node, token_importance_node, TextEmbeddings,
    TokenImportance,
};
use crate::error::{CcraError, Result, StageContext};
use crate::lpwca::{lpwca_node, stack_layers, LayerPatchMap, VisualStack};
use crate::lwca::{descriptors_node, mix_layers_node, semantic_node, smooth_node, LayerWeights};
use crate::numerics::{gaussian_kernel, ops, Graph, NodeId, Tensor};
use crate::pwca::{patch_weights_node, regional_node, PatchWeights};

use super::config::{CcraConfig, Variant};
use super::params::{CcraParams, ParamNodes};

/// `F_fused` and its projection into decoder width.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    /// `N×2d`: the stage output then the last visual layer, per row.
    pub tokens: Tensor,
    /// `N×d_llm`.
    pub projected: Tensor,
}

/// Every intermediate map of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub variant: Variant,
    pub alpha: TokenImportance,
    pub w_lp: LayerPatchMap,
    pub layer_weights: LayerWeights,
    pub w_p: PatchWeights,
    /// `L×N×d`.
    pub f_lp: Tensor,
    pub f_semantic: Tensor,
    /// The features fused with the last layer.
    pub f_regional: Tensor,
    pub fused: FusedFeatures,
    pub logits: Tensor,
}

/// Handles of every trace quantity inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct TraceNodes {
    pub alpha: NodeId,
    /// Flat `L·N`.
    pub w_lp: NodeId,
    pub wl_raw: NodeId,
    pub wl_smoothed: NodeId,
    pub w_p: NodeId,
    /// `(L·N)×d`.
    pub f_lp: NodeId,
    pub f_semantic: NodeId,
    pub f_regional: NodeId,
    pub fused: NodeId,
    pub projected: NodeId,
    pub logits: NodeId,
}

/// `[f_reg | f_last]` per row.
pub fn fuse(f_reg: &Tensor, f_last: &Tensor) -> Result<Tensor> {
    if f_reg.shape() != f_last.shape() {
        return Err(CcraError::shape("fuse", f_reg.shape(), f_last.shape()));
    }
    ops::concat_cols(f_reg, f_last)
}

/// `fused·W_proj + b_proj`.
pub fn project_visual(fused: &Tensor, params: &CcraParams) -> Result<Tensor> {
    ops::add_row_vector(&ops::matmul(fused, &params.w_proj)?, &params.b_proj)
}

fn check_inputs(text: &TextEmbeddings, vs: &VisualStack, cfg: &CcraConfig) -> Result<()> {
    cfg.validate()?;
    if text.width() != cfg.d || text.token_count() != cfg.tokens {
        return Err(CcraError::shape(
            "text input",
            text.tokens().shape(),
            &[cfg.tokens, cfg.d],
        ));
    }
    let got = [vs.layer_count(), vs.patch_count(), vs.width()];
    if got != [cfg.layers, cfg.patches, cfg.d] {
        return Err(CcraError::shape(
            "visual input",
            &got,
            &[cfg.layers, cfg.patches, cfg.d],
        ));
    }
    Ok(())
}

/// Raw and smoothed layer scores over the layers of `stacked`.
#[allow(clippy::too_many_arguments)]
fn layer_scores(
    g: &mut Graph,
    q: NodeId,
    stacked: NodeId,
    alpha: NodeId,
    w_k: NodeId,
    layers: usize,
    scale: f64,
    kernel: &Tensor,
    cfg: &CcraConfig,
) -> Result<(NodeId, NodeId)> {
    let desc = descriptors_node(g, stacked, layers)?;
    let scores = cross_scores_node(g, q, desc, w_k, scale)?;
    let raw = aggregate_scores_node(g, alpha, scores)?;
    let smoothed = smooth_node(g, raw, kernel, cfg.smoothing)?;
    Ok((raw, smoothed))
}

/// Records one forward pass of `variant` into `g`.
pub fn build_forward(
    g: &mut Graph,
    text: NodeId,
    stacked: NodeId,
    p: &ParamNodes,
    cfg: &CcraConfig,
    variant: Variant,
) -> Result<TraceNodes> {
    let (l, n) = (cfg.layers, cfg.patches);
    let scale = cfg.score_scale_value();
    let [eps_lp, eps_l, eps_p] = p.eps;
    let kernel = gaussian_kernel(cfg.k, cfg.sigma())?;
    let c = &p.conditioning;

    let alpha = token_importance_node(g, text, c, scale).stage("token importance")?;
    let q_lp = g.matmul(text, c.w_q_lp)?;
    let q_l = g.matmul(text, c.w_q_l)?;
    let q_p = g.matmul(text, c.w_q_p)?;

    let uniform = |g: &mut Graph| g.leaf(Tensor::full(&[l], 1.0 / l as f64));

    let stages = match variant {
        Variant::Pai => {
            let (f_lp, w_lp) =
                lpwca_node(g, q_lp, stacked, alpha, &p.lpwca, scale, eps_lp, cfg.gate)
                    .stage("lpwca")?;
            let (wl_raw, wl_smoothed, f_sem) = (|| {
                let (raw, sm) =
                    layer_scores(g, q_l, f_lp, alpha, p.lwca.w_k, l, scale, &kernel, cfg)?;
                Ok::<_, CcraError>((raw, sm, semantic_node(g, f_lp, sm, &p.lwca, eps_l)?))
            })()
            .stage("lwca")?;
            let (w_p, f_reg) = (|| {
                let w_p = patch_weights_node(g, q_p, f_sem, alpha, p.pwca.w_k, scale)?;
                Ok::<_, CcraError>((w_p, regional_node(g, f_sem, w_p, &p.pwca, eps_p)?))
            })()
            .stage("pwca")?;
            (w_lp, f_lp, wl_raw, wl_smoothed, f_sem, w_p, f_reg)
        }
        Variant::Decoupled => {
            let w_lp = g.leaf(Tensor::zeros(&[l * n]));
            let (wl_raw, wl_smoothed, f_sem) = (|| {
                let (raw, sm) =
                    layer_scores(g, q_l, stacked, alpha, p.lwca.w_k, l, scale, &kernel, cfg)?;
                Ok::<_, CcraError>((raw, sm, semantic_node(g, stacked, sm, &p.lwca, eps_l)?))
            })()
            .stage("lwca")?;
            let (w_p, f_patch) = (|| {
                let keys = mix_layers_node(g, stacked, wl_smoothed)?;
                let u = uniform(g);
                let mean = mix_layers_node(g, stacked, u)?;
                let w_p = patch_weights_node(g, q_p, keys, alpha, p.pwca.w_k, scale)?;
                Ok::<_, CcraError>((w_p, regional_node(g, mean, w_p, &p.pwca, eps_p)?))
            })()
            .stage("pwca")?;
            let sum = g.add(f_sem, f_patch)?;
            let f_reg = g.scale(sum, 0.5);
            (w_lp, stacked, wl_raw, wl_smoothed, f_sem, w_p, f_reg)
        }
        Variant::Shuffled => {
            let (f_lp, w_lp) =
                lpwca_node(g, q_lp, stacked, alpha, &p.lpwca, scale, eps_lp, cfg.gate)
                    .stage("lpwca")?;
            let (w_p, gated, f_patch) = (|| {
                let u = uniform(g);
                let mean = mix_layers_node(g, f_lp, u)?;
                let w_p = patch_weights_node(g, q_p, mean, alpha, p.pwca.w_k, scale)?;
                let col = g.reshape(w_p, &[n, 1])?;
                let tiled = g.concat_rows(&vec![col; l])?;
                let tiled = g.reshape(tiled, &[l * n])?;
                let gated = regional_node(g, f_lp, tiled, &p.pwca, eps_p)?;
                let u = uniform(g);
                Ok::<_, CcraError>((w_p, gated, mix_layers_node(g, gated, u)?))
            })()
            .stage("pwca")?;
            let (wl_raw, wl_smoothed, f_reg) = (|| {
                let (raw, sm) =
                    layer_scores(g, q_l, gated, alpha, p.lwca.w_k, l, scale, &kernel, cfg)?;
                Ok::<_, CcraError>((raw, sm, semantic_node(g, gated, sm, &p.lwca, eps_l)?))
            })()
            .stage("lwca")?;
            (w_lp, f_lp, wl_raw, wl_smoothed, f_patch, w_p, f_reg)
        }
    };
    let (w_lp, f_lp, wl_raw, wl_smoothed, f_semantic, w_p, f_regional) = stages;

    let (fused, projected, logits) = (|| {
        let f_last = g.slice_rows(stacked, (l - 1) * n, n)?;
        let fused = g.concat_cols(f_regional, f_last)?;
        let lin = g.matmul(fused, p.w_proj)?;
        let projected = g.add_row_vector(lin, p.b_proj)?;
        let text_llm = g.matmul(text, p.text_proj)?;
        let seq = g.concat_rows(&[text_llm, projected])?;
        let pooled = g.mean_rows(seq)?;
        let d_llm = g.value(pooled).len();
        let row = g.reshape(pooled, &[1, d_llm])?;
        let logits = g.matmul(row, p.w_dec)?;
        let vocab = g.value(logits).len();
        Ok::<_, CcraError>((fused, projected, g.reshape(logits, &[vocab])?))
    })()
    .stage("fusion")?;

    Ok(TraceNodes {
        alpha,
        w_lp,
        wl_raw,
        wl_smoothed,
        w_p,
        f_lp,
        f_semantic,
        f_regional,
        fused,
        projected,
        logits,
    })
}

/// A recorded forward pass: the graph, its parameter leaves and trace nodes.
pub struct Recorded {
    pub graph: Graph,
    pub params: ParamNodes,
    pub trace: TraceNodes,
}

/// Records a forward pass after checking inputs and params against `cfg`.
pub fn record_forward(
    text: &TextEmbeddings,
    vs: &VisualStack,
    params: &CcraParams,
    cfg: &CcraConfig,
    variant: Variant,
) -> Result<Recorded> {
    check_inputs(text, vs, cfg)?;
    params.validate(cfg)?;
    let mut graph = Graph::new();
    let t = graph.leaf(text.tokens().clone());
    let s = graph.leaf(stack_layers(vs).tokens().clone());
    let nodes = params.bind(&mut graph);
    let trace = build_forward(&mut graph, t, s, &nodes, cfg, variant)?;
    Ok(Recorded {
        graph,
        params: nodes,
        trace,
    })
}

fn extract(g: &Graph, n: &TraceNodes, cfg: &CcraConfig, variant: Variant) -> Result<ForwardTrace> {
    let (l, p, d) = (cfg.layers, cfg.patches, cfg.d);
    Ok(ForwardTrace {
        variant,
        alpha: TokenImportance::new(g.value(n.alpha).clone())?,
        w_lp: LayerPatchMap::new(g.value(n.w_lp).reshape(&[l, p])?)?,
        layer_weights: LayerWeights {
            raw: g.value(n.wl_raw).clone(),
            smoothed: g.value(n.wl_smoothed).clone(),
            k: cfg.k,
            sigma: cfg.sigma(),
        },
        w_p: PatchWeights::new(g.value(n.w_p).clone())?,
        f_lp: g.value(n.f_lp).reshape(&[l, p, d])?,
        f_semantic: g.value(n.f_semantic).clone(),
        f_regional: g.value(n.f_regional).clone(),
        fused: FusedFeatures {
            tokens: g.value(n.fused).clone(),
            projected: g.value(n.projected).clone(),
        },
        logits: g.value(n.logits).clone(),
    })
}

/// The full pipeline in its default order.
pub fn ccra_forward(
    text: &TextEmbeddings,
    vs: &VisualStack,
    params: &CcraParams,
    cfg: &CcraConfig,
) -> Result<ForwardTrace> {
    variant_forward(Variant::Pai, text, vs, params, cfg)
}

pub fn variant_forward(
    mode: Variant,
    text: &TextEmbeddings,
    vs: &VisualStack,
    params: &CcraParams,
    cfg: &CcraConfig,
) -> Result<ForwardTrace> {
    let rec = record_forward(text, vs, params, cfg, mode)?;
    extract(&rec.graph, &rec.trace, cfg, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layer_norm;
    use crate::pipeline::synth::synth_inputs;

    fn setup(cfg: &CcraConfig) -> (TextEmbeddings, VisualStack, CcraParams) {
        let (text, vs, _) = synth_inputs(cfg, 11).unwrap();
        (text, vs, CcraParams::init(cfg).unwrap())
    }

    #[test]
    fn fuse_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let f = fuse(&a, &a).unwrap();
        assert_eq!(f.row(1), &[3.0, 4.0, 3.0, 4.0]);
        let f = fuse(
            &Tensor::new(&[1, 1], vec![5.0]).unwrap(),
            &Tensor::new(&[1, 1], vec![6.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(f.data(), &[5.0, 6.0]);
        assert!(fuse(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn project_examples() {
        let cfg = CcraConfig {
            d_llm: 4,
            ..CcraConfig::with_dims(2, 3, 2, 1, 1)
        };
        let mut p = CcraParams::init(&cfg).unwrap();
        let fused = Tensor::from_rows(&vec![vec![0.5, -1.0, 2.0, 0.25]; 3]).unwrap();
        p.w_proj = Tensor::zeros(&[4, 4]);
        p.b_proj = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = project_visual(&fused, &p).unwrap();
        assert!((0..3).all(|i| out.row(i) == [1.0, 2.0, 3.0, 4.0]));
        p.w_proj = Tensor::identity(4);
        p.b_proj = Tensor::zeros(&[4]);
        assert_eq!(project_visual(&fused, &p).unwrap(), fused);

        let cfg = CcraConfig {
            d_llm: 1,
            ..CcraConfig::with_dims(1, 1, 1, 1, 1)
        };
        let mut p = CcraParams::init(&cfg).unwrap();
        p.w_proj = Tensor::new(&[2, 1], vec![3.0, -2.0]).unwrap();
        p.b_proj = Tensor::vector(vec![0.5]).unwrap();
        let out = project_visual(&Tensor::new(&[1, 2], vec![1.5, 4.0]).unwrap(), &p).unwrap();
        assert_eq!(out.data(), &[3.0 * 1.5 - 2.0 * 4.0 + 0.5]);
    }

    #[test]
    fn neutral_parameters_reduce_every_stage() {
        let cfg = CcraConfig::with_dims(3, 4, 3, 2, 2);
        let (text, vs, mut p) = setup(&cfg);
        p.neutralize_attention();
        let tr = ccra_forward(&text, &vs, &p, &cfg).unwrap();
        assert_eq!(tr.alpha.weights(), &Tensor::full(&[2], 0.5));
        assert!(tr.w_lp.weights().data().iter().all(|&v| v == 0.0));
        assert!(tr.w_p.weights().data().iter().all(|&v| v == 0.0));
        for &w in tr.layer_weights.smoothed.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let stacked = stack_layers(&vs);
        let ln = layer_norm(
            stacked.tokens(),
            &p.lpwca.gamma,
            &p.lpwca.beta,
            p.lpwca.ln_eps,
        )
        .unwrap();
        assert_eq!(tr.f_lp, ln.reshape(&[3, 4, 3]).unwrap());
        let ln_p = layer_norm(&tr.f_semantic, &p.pwca.gamma, &p.pwca.beta, p.pwca.ln_eps).unwrap();
        assert_eq!(tr.f_regional, ln_p);
    }

    #[test]
    fn fused_columns_hold_stage_output_then_last_layer() {
        for v in Variant::ALL {
            let cfg = CcraConfig::with_dims(3, 4, 2, 2, 2);
            let (text, vs, p) = setup(&cfg);
            let tr = variant_forward(v, &text, &vs, &p, &cfg).unwrap();
            for i in 0..4 {
                let row = tr.fused.tokens.row(i);
                assert_eq!(&row[..2], tr.f_regional.row(i));
                assert_eq!(&row[2..], vs.last().row(i));
            }
        }
    }

    #[test]
    fn shapes_follow_config() {
        for (l, n, d, t, dh, d_llm, v) in [
            (1, 1, 2, 1, 1, 3, 2),
            (4, 9, 4, 3, 2, 5, 7),
            (2, 4, 3, 2, 8, 3, 4),
        ] {
            let cfg = CcraConfig {
                d_llm,
                vocab: v,
                ..CcraConfig::with_dims(l, n, d, t, dh)
            };
            let (text, vs, p) = setup(&cfg);
            for mode in Variant::ALL {
                let tr = variant_forward(mode, &text, &vs, &p, &cfg).unwrap();
                assert_eq!(tr.fused.tokens.shape(), &[n, 2 * d]);
                assert_eq!(tr.fused.projected.shape(), &[n, d_llm]);
                assert_eq!(tr.logits.shape(), &[v]);
                assert_eq!(tr.w_lp.weights().shape(), &[l, n]);
                assert_eq!(tr.f_lp.shape(), &[l, n, d]);
            }
        }
    }

    #[test]
    fn pai_alias_is_bit_exact() {
        let cfg = CcraConfig::default();
        let (text, vs, p) = setup(&cfg);
        let a = ccra_forward(&text, &vs, &p, &cfg).unwrap();
        let b = variant_forward(Variant::Pai, &text, &vs, &p, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variants_differ() {
        let cfg = CcraConfig::default();
        let (text, vs, p) = setup(&cfg);
        let traces: Vec<_> = Variant::ALL
            .iter()
            .map(|&v| variant_forward(v, &text, &vs, &p, &cfg).unwrap())
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let diff = traces[i]
                    .fused
                    .tokens
                    .max_abs_diff(&traces[j].fused.tokens)
                    .unwrap();
                assert!(diff > 1e-6, "{i} vs {j}: {diff}");
            }
        }
    }

    #[test]
    fn mismatched_inputs_are_shape_errors() {
        let cfg = CcraConfig::with_dims(2, 4, 3, 2, 2);
        let (text, vs, p) = setup(&cfg);
        let other = CcraConfig {
            patches: 9,
            ..cfg.clone()
        };
        let err = ccra_forward(&text, &vs, &p, &other).unwrap_err();
        assert!(err.is_shape_error());
        let wide = CcraConfig::with_dims(2, 4, 5, 2, 2);
        let (_, _, p_wide) = setup(&wide);
        assert!(ccra_forward(&text, &vs, &p_wide, &cfg)
            .unwrap_err()
            .is_shape_error());
    }

    #[test]
    fn deterministic() {
        let cfg = CcraConfig::default();
        let (text, vs, p) = setup(&cfg);
        assert_eq!(
            ccra_forward(&text, &vs, &p, &cfg).unwrap(),
            ccra_forward(&text, &vs, &p, &cfg).unwrap()
        );
    }
}
