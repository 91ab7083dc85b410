#![allow(dead_code)]

pub mod oracle;

use ccra_core::pipeline::{largest_fitting_kernel, CcraConfig};

/// `(L, N, T, d, d_hidden)` grid shared by the equivalence tests.
pub fn oracle_grid() -> Vec<CcraConfig> {
    let mut out = Vec::new();
    for l in [1, 2, 4] {
        for n in [1, 4, 9] {
            for t in [1, 3] {
                for d in [2, 4] {
                    for dh in [1, 2] {
                        let mut cfg = CcraConfig::with_dims(l, n, d, t, dh);
                        cfg.k = largest_fitting_kernel(l, 5);
                        cfg.d_llm = if (l + n + t) % 2 == 0 { d } else { d + 1 };
                        cfg.vocab = 5;
                        cfg.seed = (l * 1000 + n * 100 + t * 10 + d + dh) as u64;
                        out.push(cfg);
                    }
                }
            }
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

use ccra_core::pipeline::{ccra_forward, synth_inputs, CcraParams};

/// Per-field max absolute difference between the pipeline and the loop
/// oracle on perturbed parameters and synthetic inputs.
pub fn oracle_diffs(cfg: &CcraConfig) -> Vec<(&'static str, f64)> {
    let params = CcraParams::init(cfg).unwrap().perturbed(cfg.seed + 7, 0.3);
    let (text, vs, _) = synth_inputs(cfg, cfg.seed).unwrap();
    let tr = ccra_forward(&text, &vs, &params, cfg).unwrap();
    let o = oracle::oracle_forward(text.tokens(), &vs.to_tensor(), &params, cfg);
    vec![
        ("alpha", max_diff(tr.alpha.weights().data(), &o.alpha)),
        ("w_lp", max_diff(tr.w_lp.weights().data(), &o.w_lp)),
        ("wl_raw", max_diff(tr.layer_weights.raw.data(), &o.wl_raw)),
        (
            "wl_smoothed",
            max_diff(tr.layer_weights.smoothed.data(), &o.wl_smoothed),
        ),
        ("w_p", max_diff(tr.w_p.weights().data(), &o.w_p)),
        ("f_lp", max_diff(tr.f_lp.data(), &o.f_lp)),
        ("f_semantic", max_diff(tr.f_semantic.data(), &o.f_semantic)),
        ("f_regional", max_diff(tr.f_regional.data(), &o.f_regional)),
        ("fused", max_diff(tr.fused.tokens.data(), &o.fused)),
        (
            "projected",
            max_diff(tr.fused.projected.data(), &o.projected),
        ),
        ("logits", max_diff(tr.logits.data(), &o.logits)),
    ]
}
