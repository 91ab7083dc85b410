use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conditioning::TextEmbeddings;
use crate::error::Result;
use crate::lpwca::VisualStack;
use crate::numerics::Tensor;

use super::config::CcraConfig;
use super::forward::ccra_forward;
use super::params::CcraParams;
use super::train::Example;

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| StandardNormal.sample(rng))
        .collect::<Vec<f64>>();
    Tensor::new(shape, data).expect("finite samples")
}

/// Seeded standard-normal text and visual features plus a target token.
pub fn synth_inputs(cfg: &CcraConfig, seed: u64) -> Result<(TextEmbeddings, VisualStack, usize)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let text = TextEmbeddings::new(normal(&[cfg.tokens, cfg.d], &mut rng))?;
    let vs = VisualStack::from_tensor(&normal(&[cfg.layers, cfg.patches, cfg.d], &mut rng))?;
    let target = rng.gen_range(0..cfg.vocab);
    Ok((text, vs, target))
}

pub fn synth_example(cfg: &CcraConfig, seed: u64) -> Result<Example> {
    let (text, visual, target) = synth_inputs(cfg, seed)?;
    Ok(Example {
        text,
        visual,
        target,
    })
}

/// The seeded point used for gradient checks: initial parameters with small
/// noise on every trainable tensor, so no group sits at a special value, and
/// one synthetic example.
pub fn gradcheck_instance(cfg: &CcraConfig) -> Result<(CcraParams, Vec<Example>)> {
    let params = CcraParams::init(cfg)?.perturbed(cfg.seed.wrapping_add(1), 0.1);
    Ok((params, vec![synth_example(cfg, cfg.seed)?]))
}

/// Two questions over images whose shallow and deep layers carry independent
/// binary signals. The shallow question's answer is the shallow sign and the
/// deep question's answer is the deep sign.
#[derive(Debug, Clone)]
pub struct LayerProbe {
    pub cfg: CcraConfig,
    pub shallow_query: TextEmbeddings,
    pub deep_query: TextEmbeddings,
    pub images: Vec<VisualStack>,
    pub batch: Vec<Example>,
}

/// Noise level of the probe features.
pub const PROBE_NOISE: f64 = 0.1;

/// Builds the layer probe. Layers `0..L/2` hold `2·e0 + s·e2`, the rest hold
/// `2·e1 + s'·e3`; the questions are `e4` and `e5`. All features get
/// Gaussian noise of standard deviation [`PROBE_NOISE`].
pub fn layer_probe(seed: u64) -> Result<LayerProbe> {
    let cfg = CcraConfig {
        layers: 6,
        patches: 4,
        d: 8,
        tokens: 2,
        d_llm: 8,
        vocab: 2,
        k: 3,
        seed,
        ..CcraConfig::default()
    };
    let (l, n, d) = (cfg.layers, cfg.patches, cfg.d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut noisy =
        |v: f64| v + PROBE_NOISE * Distribution::<f64>::sample(&StandardNormal, &mut rng);

    let mut images = Vec::new();
    let mut signs = Vec::new();
    for s_shallow in [1.0, -1.0] {
        for s_deep in [1.0, -1.0] {
            let mut data = Vec::with_capacity(l * n * d);
            for layer in 0..l {
                let base = if layer < l / 2 {
                    [2.0, 0.0, s_shallow, 0.0]
                } else {
                    [0.0, 2.0, 0.0, s_deep]
                };
                for _ in 0..n {
                    for c in 0..d {
                        data.push(noisy(base.get(c).copied().unwrap_or(0.0)));
                    }
                }
            }
            images.push(VisualStack::from_tensor(&Tensor::new(&[l, n, d], data)?)?);
            signs.push((s_shallow > 0.0, s_deep > 0.0));
        }
    }
    let mut query = |axis: usize| -> Result<TextEmbeddings> {
        let data = (0..cfg.tokens * d)
            .map(|i| noisy(if i % d == axis { 1.0 } else { 0.0 }))
            .collect();
        TextEmbeddings::new(Tensor::new(&[cfg.tokens, d], data)?)
    };
    let shallow_query = query(4)?;
    let deep_query = query(5)?;
    let batch = images
        .iter()
        .zip(&signs)
        .flat_map(|(img, &(s, dp))| {
            [
                Example {
                    text: shallow_query.clone(),
                    visual: img.clone(),
                    target: s as usize,
                },
                Example {
                    text: deep_query.clone(),
                    visual: img.clone(),
                    target: dp as usize,
                },
            ]
        })
        .collect();
    Ok(LayerProbe {
        cfg,
        shallow_query,
        deep_query,
        images,
        batch,
    })
}

impl LayerProbe {
    /// Smoothed layer weights for `query`, averaged over the probe images.
    pub fn mean_layer_weights(
        &self,
        params: &CcraParams,
        query: &TextEmbeddings,
    ) -> Result<Tensor> {
        let mut acc = vec![0.0; self.cfg.layers];
        for img in &self.images {
            let tr = ccra_forward(query, img, params, &self.cfg)?;
            for (a, w) in acc.iter_mut().zip(tr.layer_weights.smoothed.data()) {
                *a += w / self.images.len() as f64;
            }
        }
        Tensor::vector(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_inputs() {
        let cfg = CcraConfig::default();
        assert_eq!(
            synth_inputs(&cfg, 3).unwrap(),
            synth_inputs(&cfg, 3).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = CcraConfig::default();
        let (ta, va, _) = synth_inputs(&cfg, 3).unwrap();
        let (tb, vb, _) = synth_inputs(&cfg, 4).unwrap();
        assert!(ta.tokens().max_abs_diff(tb.tokens()).unwrap() > 0.0);
        assert!(va.to_tensor().max_abs_diff(&vb.to_tensor()).unwrap() > 0.0);
    }

    #[test]
    fn shapes_match_config() {
        let cfg = CcraConfig::with_dims(3, 4, 5, 2, 1);
        let (t, v, target) = synth_inputs(&cfg, 0).unwrap();
        assert_eq!(t.tokens().shape(), &[2, 5]);
        assert_eq!(v.to_tensor().shape(), &[3, 4, 5]);
        assert!(target < cfg.vocab);
    }

    #[test]
    fn probe_is_balanced() {
        let p = layer_probe(0).unwrap();
        p.cfg.validate().unwrap();
        assert_eq!(p.batch.len(), 8);
        let ones = p.batch.iter().filter(|e| e.target == 1).count();
        assert_eq!(ones, 4);
        let first = p.images[0].layers()[0].row(0);
        assert!((first[0] - 2.0).abs() < 1.0 && first[1].abs() < 1.0);
    }
}
