use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::conditioning::{ConditioningNodes, ConditioningParams, StageNodes};
use crate::error::{CcraError, Result};
use crate::lpwca::LpwcaParams;
use crate::lwca::LwcaParams;
use crate::numerics::{Graph, NodeId, Tensor};
use crate::pwca::PwcaParams;

use super::config::CcraConfig;

/// Parameter groups, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Conditioning,
    Lpwca,
    Lwca,
    Pwca,
    Projection,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Conditioning,
        Group::Lpwca,
        Group::Lwca,
        Group::Pwca,
        Group::Projection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Conditioning => "conditioning",
            Group::Lpwca => "lpwca",
            Group::Lwca => "lwca",
            Group::Pwca => "pwca",
            Group::Projection => "projection",
        }
    }
}

/// One trainable tensor of [`CcraParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    CondQuerySa,
    CondKeySa,
    CondValueSa,
    CondScore,
    CondQueryLp,
    CondQueryL,
    CondQueryP,
    LpKey,
    LpGamma,
    LpBeta,
    LKey,
    LGamma,
    LBeta,
    PKey,
    PGamma,
    PBeta,
    ProjWeight,
    ProjBias,
}

impl Slot {
    pub const ALL: [Slot; 18] = [
        Slot::CondQuerySa,
        Slot::CondKeySa,
        Slot::CondValueSa,
        Slot::CondScore,
        Slot::CondQueryLp,
        Slot::CondQueryL,
        Slot::CondQueryP,
        Slot::LpKey,
        Slot::LpGamma,
        Slot::LpBeta,
        Slot::LKey,
        Slot::LGamma,
        Slot::LBeta,
        Slot::PKey,
        Slot::PGamma,
        Slot::PBeta,
        Slot::ProjWeight,
        Slot::ProjBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::CondQuerySa => "conditioning.w_q_sa",
            Slot::CondKeySa => "conditioning.w_k_sa",
            Slot::CondValueSa => "conditioning.w_v_sa",
            Slot::CondScore => "conditioning.w_score",
            Slot::CondQueryLp => "conditioning.w_q_lp",
            Slot::CondQueryL => "conditioning.w_q_l",
            Slot::CondQueryP => "conditioning.w_q_p",
            Slot::LpKey => "lpwca.w_k",
            Slot::LpGamma => "lpwca.gamma",
            Slot::LpBeta => "lpwca.beta",
            Slot::LKey => "lwca.w_k",
            Slot::LGamma => "lwca.gamma",
            Slot::LBeta => "lwca.beta",
            Slot::PKey => "pwca.w_k",
            Slot::PGamma => "pwca.gamma",
            Slot::PBeta => "pwca.beta",
            Slot::ProjWeight => "projection.w_proj",
            Slot::ProjBias => "projection.b_proj",
        }
    }

    pub fn group(self) -> Group {
        use Slot::*;
        match self {
            CondQuerySa | CondKeySa | CondValueSa | CondScore | CondQueryLp | CondQueryL
            | CondQueryP => Group::Conditioning,
            LpKey | LpGamma | LpBeta => Group::Lpwca,
            LKey | LGamma | LBeta => Group::Lwca,
            PKey | PGamma | PBeta => Group::Pwca,
            ProjWeight | ProjBias => Group::Projection,
        }
    }
}

/// Every tensor of the model. `w_dec` and `text_proj` are frozen: they are
/// never listed, counted or trained.
#[derive(Debug, Clone, PartialEq)]
pub struct CcraParams {
    pub conditioning: ConditioningParams,
    pub lpwca: LpwcaParams,
    pub lwca: LwcaParams,
    pub pwca: PwcaParams,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
    /// Toy decoder, `d_llm×V`.
    pub w_dec: Tensor,
    /// Text tokens into decoder width, `d×d_llm`.
    pub text_proj: Tensor,
    tie_queries: bool,
    tie_layer_norms: bool,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("finite samples")
}

fn normal(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor::new(shape, data).expect("finite samples")
}

impl CcraParams {
    /// Seeded initialization. Projections are uniform in `±1/√d`, the score
    /// head is zero, layer norms start at the identity affine and the visual
    /// projection is uniform in `±1/√(2d)` with zero bias.
    pub fn init(cfg: &CcraConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, dh, d_llm) = (cfg.d, cfg.d_hidden, cfg.d_llm);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bound = 1.0 / (d as f64).sqrt();
        let conditioning = ConditioningParams {
            w_q_sa: uniform(&[d, dh], bound, &mut rng),
            w_k_sa: uniform(&[d, dh], bound, &mut rng),
            w_v_sa: uniform(&[d, dh], bound, &mut rng),
            w_score: Tensor::zeros(&[dh]),
            w_q_lp: uniform(&[d, dh], bound, &mut rng),
            w_q_l: uniform(&[d, dh], bound, &mut rng),
            w_q_p: uniform(&[d, dh], bound, &mut rng),
        };
        let lpwca = LpwcaParams {
            w_k: uniform(&[d, dh], bound, &mut rng),
            ..LpwcaParams::identity(d, dh)
        };
        let lwca = LwcaParams {
            w_k: uniform(&[d, dh], bound, &mut rng),
            ..LwcaParams::identity(d, dh)
        };
        let pwca = PwcaParams {
            w_k: uniform(&[d, dh], bound, &mut rng),
            ..PwcaParams::identity(d, dh)
        };
        let w_proj = uniform(&[2 * d, d_llm], 1.0 / ((2 * d) as f64).sqrt(), &mut rng);
        let w_dec = normal(&[d_llm, cfg.vocab], 1.0, &mut rng);
        let text_proj = if d == d_llm {
            Tensor::identity(d)
        } else {
            uniform(&[d, d_llm], bound, &mut rng)
        };
        let mut params = Self {
            conditioning,
            lpwca,
            lwca,
            pwca,
            w_proj,
            b_proj: Tensor::zeros(&[d_llm]),
            w_dec,
            text_proj,
            tie_queries: cfg.tie_queries,
            tie_layer_norms: cfg.tie_layer_norms,
        };
        params.sync_ties();
        Ok(params)
    }

    /// Zeroes the score head and every query and key projection, so every
    /// attention map takes its neutral value.
    pub fn neutralize_attention(&mut self) {
        for slot in [
            Slot::CondQuerySa,
            Slot::CondKeySa,
            Slot::CondValueSa,
            Slot::CondScore,
            Slot::CondQueryLp,
            Slot::CondQueryL,
            Slot::CondQueryP,
            Slot::LpKey,
            Slot::LKey,
            Slot::PKey,
        ] {
            let t = self.slot_mut(slot);
            *t = Tensor::zeros(t.shape());
        }
    }

    /// A copy with seeded uniform noise of the given amplitude added to every
    /// trainable tensor.
    pub fn perturbed(&self, seed: u64, amplitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for slot in self.trainable() {
            let t = out.slot_mut(slot);
            let noise = uniform(t.shape(), amplitude, &mut rng);
            t.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(v, n)| *v += n);
        }
        out.sync_ties();
        out
    }

    pub fn ties(&self) -> (bool, bool) {
        (self.tie_queries, self.tie_layer_norms)
    }

    /// The slot whose tensor `slot` reads under the current tying.
    pub fn canonical(&self, slot: Slot) -> Slot {
        match slot {
            Slot::CondQueryL | Slot::CondQueryP if self.tie_queries => Slot::CondQueryLp,
            Slot::LGamma | Slot::PGamma if self.tie_layer_norms => Slot::LpGamma,
            Slot::LBeta | Slot::PBeta if self.tie_layer_norms => Slot::LpBeta,
            other => other,
        }
    }

    /// Independently trainable slots in stable order.
    pub fn trainable(&self) -> Vec<Slot> {
        Slot::ALL
            .into_iter()
            .filter(|&s| self.canonical(s) == s)
            .collect()
    }

    pub fn get(&self, slot: Slot) -> &Tensor {
        match self.canonical(slot) {
            Slot::CondQuerySa => &self.conditioning.w_q_sa,
            Slot::CondKeySa => &self.conditioning.w_k_sa,
            Slot::CondValueSa => &self.conditioning.w_v_sa,
            Slot::CondScore => &self.conditioning.w_score,
            Slot::CondQueryLp => &self.conditioning.w_q_lp,
            Slot::CondQueryL => &self.conditioning.w_q_l,
            Slot::CondQueryP => &self.conditioning.w_q_p,
            Slot::LpKey => &self.lpwca.w_k,
            Slot::LpGamma => &self.lpwca.gamma,
            Slot::LpBeta => &self.lpwca.beta,
            Slot::LKey => &self.lwca.w_k,
            Slot::LGamma => &self.lwca.gamma,
            Slot::LBeta => &self.lwca.beta,
            Slot::PKey => &self.pwca.w_k,
            Slot::PGamma => &self.pwca.gamma,
            Slot::PBeta => &self.pwca.beta,
            Slot::ProjWeight => &self.w_proj,
            Slot::ProjBias => &self.b_proj,
        }
    }

    fn slot_mut(&mut self, slot: Slot) -> &mut Tensor {
        match slot {
            Slot::CondQuerySa => &mut self.conditioning.w_q_sa,
            Slot::CondKeySa => &mut self.conditioning.w_k_sa,
            Slot::CondValueSa => &mut self.conditioning.w_v_sa,
            Slot::CondScore => &mut self.conditioning.w_score,
            Slot::CondQueryLp => &mut self.conditioning.w_q_lp,
            Slot::CondQueryL => &mut self.conditioning.w_q_l,
            Slot::CondQueryP => &mut self.conditioning.w_q_p,
            Slot::LpKey => &mut self.lpwca.w_k,
            Slot::LpGamma => &mut self.lpwca.gamma,
            Slot::LpBeta => &mut self.lpwca.beta,
            Slot::LKey => &mut self.lwca.w_k,
            Slot::LGamma => &mut self.lwca.gamma,
            Slot::LBeta => &mut self.lwca.beta,
            Slot::PKey => &mut self.pwca.w_k,
            Slot::PGamma => &mut self.pwca.gamma,
            Slot::PBeta => &mut self.pwca.beta,
            Slot::ProjWeight => &mut self.w_proj,
            Slot::ProjBias => &mut self.b_proj,
        }
    }

    /// Replaces a trainable tensor. Writing a tied slot writes its canonical
    /// slot and every alias.
    pub fn set(&mut self, slot: Slot, value: Tensor) -> Result<()> {
        let slot = self.canonical(slot);
        let current = self.slot_mut(slot);
        if current.shape() != value.shape() {
            return Err(CcraError::shape(
                "CcraParams::set",
                current.shape(),
                value.shape(),
            ));
        }
        *current = value;
        self.sync_ties();
        Ok(())
    }

    fn sync_ties(&mut self) {
        for slot in Slot::ALL {
            let canon = self.canonical(slot);
            if canon != slot {
                let value = self.get(canon).clone();
                *self.slot_mut(slot) = value;
            }
        }
    }

    /// Trainable tensors with their names, in stable order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        self.trainable()
            .into_iter()
            .map(|s| (s.name(), self.get(s)))
            .collect()
    }

    /// Scalar count of the trainable tensors.
    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor against the config's dimensions.
    pub fn validate(&self, cfg: &CcraConfig) -> Result<()> {
        let (d, dh, d_llm) = (cfg.d, cfg.d_hidden, cfg.d_llm);
        for slot in Slot::ALL {
            let expected: Vec<usize> = match slot {
                Slot::CondScore => vec![dh],
                Slot::LpGamma | Slot::LpBeta | Slot::LGamma | Slot::LBeta => vec![d],
                Slot::PGamma | Slot::PBeta => vec![d],
                Slot::ProjWeight => vec![2 * d, d_llm],
                Slot::ProjBias => vec![d_llm],
                _ => vec![d, dh],
            };
            if self.get(slot).shape() != expected.as_slice() {
                return Err(CcraError::shape(
                    slot.name(),
                    self.get(slot).shape(),
                    &expected,
                ));
            }
        }
        if self.w_dec.shape() != [d_llm, cfg.vocab] {
            return Err(CcraError::shape(
                "w_dec",
                self.w_dec.shape(),
                &[d_llm, cfg.vocab],
            ));
        }
        if self.text_proj.shape() != [d, d_llm] {
            return Err(CcraError::shape(
                "text_proj",
                self.text_proj.shape(),
                &[d, d_llm],
            ));
        }
        Ok(())
    }

    /// Adds every tensor to `g` as a leaf. Tied slots share one node.
    pub fn bind(&self, g: &mut Graph) -> ParamNodes {
        let mut nodes: Vec<(Slot, NodeId)> = Vec::with_capacity(Slot::ALL.len());
        for slot in self.trainable() {
            nodes.push((slot, g.leaf(self.get(slot).clone())));
        }
        let lookup = |slot: Slot| {
            let canon = self.canonical(slot);
            nodes
                .iter()
                .find(|(s, _)| *s == canon)
                .map(|(_, id)| *id)
                .expect("every canonical slot is bound")
        };
        let conditioning = ConditioningNodes {
            w_q_sa: lookup(Slot::CondQuerySa),
            w_k_sa: lookup(Slot::CondKeySa),
            w_v_sa: lookup(Slot::CondValueSa),
            w_score: lookup(Slot::CondScore),
            w_q_lp: lookup(Slot::CondQueryLp),
            w_q_l: lookup(Slot::CondQueryL),
            w_q_p: lookup(Slot::CondQueryP),
        };
        let stage = |k, gm, b| StageNodes {
            w_k: lookup(k),
            gamma: lookup(gm),
            beta: lookup(b),
        };
        let lpwca = stage(Slot::LpKey, Slot::LpGamma, Slot::LpBeta);
        let lwca = stage(Slot::LKey, Slot::LGamma, Slot::LBeta);
        let pwca = stage(Slot::PKey, Slot::PGamma, Slot::PBeta);
        let w_proj = lookup(Slot::ProjWeight);
        let b_proj = lookup(Slot::ProjBias);
        ParamNodes {
            conditioning,
            lpwca,
            lwca,
            pwca,
            w_proj,
            b_proj,
            w_dec: g.leaf(self.w_dec.clone()),
            text_proj: g.leaf(self.text_proj.clone()),
            eps: [self.lpwca.ln_eps, self.lwca.ln_eps, self.pwca.ln_eps],
            slots: nodes,
        }
    }

    /// Applies `p ← p − lr·grad` to every trainable slot.
    pub(crate) fn descend(&mut self, grads: &[(Slot, Tensor)], lr: f64) {
        for (slot, grad) in grads {
            let t = self.slot_mut(self.canonical(*slot));
            t.data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(v, g)| *v -= lr * g);
        }
        self.sync_ties();
    }
}

/// Graph handles for [`CcraParams`].
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub conditioning: ConditioningNodes,
    pub lpwca: StageNodes,
    pub lwca: StageNodes,
    pub pwca: StageNodes,
    pub w_proj: NodeId,
    pub b_proj: NodeId,
    pub w_dec: NodeId,
    pub text_proj: NodeId,
    /// Layer-norm epsilons of the LPWCA, LWCA and PWCA stages.
    pub eps: [f64; 3],
    slots: Vec<(Slot, NodeId)>,
}

impl ParamNodes {
    /// Trainable slots and their leaves.
    pub fn slots(&self) -> &[(Slot, NodeId)] {
        &self.slots
    }
}
