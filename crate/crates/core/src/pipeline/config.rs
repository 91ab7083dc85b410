use std::fmt;
use std::str::FromStr;

use crate::conditioning::hidden_scale;
use crate::error::{CcraError, Result};
use crate::lpwca::GateNormalization;
use crate::lwca::{default_sigma, SmoothingOrder};

/// Order in which the three attention stages are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    /// LPWCA, then LWCA, then PWCA.
    #[default]
    Pai,
    /// LWCA and PWCA side by side on the raw stack, outputs averaged.
    Decoupled,
    /// LPWCA, then PWCA on every layer, then LWCA.
    Shuffled,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Pai, Variant::Decoupled, Variant::Shuffled];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pai => "pai",
            Variant::Decoupled => "decoupled",
            Variant::Shuffled => "shuffled",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CcraError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CcraError::UnknownVariant(s.to_string()))
    }
}

/// Which width sets the `1/√·` attention scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreScale {
    #[default]
    Hidden,
    Model,
}

impl FromStr for ScoreScale {
    type Err = CcraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hidden" => Ok(ScoreScale::Hidden),
            "model" => Ok(ScoreScale::Model),
            other => Err(CcraError::InvalidConfig(format!(
                "score_scale must be hidden or model, got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcraConfig {
    /// Visual layers `L`.
    pub layers: usize,
    /// Patches per layer `N`.
    pub patches: usize,
    /// Feature width `d`, shared by text and visual tokens.
    pub d: usize,
    /// Text tokens `T`.
    pub tokens: usize,
    pub d_hidden: usize,
    pub d_llm: usize,
    pub vocab: usize,
    /// Gaussian kernel size; odd.
    pub k: usize,
    /// Kernel width; `k/3` when unset.
    pub sigma: Option<f64>,
    pub seed: u64,
    pub variant: Variant,
    pub gate: GateNormalization,
    pub smoothing: SmoothingOrder,
    pub score_scale: ScoreScale,
    /// Use the LPWCA query projection for all three stages.
    pub tie_queries: bool,
    /// Use the LPWCA layer-norm affine for all three stages.
    pub tie_layer_norms: bool,
}

impl Default for CcraConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            patches: 9,
            d: 8,
            tokens: 4,
            d_hidden: 128,
            d_llm: 8,
            vocab: 10,
            k: 5,
            sigma: None,
            seed: 0,
            variant: Variant::Pai,
            gate: GateNormalization::Raw,
            smoothing: SmoothingOrder::SoftmaxThenSmooth,
            score_scale: ScoreScale::Hidden,
            tie_queries: false,
            tie_layer_norms: false,
        }
    }
}

impl CcraConfig {
    /// A config with the given core dimensions and defaults elsewhere. The
    /// kernel size is the largest odd value not above 5 that fits `layers`.
    pub fn with_dims(
        layers: usize,
        patches: usize,
        d: usize,
        tokens: usize,
        d_hidden: usize,
    ) -> Self {
        Self {
            layers,
            patches,
            d,
            tokens,
            d_hidden,
            d_llm: d,
            k: largest_fitting_kernel(layers, 5),
            ..Self::default()
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(self.k))
    }

    pub fn score_scale_value(&self) -> f64 {
        match self.score_scale {
            ScoreScale::Hidden => hidden_scale(self.d_hidden),
            ScoreScale::Model => hidden_scale(self.d),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("L", self.layers),
            ("N", self.patches),
            ("d", self.d),
            ("T", self.tokens),
            ("d_hidden", self.d_hidden),
            ("d_llm", self.d_llm),
            ("V", self.vocab),
        ] {
            if v == 0 {
                return Err(CcraError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.k % 2 == 0 {
            return Err(CcraError::InvalidConfig(format!(
                "k must be odd, got {}",
                self.k
            )));
        }
        if self.k > 2 * self.layers - 1 {
            return Err(CcraError::InvalidConfig(format!(
                "k = {} exceeds 2L-1 = {}",
                self.k,
                2 * self.layers - 1
            )));
        }
        let sigma = self.sigma();
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(CcraError::InvalidConfig(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        Ok(())
    }

    /// Side length of the patch grid, if `N` is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        let side = (self.patches as f64).sqrt().round() as usize;
        (side * side == self.patches).then_some(side)
    }
}

/// Largest odd kernel size `≤ cap` that satisfies `k ≤ 2L−1`.
pub fn largest_fitting_kernel(layers: usize, cap: usize) -> usize {
    let limit = cap.min(2 * layers.max(1) - 1);
    if limit % 2 == 1 {
        limit
    } else {
        limit - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = CcraConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.d_hidden, 128);
        assert_eq!(cfg.k, 5);
        assert!((cfg.sigma() - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(
            "serial".parse::<Variant>(),
            Err(CcraError::UnknownVariant("serial".into()))
        );
    }

    #[test]
    fn kernel_must_fit_layers() {
        let cfg = CcraConfig {
            layers: 2,
            k: 5,
            ..CcraConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(CcraError::InvalidConfig(_))));
        let even = CcraConfig {
            k: 4,
            ..CcraConfig::default()
        };
        assert!(even.validate().is_err());
    }

    #[test]
    fn zero_dimension_rejected() {
        let cfg = CcraConfig {
            vocab: 0,
            ..CcraConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let cfg = CcraConfig {
            sigma: Some(0.0),
            ..CcraConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fitting_kernel() {
        assert_eq!(largest_fitting_kernel(1, 5), 1);
        assert_eq!(largest_fitting_kernel(2, 5), 3);
        assert_eq!(largest_fitting_kernel(4, 5), 5);
        assert_eq!(largest_fitting_kernel(24, 5), 5);
        assert_eq!(largest_fitting_kernel(24, 6), 5);
    }

    #[test]
    fn grid_side() {
        assert_eq!(CcraConfig::with_dims(2, 9, 2, 1, 1).grid_side(), Some(3));
        assert_eq!(CcraConfig::with_dims(2, 6, 2, 1, 1).grid_side(), None);
        assert_eq!(CcraConfig::with_dims(2, 1, 2, 1, 1).grid_side(), Some(1));
    }

    #[test]
    fn model_scale_uses_width() {
        let cfg = CcraConfig {
            score_scale: ScoreScale::Model,
            d: 16,
            ..CcraConfig::default()
        };
        assert_eq!(cfg.score_scale_value(), 0.25);
    }
}
