use thiserror::Error;

pub type Result<T, E = CcraError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CcraError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("gaussian kernel size must be odd and positive, got {0}")]
    EvenKernel(usize),

    #[error("gaussian sigma must be positive, got {0}")]
    NonPositiveSigma(f64),

    #[error("kernel of size {k} too large for signal of length {n} (need k <= 2n-1)")]
    KernelTooLarge { k: usize, n: usize },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("function evaluation returned a non-finite value at coordinate {0}")]
    NonFiniteEvaluation(usize),

    #[error("loss became non-finite ({0})")]
    NonFiniteLoss(f64),

    #[error(
        "visual layers have inconsistent shapes: layer 0 is {first:?}, layer {index} is {other:?}"
    )]
    InconsistentLayerShapes {
        first: Vec<usize>,
        index: usize,
        other: Vec<usize>,
    },

    #[error("unknown variant '{0}' (expected pai, decoupled or shuffled)")]
    UnknownVariant(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CcraError>,
    },
}

impl CcraError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        CcraError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Strips any stage annotations and returns the underlying error.
    pub fn root(&self) -> &CcraError {
        match self {
            CcraError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_shape_error(&self) -> bool {
        matches!(
            self.root(),
            CcraError::ShapeMismatch { .. } | CcraError::InconsistentLayerShapes { .. }
        )
    }
}

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| CcraError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
