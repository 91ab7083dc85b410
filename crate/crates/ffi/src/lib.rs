//! C ABI over `ccra-core`.
//!
//! Models and traces are opaque heap handles released with their `_free`
//! function. Every call returns a [`CcraStatus`]; on failure
//! [`ccra_last_error`] holds a message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ccra_core::conditioning::TextEmbeddings;
use ccra_core::lpwca::VisualStack;
use ccra_core::pipeline::{
    synth_inputs, toy_train_step, variant_forward, CcraConfig as CoreConfig, CcraParams, Example,
    ForwardTrace, Variant,
};
use ccra_core::{CcraError, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcraStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    ShapeMismatch = 3,
    InvalidArgument = 4,
    NonFinite = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Trace fields readable through [`ccra_trace_len`] and [`ccra_trace_copy`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcraField {
    /// Token importance, `T`.
    Alpha = 0,
    /// Layer-patch gates, `L×N`.
    LayerPatchMap = 1,
    /// Raw layer scores, `L`.
    LayerWeightsRaw = 2,
    /// Smoothed layer distribution, `L`.
    LayerWeightsSmoothed = 3,
    /// Patch gates, `N`.
    PatchWeights = 4,
    /// Gated layer-patch features, `L×N×d`.
    LayerPatchFeatures = 5,
    /// `N×d`.
    SemanticFeatures = 6,
    /// `N×d`.
    RegionalFeatures = 7,
    /// `N×2d`.
    Fused = 8,
    /// `N×d_llm`.
    Projected = 9,
    /// `V`.
    Logits = 10,
}

impl CcraField {
    fn from_raw(v: u32) -> Option<Self> {
        use CcraField::*;
        [
            Alpha,
            LayerPatchMap,
            LayerWeightsRaw,
            LayerWeightsSmoothed,
            PatchWeights,
            LayerPatchFeatures,
            SemanticFeatures,
            RegionalFeatures,
            Fused,
            Projected,
            Logits,
        ]
        .get(v as usize)
        .copied()
    }
}

/// Model dimensions. `sigma <= 0` selects the default `k/3`; `variant` is
/// 0 (pai), 1 (decoupled) or 2 (shuffled).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcraConfig {
    pub layers: usize,
    pub patches: usize,
    pub d: usize,
    pub tokens: usize,
    pub d_hidden: usize,
    pub d_llm: usize,
    pub vocab: usize,
    pub k: usize,
    pub sigma: f64,
    pub seed: u64,
    pub variant: u32,
}

pub struct CcraModel {
    cfg: CoreConfig,
    params: CcraParams,
}

pub struct CcraTrace {
    trace: ForwardTrace,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(CcraStatus, String);

impl From<CcraError> for Failure {
    fn from(e: CcraError) -> Self {
        let status = match e.root() {
            CcraError::InvalidConfig(_) | CcraError::UnknownVariant(_) => CcraStatus::InvalidConfig,
            CcraError::InvalidArgument(_) => CcraStatus::InvalidArgument,
            CcraError::NonFinite(_)
            | CcraError::NonFiniteLoss(_)
            | CcraError::NonFiniteEvaluation(_) => CcraStatus::NonFinite,
            _ if e.is_shape_error() => CcraStatus::ShapeMismatch,
            _ => CcraStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CcraStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CcraStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CcraStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CcraStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn to_core(c: &CcraConfig) -> Result<CoreConfig, Failure> {
    let variant = *Variant::ALL.get(c.variant as usize).ok_or_else(|| {
        Failure(
            CcraStatus::InvalidConfig,
            format!("unknown variant code {}", c.variant),
        )
    })?;
    let cfg = CoreConfig {
        layers: c.layers,
        patches: c.patches,
        d: c.d,
        tokens: c.tokens,
        d_hidden: c.d_hidden,
        d_llm: c.d_llm,
        vocab: c.vocab,
        k: c.k,
        sigma: (c.sigma > 0.0).then_some(c.sigma),
        seed: c.seed,
        variant,
        ..CoreConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn inputs(
    cfg: &CoreConfig,
    text: &[f64],
    visual: &[f64],
) -> Result<(TextEmbeddings, VisualStack), Failure> {
    let want_t = cfg.tokens * cfg.d;
    let want_v = cfg.layers * cfg.patches * cfg.d;
    if text.len() != want_t || visual.len() != want_v {
        return Err(Failure(
            CcraStatus::ShapeMismatch,
            format!(
                "shape mismatch: text has {} values (need {want_t}), visual has {} (need {want_v})",
                text.len(),
                visual.len()
            ),
        ));
    }
    let t = TextEmbeddings::new(Tensor::new(&[cfg.tokens, cfg.d], text.to_vec())?)?;
    let v = VisualStack::from_tensor(&Tensor::new(
        &[cfg.layers, cfg.patches, cfg.d],
        visual.to_vec(),
    )?)?;
    Ok((t, v))
}

fn field_data(tr: &ForwardTrace, field: CcraField) -> &[f64] {
    match field {
        CcraField::Alpha => tr.alpha.weights().data(),
        CcraField::LayerPatchMap => tr.w_lp.weights().data(),
        CcraField::LayerWeightsRaw => tr.layer_weights.raw.data(),
        CcraField::LayerWeightsSmoothed => tr.layer_weights.smoothed.data(),
        CcraField::PatchWeights => tr.w_p.weights().data(),
        CcraField::LayerPatchFeatures => tr.f_lp.data(),
        CcraField::SemanticFeatures => tr.f_semantic.data(),
        CcraField::RegionalFeatures => tr.f_regional.data(),
        CcraField::Fused => tr.fused.tokens.data(),
        CcraField::Projected => tr.fused.projected.data(),
        CcraField::Logits => tr.logits.data(),
    }
}

fn field(raw: u32) -> Result<CcraField, Failure> {
    CcraField::from_raw(raw).ok_or_else(|| {
        Failure(
            CcraStatus::InvalidArgument,
            format!("unknown field code {raw}"),
        )
    })
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ccra_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Fills `out` with the default dimensions.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ccra_config_default(out: *mut CcraConfig) -> CcraStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = CoreConfig::default();
        *out = CcraConfig {
            layers: c.layers,
            patches: c.patches,
            d: c.d,
            tokens: c.tokens,
            d_hidden: c.d_hidden,
            d_llm: c.d_llm,
            vocab: c.vocab,
            k: c.k,
            sigma: c.sigma.unwrap_or(0.0),
            seed: c.seed,
            variant: 0,
        };
        Ok(())
    })
}

/// Creates a model with seeded initial parameters.
///
/// # Safety
/// `cfg` must be null or point to a valid config; `out` must be null or valid
/// for writes. On success `*out` owns a model to release with
/// [`ccra_model_free`].
#[no_mangle]
pub unsafe extern "C" fn ccra_model_new(
    cfg: *const CcraConfig,
    out: *mut *mut CcraModel,
) -> CcraStatus {
    guard(|| {
        let cfg = to_core(deref(cfg, "cfg")?)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let params = CcraParams::init(&cfg)?;
        *out = Box::into_raw(Box::new(CcraModel { cfg, params }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`ccra_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ccra_model_free(model: *mut CcraModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters.
///
/// # Safety
/// `model` must be a live handle; `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ccra_model_param_count(
    model: *const CcraModel,
    out: *mut usize,
) -> CcraStatus {
    guard(|| {
        let m = deref(model, "model")?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.params.parameter_count();
        Ok(())
    })
}

unsafe fn store_trace(
    m: &CcraModel,
    t: &TextEmbeddings,
    v: &VisualStack,
    out: *mut *mut CcraTrace,
) -> Result<(), Failure> {
    let out = out.as_mut().ok_or_else(|| null("out"))?;
    let trace = variant_forward(m.cfg.variant, t, v, &m.params, &m.cfg)?;
    *out = Box::into_raw(Box::new(CcraTrace { trace }));
    Ok(())
}

/// Forward pass on caller data: `text` is `T×d` and `visual` is `L×N×d`,
/// both row-major.
///
/// # Safety
/// `model` must be a live handle; `text` and `visual` must be readable for
/// their lengths; `out` must be null or valid for writes. On success `*out`
/// owns a trace to release with [`ccra_trace_free`].
#[no_mangle]
pub unsafe extern "C" fn ccra_model_forward(
    model: *const CcraModel,
    text: *const f64,
    text_len: usize,
    visual: *const f64,
    visual_len: usize,
    out: *mut *mut CcraTrace,
) -> CcraStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let (t, v) = inputs(
            &m.cfg,
            slice(text, text_len, "text")?,
            slice(visual, visual_len, "visual")?,
        )?;
        store_trace(m, &t, &v, out)
    })
}

/// Forward pass on inputs synthesized from `seed`.
///
/// # Safety
/// As [`ccra_model_forward`].
#[no_mangle]
pub unsafe extern "C" fn ccra_model_forward_synthetic(
    model: *const CcraModel,
    seed: u64,
    out: *mut *mut CcraTrace,
) -> CcraStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let (t, v, _) = synth_inputs(&m.cfg, seed)?;
        store_trace(m, &t, &v, out)
    })
}

/// One gradient-descent step on a single example. Writes the loss before
/// the update to `out_loss` when it is not null. Parameters are unchanged on
/// failure.
///
/// # Safety
/// `model` must be a live handle not used concurrently; buffers as in
/// [`ccra_model_forward`].
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ccra_model_train_step(
    model: *mut CcraModel,
    text: *const f64,
    text_len: usize,
    visual: *const f64,
    visual_len: usize,
    target: usize,
    lr: f64,
    out_loss: *mut f64,
) -> CcraStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let (t, v) = inputs(
            &m.cfg,
            slice(text, text_len, "text")?,
            slice(visual, visual_len, "visual")?,
        )?;
        if target >= m.cfg.vocab {
            return Err(Failure(
                CcraStatus::InvalidArgument,
                format!(
                    "target {target} out of range for vocabulary {}",
                    m.cfg.vocab
                ),
            ));
        }
        let batch = [Example {
            text: t,
            visual: v,
            target,
        }];
        let (next, loss) = toy_train_step(&m.params, &batch, lr, &m.cfg)?;
        m.params = next;
        if let Some(l) = out_loss.as_mut() {
            *l = loss;
        }
        Ok(())
    })
}

/// Number of values in the trace field `field_id` (a `CcraField` value).
///
/// # Safety
/// `trace` must be a live handle; `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ccra_trace_len(
    trace: *const CcraTrace,
    field_id: u32,
    out: *mut usize,
) -> CcraStatus {
    guard(|| {
        let tr = deref(trace, "trace")?;
        let f = field(field_id)?;
        *out.as_mut().ok_or_else(|| null("out"))? = field_data(&tr.trace, f).len();
        Ok(())
    })
}

/// Copies the trace field `field_id` into `buf`, which must hold at least
/// [`ccra_trace_len`] values.
///
/// # Safety
/// `trace` must be a live handle; `buf` must be writable for `buf_len`
/// values.
#[no_mangle]
pub unsafe extern "C" fn ccra_trace_copy(
    trace: *const CcraTrace,
    field_id: u32,
    buf: *mut f64,
    buf_len: usize,
) -> CcraStatus {
    guard(|| {
        let tr = deref(trace, "trace")?;
        let data = field_data(&tr.trace, field(field_id)?);
        if buf_len < data.len() {
            return Err(Failure(
                CcraStatus::BufferTooSmall,
                format!("buffer holds {buf_len} values, field has {}", data.len()),
            ));
        }
        if data.is_empty() {
            return Ok(());
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// # Safety
/// `trace` must be null or a handle from a forward call not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ccra_trace_free(trace: *mut CcraTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}
