use crate::conditioning::TextEmbeddings;
use crate::error::{CcraError, Result};
use crate::lpwca::{stack_layers, VisualStack};
use crate::numerics::{finite_difference, Graph, NodeId, Tensor};

use super::config::CcraConfig;
use super::forward::build_forward;
use super::params::{CcraParams, Group, ParamNodes, Slot};

/// One training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub text: TextEmbeddings,
    pub visual: VisualStack,
    pub target: usize,
}

/// Records the mean cross-entropy of `batch` and returns the loss node.
fn record_loss(
    g: &mut Graph,
    params: &CcraParams,
    batch: &[Example],
    cfg: &CcraConfig,
) -> Result<(NodeId, ParamNodes)> {
    if batch.is_empty() {
        return Err(CcraError::EmptyInput("batch"));
    }
    params.validate(cfg)?;
    let nodes = params.bind(g);
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let t = g.leaf(ex.text.tokens().clone());
        let s = g.leaf(stack_layers(&ex.visual).tokens().clone());
        let trace = build_forward(g, t, s, &nodes, cfg, cfg.variant)?;
        losses.push(g.cross_entropy(trace.logits, ex.target)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    Ok((g.scale(total, 1.0 / batch.len() as f64), nodes))
}

/// Mean cross-entropy over `batch`.
pub fn batch_loss(params: &CcraParams, batch: &[Example], cfg: &CcraConfig) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, _) = record_loss(&mut g, params, batch, cfg)?;
    g.value(loss).item()
}

/// Mean cross-entropy and its gradient for every trainable slot.
pub fn loss_and_gradients(
    params: &CcraParams,
    batch: &[Example],
    cfg: &CcraConfig,
) -> Result<(f64, Vec<(Slot, Tensor)>)> {
    let mut g = Graph::new();
    let (loss, nodes) = record_loss(&mut g, params, batch, cfg)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(CcraError::NonFiniteLoss(value));
    }
    let grads = g.backward(loss)?;
    Ok((
        value,
        nodes
            .slots()
            .iter()
            .map(|&(slot, id)| (slot, grads.wrt(id)))
            .collect(),
    ))
}

/// One plain gradient-descent step on the mean cross-entropy of `batch`.
/// Returns the updated parameters and the loss before the update.
pub fn toy_train_step(
    params: &CcraParams,
    batch: &[Example],
    lr: f64,
    cfg: &CcraConfig,
) -> Result<(CcraParams, f64)> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(CcraError::InvalidArgument(format!(
            "learning rate must be finite and nonnegative, got {lr}"
        )));
    }
    let (loss, grads) = loss_and_gradients(params, batch, cfg)?;
    let mut next = params.clone();
    if lr > 0.0 {
        next.descend(&grads, lr);
        if next
            .named()
            .iter()
            .any(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
        {
            return Err(CcraError::NonFiniteLoss(f64::NAN));
        }
    }
    Ok((next, loss))
}

/// Worst agreement between analytic and central-difference gradients within
/// one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: Group,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Denominator floor for the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients with central differences on every
/// coordinate of every trainable tensor.
pub fn gradient_check(
    params: &CcraParams,
    batch: &[Example],
    cfg: &CcraConfig,
    eps: f64,
) -> Result<Vec<GroupCheck>> {
    let (_, grads) = loss_and_gradients(params, batch, cfg)?;
    let mut report: Vec<GroupCheck> = Group::ALL
        .iter()
        .map(|&group| GroupCheck {
            group,
            coordinates: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        })
        .collect();
    for (slot, analytic) in grads {
        let mut probe = params.clone();
        let numeric = finite_difference(
            |x| {
                probe.set(slot, x.clone())?;
                batch_loss(&probe, batch, cfg)
            },
            params.get(slot),
            eps,
        )?;
        let entry = report
            .iter_mut()
            .find(|r| r.group == slot.group())
            .expect("every group reported");
        entry.coordinates += analytic.len();
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            entry.max_rel_err = entry.max_rel_err.max(relative_error(a, n));
            entry.max_abs_err = entry.max_abs_err.max((a - n).abs());
        }
    }
    Ok(report)
}
