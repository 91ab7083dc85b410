//! Progressive integration of the three stages, fusion with the last visual
//! layer, a toy decoder, parameter accounting and training utilities.

mod accounting;
mod config;
mod forward;
mod params;
mod synth;
mod train;

pub use accounting::{count_parameters, enumerate_parameters, ParamReport};
pub use config::{largest_fitting_kernel, CcraConfig, ScoreScale, Variant};
pub use forward::{
    build_forward, ccra_forward, fuse, project_visual, record_forward, variant_forward,
    ForwardTrace, FusedFeatures, Recorded, TraceNodes,
};
pub use params::{CcraParams, Group, ParamNodes, Slot};
pub use synth::{
    gradcheck_instance, layer_probe, synth_example, synth_inputs, LayerProbe, PROBE_NOISE,
};
pub use train::{
    batch_loss, gradient_check, loss_and_gradients, relative_error, toy_train_step, Example,
    GroupCheck, REL_ERR_FLOOR,
};
