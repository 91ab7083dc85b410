use std::io::Write;
use std::path::Path;

use crate::conditioning::TextEmbeddings;
use crate::lpwca::VisualStack;
use crate::numerics::Tensor;
use crate::pipeline::{
    count_parameters, gradcheck_instance, gradient_check, synth_inputs, variant_forward,
    CcraConfig, CcraParams, ForwardTrace, Variant,
};

use super::heatmap::{render_csv, render_pgm, select_map, HeatmapFormat, MapSelect};
use super::run_config::load_run_config;
use super::tensor_file::{read_tensor, write_tensor};
use super::{write_atomic, CliError};

fn emit(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| CliError::Io(format!("cannot write output: {e}")))
}

fn load(config: &Path, seed: Option<u64>) -> Result<CcraConfig, CliError> {
    let mut cfg = load_run_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dims(t: &Tensor) -> String {
    t.shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn require_shape(what: &str, t: &Tensor, want: &[usize]) -> Result<(), CliError> {
    if t.shape() != want {
        return Err(CliError::Shape(format!(
            "{what} tensor has shape {:?} but the config needs {want:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn inputs(
    cfg: &CcraConfig,
    visual: Option<&Path>,
    text: Option<&Path>,
) -> Result<(TextEmbeddings, VisualStack), CliError> {
    let (mut t, mut vs, _) = synth_inputs(cfg, cfg.seed)?;
    if let Some(path) = visual {
        let v = read_tensor(path)?;
        require_shape("visual", &v, &[cfg.layers, cfg.patches, cfg.d])?;
        vs = VisualStack::from_tensor(&v)?;
    }
    if let Some(path) = text {
        let x = read_tensor(path)?;
        require_shape("text", &x, &[cfg.tokens, cfg.d])?;
        t = TextEmbeddings::new(x)?;
    }
    Ok((t, vs))
}

fn csv(header: &str, rows: impl Iterator<Item = String>) -> Vec<u8> {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s.into_bytes()
}

fn write_trace(dir: &Path, tr: &ForwardTrace) -> Result<(), CliError> {
    write_tensor(&dir.join("fused.ct"), &tr.fused.tokens)?;
    write_tensor(&dir.join("projected.ct"), &tr.fused.projected)?;
    write_tensor(&dir.join("logits.ct"), &tr.logits)?;
    write_tensor(&dir.join("wlp.ct"), tr.w_lp.weights())?;
    write_tensor(&dir.join("wp.ct"), tr.w_p.weights())?;
    let wl = &tr.layer_weights;
    write_atomic(
        &dir.join("wl.csv"),
        &csv(
            "layer,raw,smoothed",
            wl.raw
                .data()
                .iter()
                .zip(wl.smoothed.data())
                .enumerate()
                .map(|(i, (r, s))| format!("{i},{r},{s}")),
        ),
    )?;
    write_atomic(
        &dir.join("wp.csv"),
        &csv(
            "patch,weight",
            tr.w_p
                .weights()
                .data()
                .iter()
                .enumerate()
                .map(|(i, w)| format!("{i},{w}")),
        ),
    )?;
    write_atomic(
        &dir.join("alpha.csv"),
        &csv(
            "token,weight",
            tr.alpha
                .weights()
                .data()
                .iter()
                .enumerate()
                .map(|(i, w)| format!("{i},{w}")),
        ),
    )
}

/// Runs the configured variant and writes every trace artifact to `out_dir`.
pub fn cmd_forward(
    config: &Path,
    visual: Option<&Path>,
    text: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = load(config, seed)?;
    let (t, vs) = inputs(&cfg, visual, text)?;
    let params = CcraParams::init(&cfg)?;
    let tr = variant_forward(cfg.variant, &t, &vs, &params, &cfg)?;
    write_trace(out_dir, &tr)?;
    emit(
        out,
        &format!(
            "variant={} fused={} projected={} logits={} wlp={}",
            cfg.variant,
            dims(&tr.fused.tokens),
            dims(&tr.fused.projected),
            dims(&tr.logits),
            dims(tr.w_lp.weights())
        ),
    )
}

/// Compares analytic and central-difference gradients group by group.
pub fn cmd_gradcheck(
    config: &Path,
    eps: f64,
    tolerance: f64,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(CliError::Config(format!("eps must be positive, got {eps}")));
    }
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(CliError::Config(format!(
            "tolerance must be nonnegative, got {tolerance}"
        )));
    }
    let cfg = load(config, seed)?;
    let (params, batch) = gradcheck_instance(&cfg)?;
    let report = gradient_check(&params, &batch, &cfg, eps)?;
    let mut failing = Vec::new();
    for r in &report {
        let ok = r.max_rel_err < tolerance;
        if !ok {
            failing.push(r.group.name());
        }
        emit(
            out,
            &format!(
                "{:<13} max_rel_err={:.3e} max_abs_err={:.3e} coords={} {}",
                r.group.name(),
                r.max_rel_err,
                r.max_abs_err,
                r.coordinates,
                if ok { "ok" } else { "FAIL" }
            ),
        )?;
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient error at or above {tolerance} in: {}",
            failing.join(", ")
        )))
    }
}

/// Renders one vector of a map file as a `√N×√N` image or table.
pub fn cmd_heatmap(
    map: &Path,
    select: MapSelect,
    out_path: &Path,
    format: HeatmapFormat,
) -> Result<(), CliError> {
    let m = read_tensor(map)?;
    let (values, side) = select_map(&m, select)?;
    let bytes = match format {
        HeatmapFormat::Pgm => render_pgm(&values, side),
        HeatmapFormat::Csv => render_csv(&values, side).into_bytes(),
    };
    write_atomic(out_path, &bytes)
}

/// Runs every variant on the same input and reports how far apart their
/// fused features are.
pub fn cmd_variants(
    config: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = load(config, seed)?;
    let (t, vs) = inputs(&cfg, None, None)?;
    let params = CcraParams::init(&cfg)?;
    let mut traces = Vec::new();
    for v in Variant::ALL {
        let tr = variant_forward(v, &t, &vs, &params, &cfg)?;
        write_trace(&out_dir.join(v.name()), &tr)?;
        traces.push(tr);
    }
    let pairs = [(0, 0), (0, 1), (0, 2), (1, 2)];
    for (i, j) in pairs {
        let diff = traces[i]
            .fused
            .tokens
            .max_abs_diff(&traces[j].fused.tokens)?;
        emit(
            out,
            &format!(
                "{} vs {}: max_abs_diff={}",
                Variant::ALL[i],
                Variant::ALL[j],
                diff
            ),
        )?;
    }
    Ok(())
}

/// Prints the trainable parameter count of each group and the total.
pub fn cmd_params(config: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load(config, None)?;
    let report = count_parameters(&cfg);
    for (g, c) in &report.groups {
        emit(out, &format!("{:<13} {c}", g.name()))?;
    }
    emit(out, &format!("{:<13} {}", "total", report.total))
}
