//! `key=value` run configuration files.
//!
//! Keys: `L N d T d_hidden d_llm V k sigma seed variant`, plus `gate`
//! (`raw|softmax`), `smoothing` (`softmax_then_smooth|smooth_then_softmax`),
//! `score_scale` (`hidden|model`), `tie_queries` and `tie_layer_norms`
//! (`true|false`). Blank lines and lines starting with `#` are ignored.
//! Missing keys keep their defaults.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::lpwca::GateNormalization;
use crate::lwca::SmoothingOrder;
use crate::pipeline::CcraConfig;

use super::CliError;

fn invalid(line: usize, key: &str, value: &str) -> CliError {
    CliError::Config(format!("line {line}: invalid value '{value}' for {key}"))
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| invalid(line, key, value))
}

fn apply(cfg: &mut CcraConfig, line: usize, key: &str, value: &str) -> Result<(), CliError> {
    match key {
        "L" => cfg.layers = parse(line, key, value)?,
        "N" => cfg.patches = parse(line, key, value)?,
        "d" => cfg.d = parse(line, key, value)?,
        "T" => cfg.tokens = parse(line, key, value)?,
        "d_hidden" => cfg.d_hidden = parse(line, key, value)?,
        "d_llm" => cfg.d_llm = parse(line, key, value)?,
        "V" => cfg.vocab = parse(line, key, value)?,
        "k" => cfg.k = parse(line, key, value)?,
        "sigma" => cfg.sigma = Some(parse(line, key, value)?),
        "seed" => cfg.seed = parse(line, key, value)?,
        "variant" => {
            cfg.variant = value
                .parse()
                .map_err(|e| CliError::Config(format!("line {line}: {e}")))?
        }
        "gate" => {
            cfg.gate = match value {
                "raw" => GateNormalization::Raw,
                "softmax" => GateNormalization::Softmax,
                _ => return Err(invalid(line, key, value)),
            }
        }
        "smoothing" => {
            cfg.smoothing = match value {
                "softmax_then_smooth" => SmoothingOrder::SoftmaxThenSmooth,
                "smooth_then_softmax" => SmoothingOrder::SmoothThenSoftmax,
                _ => return Err(invalid(line, key, value)),
            }
        }
        "score_scale" => {
            cfg.score_scale = value
                .parse()
                .map_err(|e| CliError::Config(format!("line {line}: {e}")))?
        }
        "tie_queries" => cfg.tie_queries = parse(line, key, value)?,
        "tie_layer_norms" => cfg.tie_layer_norms = parse(line, key, value)?,
        _ => {
            return Err(CliError::Config(format!(
                "line {line}: unknown key '{key}'"
            )))
        }
    }
    Ok(())
}

/// Parses and validates a run configuration.
pub fn parse_run_config(text: &str) -> Result<CcraConfig, CliError> {
    let mut cfg = CcraConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {line}: expected key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(CliError::Config(format!(
                "line {line}: duplicate key '{key}'"
            )));
        }
        apply(&mut cfg, line, key, value)?;
    }
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<CcraConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_run_config(&text)
}

/// Serializes the core keys in the order they are documented.
pub fn render_run_config(cfg: &CcraConfig) -> String {
    let mut out = format!(
        "L={}\nN={}\nd={}\nT={}\nd_hidden={}\nd_llm={}\nV={}\nk={}\n",
        cfg.layers, cfg.patches, cfg.d, cfg.tokens, cfg.d_hidden, cfg.d_llm, cfg.vocab, cfg.k
    );
    if let Some(s) = cfg.sigma {
        out.push_str(&format!("sigma={s}\n"));
    }
    out.push_str(&format!("seed={}\nvariant={}\n", cfg.seed, cfg.variant));
    out
}
