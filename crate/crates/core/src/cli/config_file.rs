//! Flat `key = value` configuration files with `--set` overrides.

use std::path::Path;

use crate::config::{CostModel, ModelConfig};
use crate::error::{Error, Result};

pub const KNOWN_KEYS: [&str; 14] = [
    "b_tokens",
    "s",
    "h",
    "e",
    "top_k",
    "f",
    "ep",
    "r",
    "l",
    "v",
    "bytes_per_element",
    "alpha_s",
    "beta_Bps",
    "device_flops",
];

fn parse_int(key: &str, value: &str) -> Result<u64> {
    value
        .replace('_', "")
        .parse()
        .map_err(|_| Error::config(key, format!("expected a non-negative integer, got `{value}`")))
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    match value.to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "+inf" | "∞" => Ok(f64::INFINITY),
        _ => value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::config(key, format!("expected a number, got `{value}`"))),
    }
}

/// Applies one assignment. Keys are case-sensitive.
pub fn set_key(cfg: &mut ModelConfig, cost: &mut CostModel, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    match key {
        "b_tokens" => cfg.b_tokens = parse_int(key, value)?,
        "s" => cfg.s = parse_int(key, value)?,
        "h" => cfg.h = parse_int(key, value)?,
        "e" => cfg.e = parse_int(key, value)?,
        "top_k" => cfg.top_k = parse_int(key, value)?,
        "f" => cfg.f = parse_float(key, value)?,
        "ep" => cfg.ep = parse_int(key, value)?,
        "r" => cfg.r = parse_float(key, value)?,
        "l" => cfg.l = parse_int(key, value)?,
        "v" => cfg.v = parse_int(key, value)?,
        "bytes_per_element" => cfg.bytes_per_element = parse_int(key, value)?,
        "alpha_s" => cost.alpha = parse_float(key, value)?,
        "beta_Bps" => cost.beta = parse_float(key, value)?,
        "device_flops" => cost.device_flops = parse_float(key, value)?,
        other => {
            return Err(Error::config(
                other,
                format!("unknown key (known: {})", KNOWN_KEYS.join(", ")),
            ))
        }
    }
    Ok(())
}

fn split_assignment(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k, v.trim()))
}

/// Reads `path` (if any) over the defaults, then applies `KEY=VALUE`
/// overrides in order. No validation is performed.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<(ModelConfig, CostModel)> {
    let mut cfg = ModelConfig::default();
    let mut cost = CostModel::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(line).ok_or_else(|| {
                Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{raw}`"))
            })?;
            set_key(&mut cfg, &mut cost, k, v)?;
        }
    }
    for o in overrides {
        let (k, v) = split_assignment(o)
            .ok_or_else(|| Error::config("--set", format!("expected KEY=VALUE, got `{o}`")))?;
        set_key(&mut cfg, &mut cost, k, v)?;
    }
    Ok((cfg, cost))
}

/// [`load_config`] followed by full validation of both halves.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<(ModelConfig, CostModel)> {
    let (cfg, cost) = load_config(path, overrides)?;
    cfg.validate()?;
    cost.validate()?;
    Ok((cfg, cost))
}
