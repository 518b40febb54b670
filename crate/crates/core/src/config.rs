//! Model hyper-parameters and the communication cost model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MoE layer structure.
///
/// * `Vanilla`: few large experts at full hidden dimension.
/// * `FineGrained`: many small experts that descend then ascend; tokens
///   cross devices at dimension `h` (communicate-descend-ascend-communicate).
/// * `BigMac`: shared outer projections shrink tokens to `r·h` before the
///   All-to-All and restore them afterwards; experts ascend then descend
///   (descend-communicate-communicate-ascend).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    FineGrained,
    #[serde(rename = "bigmac")]
    BigMac,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::FineGrained, Variant::BigMac];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::FineGrained => "fine_grained",
            Variant::BigMac => "bigmac",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vanilla" => Ok(Variant::Vanilla),
            "fine_grained" | "finegrained" => Ok(Variant::FineGrained),
            "bigmac" | "big_mac" => Ok(Variant::BigMac),
            other => Err(Error::Usage(format!("unknown variant `{other}`"))),
        }
    }
}

/// Scalar hyper-parameters of one MoE model.
///
/// `b_tokens` is the number of tokens per iteration (sequences × sequence
/// length), which is how every formula in this crate consumes the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub b_tokens: u64,
    pub s: u64,
    pub h: u64,
    pub e: u64,
    pub top_k: u64,
    /// Expert capacity factor; `f64::INFINITY` is dropless routing.
    pub f: f64,
    pub ep: u64,
    pub r: f64,
    pub l: u64,
    pub v: u64,
    pub bytes_per_element: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            b_tokens: 524_288,
            s: 2048,
            h: 2048,
            e: 64,
            top_k: 8,
            f: 1.2,
            ep: 32,
            r: 0.25,
            l: 24,
            v: 50_257,
            bytes_per_element: 2,
        }
    }
}

impl ModelConfig {
    /// Small block-only configuration used by unit tests and the toy commands.
    pub fn block(h: u64, r: f64, e: u64, top_k: u64) -> Self {
        Self {
            b_tokens: 8,
            h,
            r,
            e,
            top_k,
            f: f64::INFINITY,
            ep: 1,
            ..Self::default()
        }
    }

    /// `r·h`, the dimension tokens travel at in the BigMac layout.
    pub fn reduced_dim(&self) -> u64 {
        (self.r * self.h as f64).round() as u64
    }

    /// Per-token element dimension sent through the All-to-All.
    pub fn comm_dim(&self, variant: Variant) -> u64 {
        match variant {
            Variant::BigMac => self.reduced_dim(),
            Variant::FineGrained | Variant::Vanilla => self.h,
        }
    }

    pub fn is_dropless(&self) -> bool {
        self.f.is_infinite()
    }

    /// Checks the constraints that concern a single MoE block
    /// (`h`, `r`, `e`, `top_k`, `f`).
    pub fn validate_block(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::config("h", "must be positive"));
        }
        if self.e == 0 {
            return Err(Error::config("e", "must be positive"));
        }
        if self.top_k == 0 || self.top_k > self.e {
            return Err(Error::config(
                "top_k",
                format!("must satisfy 1 <= top_k <= e (top_k={}, e={})", self.top_k, self.e),
            ));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::config("r", format!("must lie in (0, 1], got {}", self.r)));
        }
        let rh = self.r * self.h as f64;
        if (rh - rh.round()).abs() > 1e-9 || rh.round() < 1.0 {
            return Err(Error::config(
                "r",
                format!("r·h must be a positive integer (r={}, h={})", self.r, self.h),
            ));
        }
        if self.f.is_nan() || self.f <= 0.0 {
            return Err(Error::config("f", format!("must be positive or inf, got {}", self.f)));
        }
        Ok(())
    }

    /// Full validation, including the expert-parallel sharding constraints.
    pub fn validate(&self) -> Result<()> {
        self.validate_block()?;
        if self.ep == 0 {
            return Err(Error::config("ep", "must be positive"));
        }
        if !self.e.is_multiple_of(self.ep) {
            return Err(Error::config(
                "e, ep",
                format!("e mod ep must be 0 (e={}, ep={})", self.e, self.ep),
            ));
        }
        if self.b_tokens == 0 || !self.b_tokens.is_multiple_of(self.ep) {
            return Err(Error::config(
                "b_tokens, ep",
                format!("b_tokens must be a positive multiple of ep (b_tokens={}, ep={})", self.b_tokens, self.ep),
            ));
        }
        for (key, v) in [("s", self.s), ("l", self.l), ("v", self.v), ("bytes_per_element", self.bytes_per_element)] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Alpha-beta communication model plus a per-device compute rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Fixed latency per All-to-All phase, seconds.
    pub alpha: f64,
    /// Per-device link bandwidth, bytes/second.
    pub beta: f64,
    /// Sustained floating-point rate per device, FLOP/second.
    pub device_flops: f64,
}

impl Default for CostModel {
    /// 100 Gb/s links, 10 µs phase start-up, ~150 TFLOP/s devices.
    fn default() -> Self {
        Self {
            alpha: 1e-5,
            beta: 12.5e9,
            device_flops: 149.7e12,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("alpha_s", self.alpha), ("beta_Bps", self.beta), ("device_flops", self.device_flops)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, format!("must be strictly positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        CostModel::default().validate().unwrap();
        assert_eq!(ModelConfig::default().reduced_dim(), 512);
    }

    #[test]
    fn divisibility_error_names_keys() {
        let cfg = ModelConfig {
            e: 10,
            ep: 4,
            ..ModelConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("e, ep"), "{msg}");
    }

    #[test]
    fn block_constraints() {
        assert!(ModelConfig::block(8, 0.5, 4, 5).validate_block().is_err());
        assert!(ModelConfig::block(8, 0.3, 4, 2).validate_block().is_err());
        assert!(ModelConfig::block(8, 0.0, 4, 2).validate_block().is_err());
        assert!(ModelConfig::block(8, 0.5, 4, 2).validate().is_ok());
    }

    #[test]
    fn variant_parse() {
        assert_eq!("BigMac".parse::<Variant>().unwrap(), Variant::BigMac);
        assert_eq!("fine-grained".parse::<Variant>().unwrap(), Variant::FineGrained);
        assert!("dense".parse::<Variant>().is_err());
    }
}
