//! Closed-form parameter, FLOP and All-to-All accounting for fine-grained
//! and BigMac models.
//!
//! Every formula is evaluated exactly as stated in its closed form, even
//! where it disagrees with a constructive count (see [`NOTES`]).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::moe::Layout;

pub const GIB: f64 = (1u64 << 30) as f64;
pub const TERA: f64 = 1e12;

/// Footnotes attached to every report.
pub const NOTES: [&str; 2] = [
    "(v+e+2)h sits outside the per-layer multiplier, although every layer carries its own router",
    "the per-expert 2rh term differs from the rh+h bias count of a literal two-matrix expert; constructed MoE layers here carry no biases",
];

fn analytic_variant(variant: Variant) -> Result<()> {
    match variant {
        Variant::FineGrained | Variant::BigMac => Ok(()),
        Variant::Vanilla => Err(Error::Usage("closed forms cover fine_grained and bigmac only".into())),
    }
}

/// `(4h²+8h+(2rh²+2rh)e)l + (v+e+2)h`, plus `2rlh²` for BigMac.
pub fn param_count_formula(cfg: &ModelConfig, variant: Variant) -> Result<u64> {
    analytic_variant(variant)?;
    let (h, rh, e, l, v) = (cfg.h, cfg.reduced_dim(), cfg.e, cfg.l, cfg.v);
    let per_layer = 4 * h * h + 8 * h + (2 * rh * h + 2 * rh) * e;
    let mut total = per_layer * l + (v + e + 2) * h;
    if variant == Variant::BigMac {
        total += 2 * rh * l * h;
    }
    Ok(total)
}

/// `12·b·s·l·h²·(2 + s/h + v/(2lh) + r·top_k)`, plus `12·r·b·s·l·h²` for
/// BigMac. `b·s` is `cfg.b_tokens`.
pub fn flops_formula(cfg: &ModelConfig, variant: Variant) -> Result<f64> {
    analytic_variant(variant)?;
    let (bs, s, h, l, v) = (
        cfg.b_tokens as f64,
        cfg.s as f64,
        cfg.h as f64,
        cfg.l as f64,
        cfg.v as f64,
    );
    let base = 12.0 * bs * l * h * h;
    let mut total = base * (2.0 + s / h + v / (2.0 * l * h) + cfg.r * cfg.top_k as f64);
    if variant == Variant::BigMac {
        total += cfg.r * base;
    }
    Ok(total)
}

/// Per-layer, per-direction All-to-All element count
/// `2·top_k·((ep−1)/ep)·b·s·h`; BigMac replaces `h` with `r·h`.
pub fn a2a_volume_formula(cfg: &ModelConfig, variant: Variant) -> u128 {
    let ep = cfg.ep as u128;
    if ep == 0 {
        return 0;
    }
    let dim = cfg.comm_dim(variant) as u128;
    // b·s is a multiple of ep, so the remote share is exact.
    let remote_tokens = cfg.b_tokens as u128 / ep * (ep - 1);
    2 * cfg.top_k as u128 * remote_tokens * dim
}

/// Transfer size in bytes per iteration:
/// `2 phases × 2 (fwd+bwd) × bytes_per_element × b·s·l·h·top_k·(ep−1)/ep`,
/// scaled by `r` for BigMac. With BF16 the leading factor is 8.
pub fn a2a_transfer_formula(cfg: &ModelConfig, variant: Variant) -> Result<u128> {
    analytic_variant(variant)?;
    Ok(a2a_volume_formula(cfg, variant) * 2 * cfg.bytes_per_element as u128 * cfg.l as u128)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub variant: Variant,
    pub param_count: u64,
    pub flops: f64,
    pub a2a_bytes: u128,
    /// Weights actually held by one constructed MoE layer (router, outer
    /// projections, experts), for side-by-side comparison.
    pub constructed_moe_layer_params: u64,
}

/// Relative changes, BigMac vs fine-grained, as fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub param_count: f64,
    pub flops: f64,
    pub a2a_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsReport {
    pub fine_grained: VariantStats,
    pub bigmac: VariantStats,
    pub deltas: Deltas,
    pub notes: Vec<String>,
}

fn rel(new: f64, old: f64) -> f64 {
    if old == 0.0 {
        0.0
    } else {
        (new - old) / old
    }
}

fn stats(cfg: &ModelConfig, variant: Variant) -> Result<VariantStats> {
    Ok(VariantStats {
        variant,
        param_count: param_count_formula(cfg, variant)?,
        flops: flops_formula(cfg, variant)?,
        a2a_bytes: a2a_transfer_formula(cfg, variant)?,
        constructed_moe_layer_params: Layout::from_config(variant, cfg).param_count(),
    })
}

pub fn analyze(cfg: &ModelConfig) -> Result<AnalyticsReport> {
    cfg.validate_block()?;
    let fine_grained = stats(cfg, Variant::FineGrained)?;
    let bigmac = stats(cfg, Variant::BigMac)?;
    let deltas = Deltas {
        param_count: rel(bigmac.param_count as f64, fine_grained.param_count as f64),
        flops: rel(bigmac.flops, fine_grained.flops),
        a2a_bytes: rel(bigmac.a2a_bytes as f64, fine_grained.a2a_bytes as f64),
    };
    Ok(AnalyticsReport {
        fine_grained,
        bigmac,
        deltas,
        notes: NOTES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Thousands separators on the integer part of a fixed-point number.
pub fn group_thousands(value: f64, decimals: usize) -> String {
    let s = format!("{:.*}", decimals, value.abs());
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i.to_string(), Some(f.to_string())),
        None => (s.clone(), None),
    };
    let mut grouped = String::new();
    for (i, ch) in int.chars().enumerate() {
        if i > 0 && (int.len() - i) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(ch);
    }
    let sign = if value < 0.0 { "-" } else { "" };
    match frac {
        Some(f) => format!("{sign}{grouped}.{f}"),
        None => format!("{sign}{grouped}"),
    }
}

fn pct(delta: f64) -> String {
    format!("{:+.2}%", delta * 100.0)
}

impl AnalyticsReport {
    /// Aligned text table with `#Param`, `#FLOPs` and `#A2A` rows.
    pub fn to_table(&self) -> String {
        let fg = &self.fine_grained;
        let bm = &self.bigmac;
        let rows = [
            (
                "#Param",
                format!("{:.2}B", fg.param_count as f64 / 1e9),
                format!("{:.2}B ({})", bm.param_count as f64 / 1e9, pct(self.deltas.param_count)),
            ),
            (
                "#FLOPs",
                format!("{} T", group_thousands(fg.flops / TERA, 2)),
                format!("{} T ({})", group_thousands(bm.flops / TERA, 2), pct(self.deltas.flops)),
            ),
            (
                "#A2A",
                format!("{} GiB", group_thousands(fg.a2a_bytes as f64 / GIB, 2)),
                format!("{} GiB ({})", group_thousands(bm.a2a_bytes as f64 / GIB, 2), pct(self.deltas.a2a_bytes)),
            ),
        ];
        let header = ("Metric", "FineGrained".to_string(), "BigMac".to_string());
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(header.0.len());
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(header.1.len());
        let w2 = rows.iter().map(|r| r.2.len()).max().unwrap_or(0).max(header.2.len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<w0$}  {:>w1$}  {:>w2$}", header.0, header.1, header.2);
        let _ = writeln!(out, "{}", "-".repeat(w0 + w1 + w2 + 4));
        for (m, a, b) in &rows {
            let _ = writeln!(out, "{m:<w0$}  {a:>w1$}  {b:>w2$}");
        }
        let _ = writeln!(
            out,
            "constructed MoE layer params: fine_grained {}, bigmac {}",
            fg.constructed_moe_layer_params, bm.constructed_moe_layer_params
        );
        for (i, note) in self.notes.iter().enumerate() {
            let _ = writeln!(out, "[{}] {note}", i + 1);
        }
        out
    }

    /// Two data rows: `variant,param_count,flops,a2a_bytes,a2a_gib`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "param_count", "flops", "a2a_bytes", "a2a_gib"])?;
        for s in [&self.fine_grained, &self.bigmac] {
            w.write_record([
                s.variant.to_string(),
                s.param_count.to_string(),
                s.flops.to_string(),
                s.a2a_bytes.to_string(),
                (s.a2a_bytes as f64 / GIB).to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
