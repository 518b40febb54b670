//! Expert-parallel execution of one MoE layer across virtual devices.
//!
//! Tokens are sharded evenly over `ep` devices and experts are placed in
//! contiguous blocks. A routing plan is turned into dispatch and combine
//! manifests (source × destination slot counts); bytes are counted exactly
//! and converted to time with an alpha-beta model whose bottleneck is the
//! busiest sender.
//!
//! Training accounting in [`SimRecord`]: backward All-to-All traffic equals
//! forward traffic (activation gradients have the activations' shapes), and
//! backward compute is twice forward compute, so communication is doubled
//! and compute tripled.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{CostModel, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::moe::{apply_capacity, route_with_router, RoutingPlan};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub ep: usize,
    pub expert_to_device: Vec<usize>,
    pub token_to_device: Vec<usize>,
}

pub fn build_placement(cfg: &ModelConfig) -> Result<Placement> {
    let (e, ep, tokens) = (cfg.e as usize, cfg.ep as usize, cfg.b_tokens as usize);
    if ep == 0 || e % ep != 0 {
        return Err(Error::config("e, ep", format!("e mod ep must be 0 (e={e}, ep={ep})")));
    }
    if tokens == 0 || tokens % ep != 0 {
        return Err(Error::config(
            "b_tokens, ep",
            format!("b_tokens mod ep must be 0 (b_tokens={tokens}, ep={ep})"),
        ));
    }
    Ok(Placement {
        ep,
        expert_to_device: (0..e).map(|i| i * ep / e).collect(),
        token_to_device: (0..tokens).map(|t| t * ep / tokens).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Dispatch,
    Combine,
}

/// Slot counts moved between devices in one All-to-All phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchManifest {
    pub phase: Phase,
    /// `counts[src][dst]`
    pub counts: Vec<Vec<u64>>,
    pub element_dim: u64,
    pub bytes_per_element: u64,
}

impl DispatchManifest {
    /// The return trip of a dispatch: same slots, reversed direction.
    pub fn combine(&self) -> DispatchManifest {
        let n = self.counts.len();
        let counts = (0..n).map(|i| (0..n).map(|j| self.counts[j][i]).collect()).collect();
        DispatchManifest {
            phase: Phase::Combine,
            counts,
            element_dim: self.element_dim,
            bytes_per_element: self.bytes_per_element,
        }
    }

    pub fn total_slots(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Dispatch manifest of a capacity-applied plan.
pub fn build_manifest(
    plan: &RoutingPlan,
    placement: &Placement,
    cfg: &ModelConfig,
    variant: Variant,
) -> Result<DispatchManifest> {
    if plan.tokens != placement.token_to_device.len() || plan.num_experts != placement.expert_to_device.len() {
        return Err(Error::Contract(format!(
            "plan ({} tokens, {} experts) does not match placement ({} tokens, {} experts)",
            plan.tokens,
            plan.num_experts,
            placement.token_to_device.len(),
            placement.expert_to_device.len()
        )));
    }
    let ep = placement.ep;
    let mut counts = vec![vec![0u64; ep]; ep];
    for (i, (&x, &dropped)) in plan.experts.iter().zip(&plan.dropped).enumerate() {
        if dropped {
            continue;
        }
        let src = placement.token_to_device[i / plan.top_k];
        counts[src][placement.expert_to_device[x]] += 1;
    }
    Ok(DispatchManifest {
        phase: Phase::Dispatch,
        counts,
        element_dim: cfg.comm_dim(variant),
        bytes_per_element: cfg.bytes_per_element,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct A2aBytes {
    pub total: u64,
    pub egress: Vec<u64>,
}

/// Cross-device bytes of one phase; same-device slots are free.
pub fn a2a_bytes(m: &DispatchManifest) -> A2aBytes {
    let per_slot = m.element_dim * m.bytes_per_element;
    let egress: Vec<u64> = m
        .counts
        .iter()
        .enumerate()
        .map(|(src, row)| {
            row.iter()
                .enumerate()
                .filter(|&(dst, _)| dst != src)
                .map(|(_, &c)| c * per_slot)
                .sum()
        })
        .collect();
    A2aBytes {
        total: egress.iter().sum(),
        egress,
    }
}

/// `alpha + max_d egress[d] / beta`.
pub fn phase_latency(m: &DispatchManifest, cost: &CostModel) -> f64 {
    let max = a2a_bytes(m).egress.into_iter().max().unwrap_or(0);
    cost.alpha + max as f64 / cost.beta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Random tokens through a randomly initialised softmax router.
    Learned,
    /// `top_k` distinct experts sampled uniformly per token.
    UniformRandom,
    /// Only experts on the token's own device.
    LocalOnly,
    /// Every token picks the same hot experts `0..top_k`.
    SingleExpert,
}

impl RoutingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Learned => "learned",
            RoutingMode::UniformRandom => "uniform_random",
            RoutingMode::LocalOnly => "local_only",
            RoutingMode::SingleExpert => "single_expert",
        }
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "learned" => Ok(RoutingMode::Learned),
            "uniform_random" => Ok(RoutingMode::UniformRandom),
            "local_only" => Ok(RoutingMode::LocalOnly),
            "single_expert" => Ok(RoutingMode::SingleExpert),
            other => Err(Error::Usage(format!(
                "unknown routing mode `{other}` (expected learned, uniform_random, local_only or single_expert)"
            ))),
        }
    }
}

const LEARNED_CHUNK: usize = 1024;

/// Routing plan for `mode`, before capacity. Depends only on the
/// configuration and the seed, never on the variant.
pub fn generate_plan(cfg: &ModelConfig, placement: &Placement, mode: RoutingMode, seed: u64) -> Result<RoutingPlan> {
    let (tokens, e, k) = (cfg.b_tokens as usize, cfg.e as usize, cfg.top_k as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform_gates = || vec![1.0 / k as f64; tokens * k];
    match mode {
        RoutingMode::UniformRandom => {
            let mut experts = Vec::with_capacity(tokens * k);
            for _ in 0..tokens {
                experts.extend(sample(&mut rng, e, k));
            }
            RoutingPlan::from_selections(e, k, experts, uniform_gates(), None)
        }
        RoutingMode::LocalOnly => {
            let per_device = e / placement.ep;
            if k > per_device {
                return Err(Error::config(
                    "top_k",
                    format!("local_only routing needs top_k <= e/ep (top_k={k}, e/ep={per_device})"),
                ));
            }
            let mut experts = Vec::with_capacity(tokens * k);
            for t in 0..tokens {
                let base = placement.token_to_device[t] * per_device;
                experts.extend(sample(&mut rng, per_device, k).into_iter().map(|i| base + i));
            }
            RoutingPlan::from_selections(e, k, experts, uniform_gates(), None)
        }
        RoutingMode::SingleExpert => {
            let experts = (0..tokens).flat_map(|_| 0..k).collect();
            RoutingPlan::from_selections(e, k, experts, uniform_gates(), None)
        }
        RoutingMode::Learned => {
            let h = cfg.h as usize;
            let router = Tensor::normal(h, e, 1.0 / (h as f64).sqrt(), &mut rng);
            let mut experts = Vec::with_capacity(tokens * k);
            let mut gates = Vec::with_capacity(tokens * k);
            let mut start = 0;
            while start < tokens {
                let n = LEARNED_CHUNK.min(tokens - start);
                let x = Tensor::normal(n, h, 1.0, &mut rng);
                let part = route_with_router(&x, &router, k)?;
                experts.extend(part.experts);
                gates.extend(part.gates);
                start += n;
            }
            RoutingPlan::from_selections(e, k, experts, gates, None)
        }
    }
}

/// Simulated outcome for one (variant, top_k, mode) point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub variant: Variant,
    pub mode: RoutingMode,
    pub top_k: u64,
    pub ep: u64,
    pub r: f64,
    /// Dispatch + combine bytes of the forward pass.
    pub a2a_bytes_fwd: u64,
    /// Equal to the forward bytes.
    pub a2a_bytes_bwd: u64,
    /// Forward and backward All-to-All time.
    pub a2a_latency_s: f64,
    /// Expert (and, for BigMac, outer projection) compute, forward and backward.
    pub expert_compute_s: f64,
    /// Remaining per-layer compute (attention block), forward and backward.
    pub dense_compute_s: f64,
    pub compute_s: f64,
    pub total_s: f64,
    pub drops: u64,
    /// Non-dropped (token, slot) assignments.
    pub assignments: u64,
    pub dispatch_egress: Vec<u64>,
    pub combine_egress: Vec<u64>,
}

impl SimRecord {
    /// Share of the total time spent in All-to-All.
    pub fn a2a_share(&self) -> f64 {
        self.a2a_latency_s / self.total_s
    }
}

/// Forward FLOPs of the routed experts; BigMac adds its two outer projections.
pub fn expert_forward_flops(cfg: &ModelConfig, variant: Variant, assignments: u64) -> f64 {
    let proj = 2.0 * cfg.reduced_dim() as f64 * cfg.h as f64;
    let mut flops = 2.0 * assignments as f64 * proj;
    if variant == Variant::BigMac {
        flops += 2.0 * cfg.b_tokens as f64 * proj;
    }
    flops
}

/// Forward FLOPs of one layer's attention block, `4·b·s·h²·(2 + s/h)`;
/// one third of the matching per-layer training term of the closed form.
pub fn dense_forward_flops(cfg: &ModelConfig) -> f64 {
    let (bs, s, h) = (cfg.b_tokens as f64, cfg.s as f64, cfg.h as f64);
    4.0 * bs * h * h * (2.0 + s / h)
}

/// Times a dispatch/combine pair (or any list of phases) under `cost`.
pub fn estimate_latency(
    manifests: &[DispatchManifest],
    cost: &CostModel,
    cfg: &ModelConfig,
    variant: Variant,
    mode: RoutingMode,
    drops: u64,
) -> Result<SimRecord> {
    let dispatch = manifests
        .iter()
        .find(|m| m.phase == Phase::Dispatch)
        .ok_or_else(|| Error::Contract("latency estimate needs a dispatch manifest".into()))?;
    let combine = manifests
        .iter()
        .find(|m| m.phase == Phase::Combine)
        .ok_or_else(|| Error::Contract("latency estimate needs a combine manifest".into()))?;
    let d = a2a_bytes(dispatch);
    let c = a2a_bytes(combine);
    let fwd_bytes = d.total + c.total;
    let fwd_comm: f64 = manifests.iter().map(|m| phase_latency(m, cost)).sum();
    let a2a_latency_s = 2.0 * fwd_comm;

    let assignments = dispatch.total_slots();
    let device_rate = cfg.ep as f64 * cost.device_flops;
    let expert_compute_s = 3.0 * expert_forward_flops(cfg, variant, assignments) / device_rate;
    let dense_compute_s = 3.0 * dense_forward_flops(cfg) / device_rate;
    let compute_s = expert_compute_s + dense_compute_s;
    Ok(SimRecord {
        variant,
        mode,
        top_k: cfg.top_k,
        ep: cfg.ep,
        r: cfg.r,
        a2a_bytes_fwd: fwd_bytes,
        a2a_bytes_bwd: fwd_bytes,
        a2a_latency_s,
        expert_compute_s,
        dense_compute_s,
        compute_s,
        total_s: a2a_latency_s + compute_s,
        drops,
        assignments,
        dispatch_egress: d.egress,
        combine_egress: c.egress,
    })
}

/// Routes, applies capacity, builds both manifests and times them.
pub fn simulate_layer(
    cfg: &ModelConfig,
    variant: Variant,
    mode: RoutingMode,
    seed: u64,
    cost: &CostModel,
) -> Result<SimRecord> {
    cfg.validate()?;
    let placement = build_placement(cfg)?;
    let plan = apply_capacity(&generate_plan(cfg, &placement, mode, seed)?, cfg.f);
    simulate_plan(&plan, &placement, cfg, variant, mode, cost)
}

/// [`simulate_layer`] on an existing capacity-applied plan.
pub fn simulate_plan(
    plan: &RoutingPlan,
    placement: &Placement,
    cfg: &ModelConfig,
    variant: Variant,
    mode: RoutingMode,
    cost: &CostModel,
) -> Result<SimRecord> {
    let dispatch = build_manifest(plan, placement, cfg, variant)?;
    let combine = dispatch.combine();
    estimate_latency(&[dispatch, combine], cost, cfg, variant, mode, plan.drop_count() as u64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub records: Vec<SimRecord>,
}

/// Flat CSV row of a [`SimRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCsvRow {
    pub variant: Variant,
    pub top_k: u64,
    pub ep: u64,
    pub r: f64,
    pub mode: RoutingMode,
    pub a2a_bytes_fwd: u64,
    pub a2a_bytes_bwd: u64,
    pub a2a_latency_s: f64,
    pub compute_s: f64,
    pub total_s: f64,
    pub drops: u64,
}

impl From<&SimRecord> for SimCsvRow {
    fn from(r: &SimRecord) -> Self {
        Self {
            variant: r.variant,
            top_k: r.top_k,
            ep: r.ep,
            r: r.r,
            mode: r.mode,
            a2a_bytes_fwd: r.a2a_bytes_fwd,
            a2a_bytes_bwd: r.a2a_bytes_bwd,
            a2a_latency_s: r.a2a_latency_s,
            compute_s: r.compute_s,
            total_s: r.total_s,
            drops: r.drops,
        }
    }
}

impl SimReport {
    pub fn csv_rows(&self) -> Vec<SimCsvRow> {
        self.records.iter().map(SimCsvRow::from).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.csv_rows() {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn parse_csv(text: &str) -> Result<Vec<SimCsvRow>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }

    pub fn find(&self, variant: Variant, top_k: u64) -> Option<&SimRecord> {
        self.records.iter().find(|r| r.variant == variant && r.top_k == top_k)
    }
}

/// One record per (top_k, variant), top_k-major, all at the same seed.
pub fn sweep_topk(
    cfg: &ModelConfig,
    variants: &[Variant],
    topk_list: &[u64],
    cost: &CostModel,
    mode: RoutingMode,
    seed: u64,
) -> Result<SimReport> {
    if let Some(&k) = topk_list.iter().find(|&&k| k == 0 || k > cfg.e) {
        return Err(Error::config("top_k", format!("sweep value {k} outside 1..={}", cfg.e)));
    }
    let mut records = Vec::with_capacity(variants.len() * topk_list.len());
    for &k in topk_list {
        let point = ModelConfig { top_k: k, ..cfg.clone() };
        point.validate()?;
        let placement = build_placement(&point)?;
        let plan = apply_capacity(&generate_plan(&point, &placement, mode, seed)?, point.f);
        for &variant in variants {
            records.push(simulate_plan(&plan, &placement, &point, variant, mode, cost)?);
        }
    }
    Ok(SimReport { records })
}
