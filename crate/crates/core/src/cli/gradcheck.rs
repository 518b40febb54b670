//! End-to-end gradient check of every MoE weight against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::{finite_diff_grad, max_relative_error, ComputeGraph};
use crate::moe::{apply_capacity, moe_forward, moe_forward_graph, route, Layout, MoEParams, ParamNodes, RoutingPlan};
use crate::tensor::Tensor;

pub const MAX_H: u64 = 16;
pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;
const TOKENS: usize = 6;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckResult {
    pub variant: Variant,
    pub max_rel_error: f64,
    pub weights_checked: usize,
    pub passed: bool,
}

fn tensor_slot(params: &mut MoEParams, idx: usize) -> &mut Tensor {
    let mut slots: Vec<&mut Tensor> = vec![&mut params.router];
    if let Some(t) = params.outer_down.as_mut() {
        slots.push(t);
    }
    if let Some(t) = params.outer_up.as_mut() {
        slots.push(t);
    }
    for e in params.experts.iter_mut() {
        slots.push(&mut e.first);
        slots.push(&mut e.second);
    }
    slots.swap_remove(idx)
}

/// Checks `loss = Σ moe_forward(x)` for one variant. The routing plan is
/// computed once at the unperturbed weights.
pub fn check_variant(cfg: &ModelConfig, variant: Variant, seed: u64, corrupt: bool) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::from_config(variant, cfg);
    let params = MoEParams::init(layout, &mut rng);
    let x = Tensor::uniform(TOKENS, cfg.h as usize, -1.0, 1.0, &mut rng);
    let top_k = params.routing_top_k(cfg.top_k as usize);
    let plan: RoutingPlan = apply_capacity(&route(&x, &params, top_k)?, cfg.f);

    let mut g = ComputeGraph::new().with_corrupted_backward(corrupt);
    let xi = g.constant(x.clone());
    let nodes = ParamNodes::register(&mut g, &params, true);
    let out = moe_forward_graph(&mut g, xi, variant, &nodes, &plan)?;
    let loss = g.sum(out.output);
    g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (slot, id) in nodes.all().into_iter().enumerate() {
        let analytic = g
            .grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::new(g.value(id).shape().to_vec(), vec![0.0; g.value(id).len()]).expect("shape"));
        let base = g.value(id).clone();
        let numeric = finite_diff_grad(
            |w| {
                let mut p = params.clone();
                *tensor_slot(&mut p, slot) = w.clone();
                moe_forward(&x, &p, &plan).map(|y| y.sum()).unwrap_or(f64::NAN)
            },
            &base,
            EPS,
        );
        if numeric.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Contract(format!("{variant}: forward failed while probing weights")));
        }
        worst = worst.max(max_relative_error(&analytic, &numeric));
        checked += base.len();
    }
    Ok(GradcheckResult {
        variant,
        max_rel_error: worst,
        weights_checked: checked,
        passed: worst < TOLERANCE,
    })
}

/// Runs all three variants. Refuses configurations with `h > 16`.
pub fn run(cfg: &ModelConfig, seed: u64, corrupt: bool) -> Result<Vec<GradcheckResult>> {
    cfg.validate_block()?;
    if cfg.h > MAX_H {
        return Err(Error::config(
            "h",
            format!(
                "gradcheck probes every weight twice; use h <= {MAX_H} (e.g. --set h=8 --set r=0.5 --set e=4 --set top_k=2)"
            ),
        ));
    }
    Variant::ALL
        .iter()
        .map(|&v| check_variant(cfg, v, seed, corrupt))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_case_passes() {
        let cfg = ModelConfig::block(8, 0.5, 1, 1);
        for r in run(&cfg, 3, false).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let cfg = ModelConfig::block(8, 0.5, 4, 2);
        let results = run(&cfg, 3, true).unwrap();
        assert!(results.iter().all(|r| !r.passed));
    }

    #[test]
    fn oversized_is_refused() {
        assert!(run(&ModelConfig::block(32, 0.5, 4, 2), 0, false).is_err());
    }
}
