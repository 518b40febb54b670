//! Forward computation of one MoE layer.
//!
//! Fine-grained and vanilla layers send full-width tokens to their experts:
//! `y = Σ_{i∈T} p_i·E_i(x)`. BigMac layers first descend with a shared
//! projection, run the experts at width `r·h`, and ascend afterwards:
//! `x' = x·W↓'`, `y' = Σ p_i·E_i(x')`, `y = y'·W↑'`. The router always reads
//! the undescended `x`.

use crate::config::Variant;
use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, NodeId};
use crate::moe::params::{Expert, MoEParams};
use crate::moe::routing::{routed_fractions, RoutingPlan};
use crate::tensor::Tensor;

/// `relu(x·first)·second` for a single expert, checking the variant's
/// input width (`h` for fine-grained/vanilla, `r·h` for BigMac).
pub fn expert_forward(x: &Tensor, expert: &Expert, variant: Variant, h: usize) -> Result<Tensor> {
    let d_in = x.cols();
    let (io, _) = expert.first.dims2();
    let ok = match variant {
        Variant::FineGrained | Variant::Vanilla => d_in == h && io == h,
        Variant::BigMac => d_in == io && io <= h,
    };
    if !ok {
        return Err(Error::VariantShape(format!(
            "{variant} expert with first projection {:?} cannot take input {:?} (h={h})",
            expert.first.shape(),
            x.shape()
        )));
    }
    x.matmul(&expert.first)?.relu().matmul(&expert.second)
}

/// Graph handles of a layer's weights.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub router: NodeId,
    pub outer_down: Option<NodeId>,
    pub outer_up: Option<NodeId>,
    pub experts: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    /// Registers every weight of `params`, as trainable leaves or constants.
    pub fn register(g: &mut ComputeGraph, params: &MoEParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Self {
            router: leaf(&params.router),
            outer_down: params.outer_down.as_ref().map(&mut leaf),
            outer_up: params.outer_up.as_ref().map(&mut leaf),
            experts: params.experts.iter().map(|e| (leaf(&e.first), leaf(&e.second))).collect(),
        }
    }

    /// All handles in a fixed order: router, outer down, outer up, then
    /// each expert's first and second projection.
    pub fn all(&self) -> Vec<NodeId> {
        let mut v = vec![self.router];
        v.extend(self.outer_down);
        v.extend(self.outer_up);
        for &(a, b) in &self.experts {
            v.push(a);
            v.push(b);
        }
        v
    }
}

/// Output and router probabilities of a recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MoeNodes {
    pub output: NodeId,
    pub probs: NodeId,
}

/// Records the layer forward on `g`.
///
/// Gate values are recomputed from the router on the graph, so gradients
/// reach the router through the selected probabilities; the selection
/// itself comes from `plan` and is not differentiated.
pub fn moe_forward_graph(
    g: &mut ComputeGraph,
    x: NodeId,
    variant: Variant,
    nodes: &ParamNodes,
    plan: &RoutingPlan,
) -> Result<MoeNodes> {
    let tokens = g.value(x).rows();
    let e = g.value(nodes.router).cols();
    if plan.tokens != tokens || plan.num_experts != e || nodes.experts.len() != e {
        return Err(Error::Contract(format!(
            "plan covers {} tokens over {} experts, layer has {tokens} tokens and {e} experts",
            plan.tokens, plan.num_experts
        )));
    }
    if (variant == Variant::BigMac) != nodes.outer_down.is_some() {
        return Err(Error::Contract(format!("{variant} plan applied to mismatched weights")));
    }

    let logits = g.matmul(x, nodes.router)?;
    let probs = g.softmax_rows(logits);
    let picks: Vec<(usize, usize)> = plan
        .experts
        .iter()
        .enumerate()
        .map(|(i, &ex)| (i / plan.top_k, ex))
        .collect();
    let picked = g.gather_elements(probs, picks)?;
    let picked = g.reshape(picked, tokens, plan.top_k)?;
    let gates = g.normalize_rows(picked);

    let expert_in = match (variant, nodes.outer_down) {
        (Variant::BigMac, Some(down)) => g.matmul(x, down)?,
        _ => x,
    };
    let width = g.value(expert_in).cols();
    let mut acc = g.constant(Tensor::zeros(tokens, width));
    for (i, &(first, second)) in nodes.experts.iter().enumerate() {
        let assigned = plan.assignments_for(i);
        if assigned.is_empty() {
            continue;
        }
        let rows: Vec<usize> = assigned.iter().map(|&(t, _)| t).collect();
        let xi = g.gather_rows(expert_in, rows.clone())?;
        let hidden = g.matmul(xi, first)?;
        let hidden = g.relu(hidden);
        let out = g.matmul(hidden, second)?;
        let gi = g.gather_elements(gates, assigned)?;
        let weighted = g.scale_rows(out, gi)?;
        acc = g.scatter_add_rows(acc, weighted, rows)?;
    }

    let output = match (variant, nodes.outer_up) {
        (Variant::BigMac, Some(up)) => g.matmul(acc, up)?,
        _ => acc,
    };
    Ok(MoeNodes { output, probs })
}

/// Layer output for `x` under `plan` (`tokens × h`).
pub fn moe_forward(x: &Tensor, params: &MoEParams, plan: &RoutingPlan) -> Result<Tensor> {
    params.validate()?;
    let mut g = ComputeGraph::new();
    let xi = g.constant(x.clone());
    let nodes = ParamNodes::register(&mut g, params, false);
    let out = moe_forward_graph(&mut g, xi, params.variant, &nodes, plan)?;
    Ok(g.value(out.output).clone())
}

/// Auxiliary balance loss recorded on the graph; differentiable through the
/// mean router probabilities only.
pub fn aux_loss_graph(g: &mut ComputeGraph, probs: NodeId, plan: &RoutingPlan, alpha: f64) -> Result<NodeId> {
    let tokens = g.value(probs).rows();
    let e = plan.num_experts;
    let mean_w = g.constant(Tensor::filled(1, tokens, 1.0 / tokens as f64));
    let mean = g.matmul(mean_w, probs)?;
    let frac = g.constant(Tensor::matrix(e, 1, routed_fractions(plan))?);
    let dot = g.matmul(mean, frac)?;
    Ok(g.scale(dot, alpha * e as f64))
}
