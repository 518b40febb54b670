//! MoE layer: router, experts of the three structures, capacity dropping,
//! auxiliary balance loss and weight snapshots.

mod layer;
mod params;
mod routing;
pub mod snapshot;

pub use layer::{aux_loss_graph, expert_forward, moe_forward, moe_forward_graph, MoeNodes, ParamNodes};
pub use params::{vanilla_layout, Expert, Layout, MoEParams};
pub use routing::{
    apply_capacity, aux_load_balance_loss, expert_capacity, renormalize, route, route_with_router, routed_fractions, select_top_k,
    RoutingPlan,
};
