use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::params::MoEParams;
use crate::tensor::Tensor;

/// Per-token expert selection.
///
/// Slots are stored flat, token-major: slot `j` of token `t` lives at
/// `t * top_k + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingPlan {
    pub tokens: usize,
    pub top_k: usize,
    pub num_experts: usize,
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
    pub dropped: Vec<bool>,
    /// `tokens × num_experts` router probabilities; absent for synthetic plans.
    pub full_probs: Option<Tensor>,
}

impl RoutingPlan {
    /// Builds a plan from explicit selections, validating indices and
    /// distinctness. No slot is dropped.
    pub fn from_selections(
        num_experts: usize,
        top_k: usize,
        experts: Vec<usize>,
        gates: Vec<f64>,
        full_probs: Option<Tensor>,
    ) -> Result<Self> {
        if top_k == 0 || top_k > num_experts {
            return Err(Error::config("top_k", format!("top_k={top_k} exceeds e={num_experts}")));
        }
        if !experts.len().is_multiple_of(top_k) || gates.len() != experts.len() {
            return Err(Error::Contract("selection arrays are not tokens × top_k".into()));
        }
        let tokens = experts.len() / top_k;
        for t in 0..tokens {
            let slots = &experts[t * top_k..(t + 1) * top_k];
            for (j, &x) in slots.iter().enumerate() {
                if x >= num_experts {
                    return Err(Error::Contract(format!("token {t} routes to expert {x} of {num_experts}")));
                }
                if slots[..j].contains(&x) {
                    return Err(Error::Contract(format!("token {t} selects expert {x} twice")));
                }
            }
        }
        if let Some(p) = &full_probs {
            if p.dims2() != (tokens, num_experts) {
                return Err(Error::Shape {
                    op: "routing_plan",
                    left: p.shape().to_vec(),
                    right: vec![tokens, num_experts],
                });
            }
        }
        Ok(Self {
            tokens,
            top_k,
            num_experts,
            dropped: vec![false; experts.len()],
            experts,
            gates,
            full_probs,
        })
    }

    pub fn slots(&self) -> usize {
        self.experts.len()
    }

    pub fn expert(&self, token: usize, slot: usize) -> usize {
        self.experts[token * self.top_k + slot]
    }

    pub fn gate(&self, token: usize, slot: usize) -> f64 {
        self.gates[token * self.top_k + slot]
    }

    pub fn is_dropped(&self, token: usize, slot: usize) -> bool {
        self.dropped[token * self.top_k + slot]
    }

    pub fn drop_count(&self) -> usize {
        self.dropped.iter().filter(|&&d| d).count()
    }

    /// Non-dropped (token, slot) assignments.
    pub fn kept(&self) -> usize {
        self.slots() - self.drop_count()
    }

    /// Routed slots per expert, before capacity.
    pub fn expert_load(&self) -> Vec<usize> {
        let mut load = vec![0; self.num_experts];
        for &x in &self.experts {
            load[x] += 1;
        }
        load
    }

    /// Non-dropped `(token, slot)` pairs routed to `expert`, in token order.
    pub fn assignments_for(&self, expert: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for t in 0..self.tokens {
            for j in 0..self.top_k {
                let i = t * self.top_k + j;
                if self.experts[i] == expert && !self.dropped[i] {
                    out.push((t, j));
                }
            }
        }
        out
    }
}

/// Indices of the `k` largest entries, largest first; ties go to the
/// smaller index.
pub fn select_top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Selected probabilities divided by their sum, summed in slot order.
pub fn renormalize(probs: &[f64]) -> Vec<f64> {
    let s: f64 = probs.iter().sum();
    probs.iter().map(|p| p / s).collect()
}

/// Softmax router over the pre-downscale tokens `x` (`tokens × h`).
pub fn route(x: &Tensor, params: &MoEParams, top_k: usize) -> Result<RoutingPlan> {
    route_with_router(x, &params.router, top_k)
}

/// [`route`] given only the `h × e` router matrix.
pub fn route_with_router(x: &Tensor, router: &Tensor, top_k: usize) -> Result<RoutingPlan> {
    let e = router.cols();
    if top_k == 0 || top_k > e {
        return Err(Error::config("top_k", format!("top_k={top_k} must lie in 1..={e}")));
    }
    if x.cols() != router.rows() {
        return Err(Error::Shape {
            op: "route",
            left: x.shape().to_vec(),
            right: router.shape().to_vec(),
        });
    }
    let probs = x.matmul(router)?.softmax_rows();
    let tokens = probs.rows();
    let mut experts = Vec::with_capacity(tokens * top_k);
    let mut gates = Vec::with_capacity(tokens * top_k);
    for t in 0..tokens {
        let row = probs.row(t);
        let sel = select_top_k(row, top_k);
        let picked: Vec<f64> = sel.iter().map(|&i| row[i]).collect();
        gates.extend(renormalize(&picked));
        experts.extend(sel);
    }
    RoutingPlan::from_selections(e, top_k, experts, gates, Some(probs))
}

/// Per-expert capacity `ceil(f·tokens·top_k/e)`; `None` when dropless.
pub fn expert_capacity(tokens: usize, top_k: usize, num_experts: usize, f: f64) -> Option<usize> {
    if f.is_infinite() {
        return None;
    }
    let exact = f * (tokens * top_k) as f64 / num_experts as f64;
    // `f` is usually a decimal like 1.2; shave representation error before ceil.
    Some((exact - 1e-9 * exact.max(1.0)).ceil().max(0.0) as usize)
}

/// Marks assignments beyond each expert's capacity as dropped, visiting
/// tokens in ascending order and slots in order within a token. Existing
/// drop flags are recomputed, so the result depends only on `f`.
pub fn apply_capacity(plan: &RoutingPlan, f: f64) -> RoutingPlan {
    let mut out = plan.clone();
    out.dropped.fill(false);
    let Some(cap) = expert_capacity(plan.tokens, plan.top_k, plan.num_experts, f) else {
        return out;
    };
    let mut used = vec![0usize; plan.num_experts];
    for (i, &x) in plan.experts.iter().enumerate() {
        if used[x] >= cap {
            out.dropped[i] = true;
        } else {
            used[x] += 1;
        }
    }
    out
}

/// Fraction of routed slots per expert, `count_i / (tokens·top_k)`,
/// counted before capacity is applied.
pub fn routed_fractions(plan: &RoutingPlan) -> Vec<f64> {
    let denom = plan.slots() as f64;
    plan.expert_load().into_iter().map(|c| c as f64 / denom).collect()
}

/// Auxiliary balance loss `α·e·Σ_i f_i·P_i` with `P_i` the mean router
/// probability of expert `i`.
pub fn aux_load_balance_loss(plan: &RoutingPlan, alpha: f64) -> Result<f64> {
    let probs = plan
        .full_probs
        .as_ref()
        .ok_or_else(|| Error::Contract("aux loss needs router probabilities".into()))?;
    if plan.tokens == 0 {
        return Err(Error::Contract("aux loss of an empty plan".into()));
    }
    let frac = routed_fractions(plan);
    let mut mean = vec![0.0; plan.num_experts];
    for t in 0..plan.tokens {
        for (m, p) in mean.iter_mut().zip(probs.row(t)) {
            *m += p;
        }
    }
    let dot: f64 = frac
        .iter()
        .zip(&mean)
        .map(|(f, m)| f * m / plan.tokens as f64)
        .sum();
    Ok(alpha * plan.num_experts as f64 * dot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::moe::params::Layout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params_with_router(router: Tensor) -> MoEParams {
        let (h, e) = router.dims2();
        let mut p = MoEParams::init(Layout::new(Variant::FineGrained, h, 1, e), &mut ChaCha8Rng::seed_from_u64(0));
        p.router = router;
        p
    }

    #[test]
    fn single_expert_gets_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params_with_router(Tensor::normal(4, 1, 1.0, &mut rng));
        let x = Tensor::uniform(5, 4, -1.0, 1.0, &mut rng);
        let plan = route(&x, &p, 1).unwrap();
        assert!(plan.experts.iter().all(|&i| i == 0));
        assert!(plan.gates.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn top2_gates_from_logits() {
        // identity router over one-hot-ish input yields logits [2, 1, 0, -1]
        let p = params_with_router(Tensor::identity(4));
        let x = Tensor::matrix(1, 4, vec![2.0, 1.0, 0.0, -1.0]).unwrap();
        let plan = route(&x, &p, 2).unwrap();
        assert_eq!(&plan.experts, &[0, 1]);
        let z: f64 = [2.0f64, 1.0, 0.0, -1.0].iter().map(|v| v.exp()).sum();
        let (a, b) = (2f64.exp() / z, 1f64.exp() / z);
        assert!((plan.gates[0] - a / (a + b)).abs() < 1e-12);
        assert!((plan.gates[0] - 0.7311).abs() < 1e-4);
        assert!((plan.gates[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn ties_pick_lower_index() {
        let p = params_with_router(Tensor::identity(3));
        let x = Tensor::matrix(1, 3, vec![0.0, 5.0, 5.0]).unwrap();
        assert_eq!(route(&x, &p, 1).unwrap().experts, vec![1]);
        assert_eq!(select_top_k(&[1.0, 1.0, 1.0, 1.0], 2), vec![0, 1]);
    }

    #[test]
    fn top_k_beyond_experts_is_config_error() {
        let p = params_with_router(Tensor::identity(3));
        let x = Tensor::zeros(2, 3);
        assert!(matches!(route(&x, &p, 4), Err(Error::Config { .. })));
    }

    #[test]
    fn route_rejects_reduced_dim_input() {
        let p = params_with_router(Tensor::identity(4));
        assert!(route(&Tensor::zeros(2, 2), &p, 1).is_err());
    }

    #[test]
    fn capacity_hand_count() {
        let plan = RoutingPlan::from_selections(4, 1, vec![0; 8], vec![1.0; 8], None).unwrap();
        assert_eq!(expert_capacity(8, 1, 4, 1.0), Some(2));
        let capped = apply_capacity(&plan, 1.0);
        assert_eq!(capped.drop_count(), 6);
        assert!(!capped.dropped[0] && !capped.dropped[1] && capped.dropped[2]);
        assert_eq!(apply_capacity(&plan, f64::INFINITY).drop_count(), 0);
    }

    #[test]
    fn balanced_routing_never_drops() {
        let experts: Vec<usize> = (0..16).map(|t| t % 4).collect();
        let plan = RoutingPlan::from_selections(4, 1, experts, vec![1.0; 16], None).unwrap();
        for f in [1.0, 1.2, 3.0] {
            assert_eq!(apply_capacity(&plan, f).drop_count(), 0);
        }
    }

    #[test]
    fn capacity_of_decimal_factor() {
        assert_eq!(expert_capacity(8192, 1, 64, 1.2), Some(154));
        assert_eq!(expert_capacity(10, 1, 2, 1.2), Some(6));
        assert_eq!(expert_capacity(100, 2, 8, 1.0), Some(25));
    }

    fn uniform_plan(tokens: usize, e: usize) -> RoutingPlan {
        let probs = Tensor::filled(tokens, e, 1.0 / e as f64);
        let experts = (0..tokens).map(|t| t % e).collect();
        RoutingPlan::from_selections(e, 1, experts, vec![1.0; tokens], Some(probs)).unwrap()
    }

    #[test]
    fn aux_loss_extremes() {
        let alpha = 0.001;
        let l = aux_load_balance_loss(&uniform_plan(8, 4), alpha).unwrap();
        assert!((l - alpha).abs() < 1e-15);

        let mut probs = Tensor::zeros(6, 4);
        for t in 0..6 {
            probs.data_mut()[t * 4] = 1.0;
        }
        let hot = RoutingPlan::from_selections(4, 1, vec![0; 6], vec![1.0; 6], Some(probs)).unwrap();
        assert!((aux_load_balance_loss(&hot, alpha).unwrap() - alpha * 4.0).abs() < 1e-15);
    }

    #[test]
    fn aux_loss_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (tokens, e, k) = (9, 5, 2);
        let p = params_with_router(Tensor::normal(3, e, 1.0, &mut rng));
        let x = Tensor::uniform(tokens, 3, -1.0, 1.0, &mut rng);
        let plan = route(&x, &p, k).unwrap();
        let probs = plan.full_probs.as_ref().unwrap();
        // Direct double loop over experts and tokens.
        let mut total = 0.0;
        for i in 0..e {
            let mut count = 0.0;
            let mut psum = 0.0;
            for t in 0..tokens {
                for j in 0..k {
                    if plan.expert(t, j) == i {
                        count += 1.0;
                    }
                }
                psum += probs.at(t, i);
            }
            total += (count / (tokens * k) as f64) * (psum / tokens as f64);
        }
        let alpha = 0.01 * rng.random::<f64>() + 0.001;
        let expected = alpha * e as f64 * total;
        assert!((aux_load_balance_loss(&plan, alpha).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn from_selections_rejects_duplicates() {
        assert!(RoutingPlan::from_selections(4, 2, vec![1, 1], vec![0.5, 0.5], None).is_err());
        assert!(RoutingPlan::from_selections(4, 2, vec![1, 4], vec![0.5, 0.5], None).is_err());
    }
}
