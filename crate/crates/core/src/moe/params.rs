use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The two projections of one expert, applied as `relu(x·first)·second`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub first: Tensor,
    pub second: Tensor,
}

/// Shape summary of a layer, independent of any allocated weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub variant: Variant,
    pub h: usize,
    /// `r·h`.
    pub reduced: usize,
    pub experts: usize,
    /// Input/output dimension of each expert.
    pub expert_io: usize,
    /// Hidden (intermediate) dimension of each expert.
    pub expert_hidden: usize,
}

impl Layout {
    pub fn new(variant: Variant, h: usize, reduced: usize, e: usize) -> Self {
        match variant {
            Variant::FineGrained => Self {
                variant,
                h,
                reduced,
                experts: e,
                expert_io: h,
                expert_hidden: reduced,
            },
            Variant::BigMac => Self {
                variant,
                h,
                reduced,
                experts: e,
                expert_io: reduced,
                expert_hidden: h,
            },
            Variant::Vanilla => {
                let (ev, hf) = vanilla_layout(e, reduced);
                Self {
                    variant,
                    h,
                    reduced,
                    experts: ev,
                    expert_io: h,
                    expert_hidden: hf,
                }
            }
        }
    }

    pub fn from_config(variant: Variant, cfg: &ModelConfig) -> Self {
        Self::new(variant, cfg.h as usize, cfg.reduced_dim() as usize, cfg.e as usize)
    }

    /// Weights held by one expert.
    pub fn expert_params(&self) -> u64 {
        2 * (self.expert_io as u64) * (self.expert_hidden as u64)
    }

    /// Multiply-adds one expert spends on one token.
    pub fn expert_macs_per_token(&self) -> u64 {
        self.expert_params()
    }

    /// Router, outer projections and experts.
    pub fn param_count(&self) -> u64 {
        let router = (self.h * self.experts) as u64;
        let outer = match self.variant {
            Variant::BigMac => 2 * (self.h * self.reduced) as u64,
            _ => 0,
        };
        router + outer + self.experts as u64 * self.expert_params()
    }
}

/// Conventional-MoE sizing at the fine-grained parameter budget: `e/8`
/// experts (at least one, and always a divisor of `e`) whose hidden width is
/// `r·h·e/e_v`, so the expert weights total exactly `e·2·h·r·h`.
pub fn vanilla_layout(e: usize, reduced: usize) -> (usize, usize) {
    let target = (e / 8).max(1);
    let ev = (1..=target).rev().find(|d| e.is_multiple_of(*d)).unwrap_or(1);
    (ev, reduced * e / ev)
}

/// Weight set of one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEParams {
    pub variant: Variant,
    /// `h × experts`.
    pub router: Tensor,
    /// `h × r·h`, BigMac only.
    pub outer_down: Option<Tensor>,
    /// `r·h × h`, BigMac only.
    pub outer_up: Option<Tensor>,
    pub experts: Vec<Expert>,
}

impl MoEParams {
    /// Random initialisation with `N(0, 1/fan_in)` entries.
    pub fn init<R: Rng + ?Sized>(layout: Layout, rng: &mut R) -> Self {
        let Layout {
            variant,
            h,
            reduced,
            experts,
            expert_io,
            expert_hidden,
        } = layout;
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let router = Tensor::normal(h, experts, std(h), rng);
        let (outer_down, outer_up) = if variant == Variant::BigMac {
            (
                Some(Tensor::normal(h, reduced, std(h), rng)),
                Some(Tensor::normal(reduced, h, std(reduced), rng)),
            )
        } else {
            (None, None)
        };
        let experts = (0..experts)
            .map(|_| Expert {
                first: Tensor::normal(expert_io, expert_hidden, std(expert_io), rng),
                second: Tensor::normal(expert_hidden, expert_io, std(expert_hidden), rng),
            })
            .collect();
        Self {
            variant,
            router,
            outer_down,
            outer_up,
            experts,
        }
    }

    pub fn h(&self) -> usize {
        self.router.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.router.cols()
    }

    /// Top-k actually usable by this layer: vanilla layers have fewer,
    /// larger experts, so the request is clamped to their count.
    pub fn routing_top_k(&self, requested: usize) -> usize {
        match self.variant {
            Variant::Vanilla => requested.min(self.num_experts()),
            _ => requested,
        }
    }

    /// Layout implied by the allocated weights.
    pub fn layout(&self) -> Result<Layout> {
        self.validate()?;
        let first = &self.experts[0].first;
        let reduced = match self.variant {
            Variant::BigMac => self.outer_down.as_ref().map(Tensor::cols).unwrap_or(0),
            Variant::FineGrained => first.cols(),
            Variant::Vanilla => 0,
        };
        Ok(Layout {
            variant: self.variant,
            h: self.h(),
            reduced,
            experts: self.num_experts(),
            expert_io: first.rows(),
            expert_hidden: first.cols(),
        })
    }

    /// Checks the per-variant shape contract.
    pub fn validate(&self) -> Result<()> {
        let h = self.h();
        let e = self.num_experts();
        if self.experts.len() != e {
            return Err(Error::VariantShape(format!(
                "router has {e} columns but {} experts are present",
                self.experts.len()
            )));
        }
        let first = &self.experts.first().ok_or_else(|| Error::VariantShape("no experts".into()))?.first;
        let (io, hidden) = first.dims2();
        for (i, ex) in self.experts.iter().enumerate() {
            if ex.first.dims2() != (io, hidden) || ex.second.dims2() != (hidden, io) {
                return Err(Error::VariantShape(format!(
                    "expert {i} has shapes {:?}/{:?}, expected {:?}/{:?}",
                    ex.first.shape(),
                    ex.second.shape(),
                    [io, hidden],
                    [hidden, io]
                )));
            }
        }
        match self.variant {
            Variant::BigMac => {
                let (Some(down), Some(up)) = (&self.outer_down, &self.outer_up) else {
                    return Err(Error::VariantShape("BigMac needs both outer projections".into()));
                };
                let rh = down.cols();
                if down.dims2() != (h, rh) || up.dims2() != (rh, h) {
                    return Err(Error::VariantShape(format!(
                        "outer projections {:?}/{:?} do not match h={h}",
                        down.shape(),
                        up.shape()
                    )));
                }
                if (io, hidden) != (rh, h) {
                    return Err(Error::VariantShape(format!(
                        "BigMac experts must be ({rh}x{h}, {h}x{rh}), got first {:?}",
                        first.shape()
                    )));
                }
            }
            Variant::FineGrained | Variant::Vanilla => {
                if self.outer_down.is_some() || self.outer_up.is_some() {
                    return Err(Error::VariantShape(format!(
                        "{} layers carry no outer projections",
                        self.variant
                    )));
                }
                if io != h {
                    return Err(Error::VariantShape(format!(
                        "{} experts must take h={h} inputs, got first {:?}",
                        self.variant,
                        first.shape()
                    )));
                }
                if self.variant == Variant::FineGrained && hidden > h {
                    return Err(Error::VariantShape(format!(
                        "fine-grained experts must descend (hidden {hidden} > h {h})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of scalar weights actually allocated.
    pub fn param_count_constructed(&self) -> u64 {
        let outer = self.outer_down.iter().chain(&self.outer_up).map(Tensor::len).sum::<usize>();
        let experts: usize = self.experts.iter().map(|e| e.first.len() + e.second.len()).sum();
        (self.router.len() + outer + experts) as u64
    }

    /// Weights excluding router and outer projections.
    pub fn expert_param_count(&self) -> u64 {
        self.experts.iter().map(|e| (e.first.len() + e.second.len()) as u64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(variant: Variant, h: usize, rh: usize, e: usize) -> MoEParams {
        MoEParams::init(Layout::new(variant, h, rh, e), &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn hand_counted_params() {
        let fg = build(Variant::FineGrained, 4, 2, 2);
        assert_eq!(fg.param_count_constructed(), 40);
        let bm = build(Variant::BigMac, 4, 2, 2);
        assert_eq!(bm.param_count_constructed(), 56);
        assert_eq!(fg.expert_param_count(), bm.expert_param_count());
    }

    #[test]
    fn constructed_count_matches_layout() {
        for variant in Variant::ALL {
            let layout = Layout::new(variant, 16, 4, 8);
            let p = MoEParams::init(layout, &mut ChaCha8Rng::seed_from_u64(1));
            p.validate().unwrap();
            assert_eq!(p.param_count_constructed(), layout.param_count());
            assert_eq!(p.layout().unwrap().param_count(), layout.param_count());
        }
    }

    #[test]
    fn vanilla_matches_expert_budget() {
        for (e, rh) in [(8, 4), (64, 512), (4, 4), (12, 3), (17, 2)] {
            let (ev, hf) = vanilla_layout(e, rh);
            assert_eq!(e % ev, 0);
            assert_eq!(ev * hf, e * rh, "e={e}");
        }
        assert_eq!(vanilla_layout(64, 512), (8, 4096));
    }

    #[test]
    fn shape_contract_violations() {
        let mut bm = build(Variant::BigMac, 8, 4, 2);
        bm.outer_up = None;
        assert!(matches!(bm.validate(), Err(Error::VariantShape(_))));

        let mut fg = build(Variant::FineGrained, 8, 4, 2);
        fg.variant = Variant::BigMac;
        assert!(fg.validate().is_err());

        let mut fg = build(Variant::FineGrained, 8, 4, 2);
        fg.experts.pop();
        assert!(fg.validate().is_err());
    }
}
