//! Desk-scale trainability check: each variant plus a linear readout is
//! fitted with plain SGD to the outputs of a frozen random teacher layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::ComputeGraph;
use crate::moe::{apply_capacity, aux_loss_graph, moe_forward, moe_forward_graph, route, Layout, MoEParams, ParamNodes};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyOptions {
    pub steps: usize,
    pub lr: f64,
    pub samples: usize,
    pub aux_alpha: Option<f64>,
    pub seed: u64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.05,
            samples: 256,
            aux_alpha: Some(0.001),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub variant: Variant,
    pub step: usize,
    /// Squared error summed over output features, averaged over samples;
    /// excludes the auxiliary term.
    pub mse: f64,
    pub aux: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantFit {
    pub variant: Variant,
    pub params: u64,
    pub initial_mse: f64,
    pub final_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub log: Vec<LossPoint>,
    pub fits: Vec<VariantFit>,
}

impl ToyReport {
    pub fn fit(&self, variant: Variant) -> Option<&VariantFit> {
        self.fits.iter().find(|f| f.variant == variant)
    }
}

struct Dataset {
    x: Tensor,
    y: Tensor,
}

fn teacher_data(cfg: &ModelConfig, samples: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e4c_4e25);
    let teacher = MoEParams::init(Layout::from_config(Variant::FineGrained, cfg), &mut rng);
    let x = Tensor::normal(samples, cfg.h as usize, 1.0, &mut rng);
    let plan = route(&x, &teacher, teacher.routing_top_k(cfg.top_k as usize))?;
    let y = moe_forward(&x, &teacher, &plan)?;
    Ok(Dataset { x, y })
}

/// Visits the student tensors in [`ParamNodes::all`] order, then the readout.
fn visit_student(p: &mut MoEParams, readout: &mut Tensor, mut f: impl FnMut(&mut Tensor)) {
    f(&mut p.router);
    if let Some(t) = p.outer_down.as_mut() {
        f(t);
    }
    if let Some(t) = p.outer_up.as_mut() {
        f(t);
    }
    for e in p.experts.iter_mut() {
        f(&mut e.first);
        f(&mut e.second);
    }
    f(readout);
}

fn train_variant(cfg: &ModelConfig, variant: Variant, data: &Dataset, opts: &ToyOptions) -> Result<(VariantFit, Vec<LossPoint>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(variant as u64 + 1));
    let mut params = MoEParams::init(Layout::from_config(variant, cfg), &mut rng);
    let h = cfg.h as usize;
    let mut readout = Tensor::identity(h);
    let top_k = params.routing_top_k(cfg.top_k as usize);
    let n_out = data.y.rows() as f64;
    let mut log = Vec::with_capacity(opts.steps + 1);

    for step in 0..=opts.steps {
        let plan = apply_capacity(&route(&data.x, &params, top_k)?, cfg.f);
        let mut g = ComputeGraph::new();
        let x = g.constant(data.x.clone());
        let nodes = ParamNodes::register(&mut g, &params, true);
        let w_out = g.param(readout.clone());
        let fwd = moe_forward_graph(&mut g, x, variant, &nodes, &plan)?;
        let pred = g.matmul(fwd.output, w_out)?;
        let target = g.constant(data.y.clone());
        let diff = g.sub(pred, target)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq);
        let mse_node = g.scale(total, 1.0 / n_out);
        let mse = g.value(mse_node).data()[0];
        let (loss, aux) = match opts.aux_alpha {
            Some(alpha) => {
                let aux = aux_loss_graph(&mut g, fwd.probs, &plan, alpha)?;
                let aux_v = g.value(aux).data()[0];
                (g.add(mse_node, aux)?, aux_v)
            }
            None => (mse_node, 0.0),
        };
        if !mse.is_finite() {
            return Err(Error::Contract(format!("{variant} diverged at step {step} (loss {mse})")));
        }
        log.push(LossPoint { variant, step, mse, aux });
        if step == opts.steps {
            break;
        }

        g.backward(loss)?;
        let mut ids = nodes.all();
        ids.push(w_out);
        let grads: Vec<Option<Tensor>> = ids.iter().map(|&id| g.grad(id).cloned()).collect();
        let mut next = grads.iter();
        visit_student(&mut params, &mut readout, |t| {
            if let Some(Some(d)) = next.next() {
                for (w, dw) in t.data_mut().iter_mut().zip(d.data()) {
                    *w -= opts.lr * dw;
                }
            }
        });
    }
    let fit = VariantFit {
        variant,
        params: params.param_count_constructed() + readout.len() as u64,
        initial_mse: log.first().map_or(f64::NAN, |p| p.mse),
        final_mse: log.last().map_or(f64::NAN, |p| p.mse),
    };
    Ok((fit, log))
}

/// Trains all three variants on the same teacher data.
pub fn fit_toy(cfg: &ModelConfig, opts: &ToyOptions) -> Result<ToyReport> {
    cfg.validate_block()?;
    let data = teacher_data(cfg, opts.samples, opts.seed)?;
    let mut report = ToyReport {
        log: Vec::new(),
        fits: Vec::new(),
    };
    for variant in Variant::ALL {
        let (fit, log) = train_variant(cfg, variant, &data, opts)?;
        report.fits.push(fit);
        report.log.extend(log);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, ToyOptions) {
        let cfg = ModelConfig::block(8, 0.5, 4, 2);
        let opts = ToyOptions {
            steps: 20,
            samples: 32,
            ..ToyOptions::default()
        };
        (cfg, opts)
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let (cfg, opts) = small();
        let report = fit_toy(&cfg, &ToyOptions { lr: 0.0, ..opts }).unwrap();
        for v in Variant::ALL {
            let losses: Vec<f64> = report.log.iter().filter(|p| p.variant == v).map(|p| p.mse).collect();
            assert_eq!(losses.len(), 21);
            assert!(losses.iter().all(|&l| l == losses[0]), "{v}");
        }
    }

    #[test]
    fn deterministic_and_decreasing() {
        let (cfg, opts) = small();
        let a = fit_toy(&cfg, &opts).unwrap();
        assert_eq!(a, fit_toy(&cfg, &opts).unwrap());
        for f in &a.fits {
            assert!(f.final_mse < f.initial_mse, "{f:?}");
        }
    }

    #[test]
    fn divergence_names_the_variant() {
        let (cfg, opts) = small();
        let err = fit_toy(&cfg, &ToyOptions { lr: 1e6, ..opts }).unwrap_err().to_string();
        assert!(err.contains("vanilla") && err.contains("diverged"), "{err}");
    }
}
