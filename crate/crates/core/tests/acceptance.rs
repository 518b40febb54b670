//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moelab::analytics::{a2a_transfer_formula, analyze, GIB};
use moelab::cli::{gradcheck, toy};
use moelab::ep_sim::{build_placement, generate_plan, simulate_layer, simulate_plan, sweep_topk, RoutingMode};
use moelab::moe::{apply_capacity, moe_forward, route, Layout, MoEParams};
use moelab::{CostModel, ModelConfig, Tensor, Variant};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn headline_statistics() -> Result<String, String> {
    let rep = analyze(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let (fg, bm) = (&rep.fine_grained, &rep.bigmac);
    ensure(fg.param_count == 3_728_906_240, || format!("fine-grained params {}", fg.param_count))?;
    ensure(bm.param_count == 3_779_237_888, || format!("bigmac params {}", bm.param_count))?;
    let dp = 100.0 * (bm.param_count as f64 - fg.param_count as f64) / fg.param_count as f64;
    ensure((dp - 1.35).abs() <= 0.01, || format!("param delta {dp:.4}%"))?;
    let (fg_t, bm_t) = (fg.flops / 1e12, bm.flops / 1e12);
    ensure(rel(fg_t, 3490.67) <= 1e-3, || format!("fine-grained flops {fg_t:.2} T"))?;
    ensure(rel(bm_t, 3649.00) <= 1e-3, || format!("bigmac flops {bm_t:.2} T"))?;
    ensure(fg.a2a_bytes == 1488 * GIB as u128, || format!("fine-grained a2a {} B", fg.a2a_bytes))?;
    ensure(bm.a2a_bytes == 372 * GIB as u128, || format!("bigmac a2a {} B", bm.a2a_bytes))?;
    ensure(4 * bm.a2a_bytes == fg.a2a_bytes, || "a2a delta is not -75%".into())?;
    Ok(format!(
        "params {} / {} (+{dp:.2}%), flops {fg_t:.2} T / {bm_t:.2} T, a2a 1488.00 / 372.00 GiB",
        fg.param_count, bm.param_count
    ))
}

fn formula_simulator_consistency() -> Result<String, String> {
    let cost = CostModel::default();
    let mut worst = 0.0f64;
    for k in [1u64, 2, 4, 8] {
        let cfg = ModelConfig {
            b_tokens: 8192,
            e: 64,
            ep: 32,
            top_k: k,
            f: f64::INFINITY,
            ..ModelConfig::default()
        };
        for variant in [Variant::FineGrained, Variant::BigMac] {
            let per_layer = a2a_transfer_formula(&cfg, variant).map_err(|e| e.to_string())? as f64 / cfg.l as f64;
            let mut sum = 0.0;
            for seed in 0..16 {
                let rec = simulate_layer(&cfg, variant, RoutingMode::UniformRandom, seed, &cost).map_err(|e| e.to_string())?;
                sum += (rec.a2a_bytes_fwd + rec.a2a_bytes_bwd) as f64;
            }
            let err = rel(sum / 16.0, per_layer);
            worst = worst.max(err);
            ensure(err <= 0.02, || format!("{variant} top_k={k}: mean {:.0} vs formula {per_layer:.0}", sum / 16.0))?;
        }
    }
    Ok(format!("max deviation {:.3}% over 16 seeds, top_k 1/2/4/8", 100.0 * worst))
}

fn ratio_law() -> Result<String, String> {
    let cost = CostModel::default();
    for r in [0.125, 0.25, 0.5] {
        for mode in [RoutingMode::UniformRandom, RoutingMode::Learned] {
            let cfg = ModelConfig {
                b_tokens: 2048,
                e: 64,
                ep: 32,
                top_k: 4,
                r,
                ..ModelConfig::default()
            };
            let placement = build_placement(&cfg).map_err(|e| e.to_string())?;
            let plan = apply_capacity(&generate_plan(&cfg, &placement, mode, 11).map_err(|e| e.to_string())?, cfg.f);
            let fg = simulate_plan(&plan, &placement, &cfg, Variant::FineGrained, mode, &cost).map_err(|e| e.to_string())?;
            let bm = simulate_plan(&plan, &placement, &cfg, Variant::BigMac, mode, &cost).map_err(|e| e.to_string())?;
            let ratio = bm.a2a_bytes_fwd as f64 / fg.a2a_bytes_fwd as f64;
            ensure(fg.a2a_bytes_fwd > 0 && ratio == r, || format!("r={r} {mode}: ratio {ratio:e}"))?;
            ensure(bm.a2a_bytes_bwd as f64 / fg.a2a_bytes_bwd as f64 == r, || format!("r={r}: backward ratio"))?;
        }
    }
    Ok("bytes ratio equals r exactly for r = 0.125, 0.25, 0.5".into())
}

fn expert_parity() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, rh) in [(8usize, 4usize), (16, 4), (2048, 512)] {
        let fg = Layout::new(Variant::FineGrained, h, rh, 1);
        let bm = Layout::new(Variant::BigMac, h, rh, 1);
        let hand = 2 * (h * rh) as u64;
        ensure(fg.expert_params() == hand && bm.expert_params() == hand, || format!("({h},{rh}) params"))?;
        ensure(fg.expert_macs_per_token() == bm.expert_macs_per_token(), || format!("({h},{rh}) macs"))?;
        let pf = MoEParams::init(fg, &mut rng);
        let pb = MoEParams::init(bm, &mut rng);
        ensure(pf.expert_param_count() == hand && pb.expert_param_count() == hand, || {
            format!("({h},{rh}) constructed experts")
        })?;
        // One token through one expert: rows(first)·cols(first) + rows(second)·cols(second).
        let macs = |p: &MoEParams| {
            let e = &p.experts[0];
            (e.first.rows() * e.first.cols() + e.second.rows() * e.second.cols()) as u64
        };
        ensure(macs(&pf) == macs(&pb), || format!("({h},{rh}) constructed macs"))?;
    }
    Ok("per-expert params and multiply-adds equal for (8,4), (16,4), (2048,512)".into())
}

fn perturb(t: &mut Tensor, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
}

fn routing_invariance() -> Result<String, String> {
    let cfg = ModelConfig::block(16, 0.25, 8, 2);
    for trial in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let params = MoEParams::init(Layout::from_config(Variant::BigMac, &cfg), &mut rng);
        let x = Tensor::normal(32, 16, 1.0, &mut rng);
        let before = route(&x, &params, 2).map_err(|e| e.to_string())?;
        let mut moved = params.clone();
        perturb(moved.outer_down.as_mut().unwrap(), &mut rng);
        perturb(moved.outer_up.as_mut().unwrap(), &mut rng);
        for e in moved.experts.iter_mut() {
            perturb(&mut e.first, &mut rng);
            perturb(&mut e.second, &mut rng);
        }
        let after = route(&x, &moved, 2).map_err(|e| e.to_string())?;
        let bits = |p: &moelab::moe::RoutingPlan| {
            (
                p.experts.clone(),
                p.gates.iter().map(|g| g.to_bits()).collect::<Vec<_>>(),
                p.full_probs.as_ref().map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()),
            )
        };
        ensure(bits(&before) == bits(&after), || format!("trial {trial}: plan changed"))?;
        let out_a = moe_forward(&x, &params, &before).map_err(|e| e.to_string())?;
        let out_b = moe_forward(&x, &moved, &after).map_err(|e| e.to_string())?;
        ensure(out_a != out_b, || format!("trial {trial}: perturbation had no effect"))?;
    }
    Ok("plans bitwise identical across 10 perturbation trials".into())
}

fn gradient_correctness() -> Result<String, String> {
    let cfg = ModelConfig::block(8, 0.5, 4, 2);
    let results = gradcheck::run(&cfg, 0, false).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for r in &results {
        ensure(r.max_rel_error < 1e-4, || format!("{}: max relative error {:e}", r.variant, r.max_rel_error))?;
        parts.push(format!("{} {:.1e}", r.variant, r.max_rel_error));
    }
    ensure(results.len() == 3, || "not all variants checked".into())?;
    Ok(format!("max relative error: {}", parts.join(", ")))
}

/// Row-by-row product written out with explicit loops.
fn mm(a: &[Vec<f64>], b: &Tensor) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b.cols())
                .map(|j| row.iter().enumerate().map(|(i, v)| v * b.at(i, j)).sum())
                .collect()
        })
        .collect()
}

fn relu(a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    a.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

fn dense_equivalence() -> Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig::block(8, 0.5, 1, 1);
        let x = Tensor::normal(5, 8, 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = (0..5).map(|t| x.row(t).to_vec()).collect();
        for variant in Variant::ALL {
            let p = MoEParams::init(Layout::from_config(variant, &cfg), &mut rng);
            let plan = apply_capacity(&route(&x, &p, 1).map_err(|e| e.to_string())?, f64::INFINITY);
            let got = moe_forward(&x, &p, &plan).map_err(|e| e.to_string())?;
            let ex = &p.experts[0];
            let want = match variant {
                Variant::BigMac => {
                    let down = mm(&rows, p.outer_down.as_ref().unwrap());
                    mm(&mm(&relu(mm(&down, &ex.first)), &ex.second), p.outer_up.as_ref().unwrap())
                }
                _ => mm(&relu(mm(&rows, &ex.first)), &ex.second),
            };
            for (t, row) in want.iter().enumerate() {
                for (j, w) in row.iter().enumerate() {
                    worst = worst.max((got.at(t, j) - w).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max abs difference {worst:e}"))?;
    Ok(format!("max abs difference {worst:.1e} over 10 seeds, all variants"))
}

fn capacity_semantics() -> Result<String, String> {
    let cost = CostModel::default();
    let base = ModelConfig {
        b_tokens: 8192,
        e: 64,
        ep: 32,
        top_k: 1,
        ..ModelConfig::default()
    };
    let tokens = base.b_tokens;
    let at = |f: f64, mode: RoutingMode, k: u64| {
        let cfg = ModelConfig { f, top_k: k, ..base.clone() };
        simulate_layer(&cfg, Variant::FineGrained, mode, 3, &cost).map_err(|e| e.to_string())
    };
    let hot = at(1.2, RoutingMode::SingleExpert, 1)?;
    // ceil(1.2·T·k/e) in integers.
    let cap = (12 * tokens).div_ceil(10 * base.e);
    ensure(hot.drops == tokens - cap, || format!("single_expert drops {} vs {}", hot.drops, tokens - cap))?;
    ensure(at(f64::INFINITY, RoutingMode::SingleExpert, 1)?.drops == 0, || "dropless run dropped".into())?;
    let fs = [1.0, 1.2, 2.0, f64::INFINITY];
    for mode in [RoutingMode::SingleExpert, RoutingMode::UniformRandom, RoutingMode::Learned] {
        for k in [1u64, 2] {
            let drops: Vec<u64> = fs.iter().map(|&f| at(f, mode, k).map(|r| r.drops)).collect::<Result<_, _>>()?;
            ensure(drops.windows(2).all(|w| w[0] >= w[1]), || format!("{mode} top_k={k}: drops {drops:?}"))?;
            ensure(drops[3] == 0, || format!("{mode} top_k={k}: dropless drops {}", drops[3]))?;
        }
    }
    Ok(format!("single_expert f=1.2 drops {} = {tokens} - {cap}; monotone over f", hot.drops))
}

fn topk_latency_trend() -> Result<String, String> {
    let cfg = ModelConfig::default();
    let ks = [1u64, 2, 4, 6, 8];
    let rep = sweep_topk(
        &cfg,
        &[Variant::FineGrained, Variant::BigMac],
        &ks,
        &CostModel::default(),
        RoutingMode::UniformRandom,
        0,
    )
    .map_err(|e| e.to_string())?;
    let shares: Vec<f64> = ks.iter().map(|&k| rep.find(Variant::FineGrained, k).unwrap().a2a_share()).collect();
    ensure(shares.windows(2).all(|w| w[1] > w[0]), || format!("fine-grained shares {shares:?}"))?;
    let bm8 = rep.find(Variant::BigMac, 8).unwrap().total_s;
    let fg4 = rep.find(Variant::FineGrained, 4).unwrap().total_s;
    ensure(bm8 < fg4, || format!("bigmac top8 {bm8:.4e}s vs fine-grained top4 {fg4:.4e}s"))?;
    let pct: Vec<String> = shares.iter().map(|s| format!("{:.1}%", 100.0 * s)).collect();
    Ok(format!(
        "fine-grained a2a share {}; bigmac top8 {:.1} ms < fine-grained top4 {:.1} ms",
        pct.join(" < "),
        1e3 * bm8,
        1e3 * fg4
    ))
}

fn toy_trainability() -> Result<String, String> {
    let cfg = ModelConfig {
        h: 16,
        e: 8,
        top_k: 2,
        ..ModelConfig::default()
    };
    let opts = toy::ToyOptions {
        steps: 500,
        lr: 0.05,
        ..toy::ToyOptions::default()
    };
    let rep = toy::fit_toy(&cfg, &opts).map_err(|e| e.to_string())?;
    let summary: Vec<String> = rep
        .fits
        .iter()
        .map(|f| format!("{} {:.3}->{:.3}", f.variant, f.initial_mse, f.final_mse))
        .collect();
    let summary = summary.join(", ");
    for f in &rep.fits {
        ensure(f.final_mse < 0.5 * f.initial_mse, || format!("{} did not halve its loss ({summary})", f.variant))?;
    }
    let fg = rep.fit(Variant::FineGrained).unwrap().final_mse;
    let bm = rep.fit(Variant::BigMac).unwrap().final_mse;
    ensure(rel(bm, fg) <= 0.10, || format!("bigmac final {bm:.4} is {:.1}% off fine-grained {fg:.4} ({summary})", 100.0 * rel(bm, fg)))?;
    Ok(summary)
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 10] = [
        ("headline_statistics", headline_statistics),
        ("formula_simulator_consistency", formula_simulator_consistency),
        ("exact_ratio_law", ratio_law),
        ("expert_parity", expert_parity),
        ("routing_invariance", routing_invariance),
        ("gradient_correctness", gradient_correctness),
        ("dense_equivalence", dense_equivalence),
        ("capacity_semantics", capacity_semantics),
        ("topk_latency_trend", topk_latency_trend),
        ("toy_trainability", toy_trainability),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
