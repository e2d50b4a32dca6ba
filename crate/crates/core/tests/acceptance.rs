//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails or overruns its time limit.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{desk_config, exact};
use fedsim::aggregator::{
    compute_r, server_round, table_bytes, uniform_weights, Received, ServerState, StateTable, Strategy, StrategyKind,
    Weighting,
};
use fedsim::harness::{run_simulation, sample_clients, tail_average, theorem_bound, write_csv, BoundParams, RoundMetrics};
use fedsim::models::{finite_diff_grad, loss_and_grad, Activation, Batch, ModelSpec};
use fedsim::quant::{dequant, quant, QuantMode, QuantizedTensor};
use fedsim::rng::seeded;
use fedsim::server_opt::{
    adabelief_step, adagrad_step, adam_step, lamb_step_with_ratio, yogi_step, OptimizerHyper, OptimizerKind,
};
use fedsim::{ParamVector, TensorLayout};
use rand::Rng;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, u64, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_vec<R: Rng>(rng: &mut R, d: usize, scale: f64) -> ParamVector {
    ParamVector::new((0..d).map(|_| rng.random_range(-scale..scale)).collect())
}

fn c1_unbiasedness() -> Check {
    let (n, d) = (4, 7);
    let mut rng = seeded(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let g: Vec<ParamVector> = (0..n).map(|_| random_vec(&mut rng, d, 5.0)).collect();
        let mut table = StateTable::new(uniform_weights(n), TensorLayout::flat(d).unwrap(), QuantMode::Fp32).unwrap();
        table
            .update_in_place(&(0..n).map(|j| (j, random_vec(&mut rng, d, 5.0))).collect())
            .unwrap();
        let subsets: Vec<[usize; 2]> = (0..n).flat_map(|a| (a + 1..n).map(move |b| [a, b])).collect();
        ensure(subsets.len() == 6, "expected 6 subsets")?;
        let mut mean = vec![0.0; d];
        for s in &subsets {
            let received: Received = s.iter().map(|&i| (i, g[i].clone())).collect();
            let r = compute_r(&received, &table, Weighting::Unbiased).map_err(|e| e.to_string())?;
            for (acc, v) in mean.iter_mut().zip(r.iter()) {
                *acc += v / 6.0;
            }
        }
        for k in 0..d {
            let target: f64 = (0..n).map(|j| 0.25 * g[j][k]).sum();
            worst = worst.max((mean[k] - target).abs());
        }
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e} over 20 draws"))
}

fn c2_full_participation() -> Check {
    let (n, d) = (5, 9);
    let mut rng = seeded(2);
    let g: Received = (0..n).map(|i| (i, random_vec(&mut rng, d, 3.0))).collect();
    let layout = TensorLayout::flat(d).unwrap();
    let empty = StateTable::new(uniform_weights(n), layout.clone(), QuantMode::Fp32).unwrap();
    let mut filled = empty.clone();
    filled
        .update_in_place(&(0..n).map(|j| (j, random_vec(&mut rng, d, 50.0))).collect())
        .unwrap();
    let a = compute_r(&g, &empty, Weighting::Unbiased).unwrap();
    let b = compute_r(&g, &filled, Weighting::Unbiased).unwrap();
    let gap = a.max_abs_diff(&b);
    ensure(gap <= 1e-12, format!("table changed r by {gap:e}"))?;

    let w0 = random_vec(&mut rng, d, 1.0);
    let hyper = OptimizerHyper::new(OptimizerKind::Adagrad, 0.05);
    let vr = Strategy::adaptive(StrategyKind::FedAdaVr, Weighting::Unbiased, hyper.clone()).unwrap();
    let novr = Strategy::adaptive(StrategyKind::FedOptNoVr, Weighting::Unbiased, hyper).unwrap();
    let run = |s: &Strategy| {
        let state = ServerState::new(s, w0.clone(), uniform_weights(n), layout.clone()).unwrap();
        server_round(s, state, &g, 0.1).unwrap().0.w
    };
    let (wa, wb) = (run(&vr), run(&novr));
    ensure(
        wa.iter().zip(wb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
        "round-1 models differ",
    )?;
    Ok(format!("table sensitivity {gap:.1e}; round 1 bit-identical"))
}

fn c3_quant_round_trip() -> Check {
    let mut rng = seeded(3);
    let mut summary = Vec::new();
    for mode in [QuantMode::Fp16, QuantMode::Int8, QuantMode::Int4] {
        let mut worst_ratio: f64 = 0.0;
        for _ in 0..1000 {
            let rank = rng.random_range(1..=3);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=12)).collect();
            let len: usize = shape.iter().product();
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let w = random_vec(&mut rng, len, scale);
            let layout = TensorLayout::new(vec![shape]).unwrap();
            let q = quant(&w, &layout, mode).map_err(|e| e.to_string())?;
            let back = dequant(&q).map_err(|e| e.to_string())?;
            let max_abs = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let err = w.max_abs_diff(&back);
            let tensor = &q.tensors[0];
            let bound = match tensor {
                QuantizedTensor::Half { .. } => max_abs * 2f64.powi(-11),
                _ => tensor.scale().unwrap() / 2.0,
            };
            ensure(err <= bound, format!("{} error {err:e} above {bound:e}", mode.name()))?;
            if let QuantizedTensor::Int4 { packed, .. } = tensor {
                ensure(packed.len() == len.div_ceil(2), format!("int4 packed {} bytes for {len}", packed.len()))?;
            }
            worst_ratio = worst_ratio.max(err / bound);
        }
        summary.push(format!("{} err/bound {:.3}", mode.name(), worst_ratio));
    }
    Ok(summary.join(", "))
}

/// Parameter shapes of an 18-layer residual network for 1000-way
/// classification (conv weights, batch-norm scale and shift, final dense).
fn resnet18_layout() -> TensorLayout {
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    let conv_bn = |shapes: &mut Vec<Vec<usize>>, out: usize, inp: usize, k: usize| {
        shapes.push(vec![out, inp, k, k]);
        shapes.push(vec![out]);
        shapes.push(vec![out]);
    };
    conv_bn(&mut shapes, 64, 3, 7);
    let mut inp = 64;
    for (stage, width) in [64usize, 128, 256, 512].into_iter().enumerate() {
        for block in 0..2 {
            let first_in = if block == 0 { inp } else { width };
            conv_bn(&mut shapes, width, first_in, 3);
            conv_bn(&mut shapes, width, width, 3);
            if block == 0 && stage > 0 {
                conv_bn(&mut shapes, width, inp, 1);
            }
        }
        inp = width;
    }
    shapes.push(vec![1000, 512]);
    shapes.push(vec![1000]);
    TensorLayout::new(shapes).unwrap()
}

fn c4_memory_ratios() -> Check {
    let layout = resnet18_layout();
    ensure(layout.len() == 11_689_512, format!("layout has {} parameters", layout.len()))?;
    let n = 10;
    let mut rng = seeded(4);
    let mut g = Some(random_vec(&mut rng, layout.len(), 0.05));
    let mut out = Vec::new();
    for (mode, lo, hi) in [
        (QuantMode::Fp16, 0.50, 0.51),
        (QuantMode::Int8, 0.25, 0.26),
        (QuantMode::Int4, 0.125, 0.135),
    ] {
        let mut table = StateTable::new(uniform_weights(n), layout.clone(), mode).unwrap();
        for i in 0..n {
            let mut received = Received::new();
            received.insert(i, g.take().expect("update buffer"));
            table.update_in_place(&received).map_err(|e| e.to_string())?;
            g = received.remove(&i);
        }
        let bytes = table_bytes(&table);
        let ratio = bytes.ratio();
        ensure((lo..=hi).contains(&ratio), format!("{} ratio {ratio}", mode.name()))?;
        out.push(format!("{} {:.4}", mode.name(), ratio));
    }
    Ok(out.join(", "))
}

fn c5_optimizer_oracles() -> Check {
    let one = |x: f64| ParamVector::new(vec![x]);
    let close = |a: f64, b: f64, what: &str| ensure((a - b).abs() <= 1e-9, format!("{what}: {a} vs {b}"));
    let eps = 1e-8;

    let h = OptimizerHyper::new(OptimizerKind::Adagrad, 0.1);
    let (w, s) = adagrad_step(&one(1.0), &one(2.0), &h, &h.initial_state(1)).unwrap();
    close(s.v[0], 4.0, "adagrad z")?;
    close(w[0], 1.0 - 0.1 * 2.0 / (2.0 + eps), "adagrad w")?;
    close(w[0], 0.9, "adagrad step")?;

    let h = OptimizerHyper::new(OptimizerKind::Adam, 0.01);
    let (wa, sa) = adam_step(&one(0.0), &one(3.0), &h, &h.initial_state(1)).unwrap();
    close(sa.m[0], 0.3, "adam m")?;
    close(sa.v[0], 0.009, "adam v")?;
    close(wa[0], -0.01 * 3.0 / (3.0 + eps), "adam w")?;

    let h = OptimizerHyper::new(OptimizerKind::Adabelief, 0.01);
    let (wb, sb) = adabelief_step(&one(0.0), &one(3.0), &h, &h.initial_state(1)).unwrap();
    close(sb.v[0], 0.001 * 7.29, "adabelief z")?;
    close(wb[0], -0.01 * 3.0 / (2.7 + eps), "adabelief w")?;
    close(wb[0], -0.011_111_111_1, "adabelief step")?;

    let mut rng = seeded(5);
    for _ in 0..100 {
        let w = random_vec(&mut rng, 6, 2.0);
        let g = random_vec(&mut rng, 6, 4.0);
        let ha = OptimizerHyper::new(OptimizerKind::Adam, 0.03);
        let hy = OptimizerHyper::new(OptimizerKind::Yogi, 0.03);
        let (a, sa) = adam_step(&w, &g, &ha, &ha.initial_state(6)).unwrap();
        let (y, sy) = yogi_step(&w, &g, &hy, &hy.initial_state(6)).unwrap();
        ensure(
            a.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()) && sa == sy,
            "yogi first step differs from adam",
        )?;
    }

    let h = OptimizerHyper::new(OptimizerKind::Lamb, 0.01);
    let (_, _, ratio) = lamb_step_with_ratio(&ParamVector::zeros(2), &ParamVector::new(vec![1.0, -2.0]), &h, &h.initial_state(2)).unwrap();
    ensure(ratio == 1.0, format!("lamb fallback ratio {ratio}"))?;
    let w = ParamVector::new(vec![3.0, 4.0]);
    let (next, _, ratio) = lamb_step_with_ratio(&w, &ParamVector::new(vec![0.5, -7.0]), &h, &h.initial_state(2)).unwrap();
    let unit = ((0.5 / (0.5 + eps)).powi(2) + (7.0 / (7.0 + eps)).powi(2)).sqrt();
    close(ratio, 5.0 / unit, "lamb ratio")?;
    ensure((ratio - 5.0 / 2f64.sqrt()).abs() < 1e-6, format!("lamb ratio {ratio} far from 5/sqrt(2)"))?;
    let moved = ((next[0] - 3.0).powi(2) + (next[1] - 4.0).powi(2)).sqrt();
    close(moved, 0.05, "lamb update norm")?;
    Ok("adagrad, adam, adabelief, yogi, lamb oracles hold".into())
}

fn c6_gradients() -> Check {
    let mut rng = seeded(6);
    let specs = [
        ModelSpec::LinearSoftmax { input_dim: 6, num_classes: 4 },
        ModelSpec::Mlp { input_dim: 5, num_classes: 3, hidden_dim: 7, activation: Activation::Tanh },
        ModelSpec::Mlp { input_dim: 5, num_classes: 4, hidden_dim: 6, activation: Activation::Relu },
    ];
    let mut worst: f64 = 0.0;
    for spec in &specs {
        for _ in 0..20 {
            let rows = rng.random_range(1..=8);
            let dim = spec.input_dim();
            let c = spec.num_classes();
            let features = (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let labels = (0..rows).map(|_| rng.random_range(0..c)).collect();
            let batch = Batch::new(features, dim, labels, c).unwrap();
            let w = random_vec(&mut rng, spec.num_params(), 1.0);
            let (_, g) = loss_and_grad(spec, &w, &batch).unwrap();
            let fd = finite_diff_grad(spec, &w, &batch, 1e-6).unwrap();
            for (a, f) in g.iter().zip(fd.iter()) {
                if f.abs() < 1e-8 {
                    ensure((a - f).abs() < 1e-8, format!("absolute gap {:e}", (a - f).abs()))?;
                } else {
                    worst = worst.max((a - f).abs() / f.abs());
                }
            }
        }
    }
    ensure(worst < 1e-5, format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e} over 60 instances"))
}

struct Run {
    metrics: Vec<RoundMetrics>,
}

impl Run {
    fn desk(name: &str) -> Result<Run, String> {
        let cfg = desk_config(name);
        let out = run_simulation(&cfg, 4).map_err(|e| format!("{name}: {e}"))?;
        Ok(Run { metrics: out.metrics })
    }

    fn tail(&self) -> f64 {
        tail_average(&self.metrics, 0.1).unwrap()
    }

    fn final_loss(&self) -> f64 {
        self.metrics.last().unwrap().train_loss
    }

    fn rounds(&self) -> usize {
        self.metrics.last().unwrap().round
    }

    /// Sample standard deviation of accuracy over the last 20% of rows.
    fn late_accuracy_std(&self) -> f64 {
        let k = ((0.2 * self.metrics.len() as f64).ceil() as usize).max(2);
        let xs: Vec<f64> = self.metrics[self.metrics.len() - k..].iter().map(|m| m.eval_accuracy).collect();
        let mean = xs.iter().sum::<f64>() / k as f64;
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    }
}

fn c7_convergence() -> Check {
    let avg = Run::desk("fedavg")?;
    let ada = Run::desk("fedadavr_adagrad")?;
    let target = avg.final_loss();
    let reach = ada.metrics.iter().find(|m| m.train_loss <= target).map(|m| m.round);
    let gain = ada.tail() - avg.tail();
    ensure(gain >= 0.03, format!("tail accuracy gain {gain:.4}"))?;
    let limit = 0.7 * avg.rounds() as f64;
    ensure(
        reach.is_some_and(|r| r as f64 <= limit),
        format!("reached fedavg's final loss at {reach:?}, limit {limit}"),
    )?;
    Ok(format!(
        "tail {:.3} vs fedavg {:.3}; fedavg final loss {:.4} reached at round {} of {}",
        ada.tail(),
        avg.tail(),
        target,
        reach.unwrap(),
        avg.rounds()
    ))
}

fn c8_quantized_parity() -> Check {
    let ada = Run::desk("fedadavr_adagrad")?;
    let q = Run::desk("fedadavr_quant_int8")?;
    let gap = (q.tail() - ada.tail()).abs();
    ensure(gap <= 0.02, format!("tail gap {gap:.4}"))?;
    Ok(format!("int8 tail {:.4} vs fp32 {:.4}", q.tail(), ada.tail()))
}

fn c9_ablation_ordering() -> Check {
    let ada = Run::desk("fedadavr_adagrad")?;
    let novr = Run::desk("fedopt_novr_adagrad")?;
    let noopt = Run::desk("fedadavr_noopt")?;
    ensure(
        ada.final_loss() <= novr.final_loss().min(noopt.final_loss()),
        format!(
            "final losses fedadavr {:.4}, novr {:.4}, noopt {:.4}",
            ada.final_loss(),
            novr.final_loss(),
            noopt.final_loss()
        ),
    )?;
    ensure(
        novr.late_accuracy_std() > ada.late_accuracy_std(),
        format!("accuracy std novr {:.4} vs fedadavr {:.4}", novr.late_accuracy_std(), ada.late_accuracy_std()),
    )?;
    Ok(format!(
        "final loss {:.4} <= novr {:.4}, noopt {:.4}; late std novr {:.4} > {:.4}",
        ada.final_loss(),
        novr.final_loss(),
        noopt.final_loss(),
        novr.late_accuracy_std(),
        ada.late_accuracy_std()
    ))
}

fn c10_bound() -> Check {
    let base = BoundParams {
        eta_c: 0.01,
        eta_s: 0.01,
        k: 1,
        m: 5,
        l: 1.0,
        g: 1.0,
        epsilon: 1e-8,
        sigma: 1.0,
        sigma_g: 1.0,
        t: 100,
        f0_minus_fstar: 1.0,
        a: None,
    };
    let r = theorem_bound(&base).map_err(|e| e.to_string())?;
    ensure(r.a1 == 0.0, format!("K = 1 gives A1 = {}", r.a1))?;

    let mut rng = seeded(10);
    for _ in 0..50 {
        let p = BoundParams {
            eta_c: rng.random_range(1e-4..0.5),
            eta_s: rng.random_range(1e-4..1.0),
            k: rng.random_range(1..20),
            m: rng.random_range(1..50),
            l: rng.random_range(0.1..10.0),
            g: rng.random_range(0.0..10.0),
            epsilon: 10f64.powf(rng.random_range(-8.0..0.0)),
            sigma: rng.random_range(0.0..5.0),
            sigma_g: rng.random_range(0.0..5.0),
            t: rng.random_range(1..10_000),
            f0_minus_fstar: rng.random_range(0.0..100.0),
            a: None,
        };
        let r = theorem_bound(&p).map_err(|e| e.to_string())?;
        let [a1, a2, a3, bound] = exact::bound_terms(&p);
        for (name, got, want) in [("A1", r.a1, &a1), ("A2", r.a2, &a2), ("A3", r.a3, &a3), ("bound", r.bound, &bound)] {
            ensure(exact::agrees(got, want, 1e-12), format!("{name} disagrees for {p:?}"))?;
        }
    }
    Ok("A1 = 0 at K = 1; 50 random inputs agree with exact rationals to 1e-12".into())
}

fn c11_determinism() -> Check {
    let mut names = Vec::new();
    for name in [
        "fedavg",
        "fedadavr_adagrad",
        "fedadavr_quant_int8",
        "fedadavr_quant_int4",
        "fedopt_novr_adagrad",
        "fedadavr_noopt",
        "fedvarp",
        "mifa",
    ] {
        let cfg = desk_config(name);
        let csv = |workers| -> Result<Vec<u8>, String> {
            let out = run_simulation(&cfg, workers).map_err(|e| e.to_string())?;
            let mut buf = Vec::new();
            write_csv(&out.metrics, &mut buf).map_err(|e| e.to_string())?;
            Ok(buf)
        };
        ensure(csv(1)? == csv(8)?, format!("{name}: CSV differs between 1 and 8 workers"))?;
        names.push(name);
    }
    Ok(format!("{} desk configs byte-identical with 1 and 8 workers", names.len()))
}

fn c12_sampling() -> Check {
    let draws = 50_000;
    let mut out = Vec::new();
    for (n, m) in [(4usize, 2usize), (50, 5)] {
        let mut counts = vec![0usize; n];
        for r in 0..draws {
            for i in sample_clients(n, m, r, 42).map_err(|e| e.to_string())? {
                counts[i] += 1;
            }
        }
        let p = m as f64 / n as f64;
        let worst = counts
            .iter()
            .map(|&c| (c as f64 / draws as f64 - p).abs())
            .fold(0.0, f64::max);
        ensure(worst <= 0.01, format!("N={n} M={m}: deviation {worst:.4}"))?;
        out.push(format!("N={n} M={m} max deviation {worst:.4}"));
    }
    Ok(out.join(", "))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        (1, "estimator unbiasedness", 1, c1_unbiasedness),
        (2, "full-participation collapse", 1, c2_full_participation),
        (3, "quantization round trip", 5, c3_quant_round_trip),
        (4, "memory ratios", 10, c4_memory_ratios),
        (5, "optimizer single-step oracles", 1, c5_optimizer_oracles),
        (6, "gradient correctness", 5, c6_gradients),
        (7, "convergence on LQ-1 desk benchmark", 180, c7_convergence),
        (8, "quantized parity", 180, c8_quantized_parity),
        (9, "ablation ordering", 300, c9_ablation_ordering),
        (10, "bound calculator", 1, c10_bound),
        (11, "determinism across worker counts", 360, c11_determinism),
        (12, "sampling marginals", 2, c12_sampling),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(limit);
        let (tag, detail) = match (&result, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; exceeded {limit}s limit")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("[{tag}] {id:>2} {name} ({:.2}s): {detail}", elapsed.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
