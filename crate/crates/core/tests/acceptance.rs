//! Acceptance criteria 1–9, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always print; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use fedfisher::aggregate::{
    aggregate, fedfisher_gd, fedfisher_objective, ClientUpdate, Method, ServerConfig, StepSize, Weighting,
};
use fedfisher::compress::{bits_per_element, levels, quantize, BitCost};
use fedfisher::datasets::{dirichlet_partition, gen_synthetic, Example};
use fedfisher::experiment::{
    run_compress_bench, run_local_steps_sweep, run_one_shot, run_width_sweep, write_csv_to, ExperimentConfig, ResultRow,
    Task,
};
use fedfisher::fisher::{compute_fisher, full_fisher_two_layer, is_psd, FisherApprox, FisherKind, FisherMode, KfacBlock};
use fedfisher::models::{init_two_layer, Head, LossKind, Mlp, Model, Network, Schedule, TrainConfig};
use fedfisher::numerics::{kron_dense, kron_matvec, norm2, DenseMatrix};
use fedfisher_oracle::{constrained_min_norm_solution, fd_gradient, mc_fisher};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm2(&diff) / norm2(b).max(1e-300)
}

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c1_oracle_equivalence() -> Check {
    let mut worst_rel = 0.0f64;
    let mut worst_res = 0.0f64;
    for inst in 0..50u64 {
        let mut r = rng(1000 + inst);
        let d = r.random_range(2..=20);
        let m = r.random_range(1..=4);
        // Coordinates in `dead` lie in every client's nullspace.
        let dead: Vec<bool> = (0..d).map(|k| k == 0 || r.random::<f64>() < 0.2).collect();
        let mut fishers = Vec::new();
        let mut dense = Vec::new();
        let mut weights = Vec::new();
        for i in 0..m {
            let f = if (inst as usize + i) % 2 == 0 {
                let rank = r.random_range(1..=d);
                let a = DenseMatrix::from_fn(d, rank, |row, _| if dead[row] { 0.0 } else { r.random::<f64>() * 2.0 - 1.0 });
                FisherApprox::Full(a.matmul(&a.transpose()).unwrap())
            } else {
                FisherApprox::Diag(
                    (0..d).map(|k| if dead[k] || r.random::<f64>() < 0.3 { 0.0 } else { r.random::<f64>() + 0.1 }).collect(),
                )
            };
            dense.push(f.to_dense());
            fishers.push(f);
            weights.push(uniform(&mut r, d));
        }
        let updates: Vec<ClientUpdate<f64>> = fishers
            .into_iter()
            .zip(&weights)
            .map(|(f, w)| ClientUpdate::new(w.clone(), f, 1).unwrap())
            .collect();
        let cfg = ServerConfig { stop_tol: 1e-13, ..ServerConfig::gd(StepSize::Auto, 2_000_000) };
        let got = fedfisher_gd(&updates, &cfg).map_err(|e| e.to_string())?;
        let want = constrained_min_norm_solution(&dense, &weights).map_err(|e| e.to_string())?;
        let mut fw = vec![0.0; d];
        let mut b = vec![0.0; d];
        for (f, w) in dense.iter().zip(&weights) {
            for (acc, v) in fw.iter_mut().zip(f.matvec(&got.weights).unwrap()) {
                *acc += v;
            }
            for (acc, v) in b.iter_mut().zip(f.matvec(w).unwrap()) {
                *acc += v;
            }
        }
        let res: Vec<f64> = fw.iter().zip(&b).map(|(x, y)| x - y).collect();
        worst_rel = worst_rel.max(rel_l2(&got.weights, &want));
        worst_res = worst_res.max(norm2(&res) / (1.0 + norm2(&b)));
    }
    ensure(
        worst_rel <= 1e-6 && worst_res <= 1e-6,
        format!("50 instances, worst relative L2 {worst_rel:.2e}, worst scaled residual {worst_res:.2e}"),
    )
}

fn c2_fisher_identity() -> Check {
    let draws = 100_000;
    let tol = 5.0 / (draws as f64).sqrt();
    let mut worst_exact = 0.0f64;
    let mut worst_mc = 0.0f64;
    for inst in 0..10u64 {
        let mut r = rng(2000 + inst);
        let (m, p, n) = (r.random_range(2..=4), r.random_range(1..=3), r.random_range(2..=3));
        let model = init_two_layer::<f64>(m, p, 0.5, inst).unwrap();
        let data: Vec<Example<f64>> = (0..n)
            .map(|_| {
                let mut x = uniform(&mut r, p);
                let s = norm2(&x);
                x.iter_mut().for_each(|v| *v /= s);
                Example::regression(x, r.random())
            })
            .collect();
        let closed = full_fisher_two_layer(&model, &data).unwrap().to_dense();
        let d = m * p;
        let mut outer = DenseMatrix::zeros(d, d);
        for ex in &data {
            outer.rank_one_update(1.0 / n as f64, &model.feature_map(&ex.x).unwrap());
        }
        worst_exact = worst_exact.max(closed.sub(&outer).unwrap().max_abs());
        let mc = mc_fisher(&model, &data, LossKind::Squared, draws, inst).map_err(|e| e.to_string())?;
        worst_mc = worst_mc.max(mc.sub(&closed).unwrap().frobenius_norm() / closed.frobenius_norm());
    }
    ensure(
        worst_exact <= 1e-12 && worst_mc <= tol,
        format!("closed form vs feature outer products {worst_exact:.1e}; Monte-Carlo gap {worst_mc:.2e} (limit {tol:.2e})"),
    )
}

fn c3_gradients() -> Check {
    let mut worst = 0.0f64;
    for inst in 0..20u64 {
        let mut r = rng(3000 + inst);
        let p = r.random_range(1..=4);
        let (model, ex, loss): (Network<f64>, Example<f64>, LossKind) = match inst % 4 {
            0 => (
                Mlp::init(&[p, r.random_range(1..=5), 3], Head::SoftmaxClassification, inst).unwrap().into(),
                Example::classification(uniform(&mut r, p), r.random_range(0..3)),
                LossKind::SoftmaxCrossEntropy,
            ),
            1 => (
                Mlp::init(&[p, r.random_range(1..=5), r.random_range(1..=4), 1], Head::Regression, inst).unwrap().into(),
                Example::regression(uniform(&mut r, p), r.random()),
                LossKind::Squared,
            ),
            2 => (
                init_two_layer(r.random_range(1..=6), p, 0.5, inst).unwrap().into(),
                Example::regression(uniform(&mut r, p), r.random()),
                LossKind::Squared,
            ),
            _ => (
                init_two_layer(r.random_range(1..=6), p, 0.5, inst).unwrap().into(),
                Example::classification(uniform(&mut r, p), r.random_range(0..2)),
                LossKind::SoftmaxCrossEntropy,
            ),
        };
        let bp = model.gradient(std::slice::from_ref(&ex), loss).unwrap();
        let fd = fd_gradient(&model, &ex, loss, 1e-6).map_err(|e| e.to_string())?;
        let diff: Vec<f64> = bp.iter().zip(&fd).map(|(a, b)| a - b).collect();
        worst = worst.max(norm2(&diff) / norm2(&fd).max(1e-8));
    }
    ensure(worst <= 1e-4, format!("20 instances, worst relative error {worst:.2e}"))
}

fn seed_means(rows: &[ResultRow], method: &str) -> Vec<(String, f64)> {
    let mut acc: BTreeMap<usize, (String, f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.method == method) {
        let e = acc.entry(r.sweep_index).or_insert((r.sweep.clone(), 0.0, 0));
        e.1 += r.train_loss;
        e.2 += 1;
    }
    acc.into_values().map(|(s, total, n)| (s, total / n as f64)).collect()
}

fn show(curve: &[(String, f64)]) -> String {
    curve.iter().map(|(s, v)| format!("{s}:{v:.4}")).collect::<Vec<_>>().join(" ")
}

fn c4_width_trend() -> Check {
    let cfg = ExperimentConfig { methods: vec![Method::FedFisherFull], ..ExperimentConfig::defaults(Task::SyntheticWidth) };
    let rows = run_width_sweep(&cfg).map_err(|e| e.to_string())?;
    let curve = seed_means(&rows, "fedfisher-full");
    let decreasing = curve.windows(2).all(|w| w[1].1 < w[0].1);
    ensure(decreasing && cfg.seeds.len() >= 10, format!("{} seeds, {}", cfg.seeds.len(), show(&curve)))
}

fn c5_steps_trend() -> Check {
    let cfg = ExperimentConfig { methods: vec![Method::FedFisherFull], ..ExperimentConfig::defaults(Task::SyntheticSteps) };
    let rows = run_local_steps_sweep(&cfg).map_err(|e| e.to_string())?;
    let curve = seed_means(&rows, "fedfisher-full");
    let min = curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let first = curve.first().map_or(0.0, |c| c.1);
    let last = curve.last().map_or(0.0, |c| c.1);
    ensure(
        first >= 1.05 * min && last >= 1.05 * min,
        format!("{} seeds, {} (ends {:+.1}% / {:+.1}% over minimum)", cfg.seeds.len(), show(&curve), 100.0 * (first / min - 1.0), 100.0 * (last / min - 1.0)),
    )
}

fn mean_by_method(rows: &[ResultRow], f: impl Fn(&ResultRow) -> f64) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.method.clone()).or_default();
        e.0 += f(r);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn c6_one_shot(timing: &mut Option<Check>) -> Check {
    let cfg = ExperimentConfig {
        methods: vec![Method::FedAvg, Method::FedFisherDiag, Method::FedFisherKfac],
        timing: true,
        ..ExperimentConfig::defaults(Task::OneShot)
    };
    let start = Instant::now();
    let rows = run_one_shot(&cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let acc = mean_by_method(&rows, |r| r.test_accuracy.unwrap_or(f64::NAN));
    let client = mean_by_method(&rows, |r| r.client_time_s);
    let ratio = client["fedfisher-diag"] / client["fedavg"];
    *timing = Some(ensure(
        ratio <= 1.30,
        format!("fedfisher-diag client time {:.3}s vs fedavg {:.3}s, ratio {ratio:.3}", client["fedfisher-diag"], client["fedavg"]),
    ));
    let (avg, diag, kfac) = (acc["fedavg"], acc["fedfisher-diag"], acc["fedfisher-kfac"]);
    ensure(
        diag >= avg && kfac >= avg && secs < 900.0,
        format!(
            "{} seeds, dims {:?}, accuracy fedavg {avg:.4}, diag {diag:.4}, kfac {kfac:.4}, {secs:.0}s",
            cfg.seeds.len(),
            {
                let mut d = vec![cfg.image_side * cfg.image_side];
                d.extend(&cfg.hidden);
                d.push(10);
                d
            }
        ),
    )
}

fn c7_quantization() -> Check {
    let mut r = rng(7);
    for d in [1usize, 10, 1000] {
        for sq in [1u32, 2, 4, 8, 16] {
            let x: Vec<f64> = uniform(&mut r, d).into_iter().map(|v| v * 37.0).collect();
            let q = quantize(&x, sq).map_err(|e| e.to_string())?;
            let want = d as u64 * u64::from(32 / sq) + 32;
            if q.bit_cost() != want || bits_per_element(sq) != 32 / sq {
                return Err(format!("d={d} s_q={sq}: cost {} != {want}", q.bit_cost()));
            }
            let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let back: Vec<f64> = q.dequantize();
            let bound = max / levels(sq) as f64;
            if let Some((a, b)) = x.iter().zip(&back).find(|(a, b)| (*a - *b).abs() > bound) {
                return Err(format!("d={d} s_q={sq}: |{a} - {b}| exceeds {bound}"));
            }
        }
    }
    Ok("d in {1, 10, 1000} x s_q in {1, 2, 4, 8, 16}: exact costs, errors within max/l_q".into())
}

fn c8_budget() -> Check {
    let mut notes = Vec::new();
    for hidden in [vec![32], vec![48, 24]] {
        let cfg = ExperimentConfig {
            hidden: hidden.clone(),
            seeds: vec![0],
            train_examples: 1000,
            local: TrainConfig {
                schedule: Schedule::Epochs(2),
                ..ExperimentConfig::defaults(Task::CompressBench).local
            },
            server: ServerConfig::adam(50, 25),
            sq_grid: vec![2, 4, 6],
            sv_grid: vec![0.0],
            ..ExperimentConfig::defaults(Task::CompressBench)
        };
        let rows = run_compress_bench(&cfg).map_err(|e| e.to_string())?;
        let mut dims = vec![cfg.image_side * cfg.image_side];
        dims.extend(&hidden);
        dims.push(10);
        let d: u64 = dims.windows(2).map(|w| ((w[0] + 1) * w[1]) as u64).sum();
        let l = (dims.len() - 1) as u64;
        let budget = 32 * d + 64 * l;
        let worst = rows.iter().map(|r| r.comm_bits).max().unwrap_or(0);
        if rows.len() != 2 * 3 || worst > budget {
            return Err(format!("dims {dims:?}: {} rows, max bits {worst} > budget {budget}", rows.len()));
        }
        notes.push(format!("dims {dims:?} max {worst} <= {budget}"));
    }
    Ok(notes.join("; "))
}

fn c9_properties() -> Check {
    let mut r = rng(9);
    for _ in 0..20 {
        let (p, q) = (r.random_range(1..6), r.random_range(1..6));
        let a = DenseMatrix::from_fn(p, p, |_, _| r.random::<f64>() - 0.5);
        let b = DenseMatrix::from_fn(q, q, |_, _| r.random::<f64>() - 0.5);
        let x = uniform(&mut r, p * q);
        let fast = kron_matvec(&a, &b, &x).unwrap();
        let dense = kron_dense(&a, &b).matvec(&x).unwrap();
        if fast.iter().zip(&dense).any(|(u, v)| (u - v).abs() > 1e-10) {
            return Err("Kronecker matvec differs from the dense product".into());
        }
    }

    let mlp: Network<f64> = Mlp::init(&[4, 5, 3], Head::SoftmaxClassification, 1).unwrap().into();
    let data: Vec<Example<f64>> =
        (0..20).map(|_| Example::classification(uniform(&mut r, 4), r.random_range(0..3))).collect();
    for kind in [FisherKind::Full, FisherKind::Diag, FisherKind::Kfac] {
        let f = compute_fisher(&mlp, &data, LossKind::SoftmaxCrossEntropy, kind, FisherMode::Expected).unwrap();
        if !is_psd(&f.to_dense(), 1e-10).unwrap() {
            return Err(format!("{} Fisher is not PSD", f.kind()));
        }
    }
    let two = init_two_layer::<f64>(6, 2, 0.5, 2).unwrap();
    let syn = gen_synthetic::<f64>(2, 1, 30, 2).unwrap().examples;
    if !is_psd(&full_fisher_two_layer(&two, &syn).unwrap().to_dense(), 1e-10).unwrap() {
        return Err("two-layer Fisher is not PSD".into());
    }

    let mk = |r: &mut ChaCha8Rng, i: usize| {
        let f = match i % 3 {
            0 => {
                let a = DenseMatrix::from_fn(6, 3, |_, _| r.random::<f64>() - 0.5);
                FisherApprox::Full(a.matmul(&a.transpose()).unwrap())
            }
            1 => FisherApprox::Diag((0..6).map(|_| r.random::<f64>()).collect()),
            _ => FisherApprox::Kfac(vec![KfacBlock { a: DenseMatrix::identity(2), b: DenseMatrix::from_diag(&[1.0, 0.5, 0.0]) }]),
        };
        ClientUpdate::new(uniform(r, 6), f, 5 + i).unwrap()
    };
    let updates: Vec<ClientUpdate<f64>> = (0..4).map(|i| mk(&mut r, i)).collect();
    let mut reversed = updates.clone();
    reversed.reverse();
    let gd = ServerConfig::gd(StepSize::Auto, 300);
    for method in [Method::FedAvg, Method::FedFisherFull] {
        let x = aggregate(method, &updates, &gd, None).unwrap().weights;
        let y = aggregate(method, &reversed, &gd, None).unwrap().weights;
        if rel_l2(&x, &y) > 1e-10 {
            return Err(format!("{method} depends on client order"));
        }
    }

    let mut last = f64::INFINITY;
    for t in 1..40 {
        let cfg = ServerConfig { stop_tol: 0.0, ..ServerConfig::gd(StepSize::Auto, t) };
        let w = fedfisher_gd(&updates, &cfg).unwrap().weights;
        let obj = fedfisher_objective(&updates, &w, Weighting::Equal).unwrap();
        if obj > last * (1.0 + 1e-12) + 1e-14 {
            return Err(format!("objective rose at step {t}"));
        }
        last = obj;
    }

    let labels: Vec<usize> = (0..300).map(|_| r.random_range(0..10)).collect();
    for alpha in [0.05, 1.0, 1e4] {
        let parts = dirichlet_partition(&labels, 7, alpha, 3).unwrap();
        let mut all = parts.concat();
        all.sort_unstable();
        if all != (0..300).collect::<Vec<_>>() || parts.iter().any(|p| p.is_empty()) {
            return Err(format!("partition at alpha={alpha} is not a disjoint cover"));
        }
    }

    let cfg = ExperimentConfig {
        seeds: vec![0, 1],
        sweep: vec![8.0, 16.0],
        server: ServerConfig::gd(StepSize::Fixed(0.001), 50),
        local: TrainConfig {
            schedule: Schedule::Steps(20),
            ..ExperimentConfig::defaults(Task::SyntheticWidth).local
        },
        ..ExperimentConfig::defaults(Task::SyntheticWidth)
    };
    let csv = || -> Vec<u8> {
        let mut out = Vec::new();
        write_csv_to(&mut out, &run_width_sweep(&cfg).unwrap()).unwrap();
        out
    };
    if csv() != csv() {
        return Err("identical runs wrote different CSV bytes".into());
    }
    Ok("kron, PSD, permutation, monotone objective, partition cover and CSV determinism hold".into())
}

fn main() {
    let mut timing = None;
    let mut results: Vec<(&str, Check, f64)> = Vec::new();
    let mut record = |name: &'static str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        let (tag, msg) = match &out {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("{tag} criterion {name} ({secs:.1}s): {msg}");
        results.push((name, out, secs));
    };
    record("1 oracle equivalence", &mut c1_oracle_equivalence);
    record("2 fisher identity", &mut c2_fisher_identity);
    record("3 gradients", &mut c3_gradients);
    record("4 width trend", &mut c4_width_trend);
    record("5 local-steps trend", &mut c5_steps_trend);
    record("6 one-shot direction", &mut || c6_one_shot(&mut timing));
    record("7 quantization", &mut c7_quantization);
    record("8 budget parity", &mut c8_budget);
    record("9 property suites", &mut c9_properties);
    let timing = timing.unwrap_or_else(|| Err("one-shot run did not complete".into()));
    match &timing {
        Ok(m) => println!("PASS wall-time overhead: {m}"),
        Err(m) => println!("FAIL wall-time overhead: {m}"),
    }
    let failed = results.iter().filter(|r| r.1.is_err()).count() + usize::from(timing.is_err());
    if failed > 0 {
        eprintln!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
