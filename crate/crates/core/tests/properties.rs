use fedfisher::aggregate::{aggregate, fedfisher_gd, fedfisher_objective, ClientUpdate, Method, ServerConfig, StepSize, Weighting};
use fedfisher::compress::{bits_per_element, levels, quantize, BitCost};
use fedfisher::datasets::{class_labels, dirichlet_partition, Example};
use fedfisher::experiment::{write_csv_to, ResultRow};
use fedfisher::fisher::{compute_fisher, is_psd, FisherApprox, FisherKind, FisherMode, KfacBlock};
use fedfisher::models::{init_two_layer, Head, LossKind, Mlp, Network};
use fedfisher::numerics::{kron_dense, kron_matvec, DenseMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(rows, cols, |_, _| r.random::<f64>() * 2.0 - 1.0)
}

fn random_psd(r: &mut ChaCha8Rng, d: usize, rank: usize) -> DenseMatrix<f64> {
    let a = random_matrix(r, d, rank);
    a.matmul(&a.transpose()).unwrap()
}

fn random_vec(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Mixed Full / Diag / K-FAC updates of a common dimension `p·q`.
fn mixed_updates(seed: u64, clients: usize, p: usize, q: usize) -> Vec<ClientUpdate<f64>> {
    let mut r = rng(seed);
    let d = p * q;
    (0..clients)
        .map(|i| {
            let fisher = match i % 3 {
                0 => FisherApprox::Full(random_psd(&mut r, d, d / 2 + 1)),
                1 => FisherApprox::Diag((0..d).map(|_| r.random::<f64>()).collect()),
                _ => FisherApprox::Kfac(vec![KfacBlock { a: random_psd(&mut r, p, p), b: random_psd(&mut r, q, q) }]),
            };
            ClientUpdate::new(random_vec(&mut r, d), fisher, 10 + i).unwrap()
        })
        .collect()
}

fn small_regression(seed: u64, p: usize, n: usize) -> Vec<Example<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| Example::regression(random_vec(&mut r, p), r.random::<f64>())).collect()
}

fn small_classification(seed: u64, p: usize, n: usize, c: usize) -> Vec<Example<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| Example::classification(random_vec(&mut r, p), r.random_range(0..c))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kron_matvec_matches_dense(seed in any::<u64>(), p in 1usize..6, q in 1usize..6) {
        let mut r = rng(seed);
        let a = random_matrix(&mut r, p, p);
        let b = random_matrix(&mut r, q, q);
        let x = random_vec(&mut r, p * q);
        let fast = kron_matvec(&a, &b, &x).unwrap();
        let dense = kron_dense(&a, &b).matvec(&x).unwrap();
        prop_assert!(max_rel_diff(&fast, &dense) <= 1e-10);
    }

    #[test]
    fn fisher_variants_are_psd(seed in any::<u64>(), hidden in 1usize..5, classes in 2usize..4) {
        let mlp: Network<f64> = Mlp::init(&[3, hidden, classes], Head::SoftmaxClassification, seed).unwrap().into();
        let data = small_classification(seed, 3, 12, classes);
        for kind in [FisherKind::Full, FisherKind::Diag, FisherKind::Kfac] {
            for mode in [FisherMode::Expected, FisherMode::Sampled { seed, draws: 2 }] {
                let f = compute_fisher(&mlp, &data, LossKind::SoftmaxCrossEntropy, kind, mode).unwrap();
                prop_assert!(is_psd(&f.to_dense(), 1e-10).unwrap(), "{} not PSD", f.kind());
                prop_assert!(f.diagonal().iter().all(|&v| v >= 0.0));
            }
        }
        let two: Network<f64> = init_two_layer(hidden + 1, 3, 0.5, seed).unwrap().into();
        let reg = small_regression(seed, 3, 12);
        for kind in [FisherKind::Full, FisherKind::Diag] {
            let f = compute_fisher(&two, &reg, LossKind::Squared, kind, FisherMode::Expected).unwrap();
            prop_assert!(is_psd(&f.to_dense(), 1e-10).unwrap());
        }
    }

    #[test]
    fn aggregators_ignore_client_order(seed in any::<u64>(), clients in 2usize..5, shift in 1usize..4) {
        let updates = mixed_updates(seed, clients, 2, 3);
        let mut rotated = updates.clone();
        rotated.rotate_left(shift % clients);
        let diag: Vec<ClientUpdate<f64>> = updates
            .iter()
            .map(|u| ClientUpdate::new(u.weights.clone(), FisherApprox::Diag(u.fisher.diagonal()), u.n).unwrap())
            .collect();
        let mut diag_rot = diag.clone();
        diag_rot.rotate_left(shift % clients);
        let gd = ServerConfig::gd(StepSize::Auto, 500);
        let mut sized = gd;
        sized.weighting = Weighting::BySize;
        for (method, a, b, cfg) in [
            (Method::FedAvg, &updates, &rotated, gd),
            (Method::FedFisherFull, &updates, &rotated, gd),
            (Method::FedFisherFull, &updates, &rotated, sized),
            (Method::FisherMerge, &diag, &diag_rot, gd),
            (Method::FedFisherDiag, &diag, &diag_rot, ServerConfig::adam(50, 0)),
        ] {
            let x = aggregate(method, a, &cfg, None).unwrap().weights;
            let y = aggregate(method, b, &cfg, None).unwrap().weights;
            prop_assert!(max_rel_diff(&x, &y) <= 1e-9, "{method}");
        }
    }

    #[test]
    fn gd_objective_never_increases(seed in any::<u64>(), clients in 1usize..5) {
        let updates = mixed_updates(seed, clients, 2, 2);
        let mut last = f64::INFINITY;
        for t in 1..30 {
            let cfg = ServerConfig { stop_tol: 0.0, ..ServerConfig::gd(StepSize::Auto, t) };
            let w = fedfisher_gd(&updates, &cfg).unwrap().weights;
            let obj = fedfisher_objective(&updates, &w, Weighting::Equal).unwrap();
            prop_assert!(obj <= last * (1.0 + 1e-12) + 1e-14, "step {t}: {obj} > {last}");
            last = obj;
        }
    }

    #[test]
    fn dirichlet_partition_is_a_disjoint_cover(
        seed in any::<u64>(),
        n in 10usize..200,
        m in 1usize..8,
        alpha in prop::sample::select(vec![0.05, 0.1, 1.0, 100.0]),
    ) {
        let data = small_classification(seed, 1, n, 4);
        let labels = class_labels(&data).unwrap();
        let parts = dirichlet_partition(&labels, m, alpha, seed).unwrap();
        prop_assert_eq!(parts.len(), m);
        prop_assert!(parts.iter().all(|p| !p.is_empty()));
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn quantization_error_and_cost(seed in any::<u64>(), d in 1usize..300, sq in prop::sample::select(vec![1u32, 2, 4, 8, 16])) {
        let mut r = rng(seed);
        let scale = 10f64.powi(r.random_range(-3..4));
        let x: Vec<f64> = (0..d).map(|_| (r.random::<f64>() * 2.0 - 1.0) * scale).collect();
        let q = quantize(&x, sq).unwrap();
        prop_assert_eq!(q.bit_cost(), (d as u64) * u64::from(bits_per_element(sq)) + 32);
        let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let back: Vec<f64> = q.dequantize();
        let bound = max / levels(sq) as f64;
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= bound * (1.0 + 1e-12));
        }
        let again: Vec<f64> = quantize(&back, sq).unwrap().dequantize();
        prop_assert_eq!(again, back);
    }

    #[test]
    fn csv_output_is_order_independent(seed in any::<u64>(), count in 1usize..20) {
        let mut r = rng(seed);
        let rows: Vec<ResultRow> = (0..count)
            .map(|i| ResultRow {
                seed: r.random_range(0..3),
                method: ["fedavg", "fedfisher-diag"][i % 2].into(),
                sweep: format!("{i}"),
                round: 1,
                train_loss: r.random(),
                test_loss: Some(r.random()),
                test_accuracy: None,
                client_time_s: 0.0,
                server_time_s: 0.0,
                comm_bits: r.random_range(0..1000),
                diverged: false,
                sweep_index: i,
            })
            .collect();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_csv_to(&mut a, &rows).unwrap();
        write_csv_to(&mut b, &shuffled).unwrap();
        prop_assert_eq!(a, b);
    }
}
