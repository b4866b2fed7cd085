use std::time::Instant;

use rayon::prelude::*;

use super::config::{ExperimentConfig, Task};
use super::results::ResultRow;
use crate::aggregate::{aggregate, few_shot_rounds, run_clients, ClientConfig, ClientRun, ClientUpdate, Method};
use crate::compress::{transmit, UploadCodec};
use crate::datasets::{
    class_labels, dirichlet_partition, gen_synthetic, image_examples, load_idx, normalize_unit, split_off, Example,
    FederatedDataset, ImageTaskSpec, NUM_IMAGE_CLASSES,
};
use crate::fisher::{FisherApprox, FisherKind, FisherMode};
use crate::models::{accuracy_eval, init_two_layer, loss_eval, Head, LossKind, Mlp, Model, Network, Schedule};
use crate::{rng, Error, Result};

/// Runs whatever `cfg.task` names.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    match cfg.task {
        Task::SyntheticWidth => run_width_sweep(cfg),
        Task::SyntheticSteps => run_local_steps_sweep(cfg),
        Task::OneShot => run_one_shot(cfg),
        Task::FewShot => run_few_shot(cfg),
        Task::CompressBench => run_compress_bench(cfg),
    }
}

fn expect_task(cfg: &ExperimentConfig, task: Task) -> Result<()> {
    if cfg.task != task {
        return Err(Error::Config(format!("{task} runner called with a {} config", cfg.task)));
    }
    cfg.validate()
}

fn client_config(cfg: &ExperimentConfig, seed: u64) -> ClientConfig {
    let fisher_mode = match cfg.fisher_mode {
        FisherMode::Sampled { draws, .. } => FisherMode::Sampled { seed: rng::substream_seed(seed, rng::stream::FISHER), draws },
        m => m,
    };
    ClientConfig { train: cfg.local, loss: cfg.loss, fisher_mode, kfac_damping: cfg.kfac_damping }
}

/// Distinct Fisher kinds the methods need, in first-use order.
fn needed_kinds(methods: &[Method]) -> Vec<FisherKind> {
    let mut kinds = Vec::new();
    for k in methods.iter().filter_map(|m| m.fisher_kind()) {
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    kinds
}

fn kind_slot(kinds: &[FisherKind], method: Method) -> Option<usize> {
    method.fisher_kind().and_then(|k| kinds.iter().position(|&x| x == k))
}

fn sweep_label(v: f64) -> String {
    format!("{v}")
}

struct Merged {
    model: Network<f64>,
    bits: u64,
    client_secs: f64,
    server_secs: f64,
    diverged: bool,
}

/// Uploads every client's model (and Fisher) through `codec`, then merges.
#[allow(clippy::too_many_arguments)]
fn merge(
    cfg: &ExperimentConfig,
    init: &Network<f64>,
    runs: &[Vec<ClientRun<f64>>],
    kinds: &[FisherKind],
    method: Method,
    codec: &UploadCodec,
    val: Option<&[Example<f64>]>,
) -> Result<Merged> {
    let slot = kind_slot(kinds, method);
    let layer_sizes = init.layer_sizes();
    let t0 = Instant::now();
    let mut bits = 0u64;
    let mut client_secs = 0.0;
    let mut diverged = false;
    let mut updates = Vec::with_capacity(runs.len());
    for per_kind in runs {
        let run = &per_kind[slot.unwrap_or(0)];
        client_secs += run.train_secs + if slot.is_some() { run.fisher_secs } else { 0.0 };
        diverged |= run.diverged;
        let fisher = if slot.is_some() { run.fisher.as_ref() } else { None };
        let up = transmit(run.model.params(), fisher, &layer_sizes, codec)?;
        bits = bits.max(up.bits);
        let fisher = up.fisher.unwrap_or_else(|| FisherApprox::Diag(vec![1.0; up.weights.len()]));
        updates.push(ClientUpdate::new(up.weights, fisher, run.n)?);
    }
    let classify = cfg.loss == LossKind::SoftmaxCrossEntropy;
    let validate = |w: &[f64]| -> Result<f64> {
        let m = init.with_params(w)?;
        let v = val.unwrap_or(&[]);
        if classify {
            accuracy_eval(&m, v)
        } else {
            Ok(-loss_eval(&m, v, cfg.loss)?)
        }
    };
    let val_fn: Option<&dyn Fn(&[f64]) -> Result<f64>> =
        if val.is_some() && cfg.server.val_every > 0 { Some(&validate) } else { None };
    let mut server = cfg.server;
    if val_fn.is_none() {
        server.val_every = 0;
    }
    let out = aggregate(method, &updates, &server, val_fn)?;
    let server_secs = t0.elapsed().as_secs_f64();
    Ok(Merged {
        model: init.with_params(&out.weights)?,
        bits,
        client_secs: client_secs / runs.len() as f64,
        server_secs,
        diverged: diverged || out.diverged,
    })
}

struct Case<'a> {
    seed: u64,
    sweep: String,
    sweep_index: usize,
    round: usize,
    pooled: &'a [Example<f64>],
    test: Option<&'a [Example<f64>]>,
}

fn row(cfg: &ExperimentConfig, case: &Case<'_>, method: Method, m: &Merged) -> Result<ResultRow> {
    let (test_loss, test_accuracy) = match case.test {
        Some(t) => (
            Some(loss_eval(&m.model, t, cfg.loss)?),
            if cfg.loss == LossKind::SoftmaxCrossEntropy { Some(accuracy_eval(&m.model, t)?) } else { None },
        ),
        None => (None, None),
    };
    let timed = |s: f64| if cfg.timing { s } else { 0.0 };
    Ok(ResultRow {
        seed: case.seed,
        method: method.name().to_string(),
        sweep: case.sweep.clone(),
        round: case.round,
        train_loss: loss_eval(&m.model, case.pooled, cfg.loss)?,
        test_loss,
        test_accuracy,
        client_time_s: timed(m.client_secs),
        server_time_s: timed(m.server_secs),
        comm_bits: m.bits,
        diverged: m.diverged,
        sweep_index: case.sweep_index,
    })
}

fn synthetic_case(cfg: &ExperimentConfig, seed: u64, idx: usize, width: usize, steps: usize) -> Result<Vec<ResultRow>> {
    let data = gen_synthetic::<f64>(seed, cfg.clients, cfg.n_per_client, cfg.p)?;
    let init: Network<f64> = init_two_layer(width, cfg.p, cfg.kappa, seed)?.into();
    let mut client = client_config(cfg, seed);
    client.train.schedule = Schedule::Steps(steps);
    let kinds = needed_kinds(&cfg.methods);
    let runs = run_clients(&init, &data, &client, &kinds, rng::substream_seed(seed, 0))?;
    let pooled = data.pooled_examples();
    let sweep = sweep_label(cfg.sweep[idx]);
    let case = Case { seed, sweep, sweep_index: idx, round: 1, pooled: &pooled, test: None };
    cfg.methods
        .iter()
        .map(|&method| {
            let merged = merge(cfg, &init, &runs, &kinds, method, &UploadCodec::RAW, None)?;
            row(cfg, &case, method, &merged)
        })
        .collect()
}

fn cases(cfg: &ExperimentConfig) -> Vec<(u64, usize)> {
    cfg.seeds.iter().flat_map(|&s| (0..cfg.sweep.len()).map(move |i| (s, i))).collect()
}

fn collect(results: Vec<Result<Vec<ResultRow>>>) -> Result<Vec<ResultRow>> {
    let mut rows: Vec<ResultRow> = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    rows.sort_by_key(|r| r.sort_key());
    Ok(rows)
}

/// Synthetic regression, local steps fixed, width swept.
pub fn run_width_sweep(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    expect_task(cfg, Task::SyntheticWidth)?;
    let steps = match cfg.local.schedule {
        Schedule::Steps(k) => k,
        Schedule::Epochs(_) => return Err(Error::Config("synthetic runs count local steps, not epochs".into())),
    };
    collect(
        cases(cfg)
            .into_par_iter()
            .map(|(seed, i)| synthetic_case(cfg, seed, i, cfg.sweep[i] as usize, steps))
            .collect(),
    )
}

/// Synthetic regression, width fixed, local steps swept.
pub fn run_local_steps_sweep(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    expect_task(cfg, Task::SyntheticSteps)?;
    collect(
        cases(cfg)
            .into_par_iter()
            .map(|(seed, i)| synthetic_case(cfg, seed, i, cfg.width, cfg.sweep[i] as usize))
            .collect(),
    )
}

/// Classification data split into a training pool, a server validation set
/// and a test set.
#[derive(Debug, Clone)]
pub struct ImageTask {
    pub train: Vec<Example<f64>>,
    pub val: Vec<Example<f64>>,
    pub test: Vec<Example<f64>>,
    pub num_classes: usize,
}

/// Loads IDX files when configured, otherwise generates the procedural
/// garment images. The split depends only on `data.seed`.
pub fn load_image_task(cfg: &ExperimentConfig) -> Result<ImageTask> {
    let need = cfg.train_examples + cfg.val_examples + cfg.test_examples;
    let mut all: Vec<Example<f64>> = match (&cfg.idx_images, &cfg.idx_labels) {
        (Some(images), Some(labels)) => load_idx(images, labels)?,
        _ => image_examples(&ImageTaskSpec {
            count: need,
            side: cfg.image_side,
            seed: cfg.data_seed,
            noise: cfg.image_noise,
        }),
    };
    if cfg.normalize {
        all = normalize_unit(all)?;
    }
    if all.len() < cfg.val_examples + cfg.test_examples + cfg.clients {
        return Err(Error::Config(format!("only {} examples available", all.len())));
    }
    let labels = class_labels(&all)?;
    let num_classes = labels.iter().max().map_or(0, |&c| c + 1).max(NUM_IMAGE_CLASSES.min(labels.len()));
    let (rest, test) = split_off(&all, cfg.test_examples, cfg.data_seed);
    let (mut train, val) = split_off(&rest, cfg.val_examples, rng::substream_seed(cfg.data_seed, 1));
    train.truncate(cfg.train_examples);
    Ok(ImageTask { train, val, test, num_classes })
}

fn mlp_dims(cfg: &ExperimentConfig, task: &ImageTask) -> Vec<usize> {
    let mut dims = vec![task.train[0].x.len()];
    dims.extend(&cfg.hidden);
    dims.push(task.num_classes);
    dims
}

fn federate(cfg: &ExperimentConfig, task: &ImageTask, alpha: f64, seed: u64) -> Result<FederatedDataset<f64>> {
    let labels = class_labels(&task.train)?;
    let partition = dirichlet_partition(&labels, cfg.clients, alpha, seed)?;
    FederatedDataset::new(task.train.clone(), partition, task.num_classes)
}

fn init_mlp(cfg: &ExperimentConfig, task: &ImageTask, seed: u64) -> Result<Network<f64>> {
    Ok(Mlp::init(&mlp_dims(cfg, task), Head::SoftmaxClassification, seed)?.into())
}

fn one_shot_codec(cfg: &ExperimentConfig, method: Method) -> UploadCodec {
    if !cfg.compress {
        return UploadCodec::RAW;
    }
    match method {
        Method::FedAvg | Method::FedFisherFull => UploadCodec::RAW,
        Method::FedFisherDiag | Method::FisherMerge => UploadCodec::matched_budget(2),
        Method::FedFisherKfac => UploadCodec::matched_budget(cfg.kfac_sq),
    }
}

/// Dirichlet-split classification, one local training per client, every
/// method merged once. Sweeps Dirichlet α.
pub fn run_one_shot(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    expect_task(cfg, Task::OneShot)?;
    let task = load_image_task(cfg)?;
    let kinds = needed_kinds(&cfg.methods);
    collect(
        cases(cfg)
            .into_par_iter()
            .map(|(seed, i)| {
                let data = federate(cfg, &task, cfg.sweep[i], seed)?;
                let init = init_mlp(cfg, &task, seed)?;
                let runs = run_clients(&init, &data, &client_config(cfg, seed), &kinds, rng::substream_seed(seed, 0))?;
                let case = Case {
                    seed,
                    sweep: sweep_label(cfg.sweep[i]),
                    sweep_index: i,
                    round: 1,
                    pooled: &task.train,
                    test: Some(&task.test),
                };
                cfg.methods
                    .iter()
                    .map(|&method| {
                        let merged = merge(cfg, &init, &runs, &kinds, method, &one_shot_codec(cfg, method), Some(&task.val))?;
                        row(cfg, &case, method, &merged)
                    })
                    .collect()
            })
            .collect(),
    )
}

fn raw_upload_bits(init: &Network<f64>, method: Method, template: Option<&FisherApprox<f64>>) -> u64 {
    let d = init.num_params() as u64;
    let fisher = match (method.fisher_kind(), template) {
        (None, _) => 0,
        (Some(FisherKind::Full), _) => d * d,
        (Some(FisherKind::Diag), _) => d,
        (Some(FisherKind::Kfac), Some(FisherApprox::Kfac(blocks))) => {
            blocks.iter().map(|b| (b.a.rows().pow(2) + b.b.rows().pow(2)) as u64).sum()
        }
        (Some(FisherKind::Kfac), _) => 0,
    };
    32 * (d + fisher)
}

fn kfac_template(init: &Network<f64>) -> Option<FisherApprox<f64>> {
    let Network::Mlp(m) = init else { return None };
    Some(FisherApprox::Kfac(
        m.layers()
            .iter()
            .map(|s| crate::fisher::KfacBlock {
                a: crate::numerics::DenseMatrix::zeros(s.inputs + 1, s.inputs + 1),
                b: crate::numerics::DenseMatrix::zeros(s.outputs, s.outputs),
            })
            .collect(),
    ))
}

/// Several rounds of local training and merging; one row per round.
/// Uploads are uncompressed.
pub fn run_few_shot(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    expect_task(cfg, Task::FewShot)?;
    let task = load_image_task(cfg)?;
    let jobs: Vec<(u64, usize, Method)> =
        cases(cfg).into_iter().flat_map(|(s, i)| cfg.methods.iter().map(move |&m| (s, i, m))).collect();
    collect(
        jobs.into_par_iter()
            .map(|(seed, i, method)| {
                let data = federate(cfg, &task, cfg.sweep[i], seed)?;
                let init = init_mlp(cfg, &task, seed)?;
                let val = (cfg.server.val_every > 0).then_some(&task.val[..]);
                let t0 = Instant::now();
                let records = few_shot_rounds(
                    &data,
                    &init,
                    cfg.rounds,
                    &client_config(cfg, seed),
                    &cfg.server,
                    method,
                    &task.test,
                    val,
                    seed,
                )?;
                let per_round = t0.elapsed().as_secs_f64() / cfg.rounds as f64;
                let bits = raw_upload_bits(&init, method, kfac_template(&init).as_ref());
                records
                    .into_iter()
                    .map(|r| {
                        Ok(ResultRow {
                            seed,
                            method: method.name().to_string(),
                            sweep: sweep_label(cfg.sweep[i]),
                            round: r.round,
                            train_loss: loss_eval(&r.model, &task.train, cfg.loss)?,
                            test_loss: Some(r.loss),
                            test_accuracy: r.accuracy,
                            client_time_s: if cfg.timing { per_round } else { 0.0 },
                            server_time_s: 0.0,
                            comm_bits: bits,
                            diverged: r.diverged,
                            sweep_index: i,
                        })
                    })
                    .collect()
            })
            .collect(),
    )
}

/// FedFisher (Diag / K-FAC) under a grid of quantization factors `s_q` and
/// SVD factors `s_v` (`s_v = 0` plans K-FAC ranks for a `16d` budget).
///
/// Diagonal uploads quantize weights and Fisher at `s_q`. K-FAC uploads
/// quantize weights at `s_q = 2` (at `s_q = 1` when `s_q = 1`) and the
/// truncated factors at `s_q`.
pub fn run_compress_bench(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    expect_task(cfg, Task::CompressBench)?;
    let task = load_image_task(cfg)?;
    let kinds = needed_kinds(&cfg.methods);
    let grid: Vec<(u32, f64)> = cfg.sq_grid.iter().flat_map(|&q| cfg.sv_grid.iter().map(move |&v| (q, v))).collect();
    collect(
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let data = federate(cfg, &task, cfg.alpha, seed)?;
                let init = init_mlp(cfg, &task, seed)?;
                let runs = run_clients(&init, &data, &client_config(cfg, seed), &kinds, rng::substream_seed(seed, 0))?;
                let mut rows = Vec::new();
                for (j, &(s_q, s_v)) in grid.iter().enumerate() {
                    let case = Case {
                        seed,
                        sweep: format!("sq={s_q};sv={s_v}"),
                        sweep_index: j,
                        round: 1,
                        pooled: &task.train,
                        test: Some(&task.test),
                    };
                    for &method in &cfg.methods {
                        let codec = match method {
                            Method::FedFisherKfac => UploadCodec {
                                weight_sq: Some(if s_q == 1 { 1 } else { 2 }),
                                fisher_sq: Some(s_q),
                                kfac_sv: (s_v > 0.0).then_some(s_v),
                            },
                            _ => UploadCodec { weight_sq: Some(s_q), fisher_sq: Some(s_q), kfac_sv: None },
                        };
                        let merged = merge(cfg, &init, &runs, &kinds, method, &codec, Some(&task.val))?;
                        rows.push(row(cfg, &case, method, &merged)?);
                    }
                }
                Ok(rows)
            })
            .collect(),
    )
}
