//! Server-side merging of client updates.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::datasets::{Example, FederatedDataset};
use crate::error::{dim_err, invalid};
use crate::fisher::{compute_fisher, FisherApprox, FisherKind, FisherMode};
use crate::models::{accuracy_eval, loss_eval, sgd_train, LossKind, Model, Network, TrainConfig};
use crate::numerics::{axpy, dot, norm2, power_iteration_max_eig, DenseMatrix, PowerIteration};
use crate::rng;
use crate::{Error, Result, Scalar};

/// What one client sends to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<T> {
    pub weights: Vec<T>,
    pub fisher: FisherApprox<T>,
    pub n: usize,
}

impl<T: Scalar> ClientUpdate<T> {
    pub fn new(weights: Vec<T>, fisher: FisherApprox<T>, n: usize) -> Result<Self> {
        if weights.len() != fisher.dim() {
            return dim_err(format!(
                "weights of length {} paired with a Fisher of dimension {}",
                weights.len(),
                fisher.dim()
            ));
        }
        Ok(Self { weights, fisher, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Fixed(f64),
    /// `1 / (1.01 · λ̂_max)` from power iteration.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServerOptimizer {
    Gd { eta_s: StepSize },
    Adam { eta_s: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl ServerOptimizer {
    /// Adam with the usual one-shot settings.
    pub fn adam_default() -> Self {
        ServerOptimizer::Adam { eta_s: 0.01, beta1: 0.9, beta2: 0.99, eps: 0.01 }
    }
}

/// How clients of different sizes are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    #[default]
    Equal,
    /// Client `i` gets `M · n_i / N`, which is 1 for equal sizes.
    BySize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    pub optimizer: ServerOptimizer,
    pub t_max: usize,
    pub stop_tol: f64,
    /// Validation period for Adam; 0 disables validation.
    pub val_every: usize,
    pub weighting: Weighting,
}

impl ServerConfig {
    pub fn gd(eta_s: StepSize, t_max: usize) -> Self {
        Self { optimizer: ServerOptimizer::Gd { eta_s }, t_max, stop_tol: 1e-10, val_every: 0, weighting: Weighting::Equal }
    }

    pub fn adam(t_max: usize, val_every: usize) -> Self {
        Self { optimizer: ServerOptimizer::adam_default(), t_max, stop_tol: 0.0, val_every, weighting: Weighting::Equal }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Config("server t_max must be at least 1".into()));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::Config("server stop_tol must be non-negative".into()));
        }
        match self.optimizer {
            ServerOptimizer::Gd { eta_s: StepSize::Fixed(e) } if !(e > 0.0) => {
                Err(Error::Config(format!("server step size must be positive, got {e}")))
            }
            ServerOptimizer::Adam { eta_s, beta1, beta2, eps }
                if !(eta_s > 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(Error::Config("invalid Adam hyperparameters".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Result of a server optimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerOutcome<T> {
    pub weights: Vec<T>,
    pub steps: usize,
    /// The relative stopping rule fired before `t_max`.
    pub converged: bool,
    /// A fixed step size exceeded `1/λ̂_max`.
    pub step_warning: bool,
    /// Iterates became non-finite; `weights` is the last finite iterate.
    pub diverged: bool,
    pub eta_s: f64,
    pub lmax: Option<f64>,
}

fn check_updates<T: Scalar>(updates: &[ClientUpdate<T>]) -> Result<usize> {
    let first = updates.first().ok_or_else(|| Error::InvalidInput("no client updates".into()))?;
    let d = first.weights.len();
    for u in updates {
        if u.weights.len() != d || u.fisher.dim() != d {
            return dim_err("client updates disagree on the parameter dimension");
        }
    }
    Ok(d)
}

fn coefficients<T: Scalar>(updates: &[ClientUpdate<T>], weighting: Weighting) -> Vec<T> {
    match weighting {
        Weighting::Equal => vec![T::one(); updates.len()],
        Weighting::BySize => {
            let total: usize = updates.iter().map(|u| u.n).sum();
            let m = updates.len() as f64;
            updates
                .iter()
                .map(|u| if total == 0 { T::one() } else { T::of(m * u.n as f64 / total as f64) })
                .collect()
        }
    }
}

fn weighted_mean<T: Scalar>(updates: &[ClientUpdate<T>], coef: &[T]) -> Vec<T> {
    let d = updates[0].weights.len();
    let mut out = vec![T::zero(); d];
    let total: T = coef.iter().copied().sum();
    for (u, &c) in updates.iter().zip(coef) {
        axpy(c / total, &u.weights, &mut out);
    }
    out
}

/// Arithmetic mean of the client models.
pub fn fedavg<T: Scalar>(updates: &[ClientUpdate<T>]) -> Result<Vec<T>> {
    check_updates(updates)?;
    Ok(weighted_mean(updates, &vec![T::one(); updates.len()]))
}

/// `v ↦ Σ_i c_i F_i v` with Full and Diag terms pre-summed. K-FAC terms are
/// kept per client since Kronecker products do not add up to one.
pub struct FisherSum<T> {
    dim: usize,
    dense: Option<DenseMatrix<T>>,
    diag: Option<Vec<T>>,
    kfac: Vec<FisherApprox<T>>,
}

impl<T: Scalar> FisherSum<T> {
    pub fn new(fishers: &[&FisherApprox<T>], coef: &[T]) -> Result<Self> {
        let dim = fishers.first().map(|f| f.dim()).ok_or_else(|| Error::InvalidInput("no Fishers".into()))?;
        let mut dense: Option<DenseMatrix<T>> = None;
        let mut diag: Option<Vec<T>> = None;
        let mut kfac = Vec::new();
        for (f, &c) in fishers.iter().zip(coef) {
            if f.dim() != dim {
                return dim_err("Fishers disagree on dimension");
            }
            match f {
                FisherApprox::Full(m) => match &mut dense {
                    Some(acc) => acc.add_scaled_assign(c, m)?,
                    None => dense = Some(m.scale(c)),
                },
                FisherApprox::Diag(v) => {
                    let acc = diag.get_or_insert_with(|| vec![T::zero(); dim]);
                    axpy(c, v, acc);
                }
                FisherApprox::Kfac(_) => kfac.push((*f).clone().scaled(c)),
            }
        }
        if let (Some(m), Some(v)) = (&mut dense, &diag) {
            let mut data = std::mem::replace(m, DenseMatrix::zeros(0, 0)).into_vec();
            for (i, &vi) in v.iter().enumerate() {
                data[i * dim + i] += vi;
            }
            *m = DenseMatrix::new(dim, dim, data)?;
            diag = None;
        }
        Ok(Self { dim, dense, diag, kfac })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `out = (Σ c_i F_i) v`.
    pub fn apply(&self, v: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        if let Some(m) = &self.dense {
            m.matvec_acc(v, out);
        }
        if let Some(d) = &self.diag {
            for ((o, &di), &vi) in out.iter_mut().zip(d).zip(v) {
                *o += di * vi;
            }
        }
        for f in &self.kfac {
            f.matvec_acc(v, out).expect("dimension checked at construction");
        }
    }

    pub fn apply_vec(&self, v: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        self.apply(v, &mut out);
        out
    }
}

/// Largest eigenvalue of `Σ_i F_i` by power iteration.
pub fn estimate_lmax<T: Scalar>(fishers: &[&FisherApprox<T>]) -> Result<PowerIteration<T>> {
    let sum = FisherSum::new(fishers, &vec![T::one(); fishers.len()])?;
    lmax_of(&sum)
}

fn lmax_of<T: Scalar>(sum: &FisherSum<T>) -> Result<PowerIteration<T>> {
    power_iteration_max_eig(|v: &[T], out: &mut [T]| sum.apply(v, out), sum.dim(), T::of(1e-9), 5000)
}

/// `Σ_i c_i (W − W_i)ᵀ F_i (W − W_i)`, the quantity FedFisher GD decreases.
pub fn fedfisher_objective<T: Scalar>(updates: &[ClientUpdate<T>], w: &[T], weighting: Weighting) -> Result<T> {
    check_updates(updates)?;
    let coef = coefficients(updates, weighting);
    let mut total = T::zero();
    for (u, &c) in updates.iter().zip(&coef) {
        let diff: Vec<T> = w.iter().zip(&u.weights).map(|(&a, &b)| a - b).collect();
        total += c * u.fisher.quad_form(&diff)?;
    }
    Ok(total)
}

struct Problem<T> {
    sum: FisherSum<T>,
    b: Vec<T>,
    start: Vec<T>,
}

fn problem<T: Scalar>(updates: &[ClientUpdate<T>], weighting: Weighting) -> Result<Problem<T>> {
    let d = check_updates(updates)?;
    let coef = coefficients(updates, weighting);
    let fishers: Vec<&FisherApprox<T>> = updates.iter().map(|u| &u.fisher).collect();
    let sum = FisherSum::new(&fishers, &coef)?;
    let mut b = vec![T::zero(); d];
    for (u, &c) in updates.iter().zip(&coef) {
        let fw = u.fisher.matvec(&u.weights)?;
        axpy(c, &fw, &mut b);
    }
    Ok(Problem { sum, b, start: weighted_mean(updates, &coef) })
}

/// Gradient descent on the FedFisher objective from the FedAvg mean:
/// `W ← W − η_S (Σ F_i W − Σ F_i W_i)`.
pub fn fedfisher_gd<T: Scalar>(updates: &[ClientUpdate<T>], cfg: &ServerConfig) -> Result<ServerOutcome<T>> {
    cfg.validate()?;
    let ServerOptimizer::Gd { eta_s } = cfg.optimizer else {
        return Err(Error::Config("fedfisher_gd needs the gd optimizer".into()));
    };
    let Problem { sum, b, start } = problem(updates, cfg.weighting)?;
    let lmax = lmax_of(&sum)?.eigenvalue.to_f64_lossy();
    let (eta, step_warning) = match eta_s {
        StepSize::Auto if lmax > 0.0 => (1.0 / (1.01 * lmax), false),
        StepSize::Auto => (1.0, false),
        StepSize::Fixed(e) => (e, lmax > 0.0 && e > 1.0 / lmax),
    };
    let eta_t = T::of(eta);
    let tol = T::of(cfg.stop_tol);
    let mut w = start;
    let mut g = vec![T::zero(); w.len()];
    let mut prev = w.clone();
    let mut steps = cfg.t_max;
    let mut converged = false;
    let mut diverged = false;
    for t in 0..cfg.t_max {
        sum.apply(&w, &mut g);
        for (gi, &bi) in g.iter_mut().zip(&b) {
            *gi -= bi;
        }
        let update = eta_t * norm2(&g);
        if !update.is_finite() || w.iter().zip(&g).any(|(&wi, &gi)| !(wi - eta_t * gi).is_finite()) {
            diverged = true;
            steps = t;
            break;
        }
        prev.copy_from_slice(&w);
        axpy(-eta_t, &g, &mut w);
        let wn = norm2(&w);
        if !wn.is_finite() {
            w.copy_from_slice(&prev);
            diverged = true;
            steps = t;
            break;
        }
        if update <= tol * (T::one() + wn) {
            converged = true;
            steps = t + 1;
            break;
        }
    }
    Ok(ServerOutcome { weights: w, steps, converged, step_warning, diverged, eta_s: eta, lmax: Some(lmax) })
}

/// Adam on the FedFisher objective. With a validation function (higher is
/// better) evaluated every `val_every` steps, the best iterate is returned;
/// otherwise the final one.
pub fn fedfisher_adam<T: Scalar>(
    updates: &[ClientUpdate<T>],
    cfg: &ServerConfig,
    validate: Option<&dyn Fn(&[T]) -> Result<f64>>,
) -> Result<ServerOutcome<T>> {
    cfg.validate()?;
    let ServerOptimizer::Adam { eta_s, beta1, beta2, eps } = cfg.optimizer else {
        return Err(Error::Config("fedfisher_adam needs the adam optimizer".into()));
    };
    if cfg.val_every > 0 && validate.is_none() {
        return Err(Error::Config("validation period set without a validation set".into()));
    }
    let Problem { sum, b, start } = problem(updates, cfg.weighting)?;
    let (eta, b1, b2, eps) = (T::of(eta_s), T::of(beta1), T::of(beta2), T::of(eps));
    let d = start.len();
    let mut w = start;
    let (mut m, mut v, mut g) = (vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]);
    let (mut b1t, mut b2t) = (T::one(), T::one());
    let mut best: Option<(f64, Vec<T>)> = None;
    let mut steps = cfg.t_max;
    let mut diverged = false;
    for t in 1..=cfg.t_max {
        sum.apply(&w, &mut g);
        for (gi, &bi) in g.iter_mut().zip(&b) {
            *gi -= bi;
        }
        b1t *= b1;
        b2t *= b2;
        let mut next = w.clone();
        for i in 0..d {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / (T::one() - b1t);
            let vh = v[i] / (T::one() - b2t);
            next[i] -= eta * mh / (vh.sqrt() + eps);
        }
        if next.iter().any(|x| !x.is_finite()) {
            diverged = true;
            steps = t - 1;
            break;
        }
        w = next;
        if let Some(f) = validate {
            if cfg.val_every > 0 && t % cfg.val_every == 0 {
                let score = f(&w)?;
                if best.as_ref().is_none_or(|(s, _)| score > *s) {
                    best = Some((score, w.clone()));
                }
            }
        }
    }
    let weights = best.map(|(_, w)| w).unwrap_or(w);
    Ok(ServerOutcome { weights, steps, converged: false, step_warning: false, diverged, eta_s, lmax: None })
}

/// Coordinatewise Fisher-weighted average with every Fisher entry floored.
pub fn fisher_merge_diag<T: Scalar>(updates: &[ClientUpdate<T>], fisher_floor: f64) -> Result<Vec<T>> {
    let d = check_updates(updates)?;
    let floor = T::of(fisher_floor);
    let mut num = vec![T::zero(); d];
    let mut den = vec![T::zero(); d];
    for u in updates {
        let FisherApprox::Diag(f) = &u.fisher else {
            return invalid(format!("FisherMerge needs diagonal Fishers, got {}", u.fisher.kind()));
        };
        for k in 0..d {
            let fk = f[k].max(floor);
            num[k] += fk * u.weights[k];
            den[k] += fk;
        }
    }
    Ok(num.iter().zip(&den).map(|(&n, &d)| n / d).collect())
}

/// Aggregation methods compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    FedAvg,
    FedFisherFull,
    FedFisherDiag,
    FedFisherKfac,
    FisherMerge,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::FedAvg, Method::FedFisherFull, Method::FedFisherDiag, Method::FedFisherKfac, Method::FisherMerge];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedFisherFull => "fedfisher-full",
            Method::FedFisherDiag => "fedfisher-diag",
            Method::FedFisherKfac => "fedfisher-kfac",
            Method::FisherMerge => "fishermerge",
        }
    }

    /// Fisher the clients have to compute for this method.
    pub fn fisher_kind(self) -> Option<FisherKind> {
        match self {
            Method::FedAvg => None,
            Method::FedFisherFull => Some(FisherKind::Full),
            Method::FedFisherDiag | Method::FisherMerge => Some(FisherKind::Diag),
            Method::FedFisherKfac => Some(FisherKind::Kfac),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Default fisher floor for FisherMerge.
pub const FISHER_FLOOR: f64 = 1e-6;

/// Merges client updates with `method`.
pub fn aggregate<T: Scalar>(
    method: Method,
    updates: &[ClientUpdate<T>],
    server: &ServerConfig,
    validate: Option<&dyn Fn(&[T]) -> Result<f64>>,
) -> Result<ServerOutcome<T>> {
    let plain = |weights: Vec<T>| ServerOutcome {
        weights,
        steps: 0,
        converged: true,
        step_warning: false,
        diverged: false,
        eta_s: 0.0,
        lmax: None,
    };
    match method {
        Method::FedAvg => Ok(plain(fedavg(updates)?)),
        Method::FisherMerge => Ok(plain(fisher_merge_diag(updates, FISHER_FLOOR)?)),
        _ => match server.optimizer {
            ServerOptimizer::Gd { .. } => fedfisher_gd(updates, server),
            ServerOptimizer::Adam { .. } => fedfisher_adam(updates, server, validate),
        },
    }
}

/// Local work done by each client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    pub train: TrainConfig,
    pub loss: LossKind,
    pub fisher_mode: FisherMode,
    /// Relative damping added to K-FAC factors.
    pub kfac_damping: f64,
}

#[derive(Debug, Clone)]
pub struct ClientRun<T> {
    pub model: Network<T>,
    pub fisher: Option<FisherApprox<T>>,
    pub n: usize,
    pub train_secs: f64,
    pub fisher_secs: f64,
    pub diverged: bool,
}

impl<T: Scalar> ClientRun<T> {
    pub fn update(&self) -> Result<ClientUpdate<T>> {
        let fisher = self.fisher.clone().ok_or_else(|| Error::InvalidInput("client computed no Fisher".into()))?;
        ClientUpdate::new(self.model.params().to_vec(), fisher, self.n)
    }
}

/// Trains every client from `init` and computes the requested Fishers.
/// Client `i` shuffles with the substream `(seed, i)`.
pub fn run_clients<T: Scalar>(
    init: &Network<T>,
    data: &FederatedDataset<T>,
    cfg: &ClientConfig,
    kinds: &[FisherKind],
    seed: u64,
) -> Result<Vec<Vec<ClientRun<T>>>> {
    let runs: Vec<Result<Vec<ClientRun<T>>>> = (0..data.num_clients())
        .into_par_iter()
        .map(|i| {
            let local = data.client_examples(i);
            let t0 = Instant::now();
            let out = sgd_train(init, &local, &cfg.train, cfg.loss, rng::substream_seed(seed, i as u64))?;
            let train_secs = t0.elapsed().as_secs_f64();
            let mut per_kind = Vec::with_capacity(kinds.len().max(1));
            if kinds.is_empty() {
                per_kind.push(ClientRun {
                    model: out.model.clone(),
                    fisher: None,
                    n: local.len(),
                    train_secs,
                    fisher_secs: 0.0,
                    diverged: out.diverged,
                });
            }
            for &kind in kinds {
                let t1 = Instant::now();
                let mode = match cfg.fisher_mode {
                    FisherMode::Sampled { seed: s, draws } => {
                        FisherMode::Sampled { seed: rng::substream_seed(s, i as u64), draws }
                    }
                    m => m,
                };
                let mut f = compute_fisher(&out.model, &local, cfg.loss, kind, mode)?;
                if kind == FisherKind::Kfac && cfg.kfac_damping > 0.0 {
                    f = f.damped(cfg.kfac_damping);
                }
                per_kind.push(ClientRun {
                    model: out.model.clone(),
                    fisher: Some(f),
                    n: local.len(),
                    train_secs,
                    fisher_secs: t1.elapsed().as_secs_f64(),
                    diverged: out.diverged,
                });
            }
            Ok(per_kind)
        })
        .collect();
    runs.into_iter().collect()
}

#[derive(Debug, Clone)]
pub struct RoundRecord<T> {
    pub round: usize,
    pub model: Network<T>,
    pub loss: f64,
    /// `None` for regression.
    pub accuracy: Option<f64>,
    pub diverged: bool,
}

fn evaluate<T: Scalar>(model: &Network<T>, eval: &[Example<T>], loss: LossKind, classify: bool) -> Result<(f64, Option<f64>)> {
    let l = loss_eval(model, eval, loss)?.to_f64_lossy();
    let acc = if classify { Some(accuracy_eval(model, eval)?) } else { None };
    Ok((l, acc))
}

/// Repeats local training and one-shot merging for `rounds` rounds, each
/// round starting the clients from the previous global model.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_rounds<T: Scalar>(
    data: &FederatedDataset<T>,
    init: &Network<T>,
    rounds: usize,
    client: &ClientConfig,
    server: &ServerConfig,
    method: Method,
    eval: &[Example<T>],
    validation: Option<&[Example<T>]>,
    seed: u64,
) -> Result<Vec<RoundRecord<T>>> {
    if rounds == 0 {
        return invalid("few-shot training needs at least one round");
    }
    let classify = data.num_classes > 0;
    let mut global = init.clone();
    let mut records = Vec::with_capacity(rounds);
    let kinds: Vec<FisherKind> = method.fisher_kind().into_iter().collect();
    for round in 0..rounds {
        let runs = run_clients(&global, data, client, &kinds, rng::substream_seed(seed, round as u64))?;
        let updates: Vec<ClientUpdate<T>> = runs
            .iter()
            .map(|r| match &r[0].fisher {
                Some(_) => r[0].update(),
                None => ClientUpdate::new(
                    r[0].model.params().to_vec(),
                    FisherApprox::Diag(vec![T::one(); r[0].model.num_params()]),
                    r[0].n,
                ),
            })
            .collect::<Result<_>>()?;
        let template = global.clone();
        let val_fn = validation.map(|v| {
            move |w: &[T]| -> Result<f64> {
                let m = template.with_params(w)?;
                if classify {
                    accuracy_eval(&m, v)
                } else {
                    Ok(-loss_eval(&m, v, client.loss)?.to_f64_lossy())
                }
            }
        });
        let out = aggregate(method, &updates, server, val_fn.as_ref().map(|f| f as &dyn Fn(&[T]) -> Result<f64>))?;
        global = global.with_params(&out.weights)?;
        let (loss, accuracy) = evaluate(&global, eval, client.loss, classify)?;
        let diverged = out.diverged || runs.iter().any(|r| r[0].diverged);
        records.push(RoundRecord { round: round + 1, model: global.clone(), loss, accuracy, diverged });
    }
    Ok(records)
}

/// Mean-model distance helper: `‖a − b‖₂`.
pub fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    dot(&diff, &diff).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Head, Mlp, Schedule};

    fn diag_update(w: &[f64], f: &[f64]) -> ClientUpdate<f64> {
        ClientUpdate::new(w.to_vec(), FisherApprox::Diag(f.to_vec()), 1).unwrap()
    }

    #[test]
    fn fedavg_examples() {
        let u = [diag_update(&[0.0, 0.0], &[1.0, 1.0]), diag_update(&[2.0, 4.0], &[1.0, 1.0])];
        assert_eq!(fedavg(&u).unwrap(), vec![1.0, 2.0]);
        assert_eq!(fedavg(&u[..1]).unwrap(), vec![0.0, 0.0]);
        assert!(fedavg::<f64>(&[]).is_err());
    }

    #[test]
    fn lmax_of_diag_sum() {
        let a = FisherApprox::<f64>::Diag(vec![1.0, 2.0]);
        let b = FisherApprox::Diag(vec![3.0, 0.0]);
        let p = estimate_lmax(&[&a, &b]).unwrap();
        assert!((p.eigenvalue - 4.0).abs() < 1e-9);
        let z = FisherApprox::<f64>::Diag(vec![0.0; 3]);
        assert_eq!(estimate_lmax(&[&z]).unwrap().eigenvalue, 0.0);
    }

    #[test]
    fn isotropic_fishers_give_the_mean() {
        let eye = FisherApprox::Full(DenseMatrix::identity(2));
        let u = [
            ClientUpdate::new(vec![1.0, 5.0], eye.clone(), 1).unwrap(),
            ClientUpdate::new(vec![3.0, -1.0], eye, 1).unwrap(),
        ];
        let out = fedfisher_gd(&u, &ServerConfig::gd(StepSize::Auto, 1000)).unwrap();
        assert!(distance(&out.weights, &[2.0, 2.0]) < 1e-12);
    }

    #[test]
    fn partially_constrained_instance() {
        let u = [diag_update(&[1.0, 0.0], &[1.0, 0.0]), diag_update(&[3.0, 4.0], &[1.0, 0.0])];
        let out = fedfisher_gd(&u, &ServerConfig::gd(StepSize::Auto, 100_000)).unwrap();
        assert!(out.converged);
        assert!(distance(&out.weights, &[2.0, 2.0]) < 1e-9);
    }

    #[test]
    fn large_fixed_step_is_flagged() {
        let u = [diag_update(&[1.0], &[4.0])];
        let out = fedfisher_gd(&u, &ServerConfig::gd(StepSize::Fixed(1.0), 10)).unwrap();
        assert!(out.step_warning);
        let u = [diag_update(&[0.0], &[1.0]), diag_update(&[4.0], &[3.0])];
        let out = fedfisher_gd(&u, &ServerConfig::gd(StepSize::Fixed(10.0), 2000)).unwrap();
        assert!(out.diverged);
        assert!(out.weights.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn adam_agrees_with_gd_on_determined_problem() {
        let u = [diag_update(&[1.0, 2.0], &[1.0, 0.5]), diag_update(&[3.0, 0.0], &[0.5, 1.0])];
        let gd = fedfisher_gd(&u, &ServerConfig::gd(StepSize::Auto, 100_000)).unwrap();
        let adam = fedfisher_adam(&u, &ServerConfig::adam(2000, 0), None).unwrap();
        assert!(distance(&gd.weights, &adam.weights) < 1e-3);
    }

    #[test]
    fn adam_with_zero_fishers_stays_put() {
        let u = [diag_update(&[1.0, 2.0], &[0.0, 0.0]), diag_update(&[3.0, 0.0], &[0.0, 0.0])];
        let out = fedfisher_adam(&u, &ServerConfig::adam(50, 0), None).unwrap();
        assert_eq!(out.weights, vec![2.0, 1.0]);
        assert!(fedfisher_adam(&u, &ServerConfig::adam(50, 10), None).is_err());
    }

    #[test]
    fn adam_keeps_best_validated_iterate() {
        let u = [diag_update(&[0.0], &[1.0]), diag_update(&[4.0], &[3.0])];
        // Scores peak when the iterate is closest to 2.5.
        let val = |w: &[f64]| -> Result<f64> { Ok(-(w[0] - 2.5).abs()) };
        let out = fedfisher_adam(&u, &ServerConfig::adam(400, 10), Some(&val)).unwrap();
        assert!((out.weights[0] - 2.5).abs() < 0.2);
    }

    #[test]
    fn fisher_merge_examples() {
        let u = [diag_update(&[0.0], &[1.0]), diag_update(&[4.0], &[3.0])];
        assert_eq!(fisher_merge_diag(&u, 1e-6).unwrap(), vec![3.0]);
        let u = [diag_update(&[0.0], &[1e-9]), diag_update(&[4.0], &[0.0])];
        assert_eq!(fisher_merge_diag(&u, 1e-6).unwrap(), vec![2.0]);
        let full = ClientUpdate::new(vec![1.0], FisherApprox::Full(DenseMatrix::identity(1)), 1).unwrap();
        assert!(fisher_merge_diag(&[full], 1e-6).is_err());
    }

    #[test]
    fn size_weighting_reduces_to_equal() {
        let mut u = vec![diag_update(&[1.0, 0.0], &[1.0, 0.0]), diag_update(&[3.0, 4.0], &[2.0, 0.0])];
        u[0].n = 5;
        u[1].n = 5;
        let mut cfg = ServerConfig::gd(StepSize::Auto, 10_000);
        let a = fedfisher_gd(&u, &cfg).unwrap();
        cfg.weighting = Weighting::BySize;
        let b = fedfisher_gd(&u, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fedprox".parse::<Method>().is_err());
    }

    #[test]
    fn one_round_equals_one_shot() {
        let examples: Vec<Example<f64>> = (0..12)
            .map(|i| Example::classification(vec![(i as f64).sin(), (i as f64 * 0.7).cos()], i % 3))
            .collect();
        let data = FederatedDataset::new(examples.clone(), vec![(0..6).collect(), (6..12).collect()], 3).unwrap();
        let init: Network<f64> = Mlp::init(&[2, 4, 3], Head::SoftmaxClassification, 0).unwrap().into();
        let client = ClientConfig {
            train: TrainConfig { eta: 0.05, momentum: 0.9, schedule: Schedule::Epochs(3), batch_size: 4 },
            loss: LossKind::SoftmaxCrossEntropy,
            fisher_mode: FisherMode::Expected,
            kfac_damping: 1e-4,
        };
        let server = ServerConfig::gd(StepSize::Auto, 200);
        let rec = few_shot_rounds(&data, &init, 1, &client, &server, Method::FedFisherDiag, &examples, None, 9).unwrap();
        let runs = run_clients(&init, &data, &client, &[FisherKind::Diag], rng::substream_seed(9, 0)).unwrap();
        let updates: Vec<_> = runs.iter().map(|r| r[0].update().unwrap()).collect();
        let direct = fedfisher_gd(&updates, &server).unwrap();
        assert_eq!(rec.len(), 1);
        assert_eq!(rec[0].model.params(), &direct.weights[..]);
    }
}
