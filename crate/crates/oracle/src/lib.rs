//! Brute-force references for checking `fedfisher`: a dense pseudo-inverse
//! solve of the merged constraint, Monte-Carlo Fisher estimates, central
//! finite differences and a sampled Gram matrix for two-layer ReLU nets.
//!
//! Everything here materialises dense `d × d` or `N × N` matrices.

use fedfisher::datasets::{Example, Target};
use fedfisher::models::{loss_eval, LossKind, Model};
use fedfisher::numerics::DenseMatrix;
use fedfisher::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Eigenvalues below this fraction of the largest count as zero.
pub const PINV_CUTOFF: f64 = 1e-10;

pub fn to_nalgebra(m: &DenseMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_nalgebra(m: &DMatrix<f64>) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Moore-Penrose inverse of a symmetric PSD matrix by eigendecomposition.
pub fn psd_pinv(f: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(f.clone());
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut inv = DMatrix::zeros(f.nrows(), f.ncols());
    if top <= 0.0 {
        return inv;
    }
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > PINV_CUTOFF * top {
            let v = eig.eigenvectors.column(k);
            inv += (&v * v.transpose()) / lam;
        }
    }
    inv
}

/// Minimiser of `Σ‖W − W̃ᵢ‖²` subject to `(ΣFᵢ)W = ΣFᵢW̃ᵢ`, computed as
/// `W̄ + F⁺(b − FW̄)`.
pub fn constrained_min_norm_solution(fishers: &[DenseMatrix<f64>], weights: &[Vec<f64>]) -> Result<Vec<f64>> {
    if fishers.is_empty() || fishers.len() != weights.len() {
        return Err(Error::InvalidInput("need one fisher per weight vector".into()));
    }
    let d = weights[0].len();
    let mut f = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    let mut mean = DVector::zeros(d);
    for (fi, wi) in fishers.iter().zip(weights) {
        if fi.rows() != d || fi.cols() != d || wi.len() != d {
            return Err(Error::Dimension(format!("fisher {}x{} with weights of length {}", fi.rows(), fi.cols(), wi.len())));
        }
        let fi = to_nalgebra(fi);
        let wi = DVector::from_column_slice(wi);
        b += &fi * &wi;
        f += fi;
        mean += wi;
    }
    mean /= weights.len() as f64;
    let w = &mean + psd_pinv(&f) * (&b - &f * &mean);
    Ok(w.iter().copied().collect())
}

/// Draws a target from the model's predictive distribution at logits `z`.
fn sample_target<R: Rng>(loss: LossKind, z: &[f64], rng: &mut R) -> Target<f64> {
    match loss {
        LossKind::Squared => {
            let e: f64 = StandardNormal.sample(rng);
            Target::Value(z[0] + e)
        }
        LossKind::SoftmaxCrossEntropy => {
            let probs: Vec<f64> = if z.len() == 1 {
                let p1 = 1.0 / (1.0 + (-z[0]).exp());
                vec![1.0 - p1, p1]
            } else {
                let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            };
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Target::Class(c);
                }
            }
            Target::Class(probs.len() - 1)
        }
    }
}

/// Monte-Carlo Fisher: the mean of `g gᵀ` over examples and `draws` sampled
/// targets for each example, `g` the gradient of the loss at the sampled target.
pub fn mc_fisher<M: Model<f64>>(
    model: &M,
    data: &[Example<f64>],
    loss: LossKind,
    draws: usize,
    seed: u64,
) -> Result<DenseMatrix<f64>> {
    if data.is_empty() || draws == 0 {
        return Err(Error::InvalidInput("mc_fisher needs data and at least one draw".into()));
    }
    let d = model.num_params();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut acc = DMatrix::<f64>::zeros(d, d);
    for ex in data {
        let z = model.forward(&ex.x)?;
        let mut grads = DMatrix::<f64>::zeros(d, draws);
        for k in 0..draws {
            let sampled = Example { x: ex.x.clone(), y: sample_target(loss, &z, &mut rng) };
            let g = model.gradient(std::slice::from_ref(&sampled), loss)?;
            grads.set_column(k, &DVector::from_vec(g));
        }
        acc.gemm(1.0, &grads, &grads.transpose(), 1.0);
    }
    acc /= (data.len() * draws) as f64;
    let sym = (&acc + acc.transpose()) * 0.5;
    Ok(from_nalgebra(&sym))
}

/// Central finite-difference gradient of the loss on one example.
pub fn fd_gradient<M: Model<f64>>(model: &M, example: &Example<f64>, loss: LossKind, h: f64) -> Result<Vec<f64>> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidInput(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let base = model.params().to_vec();
    let mut probe = model.with_params(&base)?;
    let eval = |m: &M| -> Result<f64> {
        let v = loss_eval(m, std::slice::from_ref(example), loss)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Divergence("non-finite loss at a perturbed point".into()))
        }
    };
    let mut grad = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        probe.params_mut()[k] = base[k] + h;
        let up = eval(&probe)?;
        probe.params_mut()[k] = base[k] - h;
        let down = eval(&probe)?;
        probe.params_mut()[k] = base[k];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Sampled `H∞` and its smallest eigenvalue.
#[derive(Debug, Clone)]
pub struct GramEstimate {
    pub h_infty: DenseMatrix<f64>,
    pub lambda_0: f64,
    pub samples: usize,
}

impl GramEstimate {
    /// One-sigma Monte-Carlo error scale.
    pub fn mc_error(&self) -> f64 {
        1.0 / (self.samples as f64).sqrt()
    }
}

/// `H∞[k][l] = E_w[x_kᵀx_l 1{wᵀx_k ≥ 0} 1{wᵀx_l ≥ 0}]` with `w ~ N(0, I)`.
pub fn gram_lambda0(data: &[Vec<f64>], mc_samples: usize, seed: u64) -> Result<GramEstimate> {
    let n = data.len();
    if n == 0 || n > 500 || mc_samples == 0 {
        return Err(Error::InvalidInput("gram_lambda0 needs 1..=500 points and samples".into()));
    }
    let p = data[0].len();
    let x = DMatrix::from_fn(n, p, |i, j| data[i][j]);
    let inner = &x * x.transpose();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut counts = DMatrix::<f64>::zeros(n, n);
    let mut active = DVector::<f64>::zeros(n);
    for _ in 0..mc_samples {
        let w = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let proj = &x * w;
        for i in 0..n {
            active[i] = if proj[i] >= 0.0 { 1.0 } else { 0.0 };
        }
        counts.ger(1.0, &active, &active, 1.0);
    }
    let h = inner.component_mul(&counts) / mc_samples as f64;
    let lambda_0 = SymmetricEigen::new(h.clone()).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(GramEstimate { h_infty: from_nalgebra(&h), lambda_0, samples: mc_samples })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DenseMatrix<f64>) -> f64 {
    SymmetricEigen::new(to_nalgebra(m)).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Principal submatrix on `idx`.
pub fn principal_submatrix(m: &DenseMatrix<f64>, idx: &[usize]) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}
