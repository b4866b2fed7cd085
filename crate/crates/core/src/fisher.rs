//! Fisher information approximations at a trained local model.
//!
//! All estimators use the model's own predictive distribution for the
//! expectation over labels (the "true" Fisher). [`FisherMode::Sampled`]
//! replaces the exact expectation with label draws.


use crate::datasets::Example;
use crate::error::{dim_err, invalid};
use crate::models::{LossKind, Mlp, Model, Network, ScoreSample, TwoLayerReLU};
use crate::numerics::{axpy, dot, kron_dense, kron_matvec_acc, DenseMatrix};
use crate::rng;
use crate::{Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FisherMode {
    /// Exact expectation over the predictive distribution.
    #[default]
    Expected,
    /// `draws` labels per example sampled from the model.
    Sampled { seed: u64, draws: usize },
}

/// Kronecker factors of one layer's Fisher block, `A ⊗ B`.
///
/// `a` is the second moment of the layer input with a trailing constant 1
/// (so the bias shares the factor), `b` that of the pre-activation score.
#[derive(Debug, Clone, PartialEq)]
pub struct KfacBlock<T> {
    pub a: DenseMatrix<T>,
    pub b: DenseMatrix<T>,
}

impl<T: Scalar> KfacBlock<T> {
    pub fn dim(&self) -> usize {
        self.a.rows() * self.b.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FisherApprox<T> {
    Full(DenseMatrix<T>),
    Diag(Vec<T>),
    Kfac(Vec<KfacBlock<T>>),
}

impl<T: Scalar> FisherApprox<T> {
    /// Number of parameters the approximation acts on.
    pub fn dim(&self) -> usize {
        match self {
            FisherApprox::Full(m) => m.rows(),
            FisherApprox::Diag(v) => v.len(),
            FisherApprox::Kfac(blocks) => blocks.iter().map(KfacBlock::dim).sum(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FisherApprox::Full(_) => "full",
            FisherApprox::Diag(_) => "diag",
            FisherApprox::Kfac(_) => "kfac",
        }
    }

    /// `out += F v`.
    pub fn matvec_acc(&self, v: &[T], out: &mut [T]) -> Result<()> {
        let d = self.dim();
        if v.len() != d || out.len() != d {
            return dim_err(format!(
                "Fisher of dimension {d} applied to a vector of length {}",
                v.len()
            ));
        }
        match self {
            FisherApprox::Full(m) => m.matvec_acc(v, out),
            FisherApprox::Diag(f) => {
                for ((o, &fi), &vi) in out.iter_mut().zip(f).zip(v) {
                    *o += fi * vi;
                }
            }
            FisherApprox::Kfac(blocks) => {
                let mut start = 0;
                for blk in blocks {
                    let end = start + blk.dim();
                    kron_matvec_acc(&blk.a, &blk.b, &v[start..end], &mut out[start..end])?;
                    start = end;
                }
            }
        }
        Ok(())
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); v.len()];
        self.matvec_acc(v, &mut out)?;
        Ok(out)
    }

    /// `vᵀ F v`.
    pub fn quad_form(&self, v: &[T]) -> Result<T> {
        Ok(dot(v, &self.matvec(v)?))
    }

    pub fn trace(&self) -> T {
        match self {
            FisherApprox::Full(m) => m.trace(),
            FisherApprox::Diag(v) => v.iter().copied().sum(),
            FisherApprox::Kfac(blocks) => blocks.iter().map(|b| b.a.trace() * b.b.trace()).sum(),
        }
    }

    /// Diagonal of the represented matrix.
    pub fn diagonal(&self) -> Vec<T> {
        match self {
            FisherApprox::Full(m) => m.diag(),
            FisherApprox::Diag(v) => v.clone(),
            FisherApprox::Kfac(blocks) => {
                let mut out = Vec::with_capacity(self.dim());
                for blk in blocks {
                    let bd = blk.b.diag();
                    for ai in blk.a.diag() {
                        out.extend(bd.iter().map(|&bj| ai * bj));
                    }
                }
                out
            }
        }
    }

    /// Materialises the approximation as a dense `d × d` matrix.
    pub fn to_dense(&self) -> DenseMatrix<T> {
        match self {
            FisherApprox::Full(m) => m.clone(),
            FisherApprox::Diag(v) => DenseMatrix::from_diag(v),
            FisherApprox::Kfac(blocks) => {
                let d = self.dim();
                let mut data = vec![T::zero(); d * d];
                let mut start = 0;
                for blk in blocks {
                    let k = kron_dense(&blk.a, &blk.b);
                    let n = blk.dim();
                    for i in 0..n {
                        data[(start + i) * d + start..(start + i) * d + start + n].copy_from_slice(k.row(i));
                    }
                    start += n;
                }
                DenseMatrix::from_vec_unchecked(d, d, data)
            }
        }
    }

    /// Adds `rel · mean(diag) · I` to each Kronecker factor. Other variants
    /// are returned unchanged.
    pub fn damped(mut self, rel: f64) -> Self {
        if let FisherApprox::Kfac(blocks) = &mut self {
            for blk in blocks.iter_mut() {
                for m in [&mut blk.a, &mut blk.b] {
                    let n = m.rows();
                    if n == 0 {
                        continue;
                    }
                    let eps = T::of(rel) * m.trace() / T::of(n as f64);
                    let eye = DenseMatrix::identity(n);
                    m.add_scaled_assign(eps, &eye).expect("square factor");
                }
            }
        }
        self
    }

    /// `F ← s F` (for K-FAC only the `b` factors are scaled).
    pub fn scaled(mut self, s: T) -> Self {
        match &mut self {
            FisherApprox::Full(m) => *m = m.scale(s),
            FisherApprox::Diag(v) => v.iter_mut().for_each(|x| *x *= s),
            FisherApprox::Kfac(blocks) => blocks.iter_mut().for_each(|b| b.b = b.b.scale(s)),
        }
        self
    }
}

/// `F v` for any Fisher variant.
pub fn fisher_matvec<T: Scalar>(f: &FisherApprox<T>, v: &[T]) -> Result<Vec<T>> {
    f.matvec(v)
}

/// Models whose per-example score Jacobians can be squared cheaply.
pub trait FisherModel<T: Scalar>: Model<T> {
    /// `out += scale · Σ_s w_s (Jᵀ s)²` (elementwise) where `J` is the output
    /// Jacobian at `x` and `scores` turns the output into score samples.
    fn diag_acc(
        &self,
        x: &[T],
        scores: &mut dyn FnMut(&[T]) -> Vec<ScoreSample<T>>,
        scale: T,
        out: &mut [T],
    ) -> Result<()> {
        let z = self.forward(x)?;
        let mut g = vec![T::zero(); self.num_params()];
        for s in scores(&z) {
            g.iter_mut().for_each(|v| *v = T::zero());
            self.vjp_acc(x, &s.score, T::one(), &mut g)?;
            let w = scale * s.weight;
            for (o, &gi) in out.iter_mut().zip(&g) {
                *o += w * gi * gi;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> FisherModel<T> for TwoLayerReLU<T> {
    fn diag_acc(
        &self,
        x: &[T],
        scores: &mut dyn FnMut(&[T]) -> Vec<ScoreSample<T>>,
        scale: T,
        out: &mut [T],
    ) -> Result<()> {
        let phi = self.feature_map(x)?;
        let z = vec![dot(&phi, self.params())];
        let w: T = scores(&z).iter().map(|s| s.weight * s.score[0] * s.score[0]).sum();
        let c = scale * w;
        for (o, &p) in out.iter_mut().zip(&phi) {
            *o += c * p * p;
        }
        Ok(())
    }
}

impl<T: Scalar> FisherModel<T> for Mlp<T> {
    fn diag_acc(
        &self,
        x: &[T],
        scores: &mut dyn FnMut(&[T]) -> Vec<ScoreSample<T>>,
        scale: T,
        out: &mut [T],
    ) -> Result<()> {
        let cache = self.forward_cached(x)?;
        let z = cache.pre_activations.last().expect("at least one layer");
        let mut sq: Vec<Vec<T>> = self.layers().iter().map(|s| vec![T::zero(); s.outputs]).collect();
        for s in scores(z) {
            let deltas = self.backward_deltas(&cache, &s.score)?;
            for (acc, delta) in sq.iter_mut().zip(&deltas) {
                for (a, &d) in acc.iter_mut().zip(delta) {
                    *a += s.weight * d * d;
                }
            }
        }
        for (l, shape) in self.layers().iter().enumerate() {
            let o = &mut out[self.layer_range(l)];
            let q: Vec<T> = sq[l].iter().map(|&v| v * scale).collect();
            let n = shape.outputs;
            for (j, &aj) in cache.inputs[l].iter().enumerate() {
                if aj != T::zero() {
                    axpy(aj * aj, &q, &mut o[j * n..(j + 1) * n]);
                }
            }
            axpy(T::one(), &q, &mut o[shape.inputs * n..]);
        }
        Ok(())
    }
}

impl<T: Scalar> FisherModel<T> for Network<T> {
    fn diag_acc(
        &self,
        x: &[T],
        scores: &mut dyn FnMut(&[T]) -> Vec<ScoreSample<T>>,
        scale: T,
        out: &mut [T],
    ) -> Result<()> {
        match self {
            Network::TwoLayer(m) => m.diag_acc(x, scores, scale, out),
            Network::Mlp(m) => m.diag_acc(x, scores, scale, out),
        }
    }
}

/// Turns outputs into weighted score samples according to `mode`.
struct Scorer {
    loss: LossKind,
    draws: usize,
    rng: Option<rng::SimRng>,
}

impl Scorer {
    fn new(loss: LossKind, mode: FisherMode) -> Result<Self> {
        Ok(match mode {
            FisherMode::Expected => Scorer { loss, draws: 0, rng: None },
            FisherMode::Sampled { seed, draws } => {
                if draws == 0 {
                    return invalid("sampled Fisher needs at least one draw");
                }
                Scorer { loss, draws, rng: Some(rng::substream(seed, rng::stream::FISHER)) }
            }
        })
    }

    fn scores<T: Scalar>(&mut self, z: &[T]) -> Vec<ScoreSample<T>> {
        match &mut self.rng {
            None => self.loss.fisher_scores(z),
            Some(r) => {
                let w = T::one() / T::of(self.draws as f64);
                (0..self.draws)
                    .map(|_| ScoreSample { weight: w, score: self.loss.sample_score(z, r) })
                    .collect()
            }
        }
    }
}

fn check_data<T: Scalar>(data: &[Example<T>]) -> Result<T> {
    if data.is_empty() {
        return invalid("Fisher of an empty client dataset");
    }
    Ok(T::one() / T::of(data.len() as f64))
}

/// Closed form for the two-layer network under squared loss:
/// `F = (1/n) Σ_j φ(W, x_j) φ(W, x_j)ᵀ`.
pub fn full_fisher_two_layer<T: Scalar>(model: &TwoLayerReLU<T>, data: &[Example<T>]) -> Result<FisherApprox<T>> {
    let inv_n = check_data(data)?;
    let d = model.num_params();
    let mut f = DenseMatrix::zeros(d, d);
    for ex in data {
        let phi = model.feature_map(&ex.x)?;
        f.rank_one_update(inv_n, &phi);
    }
    Ok(FisherApprox::Full(f))
}

/// Dense Fisher of any model, built from per-sample score gradients.
/// Meant for small `d`.
pub fn full_fisher<T: Scalar, M: Model<T>>(
    model: &M,
    data: &[Example<T>],
    loss: LossKind,
    mode: FisherMode,
) -> Result<FisherApprox<T>> {
    let inv_n = check_data(data)?;
    let mut scorer = Scorer::new(loss, mode)?;
    let d = model.num_params();
    let mut f = DenseMatrix::zeros(d, d);
    let mut g = vec![T::zero(); d];
    for ex in data {
        let z = model.forward(&ex.x)?;
        for s in scorer.scores(&z) {
            g.iter_mut().for_each(|v| *v = T::zero());
            model.vjp_acc(&ex.x, &s.score, T::one(), &mut g)?;
            f.rank_one_update(inv_n * s.weight, &g);
        }
    }
    Ok(FisherApprox::Full(f.symmetrized()))
}

/// Diagonal Fisher: entry `k` is `(1/n) Σ_j E_y[(∂_k log p(y | x_j, W))²]`.
pub fn diag_fisher<T: Scalar, M: FisherModel<T>>(
    model: &M,
    data: &[Example<T>],
    loss: LossKind,
    mode: FisherMode,
) -> Result<FisherApprox<T>> {
    let inv_n = check_data(data)?;
    let mut scorer = Scorer::new(loss, mode)?;
    let mut out = vec![T::zero(); model.num_params()];
    let mut f = |z: &[T]| scorer.scores(z);
    for ex in data {
        model.diag_acc(&ex.x, &mut f, inv_n, &mut out)?;
    }
    Ok(FisherApprox::Diag(out))
}

/// K-FAC: one `A_l ⊗ B_l` block per layer of an MLP.
pub fn kfac_fisher<T: Scalar>(
    model: &Mlp<T>,
    data: &[Example<T>],
    loss: LossKind,
    mode: FisherMode,
) -> Result<FisherApprox<T>> {
    let inv_n = check_data(data)?;
    let mut scorer = Scorer::new(loss, mode)?;
    let layers = model.layers();
    let mut a: Vec<DenseMatrix<T>> = layers.iter().map(|s| DenseMatrix::zeros(s.inputs + 1, s.inputs + 1)).collect();
    let mut b: Vec<DenseMatrix<T>> = layers.iter().map(|s| DenseMatrix::zeros(s.outputs, s.outputs)).collect();
    let mut homog = Vec::new();
    for ex in data {
        let cache = model.forward_cached(&ex.x)?;
        for (l, input) in cache.inputs.iter().enumerate() {
            homog.clear();
            homog.extend_from_slice(input);
            homog.push(T::one());
            a[l].rank_one_update(inv_n, &homog);
        }
        let z = cache.pre_activations.last().expect("at least one layer");
        for s in scorer.scores(z) {
            let deltas = model.backward_deltas(&cache, &s.score)?;
            for (bl, delta) in b.iter_mut().zip(&deltas) {
                bl.rank_one_update(inv_n * s.weight, delta);
            }
        }
    }
    Ok(FisherApprox::Kfac(
        a.into_iter()
            .zip(b)
            .map(|(a, b)| KfacBlock { a: a.symmetrized(), b: b.symmetrized() })
            .collect(),
    ))
}

/// Which approximation a client computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherKind {
    Full,
    Diag,
    Kfac,
}

/// Computes the requested approximation for any network.
pub fn compute_fisher<T: Scalar>(
    model: &Network<T>,
    data: &[Example<T>],
    loss: LossKind,
    kind: FisherKind,
    mode: FisherMode,
) -> Result<FisherApprox<T>> {
    match (kind, model) {
        (FisherKind::Full, Network::TwoLayer(m)) if loss == LossKind::Squared && mode == FisherMode::Expected => {
            full_fisher_two_layer(m, data)
        }
        (FisherKind::Full, _) => full_fisher(model, data, loss, mode),
        (FisherKind::Diag, _) => diag_fisher(model, data, loss, mode),
        (FisherKind::Kfac, Network::Mlp(m)) => kfac_fisher(m, data, loss, mode),
        (FisherKind::Kfac, Network::TwoLayer(_)) => invalid("K-FAC is defined for MLPs only"),
    }
}

/// Smallest eigenvalue check used by tests and diagnostics:
/// `λ_min ≥ -tol · trace` for a dense symmetric matrix.
pub fn is_psd<T: Scalar>(m: &DenseMatrix<T>, tol: f64) -> Result<bool> {
    let eig = m.symmetric_eigen()?;
    let min = eig.values.last().copied().unwrap_or_else(T::zero);
    Ok(min.to_f64_lossy() >= -tol * m.trace().to_f64_lossy().abs().max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_two_layer, Head};
    use crate::numerics::kron_matvec;
    use rand::{Rng, SeedableRng};

    fn regression_data(p: usize, n: usize, seed: u64) -> Vec<Example<f64>> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..p).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
                Example::regression(x, r.random::<f64>())
            })
            .collect()
    }

    fn class_data(p: usize, n: usize, c: usize, seed: u64) -> Vec<Example<f64>> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..p).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
                Example::classification(x, r.random_range(0..c))
            })
            .collect()
    }

    #[test]
    fn single_unit_fisher_is_one() {
        let m = TwoLayerReLU::new(1, vec![1.0], vec![1.0]).unwrap();
        let f = full_fisher_two_layer(&m, &[Example::regression(vec![1.0], 0.0)]).unwrap();
        assert_eq!(f.to_dense().as_slice(), &[1.0]);
    }

    #[test]
    fn inactive_units_give_zero_fisher() {
        let m = TwoLayerReLU::new(2, vec![1.0, 1.0, 1.0, 0.5], vec![1.0, -1.0]).unwrap();
        let data = vec![Example::regression(vec![-1.0, -1.0], 0.0)];
        let f = full_fisher_two_layer(&m, &data).unwrap();
        assert_eq!(f.trace(), 0.0);
    }

    #[test]
    fn two_layer_diag_and_generic_full_match_closed_form() {
        let m: TwoLayerReLU<f64> = init_two_layer(8, 3, 0.5, 4).unwrap();
        let data = regression_data(3, 12, 1);
        let closed = full_fisher_two_layer(&m, &data).unwrap().to_dense();
        let generic = full_fisher(&m, &data, LossKind::Squared, FisherMode::Expected).unwrap().to_dense();
        assert!(closed.sub(&generic).unwrap().max_abs() < 1e-14);
        let diag = diag_fisher(&m, &data, LossKind::Squared, FisherMode::Expected).unwrap();
        assert_eq!(diag.diagonal(), closed.diag());
    }

    #[test]
    fn mlp_diag_matches_full_diagonal() {
        let m = Mlp::<f64>::init(&[3, 5, 4], Head::SoftmaxClassification, 2).unwrap();
        let data = class_data(3, 7, 4, 3);
        let full = full_fisher(&m, &data, LossKind::SoftmaxCrossEntropy, FisherMode::Expected).unwrap();
        let diag = diag_fisher(&m, &data, LossKind::SoftmaxCrossEntropy, FisherMode::Expected).unwrap();
        for (a, b) in full.diagonal().iter().zip(diag.diagonal()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn uniform_softmax_linear_layer_closed_form() {
        // Two classes with zero weights: p = (1/2, 1/2), so E[(e_y - p)_c²] = 1/4
        // and the diagonal entry for weight (c, j) is x_j² / 4, bias 1/4.
        let m = Mlp::<f64>::zeros(&[2, 2], Head::SoftmaxClassification).unwrap();
        let data = vec![Example::classification(vec![1.0, 2.0], 0)];
        let diag = diag_fisher(&m, &data, LossKind::SoftmaxCrossEntropy, FisherMode::Expected).unwrap();
        assert_eq!(diag.diagonal(), vec![0.25, 0.25, 1.0, 1.0, 0.25, 0.25]);
    }

    #[test]
    fn one_layer_kfac_is_exact() {
        let m = Mlp::<f64>::init(&[3, 2], Head::Regression, 5).unwrap();
        let data = vec![Example::regression(vec![0.3, -1.2, 0.7], 0.0)];
        let kfac = kfac_fisher(&m, &data, LossKind::Squared, FisherMode::Expected).unwrap();
        let full = full_fisher(&m, &data, LossKind::Squared, FisherMode::Expected).unwrap();
        assert!(kfac.to_dense().sub(&full.to_dense()).unwrap().max_abs() < 1e-14);
        if let FisherApprox::Kfac(blocks) = &kfac {
            assert_eq!(blocks[0].b, DenseMatrix::identity(2));
        }
    }

    #[test]
    fn kfac_zero_inputs_single_layer() {
        let m = Mlp::<f64>::init(&[2, 3, 1], Head::Regression, 5).unwrap();
        let data = vec![Example::regression(vec![0.0, 0.0], 0.0)];
        let FisherApprox::Kfac(blocks) = kfac_fisher(&m, &data, LossKind::Squared, FisherMode::Expected).unwrap() else {
            unreachable!()
        };
        // Only the homogeneous coordinate survives in the first layer.
        assert_eq!(blocks[0].a.trace(), 1.0);
    }

    #[test]
    fn kfac_matvec_matches_dense() {
        let m = Mlp::<f64>::init(&[3, 4, 3], Head::SoftmaxClassification, 8).unwrap();
        let data = class_data(3, 9, 3, 2);
        let kfac = kfac_fisher(&m, &data, LossKind::SoftmaxCrossEntropy, FisherMode::Expected).unwrap();
        let v: Vec<f64> = (0..kfac.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let dense = kfac.to_dense().matvec(&v).unwrap();
        let fast = kfac.matvec(&v).unwrap();
        for (a, b) in dense.iter().zip(&fast) {
            assert!((a - b).abs() < 1e-12);
        }
        let FisherApprox::Kfac(blocks) = &kfac else { unreachable!() };
        let first = kron_matvec(&blocks[0].a, &blocks[0].b, &v[..blocks[0].dim()]).unwrap();
        assert_eq!(&fast[..first.len()], &first[..]);
    }

    #[test]
    fn sampled_mode_is_seeded_and_close() {
        let m = Mlp::<f64>::init(&[2, 3], Head::SoftmaxClassification, 1).unwrap();
        let data = class_data(2, 5, 3, 7);
        let loss = LossKind::SoftmaxCrossEntropy;
        let exact = diag_fisher(&m, &data, loss, FisherMode::Expected).unwrap().diagonal();
        let mode = FisherMode::Sampled { seed: 3, draws: 20_000 };
        let a = diag_fisher(&m, &data, loss, mode).unwrap().diagonal();
        let b = diag_fisher(&m, &data, loss, mode).unwrap().diagonal();
        assert_eq!(a, b);
        let scale: f64 = exact.iter().cloned().fold(0.0, f64::max);
        for (e, s) in exact.iter().zip(&a) {
            assert!((e - s).abs() <= 5.0 * scale / (20_000f64).sqrt());
        }
    }

    #[test]
    fn diag_of_ones_is_identity_and_zero_full_is_null() {
        let f = FisherApprox::Diag(vec![1.0; 4]);
        let v = vec![1.0, -2.0, 3.0, 0.5];
        assert_eq!(fisher_matvec(&f, &v).unwrap(), v);
        let z = FisherApprox::Full(DenseMatrix::<f64>::zeros(4, 4));
        assert_eq!(z.matvec(&v).unwrap(), vec![0.0; 4]);
        assert!(f.matvec(&[1.0]).is_err());
    }

    #[test]
    fn damping_shifts_factor_diagonals() {
        let blk = KfacBlock { a: DenseMatrix::from_diag(&[2.0, 0.0]), b: DenseMatrix::from_diag(&[4.0]) };
        let FisherApprox::Kfac(b) = FisherApprox::Kfac(vec![blk]).damped(0.5) else { unreachable!() };
        assert_eq!(b[0].a.diag(), vec![2.5, 0.5]);
        assert_eq!(b[0].b.diag(), vec![6.0]);
    }

    #[test]
    fn fisher_variants_are_psd() {
        let m = Mlp::<f64>::init(&[3, 4, 3], Head::SoftmaxClassification, 9).unwrap();
        let data = class_data(3, 6, 3, 4);
        let loss = LossKind::SoftmaxCrossEntropy;
        for f in [
            full_fisher(&m, &data, loss, FisherMode::Expected).unwrap(),
            kfac_fisher(&m, &data, loss, FisherMode::Expected).unwrap(),
        ] {
            assert!(is_psd(&f.to_dense(), 1e-8).unwrap());
        }
    }
}
