//! Communication codecs: uniform quantization and truncated SVD, with exact
//! bit accounting.
//!
//! # Quantized payload layout
//!
//! ```text
//! u32 LE   element count d
//! f64 LE   max_abs = ‖x‖∞
//! bits     d records of (1 sign bit, ⌊32/s_q⌋ − 1 level bits)
//! ```
//!
//! Bits are packed least-significant first within each byte and levels are
//! written least-significant bit first. The last byte is zero-padded. The
//! accounted cost is `d·⌊32/s_q⌋ + 32`: one 32-bit scale per vector, the
//! element count being part of the protocol.

use crate::error::{dim_err, invalid};
use crate::fisher::{FisherApprox, KfacBlock};
use crate::numerics::{top_k_svd, DenseMatrix, LowRankFactors};
use crate::{Error, Result, Scalar};

/// Bits per element for compression factor `s_q`.
pub fn bits_per_element(s_q: u32) -> u32 {
    32 / s_q
}

/// Number of non-zero quantization levels, `2^{⌊32/s_q⌋−1} − 1`.
pub fn levels(s_q: u32) -> u64 {
    (1u64 << (bits_per_element(s_q) - 1)) - 1
}

fn check_sq(s_q: u32) -> Result<()> {
    if !(1..=16).contains(&s_q) {
        return invalid(format!("quantization factor s_q must lie in 1..=16, got {s_q}"));
    }
    Ok(())
}

/// A vector quantized to `l_q` magnitude levels with a shared scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    s_q: u32,
    len: usize,
    max_abs: f64,
    packed: Vec<u8>,
}

struct BitWriter {
    bytes: Vec<u8>,
    pos: usize,
}

impl BitWriter {
    fn with_capacity(bits: usize) -> Self {
        Self { bytes: Vec::with_capacity(bits.div_ceil(8)), pos: 0 }
    }

    fn push(&mut self, value: u64, width: u32) {
        for k in 0..width {
            if self.pos % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> k) & 1 == 1 {
                *self.bytes.last_mut().expect("byte pushed") |= 1 << (self.pos % 8);
            }
            self.pos += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn take(&mut self, width: u32) -> u64 {
        let mut v = 0u64;
        for k in 0..width {
            let bit = (self.bytes[self.pos / 8] >> (self.pos % 8)) & 1;
            v |= (bit as u64) << k;
            self.pos += 1;
        }
        v
    }
}

/// `⌈l_q |x| / max⌉`, snapping to the nearest level when `x` already sits on
/// the grid up to rounding error.
fn level_of(abs: f64, max_abs: f64, l_q: u64) -> u64 {
    let t = l_q as f64 * abs / max_abs;
    let r = t.round();
    let k = if (t - r).abs() <= 8.0 * f64::EPSILON * t.max(1.0) { r } else { t.ceil() };
    (k as u64).min(l_q)
}

/// `Q(x)_i = ‖x‖∞ · sign(x_i) · ⌈l_q |x_i| / ‖x‖∞⌉ / l_q`.
pub fn quantize<T: Scalar>(x: &[T], s_q: u32) -> Result<QuantizedVector> {
    check_sq(s_q)?;
    if x.len() > u32::MAX as usize {
        return invalid("vector too long for a 32-bit element count");
    }
    let vals: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return invalid("cannot quantize non-finite values");
    }
    let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let width = bits_per_element(s_q);
    let l_q = levels(s_q);
    let mut w = BitWriter::with_capacity(vals.len() * width as usize);
    for &v in &vals {
        let k = if max_abs == 0.0 { 0 } else { level_of(v.abs(), max_abs, l_q) };
        w.push(u64::from(v < 0.0 && k > 0), 1);
        w.push(k, width - 1);
    }
    Ok(QuantizedVector { s_q, len: vals.len(), max_abs, packed: w.bytes })
}

impl QuantizedVector {
    pub fn s_q(&self) -> u32 {
        self.s_q
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    pub fn levels(&self) -> u64 {
        levels(self.s_q)
    }

    /// The packed sign/level records.
    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn dequantize<T: Scalar>(&self) -> Vec<T> {
        let width = bits_per_element(self.s_q);
        let l_q = levels(self.s_q) as f64;
        let mut r = BitReader { bytes: &self.packed, pos: 0 };
        (0..self.len)
            .map(|_| {
                let neg = r.take(1) == 1;
                let k = r.take(width - 1) as f64;
                let v = self.max_abs * (k / l_q);
                T::of(if neg { -v } else { v })
            })
            .collect()
    }

    /// Serialises with the layout in the module docs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.packed.len());
        out.extend_from_slice(&(self.len as u32).to_le_bytes());
        out.extend_from_slice(&self.max_abs.to_le_bytes());
        out.extend_from_slice(&self.packed);
        out
    }

    pub fn from_bytes(bytes: &[u8], s_q: u32) -> Result<Self> {
        check_sq(s_q)?;
        let parse = |field: &str, reason: &str| Error::Parse { field: field.into(), reason: reason.into() };
        if bytes.len() < 12 {
            return Err(parse("quantized.header", "fewer than 12 bytes"));
        }
        let len = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let max_abs = f64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        if !max_abs.is_finite() || max_abs < 0.0 {
            return Err(parse("quantized.max_abs", "not a finite non-negative number"));
        }
        let need = (len * bits_per_element(s_q) as usize).div_ceil(8);
        if bytes.len() - 12 != need {
            return Err(parse("quantized.bits", "payload length does not match the element count"));
        }
        Ok(Self { s_q, len, max_abs, packed: bytes[12..].to_vec() })
    }
}

/// Exact communication cost in bits.
pub trait BitCost {
    fn bit_cost(&self) -> u64;
}

impl BitCost for QuantizedVector {
    fn bit_cost(&self) -> u64 {
        self.len as u64 * u64::from(bits_per_element(self.s_q)) + 32
    }
}

/// Uncompressed 32-bit floats.
pub fn raw_bit_cost(d: usize) -> u64 {
    32 * d as u64
}

/// Quantizes each layer's slice separately.
pub fn quantize_layers<T: Scalar>(x: &[T], layer_sizes: &[usize], s_q: u32) -> Result<Vec<QuantizedVector>> {
    if layer_sizes.iter().sum::<usize>() != x.len() {
        return dim_err("layer sizes do not add up to the vector length");
    }
    let mut start = 0;
    layer_sizes
        .iter()
        .map(|&n| {
            let q = quantize(&x[start..start + n], s_q);
            start += n;
            q
        })
        .collect()
}

pub fn dequantize_layers<T: Scalar>(parts: &[QuantizedVector]) -> Vec<T> {
    parts.iter().flat_map(|q| q.dequantize::<T>()).collect()
}

impl BitCost for [QuantizedVector] {
    fn bit_cost(&self) -> u64 {
        self.iter().map(BitCost::bit_cost).sum()
    }
}

/// Rank kept by SVD compression of an `m × m` matrix: `⌊m / 2s_v⌋`.
pub fn svd_rank(m: usize, s_v: f64) -> usize {
    (m as f64 / (2.0 * s_v)).floor() as usize
}

/// Cost of sending `l_v` singular triples of an `m × m` matrix in 32-bit floats.
pub fn svd_bit_cost(m: usize, l_v: usize) -> u64 {
    32 * (2 * m * l_v + l_v) as u64
}

/// Truncates a square matrix to its top `⌊m / 2s_v⌋` singular triples.
pub fn svd_compress<T: Scalar>(a: &DenseMatrix<T>, s_v: f64) -> Result<LowRankFactors<T>> {
    if !a.is_square() {
        return dim_err("SVD compression expects a square matrix");
    }
    if !(s_v >= 1.0) {
        return invalid(format!("s_v must be at least 1, got {s_v}"));
    }
    let l_v = svd_rank(a.rows(), s_v);
    if l_v == 0 {
        return invalid(format!("s_v = {s_v} leaves no singular values of a {0}x{0} matrix", a.rows()));
    }
    top_k_svd(a, l_v)
}

pub fn reconstruct<T: Scalar>(f: &LowRankFactors<T>) -> DenseMatrix<T> {
    f.reconstruct()
}

/// One SVD-truncated factor with `U`, `Σ`, `V` quantized separately.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFactor {
    pub dim: usize,
    pub rank: usize,
    pub u: QuantizedVector,
    pub sigma: QuantizedVector,
    pub v: QuantizedVector,
}

impl CompressedFactor {
    pub fn encode<T: Scalar>(a: &DenseMatrix<T>, rank: usize, s_q: u32) -> Result<Self> {
        let f = top_k_svd(a, rank)?;
        Ok(Self {
            dim: a.rows(),
            rank,
            u: quantize(f.u.as_slice(), s_q)?,
            sigma: quantize(&f.sigma, s_q)?,
            v: quantize(f.v.as_slice(), s_q)?,
        })
    }

    /// `U Σ Vᵀ`, symmetrised.
    pub fn decode<T: Scalar>(&self) -> Result<DenseMatrix<T>> {
        let u = DenseMatrix::new(self.dim, self.rank, self.u.dequantize())?;
        let v = DenseMatrix::new(self.dim, self.rank, self.v.dequantize())?;
        let f = LowRankFactors { u, sigma: self.sigma.dequantize(), v };
        Ok(f.reconstruct().symmetrized())
    }
}

impl BitCost for CompressedFactor {
    fn bit_cost(&self) -> u64 {
        self.u.bit_cost() + self.sigma.bit_cost() + self.v.bit_cost()
    }
}

/// Exact cost of one compressed factor without encoding it.
pub fn factor_bit_cost(dim: usize, rank: usize, s_q: u32) -> u64 {
    let b = u64::from(bits_per_element(s_q));
    b * (2 * dim * rank + rank) as u64 + 3 * 32
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedKfacLayer {
    pub a: CompressedFactor,
    pub b: CompressedFactor,
}

/// K-FAC Fisher with every factor SVD-truncated and quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedKfac {
    pub s_q: u32,
    pub layers: Vec<CompressedKfacLayer>,
}

impl BitCost for CompressedKfac {
    fn bit_cost(&self) -> u64 {
        self.layers.iter().map(|l| l.a.bit_cost() + l.b.bit_cost()).sum()
    }
}

/// Ranks per layer, applied to both factors of the layer (capped at each
/// factor's dimension).
pub fn compress_kfac<T: Scalar>(blocks: &[KfacBlock<T>], ranks: &[usize], s_q: u32) -> Result<CompressedKfac> {
    check_sq(s_q)?;
    if ranks.len() != blocks.len() {
        return dim_err("one rank per K-FAC layer required");
    }
    let layers = blocks
        .iter()
        .zip(ranks)
        .map(|(blk, &r)| {
            Ok(CompressedKfacLayer {
                a: CompressedFactor::encode(&blk.a, r.min(blk.a.rows()), s_q)?,
                b: CompressedFactor::encode(&blk.b, r.min(blk.b.rows()), s_q)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CompressedKfac { s_q, layers })
}

impl CompressedKfac {
    pub fn decode<T: Scalar>(&self) -> Result<Vec<KfacBlock<T>>> {
        self.layers.iter().map(|l| Ok(KfacBlock { a: l.a.decode()?, b: l.b.decode()? })).collect()
    }
}

/// Ranks chosen by [`kfac_budget_plan`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KfacPlan {
    pub ranks: Vec<usize>,
    pub bits: u64,
    pub budget: u64,
}

fn plan_bits(dims: &[(usize, usize)], ranks: &[usize], s_q: u32) -> u64 {
    dims.iter()
        .zip(ranks)
        .map(|(&(ma, mb), &r)| factor_bit_cost(ma, r.min(ma), s_q) + factor_bit_cost(mb, r.min(mb), s_q))
        .sum()
}

/// Largest ranks `l_ℓ = max(1, ⌊f · min(m_A, m_B)⌋)`, one fraction `f` for
/// all layers, whose exact cost fits in `16 d` bits. `factor_dims` lists
/// `(dim A_ℓ, dim B_ℓ)`.
pub fn kfac_budget_plan(factor_dims: &[(usize, usize)], d: usize, s_q: u32) -> Result<KfacPlan> {
    kfac_budget_plan_with(factor_dims, 16 * d as u64, s_q)
}

pub fn kfac_budget_plan_with(factor_dims: &[(usize, usize)], budget: u64, s_q: u32) -> Result<KfacPlan> {
    check_sq(s_q)?;
    if factor_dims.is_empty() || factor_dims.iter().any(|&(a, b)| a == 0 || b == 0) {
        return invalid("K-FAC plan needs non-empty layers");
    }
    let caps: Vec<usize> = factor_dims.iter().map(|&(a, b)| a.min(b)).collect();
    let ranks_for = |num: usize, den: usize| -> Vec<usize> {
        caps.iter().map(|&c| (c * num / den).clamp(1, c)).collect()
    };
    // Candidate fractions are the points where some layer's rank changes.
    let mut candidates: Vec<(usize, usize)> =
        caps.iter().flat_map(|&c| (1..=c).map(move |l| (l, c))).collect();
    candidates.sort_by(|x, y| (x.0 * y.1).cmp(&(y.0 * x.1)).reverse());
    for (num, den) in candidates {
        let ranks = ranks_for(num, den);
        let bits = plan_bits(factor_dims, &ranks, s_q);
        if bits <= budget {
            return Ok(KfacPlan { ranks, bits, budget });
        }
    }
    Err(Error::Infeasible(format!(
        "K-FAC factors need {} bits at rank 1 but the budget is {budget}",
        plan_bits(factor_dims, &vec![1; caps.len()], s_q)
    )))
}

/// Factor dimensions of a K-FAC Fisher.
pub fn kfac_factor_dims<T: Scalar>(blocks: &[KfacBlock<T>]) -> Vec<(usize, usize)> {
    blocks.iter().map(|b| (b.a.rows(), b.b.rows())).collect()
}

/// Compression applied to one client's upload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UploadCodec {
    /// Quantization of the weights (per layer); `None` sends raw floats.
    pub weight_sq: Option<u32>,
    /// Quantization of diagonal Fishers or K-FAC factors.
    pub fisher_sq: Option<u32>,
    /// K-FAC rank rule: `Some(s_v)` uses `⌊m/2s_v⌋`, `None` plans ranks for
    /// a `16d` budget.
    pub kfac_sv: Option<f64>,
}

impl UploadCodec {
    pub const RAW: UploadCodec = UploadCodec { weight_sq: None, fisher_sq: None, kfac_sv: None };

    /// Weights at `s_q = 2`, Fisher at `fisher_sq`, K-FAC ranks from the budget.
    pub fn matched_budget(fisher_sq: u32) -> Self {
        UploadCodec { weight_sq: Some(2), fisher_sq: Some(fisher_sq), kfac_sv: None }
    }
}

/// What the server receives after decoding, plus the bits it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedUpload<T> {
    pub weights: Vec<T>,
    pub fisher: Option<FisherApprox<T>>,
    pub bits: u64,
}

/// Encodes and decodes an upload, returning the server's view and its exact
/// cost. Full Fishers are sent raw.
pub fn transmit<T: Scalar>(
    weights: &[T],
    fisher: Option<&FisherApprox<T>>,
    layer_sizes: &[usize],
    codec: &UploadCodec,
) -> Result<DecodedUpload<T>> {
    let d = weights.len();
    let (weights, mut bits) = match codec.weight_sq {
        Some(s) => {
            let q = quantize_layers(weights, layer_sizes, s)?;
            (dequantize_layers(&q), q.bit_cost())
        }
        None => (weights.to_vec(), raw_bit_cost(d)),
    };
    let fisher = match (fisher, codec.fisher_sq) {
        (None, _) => None,
        (Some(FisherApprox::Full(m)), _) => {
            bits += raw_bit_cost(m.rows() * m.cols());
            Some(FisherApprox::Full(m.clone()))
        }
        (Some(FisherApprox::Diag(v)), None) => {
            bits += raw_bit_cost(v.len());
            Some(FisherApprox::Diag(v.clone()))
        }
        (Some(FisherApprox::Diag(v)), Some(s)) => {
            let q = quantize_layers(v, layer_sizes, s)?;
            bits += q.bit_cost();
            Some(FisherApprox::Diag(dequantize_layers(&q)))
        }
        (Some(FisherApprox::Kfac(blocks)), None) => {
            bits += blocks.iter().map(|b| raw_bit_cost(b.a.rows().pow(2) + b.b.rows().pow(2))).sum::<u64>();
            Some(FisherApprox::Kfac(blocks.clone()))
        }
        (Some(FisherApprox::Kfac(blocks)), Some(s)) => {
            let dims = kfac_factor_dims(blocks);
            let ranks = match codec.kfac_sv {
                Some(s_v) => dims
                    .iter()
                    .map(|&(a, b)| {
                        let r = svd_rank(a.min(b), s_v);
                        if r == 0 {
                            invalid(format!("s_v = {s_v} leaves no singular values"))
                        } else {
                            Ok(r)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => kfac_budget_plan(&dims, d, s)?.ranks,
            };
            let c = compress_kfac(blocks, &ranks, s)?;
            bits += c.bit_cost();
            Some(FisherApprox::Kfac(c.decode()?))
        }
    };
    Ok(DecodedUpload { weights, fisher, bits })
}
