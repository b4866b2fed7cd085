//! Example containers, synthetic generators and client partitioning.

mod idx;
mod images;
mod tabular;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};
pub use images::{gen_image_classes, image_examples, ImageTaskSpec, NUM_IMAGE_CLASSES};
pub use tabular::load_csv;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::invalid;
use crate::rng::{self, stream};
use crate::{Result, Scalar};

/// Label of one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target<T> {
    Value(T),
    Class(usize),
}

impl<T: Scalar> Target<T> {
    pub fn value(&self) -> Option<T> {
        match *self {
            Target::Value(v) => Some(v),
            Target::Class(_) => None,
        }
    }

    pub fn class(&self) -> Option<usize> {
        match *self {
            Target::Class(c) => Some(c),
            Target::Value(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub x: Vec<T>,
    pub y: Target<T>,
}

impl<T: Scalar> Example<T> {
    pub fn regression(x: Vec<T>, y: T) -> Self {
        Self { x, y: Target::Value(y) }
    }

    pub fn classification(x: Vec<T>, class: usize) -> Self {
        Self { x, y: Target::Class(class) }
    }
}

/// Global example list plus a disjoint assignment of indices to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset<T> {
    pub examples: Vec<Example<T>>,
    pub partition: Vec<Vec<usize>>,
    /// Zero for regression.
    pub num_classes: usize,
}

impl<T: Scalar> FederatedDataset<T> {
    pub fn new(examples: Vec<Example<T>>, partition: Vec<Vec<usize>>, num_classes: usize) -> Result<Self> {
        let ds = Self { examples, partition, num_classes };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks that partition indices are valid and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.examples.len()];
        for (c, part) in self.partition.iter().enumerate() {
            for &i in part {
                if i >= self.examples.len() {
                    return invalid(format!("client {c} holds out-of-range index {i}"));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return invalid(format!("index {i} assigned to more than one client"));
                }
            }
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.partition.len()
    }

    pub fn client_examples(&self, client: usize) -> Vec<Example<T>> {
        self.partition[client]
            .iter()
            .map(|&i| self.examples[i].clone())
            .collect()
    }

    /// Union of all client data, in client order.
    pub fn pooled_examples(&self) -> Vec<Example<T>> {
        self.partition
            .iter()
            .flatten()
            .map(|&i| self.examples[i].clone())
            .collect()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.partition.iter().map(Vec::len).collect()
    }
}

/// Per-client generating parameters of the synthetic regression task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClient {
    /// Regression vector: `y = wᵀx`.
    pub w: Vec<f64>,
    /// Mean of the unnormalised inputs.
    pub b: Vec<f64>,
}

/// Synthetic non-IID regression data.
///
/// Client `i` draws scalars `w_i, b_i ~ N(0,1)`, vectors
/// `w ~ N(w_i·1, I)`, `b ~ N(b_i·1, I)`, then inputs
/// `x̃ ~ N(b, diag(k^-1.2))`, `x = x̃/‖x̃‖`, `y = wᵀx`.
pub fn gen_synthetic<T: Scalar>(
    seed: u64,
    m_clients: usize,
    n_per_client: usize,
    p: usize,
) -> Result<FederatedDataset<T>> {
    gen_synthetic_with_generators(seed, m_clients, n_per_client, p).map(|(ds, _)| ds)
}

/// [`gen_synthetic`] that also returns each client's generating parameters.
pub fn gen_synthetic_with_generators<T: Scalar>(
    seed: u64,
    m_clients: usize,
    n_per_client: usize,
    p: usize,
) -> Result<(FederatedDataset<T>, Vec<SyntheticClient>)> {
    if m_clients == 0 || n_per_client == 0 || p == 0 {
        return invalid("synthetic data needs at least one client, one example and one feature");
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sd: Vec<f64> = (1..=p).map(|k| (k as f64).powf(-1.2).sqrt()).collect();

    let mut examples = Vec::with_capacity(m_clients * n_per_client);
    let mut partition = Vec::with_capacity(m_clients);
    let mut generators = Vec::with_capacity(m_clients);
    let data_seed = rng::substream_seed(seed, stream::DATA);
    for client in 0..m_clients {
        let mut rng = rng::substream(data_seed, client as u64);
        let wi: f64 = std_normal.sample(&mut rng);
        let bi: f64 = std_normal.sample(&mut rng);
        let w: Vec<f64> = (0..p).map(|_| wi + std_normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..p).map(|_| bi + std_normal.sample(&mut rng)).collect();

        let start = examples.len();
        while examples.len() < start + n_per_client {
            let raw: Vec<f64> = (0..p)
                .map(|k| b[k] + sd[k] * std_normal.sample(&mut rng))
                .collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let x: Vec<f64> = raw.iter().map(|v| v / norm).collect();
            let y: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            examples.push(Example::regression(
                x.into_iter().map(T::of).collect(),
                T::of(y),
            ));
        }
        partition.push((start..examples.len()).collect());
        generators.push(SyntheticClient { w, b });
    }
    Ok((FederatedDataset::new(examples, partition, 0)?, generators))
}

const DIRICHLET_MAX_RESAMPLES: usize = 100;

/// Splits example indices across clients with per-class proportions drawn
/// from `Dirichlet(alpha·1_M)`.
///
/// Draws are repeated (up to 100 times) while some client ends up empty;
/// if that still fails, the largest client donates one example to each
/// empty one.
pub fn dirichlet_partition(
    labels: &[usize],
    m_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if m_clients == 0 {
        return invalid("need at least one client");
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return invalid(format!("Dirichlet concentration must be positive, got {alpha}"));
    }
    if labels.len() < m_clients {
        return invalid(format!(
            "{} examples cannot cover {m_clients} clients",
            labels.len()
        ));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |c| c + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }

    let mut rng = rng::substream(seed, stream::PARTITION);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| crate::Error::InvalidInput(e.to_string()))?;
    let mut parts = Vec::new();
    for _ in 0..DIRICHLET_MAX_RESAMPLES {
        parts = vec![Vec::new(); m_clients];
        for members in &by_class {
            let mut idx = members.clone();
            idx.shuffle(&mut rng);
            let props = sample_dirichlet(&gamma, m_clients, &mut rng);
            let mut start = 0usize;
            let mut cum = 0.0;
            for (c, &pc) in props.iter().enumerate() {
                cum += pc;
                let end = if c + 1 == m_clients {
                    idx.len()
                } else {
                    ((cum * idx.len() as f64).round() as usize).clamp(start, idx.len())
                };
                parts[c].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            break;
        }
    }
    while let Some(empty) = parts.iter().position(Vec::is_empty) {
        let largest = (0..m_clients).max_by_key(|&c| parts[c].len()).expect("clients");
        let moved = parts[largest].pop().expect("non-empty donor");
        parts[empty].push(moved);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

fn sample_dirichlet<R: Rng>(gamma: &Gamma<f64>, k: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Rescales every feature vector to unit Euclidean norm.
pub fn normalize_unit<T: Scalar>(mut examples: Vec<Example<T>>) -> Result<Vec<Example<T>>> {
    for (i, ex) in examples.iter_mut().enumerate() {
        let norm = ex.x.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm == T::zero() {
            return invalid(format!("example {i} has a zero feature vector"));
        }
        for v in ex.x.iter_mut() {
            *v /= norm;
        }
    }
    Ok(examples)
}

/// Deterministic train/held-out split: shuffles with `seed` and takes the
/// first `held_out` examples as the second return value.
pub fn split_off<T: Clone>(examples: &[T], held_out: usize, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut rng::substream(seed, stream::SPLIT));
    let held_out = held_out.min(examples.len());
    let held = idx[..held_out].iter().map(|&i| examples[i].clone()).collect();
    let rest = idx[held_out..].iter().map(|&i| examples[i].clone()).collect();
    (rest, held)
}

/// Class labels of a classification example list.
pub fn class_labels<T: Scalar>(examples: &[Example<T>]) -> Result<Vec<usize>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            e.y.class()
                .ok_or_else(|| crate::Error::InvalidInput(format!("example {i} has no class label")))
        })
        .collect()
}
