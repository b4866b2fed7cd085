//! One-shot federated learning by Fisher-information model merging.
//!
//! Clients train locally, summarise the curvature of their local posterior
//! with a Fisher approximation (full, diagonal or K-FAC) and send both to a
//! server, which merges them in a single round by solving
//!
//! ```text
//! min_W  sum_i ||W - W_i||^2   s.t.  (sum_i F_i) W = sum_i F_i W_i
//! ```
//!
//! The numeric code is generic over the scalar type through [`Scalar`];
//! the experiment drivers and most callers use the `f64` aliases below.

pub mod aggregate;
pub mod checkpoint;
pub mod compress;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod fisher;
pub mod models;
pub mod numerics;
pub mod rng;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub use error::{Error, Result};

/// Real scalar the numeric kernels are written against (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; used for literals and sampled values.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("scalar conversion from f64")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type DenseMatrix = numerics::DenseMatrix<f64>;
pub type LowRankFactors = numerics::LowRankFactors<f64>;
pub type Example = datasets::Example<f64>;
pub type FederatedDataset = datasets::FederatedDataset<f64>;
pub type TwoLayerReLU = models::TwoLayerReLU<f64>;
pub type Mlp = models::Mlp<f64>;
pub type Network = models::Network<f64>;
pub type FisherApprox = fisher::FisherApprox<f64>;
pub type ClientUpdate = aggregate::ClientUpdate<f64>;
pub type QuantizedVector = compress::QuantizedVector;

pub type DenseMatrix32 = numerics::DenseMatrix<f32>;
pub type FisherApprox32 = fisher::FisherApprox<f32>;
pub type Network32 = models::Network<f32>;
