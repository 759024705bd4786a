#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN
#![allow(clippy::needless_range_loop)]

//! Bayesian probit stick-breaking mixtures for estimating distributions from mixed
//! individual-level and summary data.

pub mod error;
pub mod inference;
pub mod io;
pub mod likelihood;
pub mod mixture;
pub mod model;
pub mod normal;
pub mod sampler;
pub mod scalar;

pub use error::{Error, Result};

pub type Basis = mixture::MixtureBasis<f64>;
pub type Weights = mixture::WeightVector<f64>;
pub type BasisF32 = mixture::MixtureBasis<f32>;
pub type WeightsF32 = mixture::WeightVector<f32>;
