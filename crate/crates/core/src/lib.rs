//! Multivariate conditional-autoregressive latent effects on areal lattices.
//!
//! The crate models `K` correlated spatial fields over `I` regions as a
//! Gaussian Markov random field with a Kronecker-structured sparse precision,
//! fits Bayesian Poisson count models through a Laplace approximation of the
//! hyperparameter posterior, and cross-validates the approximation with an
//! adaptive random-walk Metropolis sampler.

pub mod car;
pub mod error;
pub mod graph;
pub mod inference;
pub mod latent;
pub mod likelihood;
pub mod sparse;
pub mod testing;

pub use error::Error;
pub use graph::ArealGraph;
pub use latent::{HyperVector, LatentModel, ModelKind, NaturalParams};
pub use likelihood::{CountData, Design};
pub use sparse::{CholFactor, ConstraintSet, JitterPolicy, SparseSym};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
