//! Sub-token masked diffusion: subtokenizers, masking kernels, exact
//! oracles on enumerable instances, corpus statistics, scaling-law fits,
//! a toy trainer and weight spectra.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod kernels;
pub mod oracle;
pub mod quadrature;
pub mod rng;
pub mod scaling;
pub mod spectra;
pub mod subtok;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use kernels::{Posterior, Schedule, SubTokenGrid};
pub use quadrature::Quadrature;
pub use rng::SplitMix64;
pub use subtok::{Strategy, StrategyKind, SubTokenCode, Subtokenizer};
