//! Bayesian variational autoencoders trained with stochastic-gradient HMC,
//! ensemble-disagreement OoD scores, and the evaluation harness around them.
//!
//! Layering, bottom-up: [`tensor`] (dense arrays + reverse-mode tape),
//! [`nn`] (flat-parameter MLPs), [`vae`] (ELBO and importance-sampled
//! likelihood), [`sghmc`] (the sampler), [`bvae`] (training drivers and the
//! posterior ensemble), [`scores`] and [`latent`] (detectors), [`eval`]
//! (threshold-free metrics and curve export). [`datasets`] feeds all of them.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bvae;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod latent;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scores;
pub mod sghmc;
pub mod store;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
