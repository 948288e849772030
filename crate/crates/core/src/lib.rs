//! Particle Gibbs sampling for Kingman's coalescent.
//!
//! The sampler alternates Gibbs updates of coalescent times given the tree
//! structure with conditional SMC updates of the structure given the times,
//! using two-way belief propagation to sum out ancestral states. Samples drawn
//! at a reference `theta0` are reweighted into a relative likelihood surface.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod belief;
pub mod cli;
pub mod csmc;
pub mod error;
pub mod genealogy;
pub mod mutation;
pub mod numeric;
pub mod oracle;
pub mod pgs;
pub mod timegibbs;

pub use error::{Error, Result};
