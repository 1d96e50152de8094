//! Invertible normalizing flows for molecular graphs: exact-likelihood
//! encoding of (atom, bond) tensors, one-pass decoding with valency
//! correction, desk-scale training and latent-space search.

pub mod atomflow;
pub mod bondflow;
pub mod chemio;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod molgraph;
pub mod numerics;
pub mod selfcheck;
pub mod validity;

pub use error::{Error, Result};
