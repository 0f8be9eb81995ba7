//! Probabilistic adaptation of diffusion models at desk scale.
//!
//! A large "pretrained" denoiser and a small adapter denoiser are composed
//! as a product of experts by summing their ε-predictions, then sampled with
//! classifier-free guidance. The crate also carries the analytic worlds and
//! oracles used to check every identity, a Fréchet-distance benchmark on toy
//! videos, and a small binary protocol for serving ε-predictions remotely.

// `!(x > 0.0)` guards are deliberate: they reject NaN along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
mod container;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod kvtext;
pub mod oracle;
pub mod rng;
pub mod scorewire;
pub mod tensor;
pub mod worlds;

pub use error::{Error, Result};
