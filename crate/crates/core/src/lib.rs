//! Label-free GRPO post-training driven by cross-model entropy (CME) rewards.
//!
//! A trainable generator samples groups of responses; a separate, frozen
//! verifier scores every response token by its log-likelihood. When the two
//! models tokenize differently, verifier log-probabilities are redistributed
//! onto generator positions by character overlap ([`align`]). Rewards are
//! group-normalized per position and fed to a clipped-surrogate policy loss
//! with an optional KL anchor to a frozen reference ([`grpo`]).
//!
//! Everything runs on toy models with exact, enumerable distributions so that
//! the reverse-KL behaviour of the objective can be checked exactly
//! ([`analysis`]).

pub mod align;
pub mod analysis;
pub mod config;
pub mod error;
pub mod grpo;
pub mod lm;
pub mod rewards;
pub mod text;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
