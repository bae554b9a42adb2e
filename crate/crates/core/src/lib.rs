//! Privacy-preserving audio representation learning with gradient reversal
//! and periodic discriminator resets.
//!
//! The crate covers the whole experimental pipeline: mixture corpus
//! simulation ([`corpus`]), log-mel front-end ([`features`]), the networks
//! and their checkpoints ([`models`]), the adversarial training loop
//! ([`training`]), post-hoc attacker evaluation ([`privacy_eval`]) and
//! experiment orchestration ([`harness`]).

pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod corpus;
pub mod features;
pub mod harness;
pub mod models;
pub mod privacy_eval;
pub mod training;
