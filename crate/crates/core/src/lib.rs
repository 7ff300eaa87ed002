//! Interactive collaborative filtering at desk scale.
//!
//! The crate replays logged ratings as an offline recommendation
//! environment and trains/evaluates policies against it:
//!
//! - [`data_env`] — rating-log ingestion, user splits, and the episode
//!   simulator that answers recommendations with logged ratings.
//! - [`numerics`] — the small dense linear-algebra kernel everything else
//!   uses (row-major `f64` matrices, Cholesky, masked softmax, a
//!   finite-difference gradient oracle).
//! - [`qnet`] — the multi-channel stacked self-attention Q-network with an
//!   analytically derived backward pass.
//! - [`agent`] — ε-greedy rollouts, replay buffer, curriculum-γ Q-learning,
//!   and the evaluation runner.
//! - [`bandits`] — PMF posterior baselines: Thompson sampling, GLM-UCB,
//!   ε-greedy, plus random/pop/greedy-MF reference policies.
//! - [`metrics`] — cumulative precision/recall and α-NDCG with topic
//!   coverage.
//! - [`checkpoint`] — the flat-text tensor format shared by Q-network and
//!   PMF model files.
//! - [`synth`] — seeded synthetic rating-log generator for benchmarks,
//!   tests, and demos.

pub mod agent;
pub mod bandits;
pub mod checkpoint;
pub mod data_env;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod qnet;
pub mod synth;

pub use error::{Error, Result};

/// A rating at or above this value counts as a satisfied recommendation.
pub const SATISFIED_MIN_RATING: u8 = 4;
