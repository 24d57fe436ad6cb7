//! Deterministic single-process simulator for personalized semi-supervised
//! federated learning.
//!
//! The main algorithm trains a shared global model with momentum local SGD,
//! per-client control variates and delta normalization by discounted step
//! counts, while each client maintains pseudo-labels for its unlabeled data
//! and a personal model obtained by interpolating its own track with the
//! global one. Several simpler baselines (parameter averaging, SCAFFOLD-style
//! variance reduction, label-only interpolation) share the same round loop
//! and data pipeline, so comparisons differ only in the algorithm itself.
//!
//! Everything is reproducible: all randomness flows from a master seed
//! through labeled ChaCha8 streams ([`rng`]), and two runs with the same
//! configuration produce byte-identical traces.
//!
//! Quick start:
//!
//! ```
//! use fedcpsl::config::ExperimentConfig;
//! use fedcpsl::server::run_training;
//!
//! let mut cfg = ExperimentConfig::default();
//! cfg.n_clients = 4;
//! cfg.m = 2;
//! cfg.rounds = 3;
//! cfg.blobs_per_class = 40;
//! let run = run_training(&cfg).unwrap();
//! assert_eq!(run.records.len(), 3);
//! ```

pub mod baselines;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod server;
pub mod simplex;

pub use baselines::AlgorithmKind;
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use server::{build_experiment, run_round, run_training};
