//! Coalition-formation-guided federated learning for cascaded-channel
//! estimation in RIS-assisted cell-free MIMO.
//!
//! The crate is organised bottom-up:
//!
//! - [`channel`]: Saleh-Valenzuela channel synthesis and pilot datasets.
//! - [`estimator`]: a small layered network with explicit backprop.
//! - [`federation`]: weighted gradient aggregation and FL rounds.
//! - [`hfl`]: heterogeneous FL with shared/distillation partitions.
//! - [`coalition`]: the coalition formation game and its potential.
//! - [`drl`]: factored DQN and Qmix coalition learners, plus the CFFL loop.
//! - [`metrics`]: correlation, communication and complexity accounting.
//! - [`config`] and [`experiment`]: scenario files and end-to-end runs.

pub mod channel;
pub mod coalition;
pub mod config;
pub mod drl;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod federation;
pub mod hfl;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
pub use linalg::{ComplexMatrix, C64};
