//! Architecture search with a weight-generating hypernetwork over a pruned
//! ("intensive") cell search space.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`intensive`]: train a relaxed supernet over the full eight-operation
//!    space and keep, per intermediate node, the `K` most likely non-zero
//!    operations at the epoch whose space is both accurate and stable.
//! 2. [`search::train_hypernetwork`]: train the generating blocks of a
//!    [`hypernet::HyperNetwork`] under random architecture encodings.
//! 3. [`search::search_architecture`]: optimize per-cell encodings against the
//!    frozen generator, with an optional window where both are updated.
//! 4. [`search::discretize`] / [`search::evaluate_architecture`]: keep the
//!    top-`T` operations per node and score them with generated weights.
//!
//! [`harness`] wires the stages to checkpoints, metrics files and the CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod hypernet;
pub mod intensive;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod search;
pub mod search_space;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{ConvSpec, Graph, PoolKind, Var};
pub use tensor::{Scalar, Tensor};
