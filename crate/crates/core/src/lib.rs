// SPDX-License-Identifier: MIT OR Apache-2.0

//! # strace-lab
//!
//! Records a decoder-only transformer's forward pass as a token-level
//! computational graph, extracts the size-`s` subgraph that best
//! reconstructs the next-token distribution, and measures how faithful,
//! dense and structured those subgraphs are across a grid of sizes.
//!
//! Pipeline for one input:
//!
//! 1. [`Model::forward_decomposed`] records node states and edge vectors.
//! 2. [`graph::build_graph`] and [`graph::importance`] turn the record into
//!    a graph with node-normalized L1 edge scores.
//! 3. [`trace::extract_trace_grid`] runs greedy best-first search once and
//!    snapshots nested traces at each grid size.
//! 4. [`ablation::masked_forward`] re-runs the model restricted to a trace;
//!    [`metrics`] compares the result with the full output.

pub mod ablation;
pub mod analysis;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trace;

pub use ablation::{EdgeMask, MaskMode};
pub use error::{Error, Result};
pub use graph::{CompGraph, ComponentId, EdgeId, EdgeKind, GraphShape, ImportanceScores, NodeId, NodeKind};
pub use metrics::DensityProfile;
pub use model::{Activation, ForwardRecord, Model, ModelConfig, TokenSequence, Weights};
pub use trace::{SizeGrid, Trace, TraceDump};
