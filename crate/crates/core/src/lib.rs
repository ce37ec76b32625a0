//! Identification of radial distribution feeder models from smart-meter data.
//!
//! The pipeline has two stages. Topology is recovered from a weighted
//! Laplacian fitted by least squares over voltage/injection snapshots and
//! clustered row by row ([`topology`]). Line impedances are then estimated
//! branch by branch with a leaf-to-root sweep that alternates flow
//! reconstruction and a library-constrained nonlinear regression
//! ([`impedance`]). [`powerflow`] provides the exact branch-flow solver used
//! to synthesize data and the flow-update primitives of the sweep.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod network;
pub mod powerflow;
pub mod fixtures;
pub mod impedance;
pub mod io;
pub mod metrics;
pub mod topology;
