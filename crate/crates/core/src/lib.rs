//! Physics-consistent synthesis of false data injection attack (FDIA)
//! datasets on IEEE test grids, together with the graph/attention models
//! that detect and localize the attacks.
//!
//! The pipeline, end to end:
//!
//! 1. [`case`] parses MATPOWER-style grid cases and NYISO-style load
//!    profiles into validated structures.
//! 2. [`graph`] derives the weighted grid graph, admittance matrices and
//!    the normalized spectral operators from a case.
//! 3. [`acpf`] solves the AC power flow and evaluates the measurement
//!    function; [`sse`] runs weighted least squares state estimation and
//!    the residual-based bad data detector.
//! 4. [`fdia`] crafts the four attack types over BFS-selected regions and
//!    [`datagen`] assembles the labeled train/val/test splits.
//! 5. [`autodiff`] is a small tape-based reverse-mode engine; [`model`]
//!    builds the ACEOT network and its baselines on top of it; [`train`]
//!    optimizes them and [`eval`] scores detection and localization.

pub mod acpf;
pub mod autodiff;
pub mod case;
pub mod datagen;
pub mod eval;
pub mod fdia;
pub mod graph;
pub mod model;
pub mod sse;
pub mod train;

pub use case::{BranchRecord, BusKind, BusRecord, GenRecord, GridCase, LoadProfile};
pub use graph::{Admittance, GridGraph};
