//! Deterministic federated low-rank-update simulator and spectral numerics.

pub mod error;
pub mod federation;
pub mod linalg;
pub mod data;
pub mod lowrank;
pub mod model;
pub mod seeds;

pub use error::{Error, Result};
pub use linalg::{symmetric_eig, symmetric_eigenvalues, EigenDecomposition, Matrix};
pub use federation::{Algorithm, Simulation, SimulationConfig};
pub use lowrank::{LowRankPair, NestedLowRankPair};
