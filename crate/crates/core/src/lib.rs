//! Viability-kernel based safety systems for uncertain linear
//! pharmacological models: polytope geometry, kernel recursion,
//! safety-preserving control, online model falsification and a closed-loop
//! infusion simulator.

pub mod error;
pub mod falsification;
pub mod geometry;
pub mod pid;
pub mod pkpd;
pub mod safety;
pub mod sim;
pub mod viability;

pub use error::{Error, Result};
pub use geometry::{Direction, Polytope};
