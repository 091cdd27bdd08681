//! Simulation, diagnostics and control design for guidance-by-repulsion herding.

pub mod controllability;
pub mod controls;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod feedback;
pub mod kernels;
pub mod optimal_control;
pub mod scenario_io;
pub mod simplex;
pub mod vec2;

pub use error::{HerdError, Result};
pub use vec2::Vec2;
