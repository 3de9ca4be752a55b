//! Belief-space trajectory optimization with covariance-bound constraints.

pub mod belief;
pub mod diff;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod motion;
pub mod objectives;
pub mod sensing;
pub mod sim;
pub mod solver;

pub use belief::{Belief, StateVector};
pub use dynamics::BeliefModel;
pub use error::{Error, Result};
