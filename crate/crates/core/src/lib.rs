//! Pareto-optimal multi-robot minimal-time planning.
//!
//! Computes Pareto-optimal feedback policies minimizing per-robot arrival
//! times for a team of robots with nonlinear dynamics, collision
//! constraints and goal regions, via multigrid set-valued value iteration
//! over Kruzhkov-transformed arrival times. Ships with a closed-loop
//! simulator and a brute-force viability-kernel oracle for verification.

pub mod dynamics;
pub mod error;
pub mod grid;
pub mod instances;
pub mod model;
pub mod pareto;
pub mod planner;
pub mod region;
pub mod sim;
pub mod viability;

pub use error::{Error, Result};
pub use grid::NodeId;
pub use model::{DynamicsKind, RobotSpec, Scenario, TeamState};
pub use pareto::{ParetoSet, TimeVec};
pub use planner::{PlanOptions, PlanResult, PolicyTable, Schedule, ValueFunction};
