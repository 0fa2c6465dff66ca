//! Coalition-forming volt/VAR control for PV inverters on radial feeders.
//!
//! Inverter agents on a low-voltage feeder group themselves into
//! voltage-regulation coalitions every few minutes and, inside each
//! coalition, run a leader-follower consensus on their reactive-power
//! utilization ratio. The crate contains the feeder model and power flow
//! ([`grid`]), a synchronous message network with latency and link faults
//! ([`comms`]), the agent protocol ([`agents`]), the local and centralized
//! comparison strategies ([`baselines`]), reference solutions ([`oracle`])
//! and the day-long scenario runner ([`scenario`]).
//!
//! Numerical modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the runner uses.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agents;
pub mod baselines;
pub mod comms;
pub mod grid;
pub mod oracle;
pub mod scalar;
pub mod scenario;

pub use grid::BusId;
pub use scalar::Scalar;

pub type Bus = grid::Bus<f64>;
pub type Line = grid::Line<f64>;
pub type NetworkModel = grid::NetworkModel<f64>;
pub type PowerFlowSolution = grid::PowerFlowSolution<f64>;
pub type ControlParams = agents::ControlParams<f64>;
pub type InverterState = agents::InverterState<f64>;
pub type CoalitionView = agents::CoalitionView<f64>;
pub type Agent = agents::Agent<f64>;
pub type EpsilonPartition = baselines::EpsilonPartition<f64>;
pub type LinearVoltageModel = oracle::LinearVoltageModel<f64>;

pub type NetworkModelF32 = grid::NetworkModel<f32>;
pub type ControlParamsF32 = agents::ControlParams<f32>;
