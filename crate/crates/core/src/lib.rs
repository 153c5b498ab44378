//! Energy-aware CPU orchestration for a RAN distributed unit.
//!
//! The crate holds the power and constraint model, a telemetry pipeline,
//! a slot-level simulator of the DU host, the closed-loop controller and a
//! brute-force oracle used to certify controller plans on small instances.

// `!(x > 0.0)` is used on purpose to reject NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod controller;
pub mod error;
pub mod model;
pub mod oracle;
pub mod report;
pub mod sim;
pub mod telemetry;

pub use controller::{Controller, ControllerConfig, ControllerSetup, PolicyKind};
pub use error::{Error, Result};
pub use model::{
    check_constraints, core_power, dwell_feasible, fit_power_model, plan_energy, ConstraintConfig,
    ConstraintReport, CoreId, FrequencyLevel, LevelSet, PowerFit, PowerModelParams, SchedulingPlan, ThreadId,
};
