//! Deterministic slot-driven model of a multicore DU host.

pub mod config;
pub mod engine;
pub mod run;

pub use config::{BackgroundTemplate, MigrationBoost, ScenarioConfig, ThreadProfile};
pub use engine::{SimState, SlotOutcome};
pub use run::{
    controller_setup, inject_background, replay_plans, run_scenario, run_scenario_with, PlanRecord, RunOptions,
    RunOutput, RunReport, WindowCores,
};
