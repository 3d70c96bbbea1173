//! Ramp-metering controllers: receding-horizon planning with estimated or
//! true parameters, and the day-to-day learning update.

pub mod day;
pub mod plan;
pub mod planner;
pub mod record;

pub use day::{run_day, window_starts, write_plan_log, ControllerKind, DayOutcome, DaySetup, PlanLogEntry};
pub use plan::{
    gradient_estimate, ilc_plan, learning_objective, learning_terms, mpc_objective, mpc_plan, preconditioner_ridge, GradientEstimate,
    LearningTerms,
};
pub use planner::{make_solver, tightness, PlanResult, StageObjective, StagedProgram, TightnessReport, FEASIBILITY_TOL};
pub use record::{IterationRecord, RecordWindow};
