//! Safety filtering for a double-integrator robot with an unknown state-dependent residual:
//! a neural residual model trained online by backpropagating through RK4, high-order control
//! barrier function filters built on it, an adaptive-CBF baseline, and a simulation harness.

pub mod controllers;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod knode;
pub mod neural;
pub mod qp;
pub mod sim;

pub use controllers::{
    hoacbf_control, hocbf_control, nodehoacbf_control, safety_filter, AdaptiveEstimate, CbfGains, ControlOutcome,
    KnowledgeKind, Obstacle, PidGains, ResidualModel,
};
pub use dynamics::{rk4_step, true_step, ControlInput, ResidualKind, State, StateDerivative, Vec3, Vec6, DEFAULT_DT};
pub use error::{DynamicsError, FormatError, SimError, TrainError};
pub use knode::{knode_loss, train_round, ModelSnapshot, Sample, TrainerConfig, TrainingQueue};
pub use neural::{ParamVector, ResidualNet};
pub use qp::{qp_solve, QpProblem, QpSolution, QpStatus, SafetyConstraint};
pub use sim::{compute_metrics, hoacbf_grid_search, run_scenario, MetricsReport, RunMode, Scenario, TrajectoryLog};
