//! Persistent projects: the stage state machine, its files, metrics and
//! the local API.

pub mod api;
pub mod config;
pub mod metrics;
pub mod project;
pub mod store;

pub use config::{ClockKind, ConfigError, ProjectConfig};
pub use metrics::{compute_metrics, export_metrics, least_squares, MetricsFormat, MetricsReport};
pub use project::{
    transition, DivisionView, Event, Manifest, ModuleArtifacts, Project, ProjectState, Stage, StageOp, Timer,
    TimerAction, WorkbenchError, OPERATOR,
};
pub use store::Store;
