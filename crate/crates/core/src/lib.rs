//! Lab orchestration: declarative workflows, a batching list scheduler, an
//! event-sourced executor, a framed gateway protocol to on-premises
//! adapters, a hash-chained record store, and closed-loop screening
//! campaigns against a simulated lab.

pub mod api;
pub mod campaign;
pub mod canonical;
pub mod clock;
pub mod config;
pub mod executor;
pub mod gateway;
pub mod records;
pub mod scheduler;
pub mod service;
pub mod simlab;
pub mod workflow;

pub use campaign::{
    run_campaign, CampaignConfig, CampaignResult, CampaignStatus, IterationSummary,
};
pub use canonical::{canonicalize, Payload, Scalar};
pub use executor::{Action, EventKind, RunEvent, RunState, RunStatus, StepStatus};
pub use records::{Record, RecordFilter, RecordStore, VerificationReport};
pub use scheduler::{BatchPolicy, Resource, Schedule, ScheduleEntry, TaskSpec};
pub use workflow::{parse_workflow, validate_workflow, Step, StepKind, Workflow};
