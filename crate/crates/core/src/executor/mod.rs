//! Executes workflow runs: a pure state machine plus a live engine that
//! records every event and dispatches steps through the gateway.

pub mod engine;
pub mod state;

pub use engine::{Executor, ExecutorConfig, RunError};
pub use state::{
    apply_action, complete_manual_task, dispatch_step, drive, finish_step, from_record, reduce,
    replay, start_run, to_record, Action, EventKind, ExecError, RunEvent, RunState, RunStatus,
    StepStatus,
};
