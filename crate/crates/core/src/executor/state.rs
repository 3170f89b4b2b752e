//! Run state machine. State is the fold of [`RunEvent`]s through [`reduce`];
//! every other function here only builds events and drives them through it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{Payload, Scalar};
use crate::records::Record;
use crate::scheduler::{plan, BatchPolicy, Resource, ScheduleError, TaskSpec};
use crate::workflow::{validate_workflow, Step, StepKind, Violation, Workflow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunStatus {
    Created,
    Running,
    Paused,
    Completed,
    Failed,
    Aborted,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RunStatus::Completed | RunStatus::Failed | RunStatus::Aborted
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepStatus {
    Pending,
    Ready,
    Dispatched,
    AwaitingHuman,
    Succeeded,
    Failed,
    Skipped,
}

impl StepStatus {
    pub fn in_flight(self) -> bool {
        matches!(self, StepStatus::Dispatched | StepStatus::AwaitingHuman)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    RunStarted,
    StepReady,
    StepDispatched,
    StepAwaitingHuman,
    StepSucceeded,
    StepFailed,
    RunPaused,
    RunResumed,
    RunAborted,
    RunCompleted,
    RunFailed,
}

impl EventKind {
    pub const ALL: [EventKind; 11] = [
        EventKind::RunStarted,
        EventKind::StepReady,
        EventKind::StepDispatched,
        EventKind::StepAwaitingHuman,
        EventKind::StepSucceeded,
        EventKind::StepFailed,
        EventKind::RunPaused,
        EventKind::RunResumed,
        EventKind::RunAborted,
        EventKind::RunCompleted,
        EventKind::RunFailed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::RunStarted => "RunStarted",
            EventKind::StepReady => "StepReady",
            EventKind::StepDispatched => "StepDispatched",
            EventKind::StepAwaitingHuman => "StepAwaitingHuman",
            EventKind::StepSucceeded => "StepSucceeded",
            EventKind::StepFailed => "StepFailed",
            EventKind::RunPaused => "RunPaused",
            EventKind::RunResumed => "RunResumed",
            EventKind::RunAborted => "RunAborted",
            EventKind::RunCompleted => "RunCompleted",
            EventKind::RunFailed => "RunFailed",
        }
    }

    /// Kinds after which a run never changes again.
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            EventKind::RunCompleted | EventKind::RunFailed | EventKind::RunAborted
        )
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = ExecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ExecError::BadRecord(format!("unknown event kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEvent {
    pub event_id: String,
    pub run_id: String,
    pub step_id: Option<String>,
    pub kind: EventKind,
    pub ts: u64,
    pub payload: Payload,
}

impl RunEvent {
    /// Position in the run's id sequence (`<run_id>-<n>`).
    pub fn number(&self) -> Option<u64> {
        self.event_id
            .strip_prefix(&self.run_id)?
            .strip_prefix('-')?
            .parse()
            .ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Pause,
    Resume,
    Abort,
}

impl FromStr for Action {
    type Err = ExecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pause" => Ok(Action::Pause),
            "resume" => Ok(Action::Resume),
            "abort" => Ok(Action::Abort),
            other => Err(ExecError::UnknownAction(other.to_owned())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("workflow is invalid: {0:?}")]
    Validation(Vec<Violation>),
    #[error(transparent)]
    Infeasible(#[from] ScheduleError),
    #[error("illegal transition: {0}")]
    IllegalTransition(String),
    #[error("unknown step `{0}`")]
    UnknownStep(String),
    #[error("step `{0}` is not awaiting a human")]
    NotAwaitingHuman(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("event for run `{got}` applied to run `{expected}`")]
    WrongRun { expected: String, got: String },
    #[error("bad record: {0}")]
    BadRecord(String),
}

fn illegal(msg: impl Into<String>) -> ExecError {
    ExecError::IllegalTransition(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunState {
    pub run_id: String,
    pub workflow: Arc<Workflow>,
    pub status: RunStatus,
    pub step_states: BTreeMap<String, StepStatus>,
    /// Timestamp of the last applied event.
    pub clock: u64,
    /// Steps that became ready while paused.
    pub buffered: BTreeSet<String>,
    /// Event ids handed out so far.
    pub issued: u64,
}

impl RunState {
    /// A fresh run in `Created`; nothing has happened yet.
    pub fn created(run_id: impl Into<String>, workflow: Arc<Workflow>) -> Self {
        let step_states = workflow
            .steps
            .iter()
            .map(|s| (s.id.clone(), StepStatus::Pending))
            .collect();
        Self {
            run_id: run_id.into(),
            workflow,
            status: RunStatus::Created,
            step_states,
            clock: 0,
            buffered: BTreeSet::new(),
            issued: 0,
        }
    }

    pub fn workflow_id(&self) -> &str {
        &self.workflow.id
    }

    pub fn step(&self, id: &str) -> Option<StepStatus> {
        self.step_states.get(id).copied()
    }

    fn set(&mut self, id: &str, status: StepStatus) {
        if let Some(s) = self.step_states.get_mut(id) {
            *s = status;
        }
    }

    /// Steps the driver may dispatch now, in id order.
    pub fn dispatchable(&self) -> Vec<&Step> {
        if self.status != RunStatus::Running {
            return Vec::new();
        }
        self.workflow
            .steps
            .iter()
            .filter(|s| self.step(&s.id) == Some(StepStatus::Ready))
            .collect()
    }

    pub fn in_flight(&self) -> Vec<&str> {
        self.step_states
            .iter()
            .filter(|(_, s)| s.in_flight())
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Builds the next event with a fresh id.
    pub fn issue(
        &mut self,
        kind: EventKind,
        step_id: Option<&str>,
        ts: u64,
        payload: Payload,
    ) -> RunEvent {
        let event_id = format!("{}-{}", self.run_id, self.issued);
        self.issued += 1;
        RunEvent {
            event_id,
            run_id: self.run_id.clone(),
            step_id: step_id.map(str::to_owned),
            kind,
            ts,
            payload,
        }
    }

    fn step_of(&self, event: &RunEvent) -> Result<&Step, ExecError> {
        let id = event
            .step_id
            .as_deref()
            .ok_or_else(|| illegal(format!("{} without step_id", event.kind)))?;
        self.workflow
            .step(id)
            .ok_or_else(|| ExecError::UnknownStep(id.to_owned()))
    }

    /// Pending dependents of `id` whose dependencies have all succeeded.
    fn newly_ready(&self, id: &str) -> Vec<String> {
        self.workflow
            .dependents(id)
            .filter(|d| self.step(&d.id) == Some(StepStatus::Pending))
            .filter(|d| {
                d.depends_on
                    .iter()
                    .all(|p| self.step(p) == Some(StepStatus::Succeeded))
            })
            .map(|d| d.id.clone())
            .collect()
    }

    fn all_succeeded(&self) -> bool {
        self.step_states
            .values()
            .all(|s| matches!(s, StepStatus::Succeeded | StepStatus::Skipped))
    }

    /// Every Pending step reachable from `id`.
    fn pending_descendants(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut queue = VecDeque::from([id.to_owned()]);
        while let Some(cur) = queue.pop_front() {
            for d in self.workflow.dependents(&cur) {
                if self.step(&d.id) == Some(StepStatus::Pending) && out.insert(d.id.clone()) {
                    queue.push_back(d.id.clone());
                }
            }
        }
        out
    }
}

fn one(key: &str, value: impl Into<Scalar>) -> Payload {
    Payload::from([(key.to_owned(), value.into())])
}

/// Applies one event. Returns the new state and the follow-up events the
/// transition implies; those must be applied next, in order.
pub fn reduce(state: &RunState, event: &RunEvent) -> Result<(RunState, Vec<RunEvent>), ExecError> {
    if event.run_id != state.run_id {
        return Err(ExecError::WrongRun {
            expected: state.run_id.clone(),
            got: event.run_id.clone(),
        });
    }
    if state.status.is_terminal() {
        return Err(illegal(format!("{} on {:?} run", event.kind, state.status)));
    }
    let mut s = state.clone();
    s.clock = event.ts;
    if let Some(n) = event.number() {
        s.issued = s.issued.max(n + 1);
    }
    let mut follow = Vec::new();
    let ts = event.ts;
    match event.kind {
        EventKind::RunStarted => {
            if s.status != RunStatus::Created {
                return Err(illegal("run already started"));
            }
            s.status = RunStatus::Running;
            let roots: Vec<String> = s
                .workflow
                .steps
                .iter()
                .filter(|st| st.depends_on.is_empty())
                .map(|st| st.id.clone())
                .collect();
            for id in roots {
                follow.push(s.issue(EventKind::StepReady, Some(&id), ts, Payload::new()));
            }
        }
        EventKind::StepReady => {
            let step = s.step_of(event)?.id.clone();
            if s.status != RunStatus::Running {
                return Err(illegal(format!("StepReady while {:?}", s.status)));
            }
            if s.step(&step) != Some(StepStatus::Pending) {
                return Err(illegal(format!("step `{step}` is not pending")));
            }
            s.set(&step, StepStatus::Ready);
        }
        EventKind::StepDispatched | EventKind::StepAwaitingHuman => {
            let st = s.step_of(event)?;
            let (id, kind) = (st.id.clone(), st.kind);
            if s.status != RunStatus::Running {
                return Err(illegal(format!("{} while {:?}", event.kind, s.status)));
            }
            if s.step(&id) != Some(StepStatus::Ready) {
                return Err(illegal(format!("step `{id}` is not ready")));
            }
            let (expected, next) = if event.kind == EventKind::StepDispatched {
                (
                    matches!(kind, StepKind::Instrument | StepKind::ModelCall),
                    StepStatus::Dispatched,
                )
            } else {
                (kind == StepKind::Manual, StepStatus::AwaitingHuman)
            };
            if !expected {
                return Err(illegal(format!(
                    "{} for {} step `{id}`",
                    event.kind,
                    kind.as_str()
                )));
            }
            s.set(&id, next);
        }
        EventKind::StepSucceeded => {
            let st = s.step_of(event)?;
            let (id, kind) = (st.id.clone(), st.kind);
            let ok = match s.step(&id) {
                Some(st) if st.in_flight() => true,
                Some(StepStatus::Ready) => kind == StepKind::Decision,
                _ => false,
            };
            if !ok {
                return Err(illegal(format!(
                    "step `{id}` cannot succeed from {:?}",
                    s.step(&id)
                )));
            }
            s.set(&id, StepStatus::Succeeded);
            for ready in s.newly_ready(&id) {
                if s.status == RunStatus::Paused {
                    s.buffered.insert(ready);
                } else {
                    follow.push(s.issue(EventKind::StepReady, Some(&ready), ts, Payload::new()));
                }
            }
            if s.all_succeeded() {
                follow.push(s.issue(EventKind::RunCompleted, None, ts, Payload::new()));
            }
        }
        EventKind::StepFailed => {
            let st = s.step_of(event)?;
            let (id, kind) = (st.id.clone(), st.kind);
            let ok = match s.step(&id) {
                Some(st) if st.in_flight() => true,
                Some(StepStatus::Ready) => kind == StepKind::Decision,
                _ => false,
            };
            if !ok {
                return Err(illegal(format!(
                    "step `{id}` cannot fail from {:?}",
                    s.step(&id)
                )));
            }
            s.set(&id, StepStatus::Failed);
            for skipped in s.pending_descendants(&id) {
                s.set(&skipped, StepStatus::Skipped);
                s.buffered.remove(&skipped);
            }
            let reason = event
                .payload
                .get("reason")
                .cloned()
                .unwrap_or_else(|| Scalar::from("step failed"));
            let mut payload = one("failed_step", id.as_str());
            payload.insert("reason".into(), reason);
            follow.push(s.issue(EventKind::RunFailed, None, ts, payload));
        }
        EventKind::RunPaused => {
            if s.status != RunStatus::Running {
                return Err(illegal(format!("pause on {:?} run", s.status)));
            }
            s.status = RunStatus::Paused;
        }
        EventKind::RunResumed => {
            if s.status != RunStatus::Paused {
                return Err(illegal(format!("resume on {:?} run", s.status)));
            }
            s.status = RunStatus::Running;
            for id in std::mem::take(&mut s.buffered) {
                follow.push(s.issue(EventKind::StepReady, Some(&id), ts, Payload::new()));
            }
        }
        EventKind::RunAborted => {
            s.status = RunStatus::Aborted;
            let flying: Vec<String> = s.in_flight().into_iter().map(str::to_owned).collect();
            for id in flying {
                s.set(&id, StepStatus::Failed);
            }
            s.buffered.clear();
        }
        EventKind::RunCompleted => {
            if !s.all_succeeded() || s.status == RunStatus::Created {
                return Err(illegal("run has unfinished steps"));
            }
            s.status = RunStatus::Completed;
        }
        EventKind::RunFailed => {
            if !s.step_states.values().any(|st| *st == StepStatus::Failed) {
                return Err(illegal("run failure without a failed step"));
            }
            s.status = RunStatus::Failed;
        }
    }
    Ok((s, follow))
}

/// Applies `event` and then all follow-ups, breadth first. Returns every
/// applied event in application order.
pub fn drive(state: &RunState, event: RunEvent) -> Result<(RunState, Vec<RunEvent>), ExecError> {
    let mut state = state.clone();
    let mut applied = Vec::new();
    let mut queue = VecDeque::from([event]);
    while let Some(ev) = queue.pop_front() {
        let (next, follow) = reduce(&state, &ev)?;
        state = next;
        applied.push(ev);
        queue.extend(follow);
    }
    Ok((state, applied))
}

/// Validates `workflow`, checks that `resources` can host every step, and
/// starts the run.
pub fn start_run(
    run_id: &str,
    workflow: Arc<Workflow>,
    resources: &[Resource],
    ts: u64,
) -> Result<(RunState, Vec<RunEvent>), ExecError> {
    let violations = validate_workflow(&workflow);
    if !violations.is_empty() {
        return Err(ExecError::Validation(violations));
    }
    let tasks: Vec<TaskSpec> = workflow
        .steps
        .iter()
        .filter(|s| !s.requires.is_empty())
        .map(task_for)
        .collect();
    plan(&tasks, resources, 0, &BatchPolicy::default())?;
    let mut state = RunState::created(run_id, workflow.clone());
    let ev = state.issue(
        EventKind::RunStarted,
        None,
        ts,
        one("workflow_id", workflow.id.as_str()),
    );
    drive(&state, ev)
}

pub fn task_for(step: &Step) -> TaskSpec {
    let mut t = TaskSpec::new(step.id.clone(), 0, step.duration_s);
    t.requires = step.requires.clone();
    t.batch_key = step.batch_key.clone();
    t
}

pub fn apply_action(
    state: &RunState,
    action: Action,
    ts: u64,
) -> Result<(RunState, Vec<RunEvent>), ExecError> {
    let kind = match (action, state.status) {
        (_, st) if st.is_terminal() => return Err(illegal(format!("{action:?} on {st:?} run"))),
        (Action::Pause, RunStatus::Running) => EventKind::RunPaused,
        (Action::Resume, RunStatus::Paused) => EventKind::RunResumed,
        (Action::Abort, _) => EventKind::RunAborted,
        (a, st) => return Err(illegal(format!("{a:?} on {st:?} run"))),
    };
    let mut s = state.clone();
    let payload = if kind == EventKind::RunAborted {
        one("reason", "aborted")
    } else {
        Payload::new()
    };
    let ev = s.issue(kind, None, ts, payload);
    drive(&s, ev)
}

/// Marks a manual step done. The first returned event is its StepSucceeded.
pub fn complete_manual_task(
    state: &RunState,
    step_id: &str,
    operator: &str,
    note: &str,
    ts: u64,
) -> Result<(RunState, Vec<RunEvent>), ExecError> {
    match state.step(step_id) {
        None => return Err(ExecError::UnknownStep(step_id.to_owned())),
        Some(StepStatus::AwaitingHuman) => {}
        Some(_) => return Err(ExecError::NotAwaitingHuman(step_id.to_owned())),
    }
    let mut s = state.clone();
    let mut payload = one("operator", operator);
    payload.insert("note".into(), note.into());
    let ev = s.issue(EventKind::StepSucceeded, Some(step_id), ts, payload);
    drive(&s, ev)
}

/// Moves a Ready step onto its execution path: instrument and model-call
/// steps are dispatched, manual steps wait for a human, decision steps
/// resolve immediately.
pub fn dispatch_step(
    state: &RunState,
    step_id: &str,
    ts: u64,
) -> Result<(RunState, Vec<RunEvent>), ExecError> {
    let step = state
        .workflow
        .step(step_id)
        .ok_or_else(|| ExecError::UnknownStep(step_id.to_owned()))?;
    let (kind, payload) = match step.kind {
        StepKind::Instrument | StepKind::ModelCall => (EventKind::StepDispatched, Payload::new()),
        StepKind::Manual => (EventKind::StepAwaitingHuman, Payload::new()),
        StepKind::Decision => (EventKind::StepSucceeded, one("decision", "auto")),
    };
    let mut s = state.clone();
    let ev = s.issue(kind, Some(step_id), ts, payload);
    drive(&s, ev)
}

/// Result of a dispatched step coming back from the lab.
pub fn finish_step(
    state: &RunState,
    step_id: &str,
    outcome: Result<Payload, String>,
    ts: u64,
) -> Result<(RunState, Vec<RunEvent>), ExecError> {
    let mut s = state.clone();
    let ev = match outcome {
        Ok(payload) => s.issue(EventKind::StepSucceeded, Some(step_id), ts, payload),
        Err(reason) => s.issue(
            EventKind::StepFailed,
            Some(step_id),
            ts,
            one("reason", reason),
        ),
    };
    drive(&s, ev)
}

/// Folds recorded events from a fresh state. Follow-ups are not generated
/// anew: they are already part of the record.
pub fn replay<'a>(
    run_id: &str,
    workflow: Arc<Workflow>,
    events: impl IntoIterator<Item = &'a RunEvent>,
) -> Result<RunState, ExecError> {
    let mut state = RunState::created(run_id, workflow);
    for ev in events {
        state = reduce(&state, ev)?.0;
    }
    Ok(state)
}

pub const EVENT_ID_KEY: &str = "event_id";
pub const STEP_ID_KEY: &str = "step_id";

/// Record kind and payload for an event. The event and step ids travel as
/// reserved payload keys.
pub fn to_record(event: &RunEvent) -> (String, Payload) {
    let mut payload = event.payload.clone();
    payload.insert(EVENT_ID_KEY.into(), event.event_id.as_str().into());
    if let Some(step) = &event.step_id {
        payload.insert(STEP_ID_KEY.into(), step.as_str().into());
    }
    (event.kind.as_str().to_owned(), payload)
}

pub fn from_record(record: &Record) -> Result<RunEvent, ExecError> {
    let kind: EventKind = record.kind.parse()?;
    let mut payload = record.payload.clone();
    let event_id = match payload.remove(EVENT_ID_KEY) {
        Some(Scalar::Str(id)) => id,
        _ => {
            return Err(ExecError::BadRecord(format!(
                "record {} has no event_id",
                record.seq
            )))
        }
    };
    let step_id = match payload.remove(STEP_ID_KEY) {
        Some(Scalar::Str(id)) => Some(id),
        None => None,
        Some(other) => {
            return Err(ExecError::BadRecord(format!(
                "step_id {other} is not a string"
            )))
        }
    };
    Ok(RunEvent {
        event_id,
        run_id: record.run_id.clone(),
        step_id,
        kind,
        ts: record.ts,
        payload,
    })
}
