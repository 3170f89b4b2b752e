//! Live runs. Each run owns one task that serializes every input (actions,
//! manual completions, step results) through the state machine and appends
//! the resulting events to the record store before acting on them.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};

use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tracing::{debug, info, warn};

use crate::canonical::{Payload, Scalar};
use crate::clock::Clock;
use crate::gateway::{Gateway, GatewayError};
use crate::records::{RecordError, RecordFilter, RecordStore};
use crate::scheduler::{plan, BatchPolicy, Resource};
use crate::workflow::{
    parse_workflow, validate_workflow, Step, StepKind, Violation, Workflow, WorkflowError,
};

use super::state::{
    apply_action, complete_manual_task, dispatch_step, finish_step, from_record, replay, start_run,
    task_for, to_record, Action, EventKind, ExecError, RunEvent, RunState,
};

/// Chain holding every submitted workflow document.
pub const WORKFLOW_CHAIN: &str = "workflows";
pub const WORKFLOW_SUBMITTED: &str = "workflow_submitted";

#[derive(Debug, Clone, Default)]
pub struct ExecutorConfig {
    pub resources: Vec<Resource>,
    pub policy: BatchPolicy,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("unknown workflow `{0}`")]
    UnknownWorkflow(String),
    #[error(transparent)]
    Parse(#[from] WorkflowError),
    #[error("workflow has {} violation(s)", .0.len())]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("run `{0}` is not active in this process")]
    Inactive(String),
}

enum Command {
    Action(Action, oneshot::Sender<Result<RunState, RunError>>),
    Complete {
        step: String,
        operator: String,
        note: String,
        reply: oneshot::Sender<Result<RunState, RunError>>,
    },
    Finished {
        step: String,
        outcome: Result<Payload, String>,
    },
}

pub struct Executor {
    store: Arc<RecordStore>,
    gateway: Arc<Gateway>,
    clock: Arc<dyn Clock>,
    config: ExecutorConfig,
    workflows: RwLock<BTreeMap<String, Arc<Workflow>>>,
    runs: Mutex<HashMap<String, mpsc::UnboundedSender<Command>>>,
    start_lock: tokio::sync::Mutex<()>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Executor {
    /// Rebuilds the workflow registry from the record store.
    pub fn new(
        store: Arc<RecordStore>,
        gateway: Arc<Gateway>,
        clock: Arc<dyn Clock>,
        config: ExecutorConfig,
    ) -> Arc<Self> {
        let mut workflows = BTreeMap::new();
        for rec in store.query(&RecordFilter::chain(WORKFLOW_CHAIN).kind(WORKFLOW_SUBMITTED)) {
            let Some(doc) = rec.payload.get("document").and_then(Scalar::as_str) else {
                continue;
            };
            match parse_workflow(doc) {
                Ok(w) => {
                    workflows.insert(w.id.clone(), Arc::new(w));
                }
                Err(e) => warn!(seq = rec.seq, error = %e, "stored workflow no longer parses"),
            }
        }
        Arc::new(Self {
            store,
            gateway,
            clock,
            config,
            workflows: RwLock::new(workflows),
            runs: Mutex::new(HashMap::new()),
            start_lock: tokio::sync::Mutex::new(()),
        })
    }

    pub fn store(&self) -> &Arc<RecordStore> {
        &self.store
    }

    pub fn workflow(&self, id: &str) -> Option<Arc<Workflow>> {
        self.workflows
            .read()
            .expect("workflows lock")
            .get(id)
            .cloned()
    }

    pub fn workflow_ids(&self) -> Vec<String> {
        self.workflows
            .read()
            .expect("workflows lock")
            .keys()
            .cloned()
            .collect()
    }

    /// Parses, validates and records a workflow document. Re-submitting an
    /// id replaces the definition used by later runs.
    pub fn submit_workflow(&self, text: &str) -> Result<Arc<Workflow>, RunError> {
        let w = parse_workflow(text)?;
        let violations = validate_workflow(&w);
        if !violations.is_empty() {
            return Err(RunError::Invalid(violations));
        }
        let payload = Payload::from([
            ("workflow_id".to_owned(), Scalar::from(w.id.as_str())),
            ("document".to_owned(), Scalar::from(text)),
        ]);
        self.store.append(
            WORKFLOW_CHAIN,
            WORKFLOW_SUBMITTED,
            payload,
            self.clock.now_ms(),
        )?;
        let w = Arc::new(w);
        self.workflows
            .write()
            .expect("workflows lock")
            .insert(w.id.clone(), w.clone());
        Ok(w)
    }

    fn commit(&self, events: &[RunEvent]) -> Result<(), RunError> {
        for ev in events {
            let (kind, payload) = to_record(ev);
            self.store.append(&ev.run_id, &kind, payload, ev.ts)?;
        }
        Ok(())
    }

    /// Starts a run of a registered workflow.
    pub async fn start(self: &Arc<Self>, workflow_id: &str) -> Result<RunState, RunError> {
        let workflow = self
            .workflow(workflow_id)
            .ok_or_else(|| RunError::UnknownWorkflow(workflow_id.to_owned()))?;
        let _guard = self.start_lock.lock().await;
        let n = self
            .store
            .chain_ids()
            .iter()
            .filter(|c| c.starts_with("run-"))
            .count();
        let run_id = format!("run-{:04}", n + 1);
        let (state, events) = start_run(
            &run_id,
            workflow,
            &self.config.resources,
            self.clock.now_ms(),
        )?;
        self.commit(&events)?;
        let (tx, rx) = mpsc::unbounded_channel();
        self.runs
            .lock()
            .expect("runs lock")
            .insert(run_id.clone(), tx.clone());
        info!(run = %run_id, workflow = %workflow_id, "run started");
        let exec = self.clone();
        let snapshot = state.clone();
        tokio::spawn(async move { exec.run_loop(state, tx, rx).await });
        Ok(snapshot)
    }

    /// Current state, rebuilt from the record chain.
    pub fn state(&self, run_id: &str) -> Result<RunState, RunError> {
        let records = self.store.query(&RecordFilter::chain(run_id));
        let first = records
            .first()
            .ok_or_else(|| RunError::UnknownRun(run_id.to_owned()))?;
        let workflow_id = first
            .payload
            .get("workflow_id")
            .and_then(Scalar::as_str)
            .ok_or_else(|| RunError::UnknownRun(run_id.to_owned()))?;
        let workflow = self
            .workflow(workflow_id)
            .ok_or_else(|| RunError::UnknownWorkflow(workflow_id.to_owned()))?;
        let events = records
            .iter()
            .map(from_record)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(replay(run_id, workflow, &events)?)
    }

    pub fn run_ids(&self) -> Vec<String> {
        self.store
            .chain_ids()
            .into_iter()
            .filter(|c| c.starts_with("run-"))
            .collect()
    }

    fn sender(&self, run_id: &str) -> Result<mpsc::UnboundedSender<Command>, RunError> {
        if let Some(tx) = self.runs.lock().expect("runs lock").get(run_id) {
            return Ok(tx.clone());
        }
        // Known but not live here: report what the record says.
        let state = self.state(run_id)?;
        if state.status.is_terminal() {
            Err(ExecError::IllegalTransition(format!("run is {:?}", state.status)).into())
        } else {
            Err(RunError::Inactive(run_id.to_owned()))
        }
    }

    async fn ask(
        &self,
        run_id: &str,
        make: impl FnOnce(oneshot::Sender<Result<RunState, RunError>>) -> Command,
    ) -> Result<RunState, RunError> {
        let tx = self.sender(run_id)?;
        let (reply, rx) = oneshot::channel();
        if tx.send(make(reply)).is_err() {
            return self
                .sender(run_id)
                .and_then(|_| Err(RunError::Inactive(run_id.to_owned())));
        }
        match rx.await {
            Ok(r) => r,
            // The loop ended between the send and the reply: the run is terminal now.
            Err(_) => {
                Err(ExecError::IllegalTransition(format!("run `{run_id}` already finished")).into())
            }
        }
    }

    pub async fn action(&self, run_id: &str, action: Action) -> Result<RunState, RunError> {
        self.ask(run_id, |reply| Command::Action(action, reply))
            .await
    }

    pub async fn complete(
        &self,
        run_id: &str,
        step: &str,
        operator: &str,
        note: &str,
    ) -> Result<RunState, RunError> {
        self.ask(run_id, |reply| Command::Complete {
            step: step.to_owned(),
            operator: operator.to_owned(),
            note: note.to_owned(),
            reply,
        })
        .await
    }

    /// Waits until the run's chain records a terminal event.
    pub async fn wait_terminal(&self, run_id: &str) -> Result<RunState, RunError> {
        let mut rx = self.store.subscribe();
        loop {
            let state = self.state(run_id)?;
            if state.status.is_terminal() {
                return Ok(state);
            }
            if rx.changed().await.is_err() {
                return Ok(state);
            }
        }
    }

    async fn run_loop(
        self: Arc<Self>,
        mut state: RunState,
        tx: mpsc::UnboundedSender<Command>,
        mut rx: mpsc::UnboundedReceiver<Command>,
    ) {
        let mut in_use: HashMap<String, u32> = HashMap::new();
        loop {
            if let Err(e) = self.dispatch_ready(&mut state, &mut in_use, &tx) {
                warn!(run = %state.run_id, error = %e, "dispatch failed");
            }
            if state.status.is_terminal() {
                break;
            }
            let Some(cmd) = rx.recv().await else { break };
            let now = self.clock.now_ms();
            match cmd {
                Command::Action(action, reply) => {
                    let r = apply_action(&state, action, now)
                        .map_err(RunError::from)
                        .and_then(|(next, ev)| {
                            self.commit(&ev)?;
                            state = next;
                            Ok(state.clone())
                        });
                    let _ = reply.send(r);
                }
                Command::Complete {
                    step,
                    operator,
                    note,
                    reply,
                } => {
                    let r = complete_manual_task(&state, &step, &operator, &note, now)
                        .map_err(RunError::from)
                        .and_then(|(next, ev)| {
                            self.commit(&ev)?;
                            state = next;
                            Ok(state.clone())
                        });
                    if r.is_ok() {
                        release(&mut in_use, state.workflow.step(&step));
                    }
                    let _ = reply.send(r);
                }
                Command::Finished { step, outcome } => {
                    release(&mut in_use, state.workflow.step(&step));
                    match finish_step(&state, &step, outcome, now) {
                        Ok((next, ev)) => match self.commit(&ev) {
                            Ok(()) => state = next,
                            Err(e) => {
                                warn!(run = %state.run_id, error = %e, "could not record step result")
                            }
                        },
                        Err(e) => {
                            debug!(run = %state.run_id, %step, error = %e, "late step result ignored")
                        }
                    }
                }
            }
        }
        info!(run = %state.run_id, status = ?state.status, "run finished");
        self.runs.lock().expect("runs lock").remove(&state.run_id);
    }

    /// Dispatches Ready steps in scheduler priority order while their
    /// resources are free.
    fn dispatch_ready(
        &self,
        state: &mut RunState,
        in_use: &mut HashMap<String, u32>,
        tx: &mpsc::UnboundedSender<Command>,
    ) -> Result<(), RunError> {
        loop {
            let ready: Vec<Step> = state.dispatchable().into_iter().cloned().collect();
            if ready.is_empty() {
                return Ok(());
            }
            let mut progressed = false;
            for step in self.priority_order(&ready) {
                if !fits(&self.config.resources, in_use, &step) {
                    continue;
                }
                let (next, ev) = dispatch_step(state, &step.id, self.clock.now_ms())?;
                self.commit(&ev)?;
                *state = next;
                progressed = true;
                if step.kind != StepKind::Decision {
                    claim(in_use, &step);
                }
                if matches!(step.kind, StepKind::Instrument | StepKind::ModelCall) {
                    self.spawn_call(&state.run_id, step, tx.clone());
                }
                if state.status.is_terminal() {
                    return Ok(());
                }
            }
            if !progressed {
                return Ok(());
            }
        }
    }

    fn priority_order(&self, ready: &[Step]) -> Vec<Step> {
        let tasks: Vec<_> = ready
            .iter()
            .filter(|s| !s.requires.is_empty())
            .map(task_for)
            .collect();
        let mut rank: HashMap<String, (u64, usize)> = HashMap::new();
        if let Ok(schedule) = plan(&tasks, &self.config.resources, 0, &self.config.policy) {
            for (i, e) in schedule.entries.iter().enumerate() {
                for id in &e.task_ids {
                    rank.insert(id.clone(), (e.start, i));
                }
            }
        }
        let mut out = ready.to_vec();
        out.sort_by_key(|s| (rank.get(&s.id).copied().unwrap_or((0, 0)), s.id.clone()));
        out
    }

    fn spawn_call(&self, run_id: &str, step: Step, tx: mpsc::UnboundedSender<Command>) {
        let gateway = self.gateway.clone();
        let run_id = run_id.to_owned();
        tokio::spawn(async move {
            let (op, args) = step_request(&run_id, &step);
            let outcome = match gateway.call(&op, args).await {
                Ok(result) => {
                    let mut payload = Payload::new();
                    flatten("result", &result, &mut payload);
                    Ok(payload)
                }
                Err(GatewayError::Remote { code, message }) => Err(format!("{code}: {message}")),
                Err(e) => Err(e.to_string()),
            };
            let _ = tx.send(Command::Finished {
                step: step.id.clone(),
                outcome,
            });
        });
    }
}

fn step_request(run_id: &str, step: &Step) -> (String, Value) {
    let params: serde_json::Map<String, Value> = step
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.to_json()))
        .collect();
    match step.kind {
        StepKind::ModelCall => {
            let mut args = params;
            let op = args
                .remove("op")
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_else(|| "score".into());
            args.entry("scope").or_insert_with(|| json!(run_id));
            (op, Value::Object(args))
        }
        _ => {
            let class = step
                .requires
                .iter()
                .find(|r| r.class != crate::workflow::PERSONNEL)
                .map(|r| r.class.clone());
            (
                "instrument.run".into(),
                json!({
                    "step_id": step.id,
                    "duration_s": step.duration_s,
                    "resource_class": class.unwrap_or_else(|| "instrument".into()),
                    "params": params,
                }),
            )
        }
    }
}

/// Copies the scalar leaves of `value` into `out` under dotted keys.
/// Arrays and floats are kept as their JSON text.
pub fn flatten(prefix: &str, value: &Value, out: &mut Payload) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        Value::Null => {}
        Value::Bool(b) => {
            out.insert(prefix.to_owned(), Scalar::Bool(*b));
        }
        Value::String(s) => {
            out.insert(prefix.to_owned(), Scalar::Str(s.clone()));
        }
        Value::Number(n) => {
            let v = n
                .as_i64()
                .map(Scalar::Int)
                .unwrap_or_else(|| Scalar::Str(n.to_string()));
            out.insert(prefix.to_owned(), v);
        }
        Value::Array(_) => {
            out.insert(prefix.to_owned(), Scalar::Str(value.to_string()));
        }
    }
}

fn class_capacity(resources: &[Resource], class: &str) -> u32 {
    resources
        .iter()
        .filter(|r| r.class == class)
        .map(|r| r.capacity)
        .sum()
}

fn fits(resources: &[Resource], in_use: &HashMap<String, u32>, step: &Step) -> bool {
    step.requires.iter().all(|r| {
        in_use.get(&r.class).copied().unwrap_or(0) + r.qty <= class_capacity(resources, &r.class)
    })
}

fn claim(in_use: &mut HashMap<String, u32>, step: &Step) {
    for r in &step.requires {
        *in_use.entry(r.class.clone()).or_default() += r.qty;
    }
}

fn release(in_use: &mut HashMap<String, u32>, step: Option<&Step>) {
    for r in step.map(|s| s.requires.as_slice()).unwrap_or_default() {
        if let Some(n) = in_use.get_mut(&r.class) {
            *n = n.saturating_sub(r.qty);
        }
    }
}

/// Whether a record kind ends a run's chain.
pub fn is_finished(kind: &str) -> bool {
    kind.parse::<EventKind>().is_ok_and(EventKind::is_terminal)
}
