//! Declarative workflow documents: YAML parsing, structural validation and
//! the topological frontier used by the executor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{Payload, Scalar};

pub const PERSONNEL: &str = "personnel";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Instrument,
    Manual,
    ModelCall,
    Decision,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Instrument => "instrument",
            StepKind::Manual => "manual",
            StepKind::ModelCall => "model_call",
            StepKind::Decision => "decision",
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceRequirement {
    pub class: String,
    pub qty: u32,
}

impl ResourceRequirement {
    pub fn new(class: impl Into<String>, qty: u32) -> Self {
        Self {
            class: class.into(),
            qty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabwareDecl {
    pub id: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Step {
    pub id: String,
    pub kind: StepKind,
    #[serde(skip_serializing_if = "BTreeSet::is_empty")]
    pub depends_on: BTreeSet<String>,
    pub duration_s: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub requires: Vec<ResourceRequirement>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_key: Option<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub params: Payload,
}

impl Step {
    pub fn new(id: impl Into<String>, kind: StepKind, duration_s: u64) -> Self {
        Self {
            id: id.into(),
            kind,
            depends_on: BTreeSet::new(),
            duration_s,
            requires: Vec::new(),
            batch_key: None,
            params: Payload::new(),
        }
    }

    pub fn after<I, S>(mut self, deps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.depends_on.extend(deps.into_iter().map(Into::into));
        self
    }

    pub fn requiring(mut self, class: impl Into<String>, qty: u32) -> Self {
        self.requires.push(ResourceRequirement::new(class, qty));
        self
    }

    pub fn with_param(mut self, key: impl Into<String>, value: impl Into<Scalar>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Workflow {
    pub id: String,
    pub name: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub labware: Vec<LabwareDecl>,
    pub steps: Vec<Step>,
}

impl Workflow {
    pub fn step(&self, id: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.id == id)
    }

    pub fn step_ids(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.id.as_str())
    }

    /// Step ids that list `id` in their `depends_on`, in document order.
    pub fn dependents<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Step> + 'a {
        self.steps.iter().filter(move |s| s.depends_on.contains(id))
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("workflow serializes")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkflowError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unknown step `{0}`")]
    UnknownStep(String),
}

/// One broken invariant. Every variant names the rule it violates and, where
/// one exists, the offending step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Violation {
    InvalidWorkflowId { id: String },
    DuplicateStep { step_id: String },
    UnknownDependency { step_id: String, dependency: String },
    Cycle { steps: Vec<String> },
    Requirement { step_id: String, message: String },
    Duration { step_id: String },
    Quantity { step_id: String, class: String },
}

impl Violation {
    pub fn rule(&self) -> &'static str {
        match self {
            Violation::InvalidWorkflowId { .. } => "invalid_workflow_id",
            Violation::DuplicateStep { .. } => "duplicate_step",
            Violation::UnknownDependency { .. } => "unknown_dependency",
            Violation::Cycle { .. } => "cycle",
            Violation::Requirement { .. } => "requirement",
            Violation::Duration { .. } => "duration",
            Violation::Quantity { .. } => "quantity",
        }
    }

    pub fn step_id(&self) -> Option<&str> {
        match self {
            Violation::InvalidWorkflowId { .. } => None,
            Violation::Cycle { steps } => steps.first().map(String::as_str),
            Violation::DuplicateStep { step_id }
            | Violation::UnknownDependency { step_id, .. }
            | Violation::Requirement { step_id, .. }
            | Violation::Duration { step_id }
            | Violation::Quantity { step_id, .. } => Some(step_id),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { steps } => write!(f, "cycle: {}", steps.join(" -> ")),
            Violation::Requirement { step_id, message } => write!(f, "{step_id}: {message}"),
            Violation::UnknownDependency {
                step_id,
                dependency,
            } => {
                write!(f, "{step_id}: unknown dependency `{dependency}`")
            }
            Violation::Quantity { step_id, class } => {
                write!(f, "{step_id}: qty of `{class}` must be >= 1")
            }
            other => write!(f, "{}: {}", other.rule(), other.step_id().unwrap_or("-")),
        }
    }
}

// Raw document shape. Serde enforces the key set; semantic checks happen in
// `Workflow::try_from`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkflow {
    id: String,
    name: String,
    #[serde(default)]
    labware: Vec<LabwareDecl>,
    steps: Vec<RawStep>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    id: String,
    kind: StepKind,
    #[serde(default)]
    depends_on: Vec<String>,
    duration_s: u64,
    #[serde(default)]
    requires: Vec<ResourceRequirement>,
    #[serde(default)]
    batch_key: Option<String>,
    #[serde(default)]
    params: BTreeMap<String, serde_yaml::Value>,
}

/// Parses a YAML document into a value, mapping failures to a syntax error
/// with a 1-based line number.
pub(crate) fn parse_yaml_value(text: &str) -> Result<serde_yaml::Value, WorkflowError> {
    serde_yaml::from_str::<serde_yaml::Value>(text).map_err(|e| WorkflowError::Syntax {
        line: e.location().map(|l| l.line()).unwrap_or(0),
        message: e.to_string(),
    })
}

pub(crate) fn yaml_scalar(key: &str, value: &serde_yaml::Value) -> Result<Scalar, WorkflowError> {
    use serde_yaml::Value as Y;
    match value {
        Y::Bool(b) => Ok(Scalar::Bool(*b)),
        Y::String(s) => Ok(Scalar::Str(s.clone())),
        Y::Number(n) => n.as_i64().map(Scalar::Int).ok_or_else(|| {
            WorkflowError::Schema(format!("param `{key}`: only integer numbers are allowed"))
        }),
        _ => Err(WorkflowError::Schema(format!(
            "param `{key}`: expected string, integer or boolean"
        ))),
    }
}

pub fn parse_workflow(text: &str) -> Result<Workflow, WorkflowError> {
    let value = parse_yaml_value(text)?;
    if value.is_null() {
        return Err(WorkflowError::Schema("empty document".into()));
    }
    let raw: RawWorkflow =
        serde_yaml::from_value(value).map_err(|e| WorkflowError::Schema(e.to_string()))?;

    let mut seen = BTreeSet::new();
    let mut steps = Vec::with_capacity(raw.steps.len());
    for s in raw.steps {
        if !seen.insert(s.id.clone()) {
            return Err(WorkflowError::Schema(format!(
                "duplicate step id `{}`",
                s.id
            )));
        }
        let params = s
            .params
            .iter()
            .map(|(k, v)| yaml_scalar(k, v).map(|sc| (k.clone(), sc)))
            .collect::<Result<Payload, _>>()?;
        steps.push(Step {
            id: s.id,
            kind: s.kind,
            depends_on: s.depends_on.into_iter().collect(),
            duration_s: s.duration_s,
            requires: s.requires,
            batch_key: s.batch_key,
            params,
        });
    }
    Ok(Workflow {
        id: raw.id,
        name: raw.name,
        labware: raw.labware,
        steps,
    })
}

fn is_slug(id: &str) -> bool {
    (1..=64).contains(&id.len())
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

pub fn validate_workflow(w: &Workflow) -> Vec<Violation> {
    let mut out = Vec::new();
    if !is_slug(&w.id) {
        out.push(Violation::InvalidWorkflowId { id: w.id.clone() });
    }

    let mut ids = BTreeSet::new();
    for s in &w.steps {
        if !ids.insert(s.id.as_str()) {
            out.push(Violation::DuplicateStep {
                step_id: s.id.clone(),
            });
        }
    }

    for s in &w.steps {
        for dep in &s.depends_on {
            if !ids.contains(dep.as_str()) {
                out.push(Violation::UnknownDependency {
                    step_id: s.id.clone(),
                    dependency: dep.clone(),
                });
            }
        }
        if s.duration_s < 1 {
            out.push(Violation::Duration {
                step_id: s.id.clone(),
            });
        }
        for r in &s.requires {
            if r.qty < 1 {
                out.push(Violation::Quantity {
                    step_id: s.id.clone(),
                    class: r.class.clone(),
                });
            }
        }
        let has_personnel = s.requires.iter().any(|r| r.class == PERSONNEL);
        let has_equipment = s.requires.iter().any(|r| r.class != PERSONNEL);
        match s.kind {
            StepKind::Manual if !has_personnel => out.push(Violation::Requirement {
                step_id: s.id.clone(),
                message: "manual step needs a personnel requirement".into(),
            }),
            StepKind::Instrument | StepKind::ModelCall if !has_equipment => {
                out.push(Violation::Requirement {
                    step_id: s.id.clone(),
                    message: format!("{} step needs a non-personnel requirement", s.kind),
                })
            }
            _ => {}
        }
    }

    out.extend(
        find_cycles(w)
            .into_iter()
            .map(|steps| Violation::Cycle { steps }),
    );
    out
}

/// Strongly connected components with more than one node, or a self-loop,
/// each reported as a sorted id list.
fn find_cycles(w: &Workflow) -> Vec<Vec<String>> {
    let index: BTreeMap<&str, usize> = w
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let adj: Vec<Vec<usize>> = w
        .steps
        .iter()
        .map(|s| {
            s.depends_on
                .iter()
                .filter_map(|d| index.get(d.as_str()).copied())
                .collect()
        })
        .collect();

    struct Tarjan<'a> {
        adj: &'a [Vec<usize>],
        counter: usize,
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        sccs: Vec<Vec<usize>>,
    }

    impl Tarjan<'_> {
        fn visit(&mut self, v: usize) {
            self.index[v] = Some(self.counter);
            self.low[v] = self.counter;
            self.counter += 1;
            self.stack.push(v);
            self.on_stack[v] = true;
            for &u in &self.adj[v] {
                match self.index[u] {
                    None => {
                        self.visit(u);
                        self.low[v] = self.low[v].min(self.low[u]);
                    }
                    Some(iu) if self.on_stack[u] => self.low[v] = self.low[v].min(iu),
                    Some(_) => {}
                }
            }
            if Some(self.low[v]) == self.index[v] {
                let mut scc = Vec::new();
                while let Some(u) = self.stack.pop() {
                    self.on_stack[u] = false;
                    scc.push(u);
                    if u == v {
                        break;
                    }
                }
                self.sccs.push(scc);
            }
        }
    }

    let n = w.steps.len();
    let mut t = Tarjan {
        adj: &adj,
        counter: 0,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        sccs: Vec::new(),
    };
    for v in 0..n {
        if t.index[v].is_none() {
            t.visit(v);
        }
    }

    let mut cycles: Vec<Vec<String>> = t
        .sccs
        .into_iter()
        .filter(|scc| scc.len() > 1 || adj[scc[0]].contains(&scc[0]))
        .map(|scc| {
            let mut ids: Vec<String> = scc.into_iter().map(|i| w.steps[i].id.clone()).collect();
            ids.sort();
            ids
        })
        .collect();
    cycles.sort();
    cycles
}

/// Steps not yet completed whose dependencies are all completed.
pub fn ready_steps(
    w: &Workflow,
    completed: &BTreeSet<String>,
) -> Result<BTreeSet<String>, WorkflowError> {
    if let Some(foreign) = completed.iter().find(|id| w.step(id).is_none()) {
        return Err(WorkflowError::UnknownStep(foreign.clone()));
    }
    Ok(w.steps
        .iter()
        .filter(|s| !completed.contains(&s.id) && s.depends_on.is_subset(completed))
        .map(|s| s.id.clone())
        .collect())
}
