//! List scheduling of tasks onto capacity-limited resources, with greedy
//! time-window batching of tasks that share a batch key.
//!
//! Time is integer seconds and every interval is half-open `[start, end)`.
//! A [`ScheduleEntry`] claims one unit of a resource per occurrence of that
//! resource's id in `resource_ids`, so an entry needing two plate positions
//! on `reader-1` lists `reader-1` twice.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workflow::ResourceRequirement;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resource {
    pub id: String,
    pub class: String,
    pub capacity: u32,
}

impl Resource {
    pub fn new(id: impl Into<String>, class: impl Into<String>, capacity: u32) -> Self {
        Self {
            id: id.into(),
            class: class.into(),
            capacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub ready_at: u64,
    pub duration_s: u64,
    pub requires: Vec<ResourceRequirement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_key: Option<String>,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, ready_at: u64, duration_s: u64) -> Self {
        Self {
            id: id.into(),
            ready_at,
            duration_s,
            requires: Vec::new(),
            batch_key: None,
        }
    }

    pub fn requiring(mut self, class: impl Into<String>, qty: u32) -> Self {
        self.requires.push(ResourceRequirement::new(class, qty));
        self
    }

    pub fn keyed(mut self, key: impl Into<String>) -> Self {
        self.batch_key = Some(key.into());
        self
    }
}

/// Batching and timing policy, read from the `[scheduler]` config section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchPolicy {
    pub batch_window_s: u64,
    pub batch_capacity: u32,
    pub setup_s: u64,
    pub per_item_s: u64,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        Self {
            batch_window_s: 300,
            batch_capacity: 8,
            setup_s: 60,
            per_item_s: 10,
        }
    }
}

/// A group of tasks that runs as one entry. Singletons carry their own
/// duration; keyed batches use `setup_s + per_item_s * n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub task_ids: Vec<String>,
    pub batch_key: Option<String>,
    /// Latest member `ready_at`: the batch cannot start before every member is ready.
    pub ready_at: u64,
    pub duration_s: u64,
    pub requires: Vec<ResourceRequirement>,
}

impl Batch {
    /// Smallest member id, used as the lexicographic tie-break.
    pub fn id(&self) -> &str {
        self.task_ids.iter().min().map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub task_ids: Vec<String>,
    pub resource_ids: Vec<String>,
    pub start: u64,
    pub end: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_key: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub entries: Vec<ScheduleEntry>,
    pub makespan_s: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("infeasible: task `{task}` needs {qty} x `{class}` but the lab has {available}")]
    Infeasible {
        task: String,
        class: String,
        qty: u32,
        available: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ScheduleViolation {
    EmptyInterval {
        index: usize,
    },
    UnknownResource {
        index: usize,
        resource_id: String,
    },
    Overlap {
        resource_id: String,
        at: u64,
        used: u32,
        capacity: u32,
    },
}

/// Merges requirements per class, summing quantities. Output is sorted by class.
fn merged(requires: &[ResourceRequirement]) -> BTreeMap<&str, u32> {
    let mut out = BTreeMap::new();
    for r in requires {
        *out.entry(r.class.as_str()).or_insert(0) += r.qty;
    }
    out
}

/// Per-class maximum over members, for a keyed batch.
fn batch_requirements(members: &[&TaskSpec]) -> Vec<ResourceRequirement> {
    let mut by_class: BTreeMap<&str, u32> = BTreeMap::new();
    for t in members {
        for (class, qty) in merged(&t.requires) {
            let e = by_class.entry(class).or_insert(0);
            *e = (*e).max(qty);
        }
    }
    by_class
        .into_iter()
        .map(|(c, q)| ResourceRequirement::new(c, q))
        .collect()
}

pub fn batch_tasks(
    tasks: &[TaskSpec],
    window_s: u64,
    capacity: u32,
    policy: &BatchPolicy,
) -> Vec<Batch> {
    let capacity = capacity.max(1) as usize;
    let mut order: Vec<&TaskSpec> = tasks.iter().collect();
    order.sort_by(|a, b| a.ready_at.cmp(&b.ready_at).then_with(|| a.id.cmp(&b.id)));

    let mut batches = Vec::new();
    // Open batch per key: (earliest ready_at, members).
    let mut open: BTreeMap<&str, (u64, Vec<&TaskSpec>)> = BTreeMap::new();

    let close = |members: Vec<&TaskSpec>, batches: &mut Vec<Batch>| {
        let n = members.len() as u64;
        batches.push(Batch {
            task_ids: members.iter().map(|t| t.id.clone()).collect(),
            batch_key: members[0].batch_key.clone(),
            ready_at: members.iter().map(|t| t.ready_at).max().unwrap_or(0),
            duration_s: policy.setup_s + policy.per_item_s * n,
            requires: batch_requirements(&members),
        });
    };

    for task in order {
        let Some(key) = task.batch_key.as_deref() else {
            batches.push(Batch {
                task_ids: vec![task.id.clone()],
                batch_key: None,
                ready_at: task.ready_at,
                duration_s: task.duration_s,
                requires: task.requires.clone(),
            });
            continue;
        };
        let fits = match open.get(key) {
            Some((earliest, members)) => {
                task.ready_at <= earliest + window_s && members.len() < capacity
            }
            None => false,
        };
        if fits {
            open.get_mut(key).expect("checked").1.push(task);
        } else {
            if let Some((_, members)) = open.remove(key) {
                close(members, &mut batches);
            }
            open.insert(key, (task.ready_at, vec![task]));
        }
    }
    for (_, (_, members)) in open {
        close(members, &mut batches);
    }

    batches.sort_by(|a, b| a.ready_at.cmp(&b.ready_at).then_with(|| a.id().cmp(b.id())));
    batches
}

/// Per-resource unit usage timeline for placed entries.
#[derive(Debug, Default, Clone)]
struct Occupancy {
    // resource id -> list of (start, end, units)
    intervals: BTreeMap<String, Vec<(u64, u64, u32)>>,
}

impl Occupancy {
    /// Peak units in use on `resource` anywhere within `[start, end)`.
    fn peak(&self, resource: &str, start: u64, end: u64) -> u32 {
        let Some(list) = self.intervals.get(resource) else {
            return 0;
        };
        // Usage only rises at interval starts, so checking `start` and every
        // start inside the window is enough.
        let mut probes: Vec<u64> = vec![start];
        probes.extend(
            list.iter()
                .map(|&(s, _, _)| s)
                .filter(|&s| s > start && s < end),
        );
        probes
            .into_iter()
            .map(|t| {
                list.iter()
                    .filter(|&&(s, e, _)| s <= t && t < e)
                    .map(|&(_, _, u)| u)
                    .sum()
            })
            .max()
            .unwrap_or(0)
    }

    fn add(&mut self, resource: &str, start: u64, end: u64, units: u32) {
        self.intervals
            .entry(resource.to_owned())
            .or_default()
            .push((start, end, units));
    }

    fn ends_after(&self, t: u64) -> BTreeSet<u64> {
        self.intervals
            .values()
            .flatten()
            .map(|&(_, e, _)| e)
            .filter(|&e| e > t)
            .collect()
    }
}

/// Tries to claim units for every requirement class over `[start, end)`.
/// Resources within a class are taken in id order.
fn try_allocate(
    requires: &BTreeMap<&str, u32>,
    by_class: &BTreeMap<&str, Vec<&Resource>>,
    occ: &Occupancy,
    start: u64,
    end: u64,
) -> Option<Vec<(String, u32)>> {
    let mut claims = Vec::new();
    for (&class, &qty) in requires {
        let mut remaining = qty;
        for r in by_class.get(class)? {
            if remaining == 0 {
                break;
            }
            let free = r.capacity.saturating_sub(occ.peak(&r.id, start, end));
            let take = free.min(remaining);
            if take > 0 {
                claims.push((r.id.clone(), take));
                remaining -= take;
            }
        }
        if remaining > 0 {
            return None;
        }
    }
    Some(claims)
}

fn check_feasible(
    batch: &Batch,
    by_class: &BTreeMap<&str, Vec<&Resource>>,
) -> Result<(), ScheduleError> {
    for (class, qty) in merged(&batch.requires) {
        let available: u32 = by_class
            .get(class)
            .map(|rs| rs.iter().map(|r| r.capacity).sum())
            .unwrap_or(0);
        if available < qty {
            return Err(ScheduleError::Infeasible {
                task: batch.id().to_owned(),
                class: class.to_owned(),
                qty,
                available,
            });
        }
    }
    Ok(())
}

/// Plans `tasks` onto `resources` starting no earlier than `now`.
///
/// Tasks are batched under `policy`, then placed one at a time in priority
/// order (earliest `ready_at`, then longest duration, then smallest id), each
/// at the earliest instant where every requirement can be met.
pub fn plan(
    tasks: &[TaskSpec],
    resources: &[Resource],
    now: u64,
    policy: &BatchPolicy,
) -> Result<Schedule, ScheduleError> {
    let batches = batch_tasks(tasks, policy.batch_window_s, policy.batch_capacity, policy);
    plan_batches(&batches, resources, now)
}

pub fn plan_batches(
    batches: &[Batch],
    resources: &[Resource],
    now: u64,
) -> Result<Schedule, ScheduleError> {
    let mut by_class: BTreeMap<&str, Vec<&Resource>> = BTreeMap::new();
    for r in resources {
        by_class.entry(r.class.as_str()).or_default().push(r);
    }
    for list in by_class.values_mut() {
        list.sort_by(|a, b| a.id.cmp(&b.id));
    }
    for b in batches {
        check_feasible(b, &by_class)?;
    }

    let mut order: Vec<&Batch> = batches.iter().collect();
    order.sort_by(|a, b| {
        a.ready_at
            .cmp(&b.ready_at)
            .then_with(|| b.duration_s.cmp(&a.duration_s))
            .then_with(|| a.id().cmp(b.id()))
    });

    let mut occ = Occupancy::default();
    let mut entries = Vec::with_capacity(order.len());
    for batch in order {
        let earliest = batch.ready_at.max(now);
        let need = merged(&batch.requires);
        let duration = batch.duration_s.max(1);
        let mut candidates = occ.ends_after(earliest);
        candidates.insert(earliest);
        let (start, claims) = candidates
            .into_iter()
            .find_map(|t| try_allocate(&need, &by_class, &occ, t, t + duration).map(|c| (t, c)))
            .expect("feasibility checked: the latest end always frees every unit");
        let end = start + duration;
        let mut resource_ids = Vec::new();
        for (rid, units) in &claims {
            occ.add(rid, start, end, *units);
            resource_ids.extend(std::iter::repeat_n(rid.clone(), *units as usize));
        }
        entries.push(ScheduleEntry {
            task_ids: batch.task_ids.clone(),
            resource_ids,
            start,
            end,
            batch_key: batch.batch_key.clone(),
        });
    }

    let mut schedule = Schedule {
        entries,
        makespan_s: 0,
    };
    schedule.makespan_s = makespan(&schedule);
    Ok(schedule)
}

pub fn makespan(s: &Schedule) -> u64 {
    let start = s.entries.iter().map(|e| e.start).min();
    let end = s.entries.iter().map(|e| e.end).max();
    match (start, end) {
        (Some(a), Some(b)) => b.saturating_sub(a),
        _ => 0,
    }
}

pub fn validate_schedule(s: &Schedule, resources: &[Resource]) -> Vec<ScheduleViolation> {
    let capacity: BTreeMap<&str, u32> = resources
        .iter()
        .map(|r| (r.id.as_str(), r.capacity))
        .collect();
    let mut out = Vec::new();
    // resource -> (time, delta)
    let mut deltas: BTreeMap<&str, Vec<(u64, i64)>> = BTreeMap::new();

    for (index, e) in s.entries.iter().enumerate() {
        if e.end <= e.start {
            out.push(ScheduleViolation::EmptyInterval { index });
        }
        let mut units: BTreeMap<&str, i64> = BTreeMap::new();
        for rid in &e.resource_ids {
            *units.entry(rid.as_str()).or_default() += 1;
        }
        for (rid, n) in units {
            if !capacity.contains_key(rid) {
                out.push(ScheduleViolation::UnknownResource {
                    index,
                    resource_id: rid.to_owned(),
                });
                continue;
            }
            if e.end > e.start {
                let d = deltas.entry(rid).or_default();
                d.push((e.start, n));
                d.push((e.end, -n));
            }
        }
    }

    for (rid, mut d) in deltas {
        // Releases sort before acquisitions at the same instant: intervals are half-open.
        d.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        let cap = capacity[rid];
        let mut used = 0i64;
        for (t, delta) in d {
            used += delta;
            if used > cap as i64 {
                out.push(ScheduleViolation::Overlap {
                    resource_id: rid.to_owned(),
                    at: t,
                    used: used as u32,
                    capacity: cap,
                });
                break;
            }
        }
    }
    out
}
