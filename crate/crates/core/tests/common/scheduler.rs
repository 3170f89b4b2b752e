//! Exhaustive scheduling reference and an independent schedule checker,
//! both on a unit-second time grid.

use std::collections::BTreeMap;

use labrun::scheduler::{Batch, Schedule};
use labrun::workflow::ResourceRequirement;
use labrun::{Resource, TaskSpec};
use rand::rngs::StdRng;
use rand::Rng;

/// Every way to split each class requirement across that class's resources.
fn assignments(job: &Batch, resources: &[Resource]) -> Vec<Vec<(usize, u32)>> {
    let mut need: BTreeMap<&str, u32> = BTreeMap::new();
    for r in &job.requires {
        *need.entry(r.class.as_str()).or_default() += r.qty;
    }
    let mut out: Vec<Vec<(usize, u32)>> = vec![vec![]];
    for (class, qty) in need {
        let members: Vec<usize> = (0..resources.len())
            .filter(|&i| resources[i].class == class)
            .collect();
        let mut splits: Vec<Vec<(usize, u32)>> = Vec::new();
        split(&members, qty, resources, &mut Vec::new(), &mut splits);
        out = out
            .into_iter()
            .flat_map(|prefix| {
                splits.iter().map(move |s| {
                    let mut p = prefix.clone();
                    p.extend(s.iter().copied());
                    p
                })
            })
            .collect();
    }
    out
}

fn split(
    members: &[usize],
    qty: u32,
    resources: &[Resource],
    cur: &mut Vec<(usize, u32)>,
    out: &mut Vec<Vec<(usize, u32)>>,
) {
    let Some((&first, rest)) = members.split_first() else {
        if qty == 0 {
            out.push(cur.clone());
        }
        return;
    };
    for take in 0..=qty.min(resources[first].capacity) {
        if take > 0 {
            cur.push((first, take));
        }
        split(rest, qty - take, resources, cur, out);
        if take > 0 {
            cur.pop();
        }
    }
}

struct Search<'a> {
    jobs: &'a [Batch],
    options: Vec<Vec<Vec<(usize, u32)>>>,
    resources: &'a [Resource],
    usage: Vec<Vec<u32>>,
    best: u64,
    origin: u64,
    floor: u64,
}

impl Search<'_> {
    fn fits(&self, start: u64, len: u64, claim: &[(usize, u32)]) -> bool {
        claim.iter().all(|&(r, u)| {
            (start..start + len)
                .all(|t| self.usage[r][t as usize] + u <= self.resources[r].capacity)
        })
    }

    fn mark(&mut self, start: u64, len: u64, claim: &[(usize, u32)], add: bool) {
        for &(r, u) in claim {
            for t in start..start + len {
                let slot = &mut self.usage[r][t as usize];
                if add {
                    *slot += u;
                } else {
                    *slot -= u;
                }
            }
        }
    }

    fn dfs(&mut self, placed: &mut Vec<bool>, first_start: u64, last_end: u64) {
        if placed.iter().all(|&p| p) {
            self.best = self.best.min(last_end - first_start);
            return;
        }
        for j in 0..self.jobs.len() {
            if placed[j] {
                continue;
            }
            let len = self.jobs[j].duration_s.max(1);
            let ready = self.jobs[j].ready_at.max(self.origin);
            for a in 0..self.options[j].len() {
                let claim = self.options[j][a].clone();
                let mut start = ready;
                while !self.fits(start, len, &claim) {
                    start += 1;
                }
                let fs = first_start.min(start);
                let le = last_end.max(start + len);
                // The end only grows and the first start can fall no lower
                // than the earliest ready time.
                if le - fs.min(self.floor) >= self.best {
                    continue;
                }
                self.mark(start, len, &claim, true);
                placed[j] = true;
                self.dfs(placed, fs, le);
                placed[j] = false;
                self.mark(start, len, &claim, false);
            }
        }
    }
}

/// Minimum makespan over every job order and every unit assignment, each
/// job placed at its earliest feasible start given the jobs before it.
pub fn optimal_makespan(jobs: &[Batch], resources: &[Resource], now: u64) -> u64 {
    if jobs.is_empty() {
        return 0;
    }
    let horizon = jobs.iter().map(|j| j.ready_at.max(now)).max().unwrap()
        + jobs.iter().map(|j| j.duration_s.max(1)).sum::<u64>()
        + 1;
    let options = jobs.iter().map(|j| assignments(j, resources)).collect();
    let mut s = Search {
        jobs,
        options,
        resources,
        usage: vec![vec![0; horizon as usize]; resources.len()],
        best: u64::MAX,
        origin: now,
        floor: jobs.iter().map(|j| j.ready_at.max(now)).min().unwrap(),
    };
    s.dfs(&mut vec![false; jobs.len()], u64::MAX, 0);
    s.best
}

/// Checks a plan the slow way. Returns a description of the first problem.
pub fn check_schedule(
    s: &Schedule,
    tasks: &[TaskSpec],
    resources: &[Resource],
    now: u64,
) -> Result<(), String> {
    let by_id: BTreeMap<&str, &TaskSpec> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut seen: Vec<&str> = s
        .entries
        .iter()
        .flat_map(|e| e.task_ids.iter().map(String::as_str))
        .collect();
    seen.sort();
    let mut want: Vec<&str> = by_id.keys().copied().collect();
    want.sort();
    if seen != want {
        return Err(format!("tasks placed {seen:?}, expected {want:?}"));
    }
    let end = s.entries.iter().map(|e| e.end).max().unwrap_or(0);
    for e in &s.entries {
        if e.end <= e.start {
            return Err(format!("empty interval {e:?}"));
        }
        for id in &e.task_ids {
            let t = by_id[id.as_str()];
            if e.start < t.ready_at.max(now) {
                return Err(format!("{id} starts before it is ready"));
            }
        }
        let mut held: BTreeMap<&str, u32> = BTreeMap::new();
        for rid in &e.resource_ids {
            let class = resources
                .iter()
                .find(|r| &r.id == rid)
                .ok_or(format!("unknown resource {rid}"))?
                .class
                .as_str();
            *held.entry(class).or_default() += 1;
        }
        for id in &e.task_ids {
            let mut need: BTreeMap<&str, u32> = BTreeMap::new();
            for ResourceRequirement { class, qty } in &by_id[id.as_str()].requires {
                *need.entry(class.as_str()).or_default() += qty;
            }
            for (class, qty) in need {
                if held.get(class).copied().unwrap_or(0) < qty {
                    return Err(format!("{id} lacks {class}"));
                }
            }
        }
    }
    for r in resources {
        for t in 0..end {
            let used = s
                .entries
                .iter()
                .filter(|e| e.start <= t && t < e.end)
                .map(|e| e.resource_ids.iter().filter(|x| **x == r.id).count() as u32)
                .sum::<u32>();
            if used > r.capacity {
                return Err(format!("{} holds {used} units at t={t}", r.id));
            }
        }
    }
    let span = match (
        s.entries.iter().map(|e| e.start).min(),
        s.entries.iter().map(|e| e.end).max(),
    ) {
        (Some(a), Some(b)) => b - a,
        _ => 0,
    };
    if span != s.makespan_s {
        return Err(format!("makespan {} recorded, {span} actual", s.makespan_s));
    }
    Ok(())
}

pub struct Instance {
    pub tasks: Vec<TaskSpec>,
    pub resources: Vec<Resource>,
}

/// A random feasible instance. `small` keeps it within reach of the
/// exhaustive search: at most 6 tasks and 2 resources.
pub fn instance(rng: &mut StdRng, small: bool) -> Instance {
    let classes = ["arm", "reader", "gpu"];
    let n_res = if small {
        rng.random_range(1..=2)
    } else {
        rng.random_range(1..=6)
    };
    let resources: Vec<Resource> = (0..n_res)
        .map(|i| {
            let class = classes[rng.random_range(0..if small { 2 } else { 3 })];
            Resource::new(format!("r{i}"), class, rng.random_range(1..=2))
        })
        .collect();
    let mut totals: BTreeMap<&str, u32> = BTreeMap::new();
    for r in &resources {
        *totals.entry(r.class.as_str()).or_default() += r.capacity;
    }
    let present: Vec<(&str, u32)> = totals.into_iter().collect();
    let n_tasks = if small {
        rng.random_range(1..=6)
    } else {
        rng.random_range(5..=40)
    };
    let tasks = (0..n_tasks)
        .map(|i| {
            let mut t = TaskSpec::new(
                format!("t{i:02}"),
                rng.random_range(0..=15),
                rng.random_range(1..=20),
            );
            let picks = rng.random_range(0..=present.len().min(2));
            for &(class, total) in present.iter().take(picks) {
                t = t.requiring(class, rng.random_range(1..=total));
            }
            if rng.random_bool(0.25) {
                t = t.keyed(["plate", "spin"][rng.random_range(0..2)]);
            }
            t
        })
        .collect();
    Instance { tasks, resources }
}
