//! Closed-loop virtual screening: fold the target, then generate, dock and
//! score batches of molecules until enough of them beat the affinity
//! threshold or the iteration budget runs out.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::info;

use crate::canonical::{Payload, Scalar};
use crate::clock::Clock;
use crate::gateway::{Gateway, GatewayError};
use crate::records::{is_valid_chain_id, Record, RecordError, RecordFilter, RecordStore};
use crate::simlab::{AffinityScore, Molecule, Origin};
use crate::workflow::{parse_yaml_value, WorkflowError};

pub const CAMPAIGN_STARTED: &str = "campaign_started";
pub const TARGET_FOLDED: &str = "target_folded";
pub const MOLECULE_GENERATED: &str = "molecule_generated";
pub const POSE_DOCKED: &str = "pose_docked";
pub const AFFINITY_SCORED: &str = "affinity_scored";
pub const ITERATION_COMPLETED: &str = "iteration_completed";
pub const CAMPAIGN_COMPLETED: &str = "campaign_completed";

fn default_batch_size() -> usize {
    20
}
fn default_threshold() -> i64 {
    -1_400_000
}
fn default_min_hits() -> usize {
    10
}
fn default_max_iterations() -> u32 {
    10
}
fn default_top_k() -> usize {
    3
}
fn default_concurrency() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub campaign_id: String,
    pub target_id: String,
    pub target_sequence: String,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_threshold")]
    pub affinity_threshold: i64,
    #[serde(default = "default_min_hits")]
    pub min_hits: usize,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    #[serde(default = "default_top_k")]
    pub top_k_seeds: usize,
    /// Dock/score requests in flight at once.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl CampaignConfig {
    /// Defaults for everything except identity, target and seed.
    pub fn new(
        campaign_id: impl Into<String>,
        target_id: impl Into<String>,
        target_sequence: impl Into<String>,
        seed: u64,
    ) -> Self {
        Self {
            campaign_id: campaign_id.into(),
            target_id: target_id.into(),
            target_sequence: target_sequence.into(),
            seed,
            batch_size: default_batch_size(),
            affinity_threshold: default_threshold(),
            min_hits: default_min_hits(),
            max_iterations: default_max_iterations(),
            top_k_seeds: default_top_k(),
            concurrency: default_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |m: &str| Err(CampaignError::Config(m.to_owned()));
        if !is_valid_chain_id(&self.campaign_id) {
            return bad("campaign_id must be 1-128 chars of [A-Za-z0-9._-]");
        }
        if self.target_id.is_empty() {
            return bad("target_id must be nonempty");
        }
        if self.target_sequence.is_empty()
            || !self.target_sequence.bytes().all(|b| b.is_ascii_uppercase())
        {
            return bad("target_sequence must be nonempty uppercase A-Z");
        }
        if self.affinity_threshold >= 0 {
            return bad("affinity_threshold must be negative");
        }
        if self.min_hits < 1 {
            return bad("min_hits must be at least 1");
        }
        if self.batch_size < 1
            || self.max_iterations < 1
            || self.top_k_seeds < 1
            || self.concurrency < 1
        {
            return bad(
                "batch_size, max_iterations, top_k_seeds and concurrency must be at least 1",
            );
        }
        if self.top_k_seeds > self.batch_size {
            return bad("top_k_seeds must not exceed batch_size");
        }
        Ok(())
    }
}

/// Parses and validates a YAML campaign document.
pub fn parse_campaign_config(text: &str) -> Result<CampaignConfig, CampaignError> {
    let value = parse_yaml_value(text).map_err(|e| match e {
        WorkflowError::Syntax { line, message } => CampaignError::Syntax { line, message },
        other => CampaignError::Config(other.to_string()),
    })?;
    let cfg: CampaignConfig =
        serde_yaml::from_value(value).map_err(|e| CampaignError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CampaignStatus {
    Running,
    CriteriaMet,
    Exhausted,
    Aborted,
}

impl CampaignStatus {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "CriteriaMet" => Some(Self::CriteriaMet),
            "Exhausted" => Some(Self::Exhausted),
            "Aborted" => Some(Self::Aborted),
            "Running" => Some(Self::Running),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: u32,
    pub generated: usize,
    pub new_hits: usize,
    pub cumulative_hits: usize,
    pub best_affinity: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub campaign_id: String,
    pub status: CampaignStatus,
    pub iterations: Vec<IterationSummary>,
    /// Ascending by affinity, ties by smiles.
    pub hits: Vec<AffinityScore>,
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid campaign config: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("unexpected service response: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Met,
    Continue,
}

pub fn is_hit(score: &AffinityScore, threshold: i64) -> bool {
    score.affinity <= threshold
}

pub fn evaluate_criteria(scores: &[AffinityScore], cfg: &CampaignConfig) -> Decision {
    let hits = scores
        .iter()
        .filter(|s| is_hit(s, cfg.affinity_threshold))
        .count();
    if hits >= cfg.min_hits {
        Decision::Met
    } else {
        Decision::Continue
    }
}

fn by_affinity(a: &AffinityScore, b: &AffinityScore) -> std::cmp::Ordering {
    a.affinity
        .cmp(&b.affinity)
        .then_with(|| a.smiles.cmp(&b.smiles))
}

/// The `k` best-scoring molecules, ties broken by smiles.
pub fn select_seeds(scored: &[AffinityScore], k: usize) -> Vec<Molecule> {
    let mut sorted: Vec<&AffinityScore> = scored.iter().collect();
    sorted.sort_by(|a, b| by_affinity(a, b));
    sorted
        .into_iter()
        .take(k)
        .map(|s| Molecule::generated(s.smiles.clone()))
        .collect()
}

/// Cooperative abort; checked between stages.
#[derive(Debug, Clone, Default)]
pub struct AbortFlag(Arc<AtomicBool>);

impl AbortFlag {
    pub fn abort(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_set(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

struct Recorder<'a> {
    store: &'a RecordStore,
    clock: &'a dyn Clock,
    chain: &'a str,
}

impl Recorder<'_> {
    fn append(&self, kind: &str, fields: Vec<(&str, Scalar)>) -> Result<Record, RecordError> {
        let payload: Payload = fields.into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
        self.store
            .append(self.chain, kind, payload, self.clock.now_ms())
    }
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value, CampaignError> {
    v.get(key)
        .ok_or_else(|| CampaignError::Protocol(format!("missing `{key}` in {v}")))
}

fn str_field(v: &Value, key: &str) -> Result<String, CampaignError> {
    field(v, key)?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| CampaignError::Protocol(format!("`{key}` is not a string")))
}

fn parse_molecules(v: &Value) -> Result<Vec<Molecule>, CampaignError> {
    serde_json::from_value(field(v, "molecules")?.clone())
        .map_err(|e| CampaignError::Protocol(e.to_string()))
}

/// Runs a campaign to completion, recording every stage on the chain named
/// by `cfg.campaign_id`.
pub async fn run_campaign(
    cfg: &CampaignConfig,
    gateway: &Gateway,
    store: &RecordStore,
    clock: &dyn Clock,
    abort: &AbortFlag,
) -> Result<CampaignResult, CampaignError> {
    cfg.validate()?;
    let rec = Recorder {
        store,
        clock,
        chain: &cfg.campaign_id,
    };
    rec.append(
        CAMPAIGN_STARTED,
        vec![
            ("target_id", cfg.target_id.as_str().into()),
            ("target_sequence", cfg.target_sequence.as_str().into()),
            ("seed", cfg.seed.to_string().into()),
            ("batch_size", cfg.batch_size.into()),
            ("affinity_threshold", cfg.affinity_threshold.into()),
            ("min_hits", cfg.min_hits.into()),
            ("max_iterations", u64::from(cfg.max_iterations).into()),
            ("top_k_seeds", cfg.top_k_seeds.into()),
        ],
    )?;

    let mut scored: Vec<AffinityScore> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut iterations: Vec<IterationSummary> = Vec::new();
    let mut status = CampaignStatus::Exhausted;

    'outer: for iteration in 1..=cfg.max_iterations {
        if abort.is_set() {
            status = CampaignStatus::Aborted;
            break;
        }
        let folded = gateway
            .call(
                "fold",
                json!({"scope": cfg.campaign_id, "target_id": cfg.target_id, "sequence": cfg.target_sequence}),
            )
            .await?;
        let structure_id = str_field(&folded, "structure_id")?;
        let cached = field(&folded, "cached")?.as_bool().unwrap_or(false);
        rec.append(
            TARGET_FOLDED,
            vec![
                ("iteration", u64::from(iteration).into()),
                ("target_id", cfg.target_id.as_str().into()),
                ("structure_id", structure_id.as_str().into()),
                ("cached", cached.into()),
            ],
        )?;

        if abort.is_set() {
            status = CampaignStatus::Aborted;
            break;
        }
        let seeds = select_seeds(&scored, cfg.top_k_seeds);
        let generated = gateway
            .call(
                "generate",
                json!({
                    "campaign_seed": cfg.seed.to_string(),
                    "iteration": iteration,
                    "n": cfg.batch_size,
                    "seeds": seeds.iter().map(|m| m.smiles.as_str()).collect::<Vec<_>>(),
                    "exclude": seen.iter().collect::<Vec<_>>(),
                }),
            )
            .await?;
        let molecules = parse_molecules(&generated)?;
        for (index, m) in molecules.iter().enumerate() {
            if !seen.insert(m.smiles.clone()) {
                return Err(CampaignError::Protocol(format!(
                    "duplicate molecule `{}`",
                    m.smiles
                )));
            }
            let origin = if m.origin == Origin::Seeded {
                "seeded"
            } else {
                "generated"
            };
            rec.append(
                MOLECULE_GENERATED,
                vec![
                    ("iteration", u64::from(iteration).into()),
                    ("index", index.into()),
                    ("smiles", m.smiles.as_str().into()),
                    ("origin", origin.into()),
                ],
            )?;
        }

        for stage in ["dock", "score"] {
            if abort.is_set() {
                status = CampaignStatus::Aborted;
                break 'outer;
            }
            // Futures are built up front so the stream holds no closure
            // borrowing the loop state.
            let calls: Vec<_> = molecules
                .iter()
                .map(|m| {
                    let args = if stage == "dock" {
                        json!({"smiles": m.smiles, "structure_id": structure_id})
                    } else {
                        json!({"smiles": m.smiles, "target_id": cfg.target_id})
                    };
                    gateway.call(stage, args)
                })
                .collect();
            let results: Vec<Value> = stream::iter(calls)
                .buffered(cfg.concurrency)
                .try_collect()
                .await?;
            for (m, r) in molecules.iter().zip(&results) {
                if stage == "dock" {
                    rec.append(
                        POSE_DOCKED,
                        vec![
                            ("iteration", u64::from(iteration).into()),
                            ("smiles", m.smiles.as_str().into()),
                            ("structure_id", structure_id.as_str().into()),
                            ("pose_id", str_field(r, "pose_id")?.into()),
                        ],
                    )?;
                } else {
                    let affinity = field(r, "affinity")?.as_i64().ok_or_else(|| {
                        CampaignError::Protocol("affinity is not an integer".into())
                    })?;
                    let score = AffinityScore {
                        smiles: m.smiles.clone(),
                        target_id: cfg.target_id.clone(),
                        affinity,
                    };
                    rec.append(
                        AFFINITY_SCORED,
                        vec![
                            ("iteration", u64::from(iteration).into()),
                            ("smiles", score.smiles.as_str().into()),
                            ("target_id", score.target_id.as_str().into()),
                            ("affinity", affinity.into()),
                            ("hit", is_hit(&score, cfg.affinity_threshold).into()),
                        ],
                    )?;
                    scored.push(score);
                }
            }
        }

        let batch = &scored[scored.len() - molecules.len()..];
        let new_hits = batch
            .iter()
            .filter(|s| is_hit(s, cfg.affinity_threshold))
            .count();
        let cumulative_hits = scored
            .iter()
            .filter(|s| is_hit(s, cfg.affinity_threshold))
            .count();
        let best_affinity = scored.iter().map(|s| s.affinity).min().unwrap_or(0);
        let summary = IterationSummary {
            iteration,
            generated: molecules.len(),
            new_hits,
            cumulative_hits,
            best_affinity,
        };
        rec.append(
            ITERATION_COMPLETED,
            vec![
                ("iteration", u64::from(iteration).into()),
                ("generated", summary.generated.into()),
                ("new_hits", new_hits.into()),
                ("cumulative_hits", cumulative_hits.into()),
                ("best_affinity", best_affinity.into()),
            ],
        )?;
        info!(campaign = %cfg.campaign_id, iteration, new_hits, cumulative_hits, "iteration done");
        iterations.push(summary);
        if evaluate_criteria(&scored, cfg) == Decision::Met {
            status = CampaignStatus::CriteriaMet;
            break;
        }
    }

    let mut hits: Vec<AffinityScore> = scored
        .into_iter()
        .filter(|s| is_hit(s, cfg.affinity_threshold))
        .collect();
    hits.sort_by(by_affinity);
    rec.append(
        CAMPAIGN_COMPLETED,
        vec![
            ("status", format!("{status:?}").into()),
            ("iterations", iterations.len().into()),
            ("hits", hits.len().into()),
        ],
    )?;
    Ok(CampaignResult {
        campaign_id: cfg.campaign_id.clone(),
        status,
        iterations,
        hits,
    })
}

/// Campaign progress as derived from its record chain alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub campaign_id: String,
    pub status: CampaignStatus,
    pub min_hits: usize,
    pub affinity_threshold: i64,
    pub iterations: Vec<IterationSummary>,
    pub hits: Vec<AffinityScore>,
    pub fold_computations: usize,
    pub records: u64,
    pub head_hash: String,
}

fn int(p: &Payload, key: &str) -> i64 {
    p.get(key).and_then(Scalar::as_int).unwrap_or(0)
}

fn text(p: &Payload, key: &str) -> String {
    p.get(key).and_then(Scalar::as_str).unwrap_or("").to_owned()
}

/// Rebuilds a campaign's status, iteration table and hits from its chain.
/// Returns `None` if the chain holds no campaign.
pub fn campaign_report(store: &RecordStore, campaign_id: &str) -> Option<CampaignReport> {
    let records = store.query(&RecordFilter::chain(campaign_id));
    let started = records.first().filter(|r| r.kind == CAMPAIGN_STARTED)?;
    let threshold = int(&started.payload, "affinity_threshold");
    let mut report = CampaignReport {
        campaign_id: campaign_id.to_owned(),
        status: CampaignStatus::Running,
        min_hits: int(&started.payload, "min_hits") as usize,
        affinity_threshold: threshold,
        iterations: Vec::new(),
        hits: Vec::new(),
        fold_computations: 0,
        records: records.len() as u64,
        head_hash: records.last().map(|r| r.hash.clone()).unwrap_or_default(),
    };
    for r in &records {
        let p = &r.payload;
        match r.kind.as_str() {
            TARGET_FOLDED if p.get("cached").and_then(Scalar::as_bool) == Some(false) => {
                report.fold_computations += 1
            }
            AFFINITY_SCORED => {
                let score = AffinityScore {
                    smiles: text(p, "smiles"),
                    target_id: text(p, "target_id"),
                    affinity: int(p, "affinity"),
                };
                if is_hit(&score, threshold) {
                    report.hits.push(score);
                }
            }
            ITERATION_COMPLETED => report.iterations.push(IterationSummary {
                iteration: int(p, "iteration") as u32,
                generated: int(p, "generated") as usize,
                new_hits: int(p, "new_hits") as usize,
                cumulative_hits: int(p, "cumulative_hits") as usize,
                best_affinity: int(p, "best_affinity"),
            }),
            CAMPAIGN_COMPLETED => {
                report.status =
                    CampaignStatus::parse(&text(p, "status")).unwrap_or(CampaignStatus::Running);
            }
            _ => {}
        }
    }
    report.hits.sort_by(by_affinity);
    Some(report)
}
