//! Gateway handler exposing the simulated lab as the capabilities
//! `generate`, `fold`, `dock`, `score` and `instrument.run`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use crate::canonical::{Payload, Scalar};
use crate::gateway::{Handler, HandlerError};
use crate::workflow::{Step, StepKind};

use super::instrument::simulate_instrument;
use super::models::{
    dock, fold_target, generate_molecules, score_affinity, FoldCache, Molecule, Origin,
};
use super::rng::PrngState;
use super::SimError;

pub const CAPABILITIES: [&str; 5] = ["generate", "fold", "dock", "score", "instrument.run"];

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Added to every dock and score call.
    pub latency_ms: u64,
    /// Probability that an instrument run faults.
    pub fault_rate: f64,
    /// Wall-clock seconds slept per simulated instrument second.
    pub time_scale: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            latency_ms: 0,
            fault_rate: 0.0,
            time_scale: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Default)]
pub struct SimLab {
    config: SimConfig,
    folds: Mutex<HashMap<String, FoldCache>>,
    rng: Mutex<PrngState>,
    calls: Mutex<BTreeMap<String, u64>>,
}

impl SimLab {
    pub fn new(config: SimConfig) -> Self {
        let rng = Mutex::new(PrngState(config.seed));
        Self {
            config,
            rng,
            ..Default::default()
        }
    }

    /// Folds actually computed for `scope` (cache hits excluded).
    pub fn fold_work(&self, scope: &str) -> u64 {
        self.folds
            .lock()
            .expect("fold lock")
            .get(scope)
            .map_or(0, FoldCache::work)
    }

    pub fn calls(&self, op: &str) -> u64 {
        self.calls
            .lock()
            .expect("calls lock")
            .get(op)
            .copied()
            .unwrap_or(0)
    }

    fn latency(&self) {
        if self.config.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.config.latency_ms));
        }
    }

    fn generate(&self, args: &Value) -> Result<Value, HandlerError> {
        let campaign_seed = u64_arg(args, "campaign_seed")?;
        let iteration = u64_arg(args, "iteration")?;
        let n = usize::try_from(u64_arg(args, "n")?)
            .map_err(|_| HandlerError::bad_args("n out of range"))?;
        let seeds: Vec<Molecule> = str_list(args, "seeds")?
            .into_iter()
            .map(|smiles| Molecule {
                smiles,
                origin: Origin::Seeded,
            })
            .collect();
        let exclude: BTreeSet<String> = str_list(args, "exclude")?.into_iter().collect();
        let molecules =
            generate_molecules(campaign_seed, iteration, n, &seeds, &exclude).map_err(sim_err)?;
        Ok(json!({ "molecules": molecules }))
    }

    fn fold(&self, args: &Value) -> Result<Value, HandlerError> {
        let scope = str_arg(args, "scope")?;
        let target_id = str_arg(args, "target_id")?;
        let sequence = str_arg(args, "sequence")?;
        let mut folds = self.folds.lock().expect("fold lock");
        let cache = folds.entry(scope.to_owned()).or_default();
        let out = fold_target(target_id, sequence, cache).map_err(sim_err)?;
        Ok(json!({
            "target_id": out.structure.target_id,
            "structure_id": out.structure.structure_id,
            "cached": out.cached,
        }))
    }

    fn dock(&self, args: &Value) -> Result<Value, HandlerError> {
        let smiles = str_arg(args, "smiles")?;
        let structure_id = str_arg(args, "structure_id")?;
        self.latency();
        let pose = dock(&Molecule::generated(smiles), structure_id);
        Ok(json!({ "smiles": smiles, "structure_id": pose.structure_id, "pose_id": pose.pose_id }))
    }

    fn score(&self, args: &Value) -> Result<Value, HandlerError> {
        let smiles = str_arg(args, "smiles")?;
        let target_id = str_arg(args, "target_id")?;
        self.latency();
        let s = score_affinity(&Molecule::generated(smiles), target_id);
        Ok(json!({ "smiles": s.smiles, "target_id": s.target_id, "affinity": s.affinity }))
    }

    fn instrument(&self, args: &Value) -> Result<Value, HandlerError> {
        let step_id = str_arg(args, "step_id")?;
        let duration_s = u64_arg(args, "duration_s")?;
        let class = args
            .get("resource_class")
            .and_then(Value::as_str)
            .unwrap_or("instrument");
        let mut step = Step::new(step_id, StepKind::Instrument, duration_s).requiring(class, 1);
        if let Some(params) = args.get("params") {
            step.params = serde_json::from_value::<Payload>(params.clone())
                .map_err(|e| HandlerError::bad_args(format!("params: {e}")))?;
        }
        let result = {
            let mut rng = self.rng.lock().expect("rng lock");
            simulate_instrument(&step, &mut rng, self.config.fault_rate)
        }
        .map_err(sim_err)?;
        if self.config.time_scale > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(
                result.duration_s as f64 * self.config.time_scale,
            ));
        }
        let readout: serde_json::Map<String, Value> = result
            .readout
            .iter()
            .map(|(k, v): (&String, &Scalar)| (k.clone(), v.to_json()))
            .collect();
        Ok(json!({ "status": "ok", "duration_s": result.duration_s, "readout": readout }))
    }
}

impl Handler for SimLab {
    fn capabilities(&self) -> Vec<String> {
        CAPABILITIES.iter().map(|c| c.to_string()).collect()
    }

    fn handle(&self, op: &str, args: &Value) -> Result<Value, HandlerError> {
        *self
            .calls
            .lock()
            .expect("calls lock")
            .entry(op.to_owned())
            .or_default() += 1;
        match op {
            "generate" => self.generate(args),
            "fold" => self.fold(args),
            "dock" => self.dock(args),
            "score" => self.score(args),
            "instrument.run" => self.instrument(args),
            other => Err(HandlerError::new(
                "unsupported",
                format!("unknown op `{other}`"),
            )),
        }
    }
}

fn sim_err(e: SimError) -> HandlerError {
    HandlerError::new(e.code(), e.to_string())
}

fn str_arg<'a>(args: &'a Value, key: &str) -> Result<&'a str, HandlerError> {
    args.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| HandlerError::bad_args(format!("`{key}` must be a string")))
}

/// Accepts an integer or a decimal string, so 64-bit seeds survive the
/// signed-integer wire format.
fn u64_arg(args: &Value, key: &str) -> Result<u64, HandlerError> {
    match args.get(key) {
        Some(Value::Number(n)) => n.as_u64(),
        Some(Value::String(s)) => s.parse().ok(),
        _ => None,
    }
    .ok_or_else(|| HandlerError::bad_args(format!("`{key}` must be a non-negative integer")))
}

fn str_list(args: &Value, key: &str) -> Result<Vec<String>, HandlerError> {
    match args.get(key) {
        None => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| HandlerError::bad_args(format!("`{key}` must hold strings")))
            })
            .collect(),
        Some(_) => Err(HandlerError::bad_args(format!("`{key}` must be a list"))),
    }
}
