//! Deterministic stand-ins for the screening models: molecule generation,
//! structure prediction, docking and affinity scoring.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::rng::{fnv1a64, fnv1a64_hex, PrngState};
use super::SimError;

/// Building blocks for generated molecules, indexed by `draw % 16`.
pub const FRAGMENTS: [&str; 16] = [
    "C", "CC", "CCC", "c1ccccc1", "C(=O)O", "N", "O", "Cl", "F", "C#N", "S", "C1CCCCC1", "OC",
    "NC(=O)", "C=C", "Br",
];

/// Scores fall in `[-AFFINITY_SCALE, 0]`.
pub const AFFINITY_SCALE: u64 = 2_000_000;

pub const MAX_SMILES_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Generated,
    Seeded,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Molecule {
    pub smiles: String,
    pub origin: Origin,
}

impl Molecule {
    pub fn generated(smiles: impl Into<String>) -> Self {
        Self {
            smiles: smiles.into(),
            origin: Origin::Generated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetStructure {
    pub target_id: String,
    pub sequence: String,
    pub structure_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pose {
    pub molecule: Molecule,
    pub structure_id: String,
    pub pose_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffinityScore {
    pub smiles: String,
    pub target_id: String,
    pub affinity: i64,
}

/// Seed of the generation stream for one iteration.
pub fn stream_seed(campaign_seed: u64, iteration: u64, seeds: &[Molecule]) -> u64 {
    let mix = if seeds.is_empty() {
        0
    } else {
        let joined: String = seeds.iter().map(|m| m.smiles.as_str()).collect();
        fnv1a64(joined.as_bytes())
    };
    campaign_seed ^ iteration ^ mix
}

/// Generates `n` molecules not present in `existing`. Candidates that repeat
/// an existing or already generated molecule are discarded and drawn again;
/// after `100 * n` candidates the generator gives up.
pub fn generate_molecules(
    campaign_seed: u64,
    iteration: u64,
    n: usize,
    seeds: &[Molecule],
    existing: &BTreeSet<String>,
) -> Result<Vec<Molecule>, SimError> {
    if n == 0 {
        return Err(SimError::InvalidArgument("n must be at least 1".into()));
    }
    let mut rng = PrngState(stream_seed(campaign_seed, iteration, seeds));
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let budget = 100 * n;
    for _ in 0..budget {
        if out.len() == n {
            break;
        }
        let k = 2 + (rng.next_u64() % 3);
        let smiles: String = (0..k)
            .map(|_| FRAGMENTS[(rng.next_u64() % 16) as usize])
            .collect();
        if existing.contains(&smiles) || !seen.insert(smiles.clone()) {
            continue;
        }
        out.push(Molecule::generated(smiles));
    }
    if out.len() < n {
        return Err(SimError::Exhausted {
            requested: n,
            produced: out.len(),
        });
    }
    Ok(out)
}

/// Structure cache keyed by sequence; `work` counts actual folds.
#[derive(Debug, Default, Clone)]
pub struct FoldCache {
    entries: HashMap<String, TargetStructure>,
    work: u64,
}

impl FoldCache {
    pub fn work(&self) -> u64 {
        self.work
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldOutcome {
    pub structure: TargetStructure,
    pub cached: bool,
}

pub fn structure_id(sequence: &str) -> String {
    fnv1a64_hex(sequence.as_bytes())
}

pub fn fold_target(
    target_id: &str,
    sequence: &str,
    cache: &mut FoldCache,
) -> Result<FoldOutcome, SimError> {
    if sequence.is_empty() || !sequence.bytes().all(|b| b.is_ascii_uppercase()) {
        return Err(SimError::InvalidArgument(
            "sequence must be nonempty uppercase A-Z".into(),
        ));
    }
    if let Some(hit) = cache.entries.get(sequence) {
        let mut structure = hit.clone();
        structure.target_id = target_id.to_owned();
        return Ok(FoldOutcome {
            structure,
            cached: true,
        });
    }
    cache.work += 1;
    let structure = TargetStructure {
        target_id: target_id.to_owned(),
        sequence: sequence.to_owned(),
        structure_id: structure_id(sequence),
    };
    cache.entries.insert(sequence.to_owned(), structure.clone());
    Ok(FoldOutcome {
        structure,
        cached: false,
    })
}

pub fn pose_id(smiles: &str, structure_id: &str) -> String {
    fnv1a64_hex(format!("{smiles}|{structure_id}").as_bytes())
}

pub fn dock(molecule: &Molecule, structure_id: &str) -> Pose {
    Pose {
        molecule: molecule.clone(),
        structure_id: structure_id.to_owned(),
        pose_id: pose_id(&molecule.smiles, structure_id),
    }
}

/// `-round(AFFINITY_SCALE * h / 2^64)` with `h = fnv1a64(smiles ":" target)`,
/// evaluated exactly in integers, halves rounding up.
pub fn affinity(smiles: &str, target_id: &str) -> i64 {
    let h = fnv1a64(format!("{smiles}:{target_id}").as_bytes());
    let scaled = (u128::from(AFFINITY_SCALE) * u128::from(h) + (1u128 << 63)) >> 64;
    -(scaled as i64)
}

pub fn score_affinity(molecule: &Molecule, target_id: &str) -> AffinityScore {
    AffinityScore {
        smiles: molecule.smiles.clone(),
        target_id: target_id.to_owned(),
        affinity: affinity(&molecule.smiles, target_id),
    }
}
