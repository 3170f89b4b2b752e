//! Simulated on-premises lab: deterministic mock instruments and model
//! services, reachable from the orchestrator only through a gateway adapter.

pub mod instrument;
pub mod models;
pub mod rng;
pub mod service;

use thiserror::Error;

pub use instrument::{simulate_instrument, InstrumentResult};
pub use models::{
    affinity, dock, fold_target, generate_molecules, pose_id, score_affinity, stream_seed,
    structure_id, AffinityScore, FoldCache, FoldOutcome, Molecule, Origin, Pose, TargetStructure,
    AFFINITY_SCALE, FRAGMENTS,
};
pub use rng::{fnv1a64, fnv1a64_hex, splitmix64_next, PrngState};
pub use service::{SimConfig, SimLab};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("generator exhausted: produced {produced} of {requested} unique molecules")]
    Exhausted { requested: usize, produced: usize },
    #[error("injected fault on step `{0}`")]
    InjectedFault(String),
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::InvalidArgument(_) => "bad_args",
            SimError::Exhausted { .. } => "exhausted",
            SimError::InjectedFault(_) => "injected_fault",
        }
    }
}
