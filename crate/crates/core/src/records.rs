//! Append-only, hash-chained record store.
//!
//! Each chain (keyed by run or campaign id) is one file
//! `records/<chain>.log` holding one canonical record per LF-terminated
//! line. A record's hash is `SHA-256(prev_hash_hex ++ canonical(header+payload))`
//! and the first record of a chain links to 64 zero characters.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::watch;

use crate::canonical::{canonicalize, payload_to_json, Payload};

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub seq: u64,
    pub run_id: String,
    pub ts: u64,
    pub kind: String,
    pub payload: Payload,
    pub prev_hash: String,
    pub hash: String,
}

impl Record {
    /// Canonical bytes covered by the hash: everything except the two hash fields.
    pub fn body_bytes(&self) -> Vec<u8> {
        body_bytes(self.seq, &self.run_id, self.ts, &self.kind, &self.payload)
    }

    pub fn compute_hash(&self) -> String {
        chain_hash(&self.prev_hash, &self.body_bytes())
    }

    /// The stored line, without its terminating LF.
    pub fn to_line(&self) -> Vec<u8> {
        let value = json!({
            "seq": self.seq,
            "run_id": self.run_id,
            "ts": self.ts,
            "kind": self.kind,
            "payload": payload_to_json(&self.payload),
            "prev_hash": self.prev_hash,
            "hash": self.hash,
        });
        canonicalize(&value).expect("record fields are canonical scalars")
    }
}

fn body_bytes(seq: u64, run_id: &str, ts: u64, kind: &str, payload: &Payload) -> Vec<u8> {
    let value = json!({
        "seq": seq,
        "run_id": run_id,
        "ts": ts,
        "kind": kind,
        "payload": payload_to_json(payload),
    });
    canonicalize(&value).expect("record fields are canonical scalars")
}

pub fn chain_hash(prev_hash: &str, body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(prev_hash.as_bytes());
    h.update(body);
    hex::encode(h.finalize())
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("storage error: {0}")]
    Storage(#[from] io::Error),
    #[error("invalid chain id `{0}`")]
    InvalidChainId(String),
    #[error("chain `{chain}` is damaged at seq {seq}; refusing to append")]
    Damaged { chain: String, seq: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub run_id: String,
    pub records: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_bad: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFilter {
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub kind: Option<String>,
    /// Inclusive lower bound on seq.
    #[serde(default)]
    pub from_seq: Option<u64>,
    /// Exclusive upper bound on seq.
    #[serde(default)]
    pub to_seq: Option<u64>,
    #[serde(default)]
    pub limit: Option<usize>,
}

impl RecordFilter {
    pub fn chain(run_id: impl Into<String>) -> Self {
        Self {
            run_id: Some(run_id.into()),
            ..Self::default()
        }
    }

    pub fn kind(mut self, kind: impl Into<String>) -> Self {
        self.kind = Some(kind.into());
        self
    }

    pub fn from_seq(mut self, seq: u64) -> Self {
        self.from_seq = Some(seq);
        self
    }

    fn matches(&self, r: &Record) -> bool {
        self.kind.as_deref().is_none_or(|k| k == r.kind)
            && self.from_seq.is_none_or(|s| r.seq >= s)
            && self.to_seq.is_none_or(|s| r.seq < s)
    }
}

struct Chain {
    records: Vec<Record>,
    file: Option<File>,
    damaged_at: Option<u64>,
}

impl Chain {
    fn head(&self) -> (u64, &str) {
        match self.records.last() {
            Some(r) => (r.seq + 1, r.hash.as_str()),
            None => (0, GENESIS_HASH),
        }
    }
}

pub struct RecordStore {
    dir: Option<PathBuf>,
    chains: RwLock<BTreeMap<String, Arc<Mutex<Chain>>>>,
    appended: watch::Sender<u64>,
}

impl std::fmt::Debug for RecordStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecordStore")
            .field("dir", &self.dir)
            .finish_non_exhaustive()
    }
}

pub fn is_valid_chain_id(id: &str) -> bool {
    (1..=128).contains(&id.len())
        && !id.starts_with('.')
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

impl RecordStore {
    /// A store that lives only in memory.
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            chains: RwLock::default(),
            appended: watch::channel(0).0,
        }
    }

    /// Opens (or creates) a store under `root`; chains live in `root/records/`.
    /// The in-memory index is rebuilt from the files. A chain whose file does
    /// not verify is loaded up to the damage and then refuses appends.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, RecordError> {
        let dir = root.as_ref().join("records");
        fs::create_dir_all(&dir)?;
        let mut chains = BTreeMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(chain_id) = name.strip_suffix(".log") else {
                continue;
            };
            if !is_valid_chain_id(chain_id) {
                continue;
            }
            let bytes = fs::read(&path)?;
            let (records, report) = scan(chain_id, &bytes);
            let file = OpenOptions::new().append(true).open(&path)?;
            chains.insert(
                chain_id.to_owned(),
                Arc::new(Mutex::new(Chain {
                    records,
                    file: Some(file),
                    damaged_at: report.first_bad,
                })),
            );
        }
        Ok(Self {
            dir: Some(dir),
            chains: RwLock::new(chains),
            appended: watch::channel(0).0,
        })
    }

    pub fn chain_path(&self, run_id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{run_id}.log")))
    }

    fn chain(&self, run_id: &str) -> Option<Arc<Mutex<Chain>>> {
        self.chains
            .read()
            .expect("chain map lock")
            .get(run_id)
            .cloned()
    }

    fn chain_or_create(&self, run_id: &str) -> Result<Arc<Mutex<Chain>>, RecordError> {
        if let Some(c) = self.chain(run_id) {
            return Ok(c);
        }
        if !is_valid_chain_id(run_id) {
            return Err(RecordError::InvalidChainId(run_id.to_owned()));
        }
        let mut map = self.chains.write().expect("chain map lock");
        if let Some(c) = map.get(run_id) {
            return Ok(c.clone());
        }
        let file = match self.chain_path(run_id) {
            Some(path) => Some(OpenOptions::new().create(true).append(true).open(path)?),
            None => None,
        };
        let chain = Arc::new(Mutex::new(Chain {
            records: Vec::new(),
            file,
            damaged_at: None,
        }));
        map.insert(run_id.to_owned(), chain.clone());
        Ok(chain)
    }

    /// Appends a record to `run_id`'s chain. The line is written and synced
    /// before the record is returned.
    pub fn append(
        &self,
        run_id: &str,
        kind: &str,
        payload: Payload,
        ts: u64,
    ) -> Result<Record, RecordError> {
        let chain = self.chain_or_create(run_id)?;
        let mut chain = chain.lock().expect("chain lock");
        if let Some(seq) = chain.damaged_at {
            return Err(RecordError::Damaged {
                chain: run_id.to_owned(),
                seq,
            });
        }
        let (seq, prev) = chain.head();
        let prev_hash = prev.to_owned();
        let hash = chain_hash(&prev_hash, &body_bytes(seq, run_id, ts, kind, &payload));
        let record = Record {
            seq,
            run_id: run_id.to_owned(),
            ts,
            kind: kind.to_owned(),
            payload,
            prev_hash,
            hash,
        };
        if let Some(file) = chain.file.as_mut() {
            let mut line = record.to_line();
            line.push(b'\n');
            file.write_all(&line)?;
            file.sync_data()?;
        }
        chain.records.push(record.clone());
        drop(chain);
        self.appended.send_modify(|n| *n += 1);
        Ok(record)
    }

    /// Recomputes every hash of `run_id`'s chain from storage.
    pub fn verify_chain(&self, run_id: &str) -> Result<VerificationReport, RecordError> {
        if let Some(path) = self.chain_path(run_id) {
            return match fs::read(&path) {
                Ok(bytes) => Ok(verify_bytes(run_id, &bytes)),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(verify_bytes(run_id, b"")),
                Err(e) => Err(e.into()),
            };
        }
        let bytes: Vec<u8> = self
            .chain(run_id)
            .map(|c| {
                c.lock()
                    .expect("chain lock")
                    .records
                    .iter()
                    .flat_map(|r| {
                        let mut l = r.to_line();
                        l.push(b'\n');
                        l
                    })
                    .collect()
            })
            .unwrap_or_default();
        Ok(verify_bytes(run_id, &bytes))
    }

    /// Matching records ordered by `(run_id, seq)`. Each chain contributes a
    /// consistent prefix even while appends are in flight.
    pub fn query(&self, filter: &RecordFilter) -> Vec<Record> {
        let chains: Vec<Arc<Mutex<Chain>>> = {
            let map = self.chains.read().expect("chain map lock");
            match &filter.run_id {
                Some(id) => map.get(id).cloned().into_iter().collect(),
                None => map.values().cloned().collect(),
            }
        };
        let limit = filter.limit.unwrap_or(usize::MAX);
        let mut out = Vec::new();
        for chain in chains {
            let chain = chain.lock().expect("chain lock");
            for r in chain.records.iter().filter(|r| filter.matches(r)) {
                if out.len() >= limit {
                    return out;
                }
                out.push(r.clone());
            }
        }
        out
    }

    pub fn chain_ids(&self) -> Vec<String> {
        self.chains
            .read()
            .expect("chain map lock")
            .keys()
            .cloned()
            .collect()
    }

    pub fn len(&self, run_id: &str) -> u64 {
        self.chain(run_id)
            .map(|c| c.lock().expect("chain lock").records.len() as u64)
            .unwrap_or(0)
    }

    pub fn is_empty(&self, run_id: &str) -> bool {
        self.len(run_id) == 0
    }

    /// Hash of the newest record, or the genesis hash for an empty chain.
    pub fn head_hash(&self, run_id: &str) -> String {
        self.chain(run_id)
            .map(|c| c.lock().expect("chain lock").head().1.to_owned())
            .unwrap_or_else(|| GENESIS_HASH.to_owned())
    }

    /// Ticks once per append across all chains.
    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.appended.subscribe()
    }
}

/// Verifies a chain's raw file contents.
pub fn verify_bytes(run_id: &str, bytes: &[u8]) -> VerificationReport {
    let (records, report) = scan(run_id, bytes);
    debug_assert_eq!(report.ok, report.first_bad.is_none());
    VerificationReport {
        records: records.len() as u64,
        ..report
    }
}

fn scan(run_id: &str, bytes: &[u8]) -> (Vec<Record>, VerificationReport) {
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    let terminated = lines.last().is_some_and(|l| l.is_empty());
    if terminated {
        lines.pop();
    }
    let mut records = Vec::with_capacity(lines.len());
    let fail = |records: Vec<Record>, seq: usize, reason: String| {
        let report = VerificationReport {
            run_id: run_id.to_owned(),
            records: records.len() as u64,
            ok: false,
            first_bad: Some(seq as u64),
            reason: Some(reason),
        };
        (records, report)
    };

    let count = lines.len();
    for (i, line) in lines.into_iter().enumerate() {
        if i + 1 == count && !terminated {
            return fail(records, i, "unterminated line".into());
        }
        let record: Record = match serde_json::from_slice(line) {
            Ok(r) => r,
            Err(e) => return fail(records, i, format!("unparseable: {e}")),
        };
        if record.to_line() != line {
            return fail(records, i, "not canonical".into());
        }
        if record.seq != i as u64 {
            return fail(records, i, format!("seq {} at position {i}", record.seq));
        }
        if record.run_id != run_id {
            return fail(records, i, format!("foreign run_id `{}`", record.run_id));
        }
        let expected_prev = records
            .last()
            .map(|r: &Record| r.hash.as_str())
            .unwrap_or(GENESIS_HASH);
        if record.prev_hash != expected_prev {
            return fail(records, i, "prev_hash does not link".into());
        }
        if record.compute_hash() != record.hash {
            return fail(records, i, "hash mismatch".into());
        }
        records.push(record);
    }
    let report = VerificationReport {
        run_id: run_id.to_owned(),
        records: records.len() as u64,
        ok: true,
        first_bad: None,
        reason: None,
    };
    (records, report)
}
