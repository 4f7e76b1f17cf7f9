//! Sink-layer parameter exchange: the model snapshot wire format, federated
//! averaging, periodic sync rounds during training, and responsive
//! re-broadcast when a link goes quiet.
//!
//! Only model parameters cross this boundary — never observations and never
//! the model structure beyond the four layer dimensions needed to size the
//! payload.
//!
//! ## Wire format
//!
//! ```text
//! magic   "UHPF"                     4 bytes
//! version u32 little-endian          currently 1
//! layers  u32 little-endian          number of layer dimensions
//! dims    layers x u32 LE            [input, fc1, hidden, actions]
//! payload param_count x f32 LE       parameters in flatten order
//! crc     u32 LE, CRC-32 (IEEE)      over all preceding bytes
//! ```
//!
//! Snapshot files on disk use this exact byte layout. Provenance travels in
//! the registry manifest, not on the wire.

use crate::neural::{NetDims, QNetParams};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"UHPF";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum FederationError {
    #[error("bad magic bytes, not a UHPF snapshot")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated or oversized stream: {0}")]
    BadLength(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("empty snapshot list")]
    EmptyInput,
    #[error("bad aggregation weights: {0}")]
    BadWeights(String),
}

/// Where a snapshot came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub agent_id: u32,
    pub episode: u64,
}

/// A versioned, checksummed parameter vector — the only artifact exchanged
/// between layers. Payload precision is 32-bit: exchanged models only need
/// inference fidelity, and it halves the wire size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub version: u32,
    pub dims: NetDims,
    pub values: Vec<f32>,
    /// Contributing agents; aggregates list every input.
    pub provenance: Vec<ProvenanceEntry>,
}

impl ParamSnapshot {
    /// Captures the current parameters of one agent.
    pub fn from_params(params: &QNetParams, agent_id: u32, episode: u64) -> ParamSnapshot {
        ParamSnapshot {
            version: SNAPSHOT_VERSION,
            dims: params.dims,
            values: params.flatten().iter().map(|&v| v as f32).collect(),
            provenance: vec![ProvenanceEntry { agent_id, episode }],
        }
    }

    /// Reconstructs double-precision parameters for inference or further
    /// training.
    pub fn to_params(&self) -> Result<QNetParams, FederationError> {
        let flat: Vec<f64> = self.values.iter().map(|&v| v as f64).collect();
        QNetParams::unflatten(self.dims, &flat)
            .map_err(|e| FederationError::ArchitectureMismatch(e.to_string()))
    }

    /// CRC-32 of the snapshot's wire encoding; doubles as its identity.
    pub fn checksum(&self) -> u32 {
        let bytes = serialize(self);
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap())
    }
}

// CRC-32 (IEEE 802.3, reflected 0xEDB88320), the same checksum zlib uses.
fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

/// CRC-32 checksum over `data`.
pub fn crc32(data: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(crc32_table);
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

/// Encodes a snapshot into the wire format described in the module docs.
pub fn serialize(snapshot: &ParamSnapshot) -> Vec<u8> {
    let descriptor = snapshot.dims.descriptor();
    let mut out = Vec::with_capacity(16 + 4 * descriptor.len() + 4 * snapshot.values.len() + 4);
    out.extend_from_slice(&SNAPSHOT_MAGIC);
    out.extend_from_slice(&snapshot.version.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    for d in descriptor {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &snapshot.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, FederationError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| FederationError::BadLength(format!("need 4 bytes at offset {offset}")))
}

/// Decodes a wire-format snapshot, verifying magic, version, length, and
/// checksum — each failure is a distinct error.
pub fn deserialize(bytes: &[u8]) -> Result<ParamSnapshot, FederationError> {
    if bytes.len() < 4 || bytes[0..4] != SNAPSHOT_MAGIC {
        return Err(FederationError::BadMagic);
    }
    let version = read_u32(bytes, 4)?;
    if version != SNAPSHOT_VERSION {
        return Err(FederationError::UnsupportedVersion(version));
    }
    let layer_count = read_u32(bytes, 8)? as usize;
    if layer_count != 4 {
        return Err(FederationError::ArchitectureMismatch(format!(
            "expected 4 layer dimensions, got {layer_count}"
        )));
    }
    let mut descriptor = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        descriptor.push(read_u32(bytes, 12 + 4 * i)?);
    }
    let dims = NetDims::from_descriptor(&descriptor).ok_or_else(|| {
        FederationError::ArchitectureMismatch(format!("bad layer dimensions {descriptor:?}"))
    })?;

    let header = 12 + 4 * layer_count;
    let expected = header + 4 * dims.param_count() + 4;
    if bytes.len() != expected {
        return Err(FederationError::BadLength(format!(
            "expected {expected} bytes for {:?}, got {}",
            descriptor,
            bytes.len()
        )));
    }

    let stored = read_u32(bytes, bytes.len() - 4)?;
    let computed = crc32(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(FederationError::ChecksumMismatch { stored, computed });
    }

    let values = bytes[header..bytes.len() - 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ParamSnapshot {
        version,
        dims,
        values,
        provenance: Vec::new(),
    })
}

/// Element-wise weighted mean of parameter snapshots. Weights are normalized
/// to sum to one; the result's provenance lists every input.
pub fn fedavg(
    snapshots: &[ParamSnapshot],
    weights: &[f64],
) -> Result<ParamSnapshot, FederationError> {
    if snapshots.is_empty() {
        return Err(FederationError::EmptyInput);
    }
    if weights.len() != snapshots.len() {
        return Err(FederationError::BadWeights(format!(
            "{} weights for {} snapshots",
            weights.len(),
            snapshots.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(FederationError::BadWeights("negative or non-finite weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(FederationError::BadWeights("weights sum to zero".into()));
    }
    let dims = snapshots[0].dims;
    for s in snapshots {
        if s.dims != dims {
            return Err(FederationError::ArchitectureMismatch(format!(
                "{:?} vs {:?}",
                s.dims.descriptor(),
                dims.descriptor()
            )));
        }
    }

    let mut acc = vec![0.0f64; snapshots[0].values.len()];
    for (s, &w) in snapshots.iter().zip(weights) {
        let wn = w / total;
        for (a, &v) in acc.iter_mut().zip(&s.values) {
            *a += wn * v as f64;
        }
    }
    let mut provenance = Vec::new();
    for s in snapshots {
        provenance.extend(s.provenance.iter().cloned());
    }
    Ok(ParamSnapshot {
        version: SNAPSHOT_VERSION,
        dims,
        values: acc.into_iter().map(|v| v as f32).collect(),
        provenance,
    })
}

/// Sink-layer sync configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkConfig {
    /// Aggregate-and-broadcast every `sync_period` episodes.
    pub sync_period: u64,
    /// Rolling window (slots) for the responsive failure detector.
    pub detect_window: usize,
    /// A node whose success rate drops below this while the subnet stays
    /// healthy triggers a re-broadcast.
    pub fail_threshold: f64,
    /// Minimum subnet-mean success rate for the detector to trust the window.
    pub healthy_threshold: f64,
}

impl Default for SinkConfig {
    fn default() -> Self {
        SinkConfig {
            sync_period: 100,
            detect_window: 10,
            fail_threshold: 0.1,
            healthy_threshold: 0.5,
        }
    }
}

/// What a sink round decided.
#[derive(Debug, Clone, PartialEq)]
pub enum SinkOutcome {
    /// Episode counter not on the sync period.
    NotDue,
    /// An agent's snapshot was missing; the round is skipped.
    Skipped { missing_agent: usize },
    /// Equal-weight aggregate to broadcast back to every agent.
    Broadcast(ParamSnapshot),
}

/// Runs one sink round: every `sync_period` episodes, collect each agent's
/// snapshot, average them with equal weights, and hand the aggregate back
/// for broadcast. A missing snapshot skips the round.
pub fn sink_round(
    snapshots: &[Option<ParamSnapshot>],
    episode: u64,
    config: &SinkConfig,
) -> Result<SinkOutcome, FederationError> {
    if episode == 0 || episode % config.sync_period != 0 {
        return Ok(SinkOutcome::NotDue);
    }
    if snapshots.is_empty() {
        return Err(FederationError::EmptyInput);
    }
    let mut collected = Vec::with_capacity(snapshots.len());
    for (idx, s) in snapshots.iter().enumerate() {
        match s {
            Some(snapshot) => collected.push(snapshot.clone()),
            None => return Ok(SinkOutcome::Skipped { missing_agent: idx }),
        }
    }
    let weights = vec![1.0; collected.len()];
    Ok(SinkOutcome::Broadcast(fedavg(&collected, &weights)?))
}

/// Rolling per-link success window driving the responsive re-broadcast.
#[derive(Debug, Clone)]
pub struct FailureDetector {
    window: usize,
    history: Vec<VecDeque<bool>>,
}

impl FailureDetector {
    pub fn new(n: usize, window: usize) -> FailureDetector {
        FailureDetector {
            window,
            history: vec![VecDeque::with_capacity(window); n],
        }
    }

    /// Records one slot of per-link success indicators.
    pub fn observe_slot(&mut self, successes: &[bool]) {
        assert_eq!(successes.len(), self.history.len());
        for (h, &s) in self.history.iter_mut().zip(successes) {
            if h.len() == self.window {
                h.pop_front();
            }
            h.push_back(s);
        }
    }

    fn rate(h: &VecDeque<bool>) -> f64 {
        h.iter().filter(|&&s| s).count() as f64 / h.len() as f64
    }

    /// Nodes whose success rate fell below `fail_threshold` while the subnet
    /// mean exceeds `healthy_threshold`. Empty until the window fills.
    pub fn struggling_nodes(&self, config: &SinkConfig) -> Vec<usize> {
        if self.history.iter().any(|h| h.len() < self.window) {
            return Vec::new();
        }
        let rates: Vec<f64> = self.history.iter().map(Self::rate).collect();
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        if mean <= config.healthy_threshold {
            return Vec::new();
        }
        rates
            .iter()
            .enumerate()
            .filter(|(_, &r)| r < config.fail_threshold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Advisory check over a metrics window: when some node has gone quiet while
/// the subnet is otherwise healthy, re-broadcast the latest aggregate
/// snapshot to all healthy nodes.
pub fn detect_and_restore(
    detector: &FailureDetector,
    latest_aggregate: &ParamSnapshot,
    config: &SinkConfig,
) -> Option<ParamSnapshot> {
    if detector.struggling_nodes(config).is_empty() {
        None
    } else {
        Some(latest_aggregate.clone())
    }
}
