//! Tabular outputs: the CSV schemas shared by the command-line tools, the
//! JSON trace container, and atomic file writing.
//!
//! Floating-point columns use Rust's shortest round-trip formatting, so a
//! parsed-back value is bit-identical to the one written.

use crate::agent::CurvePoint;
use crate::env::EpisodeTrace;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

/// Writes via a sibling temp file and a rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.join(format!(
                ".{}.tmp",
                path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
            ))
        }
        None => Path::new(&format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
        ))
        .to_path_buf(),
    };
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// One row of the policy-comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub policy: String,
    pub epsilon: f64,
    pub mean_concurrent: f64,
    pub stddev: f64,
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("policy,epsilon,mean_concurrent,stddev\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.policy, r.epsilon, r.mean_concurrent, r.stddev
        )
        .unwrap();
    }
    out
}

/// One row of the objective-sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub n: usize,
    pub capacity_kb: f64,
    pub fairness: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("model,n,capacity_kb,fairness\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.model, r.n, r.capacity_kb, r.fairness).unwrap();
    }
    out
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("episode,epsilon,mean_reward,loss\n");
    for p in points {
        writeln!(out, "{},{},{},{}", p.episode, p.epsilon, p.mean_reward, p.loss).unwrap();
    }
    out
}

/// Multi-run trace container persisted as JSON by the evaluator and consumed
/// by the per-slot exporter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub runs: Vec<EpisodeTrace>,
}

/// Flattens traces into per-(run, slot, node) rows.
pub fn export_csv(trace: &TraceFile) -> String {
    let mut out = String::from("run,slot,node,action_W,sinr_db,bits,reward,concurrent_count\n");
    for (run, episode) in trace.runs.iter().enumerate() {
        for slot in &episode.slots {
            for node in 0..slot.effective_w.len() {
                let sinr_db = if slot.sinr[node] > 0.0 {
                    10.0 * slot.sinr[node].log10()
                } else {
                    f64::NEG_INFINITY
                };
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    run,
                    slot.slot,
                    node,
                    slot.effective_w[node],
                    sinr_db,
                    slot.bits[node],
                    slot.reward,
                    slot.concurrent
                )
                .unwrap();
            }
        }
    }
    out
}
