//! Offline evaluation twin: seeded re-simulation of scenarios against
//! registered models, batch what-if reports, and network-level composition
//! of per-subnet policies.
//!
//! A report is a pure function of `(scenario, snapshot)`: rerunning a cell
//! with the same inputs reproduces it bit for bit.

use crate::agent::NetPolicy;
use crate::baselines::{BaselineKind, Greedy, RandomPolicy, Tdma};
use crate::channel::ChannelParams;
use crate::env::{run_episode, Env, EnvError, EpisodeConfig, EpisodeTrace, Objective, SlotPolicy, OBS_DIM, ACTION_COUNT};
use crate::federation::{crc32, deserialize, serialize, FederationError, ParamSnapshot};
use crate::neural::NetDims;
use crate::seeds::{self, tag};
use crate::topology::{place_cylinder, PlacementMode, TopologyError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TwinError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("snapshot architecture {got:?} does not match the environment ({want:?})")]
    ArchitectureMismatch { got: [u32; 4], want: [u32; 4] },
    #[error("no model registered for objective {0}")]
    UnknownObjective(String),
    #[error("subnet assignment is not a partition: {0}")]
    BadPartition(String),
    #[error("registry I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
}

/// A fully reproducible evaluation setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n: usize,
    pub epsilon_fail: f64,
    pub objective: Objective,
    pub placement: PlacementMode,
    pub seed: u64,
    pub slots: usize,
    pub runs: u64,
    pub channel: ChannelParams,
    pub slot_duration_s: f64,
    pub battery_capacity_j: f64,
    pub radius_m: f64,
    pub height_m: f64,
}

impl Scenario {
    pub fn new(n: usize, objective: Objective, seed: u64) -> Scenario {
        Scenario {
            n,
            epsilon_fail: 0.0,
            objective,
            placement: PlacementMode::Deterministic,
            seed,
            slots: 60,
            runs: 60,
            channel: ChannelParams::default(),
            slot_duration_s: 10.0,
            battery_capacity_j: 1e6,
            radius_m: 4000.0,
            height_m: 1000.0,
        }
    }

    pub fn build_env(&self) -> Result<Env, TwinError> {
        let topology = place_cylinder(
            self.n,
            self.radius_m,
            self.height_m,
            self.placement,
            self.seed,
        )?;
        let cfg = EpisodeConfig {
            slots_per_episode: self.slots,
            slot_duration_s: self.slot_duration_s,
            objective: self.objective,
            epsilon_fail: self.epsilon_fail,
            battery_capacity_j: self.battery_capacity_j,
        };
        Ok(Env::new(topology, self.channel.clone(), cfg)?)
    }
}

/// What to run in each node's decision slot.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    Baseline(BaselineKind),
    /// Every node executes the same snapshot.
    Shared(ParamSnapshot),
    /// Node `i` executes `snapshots[i]` (independent learners, or a composed
    /// network policy).
    PerNode(Vec<ParamSnapshot>),
}

fn check_architecture(snapshot: &ParamSnapshot) -> Result<(), TwinError> {
    let want = NetDims {
        input: OBS_DIM,
        fc1: snapshot.dims.fc1,
        hidden: snapshot.dims.hidden,
        actions: ACTION_COUNT,
    };
    if snapshot.dims.input != OBS_DIM || snapshot.dims.actions != ACTION_COUNT {
        return Err(TwinError::ArchitectureMismatch {
            got: snapshot.dims.descriptor(),
            want: want.descriptor(),
        });
    }
    Ok(())
}

fn build_policies(
    spec: &PolicySpec,
    n: usize,
    run_seed: u64,
) -> Result<Vec<Box<dyn SlotPolicy>>, TwinError> {
    let mut out: Vec<Box<dyn SlotPolicy>> = Vec::with_capacity(n);
    for i in 0..n {
        let policy_seed = seeds::derive(run_seed, tag::POLICY, i as u64);
        out.push(match spec {
            PolicySpec::Baseline(BaselineKind::Greedy) => Box::new(Greedy),
            PolicySpec::Baseline(BaselineKind::Tdma) => Box::new(Tdma { n }),
            PolicySpec::Baseline(BaselineKind::Random) => {
                Box::new(RandomPolicy::new(policy_seed))
            }
            PolicySpec::Baseline(BaselineKind::Iql) => {
                // IQL is a trained policy; callers evaluate it as PerNode
                // snapshots produced by the trainer.
                return Err(TwinError::UnknownObjective(
                    "iql must be evaluated from trained snapshots".into(),
                ));
            }
            PolicySpec::Shared(snapshot) => {
                check_architecture(snapshot)?;
                Box::new(NetPolicy::from_snapshot(snapshot, 0.0, policy_seed)?)
            }
            PolicySpec::PerNode(snapshots) => {
                if snapshots.len() != n {
                    return Err(TwinError::BadPartition(format!(
                        "{} snapshots for {n} nodes",
                        snapshots.len()
                    )));
                }
                check_architecture(&snapshots[i])?;
                Box::new(NetPolicy::from_snapshot(&snapshots[i], 0.0, policy_seed)?)
            }
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation of the three headline metrics across
/// runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub runs: u64,
    pub mean_concurrent: f64,
    pub std_concurrent: f64,
    /// Mean total delivered kilobits per run.
    pub capacity_kb: f64,
    pub std_capacity_kb: f64,
    /// Mean end-of-run Jain fairness of per-node delivered bits.
    pub fairness: f64,
    pub std_fairness: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `scenario.runs` independent greedy-execution episodes and aggregates
/// the metrics. Failed nodes behave randomly, exactly as in training.
pub fn evaluate(spec: &PolicySpec, scenario: &Scenario) -> Result<EvalMetrics, TwinError> {
    let traces = evaluate_traces(spec, scenario)?;
    let concurrent: Vec<f64> = traces.iter().map(|t| t.mean_concurrent()).collect();
    let capacity: Vec<f64> = traces.iter().map(|t| t.total_bits() / 1000.0).collect();
    let fairness: Vec<f64> = traces.iter().map(|t| t.final_fairness()).collect();
    let (mean_concurrent, std_concurrent) = mean_std(&concurrent);
    let (capacity_kb, std_capacity_kb) = mean_std(&capacity);
    let (fairness_mean, std_fairness) = mean_std(&fairness);
    Ok(EvalMetrics {
        runs: scenario.runs,
        mean_concurrent,
        std_concurrent,
        capacity_kb,
        std_capacity_kb,
        fairness: fairness_mean,
        std_fairness,
    })
}

/// Like [`evaluate`] but returns every per-run trace (the input of the
/// per-slot exporter).
pub fn evaluate_traces(
    spec: &PolicySpec,
    scenario: &Scenario,
) -> Result<Vec<EpisodeTrace>, TwinError> {
    let mut env = scenario.build_env()?;
    let mut traces = Vec::with_capacity(scenario.runs as usize);
    for run in 0..scenario.runs {
        let run_seed = seeds::derive(scenario.seed, tag::EVAL_RUN, run);
        let mut policies = build_policies(spec, scenario.n, run_seed)?;
        traces.push(run_episode(&mut env, run_seed, &mut policies)?);
    }
    Ok(traces)
}

/// Objective-indexed store of trained snapshots, at most one per objective.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, ParamSnapshot>,
}

impl ModelRegistry {
    pub fn new() -> ModelRegistry {
        ModelRegistry::default()
    }

    /// Registers (or replaces) the snapshot for an objective.
    pub fn register(&mut self, objective: Objective, snapshot: ParamSnapshot) {
        self.models.insert(objective.name().to_string(), snapshot);
    }

    /// Returns the registered snapshot; a missing objective is an explicit
    /// error, never a silent fallback.
    pub fn select_model(&self, objective: Objective) -> Result<&ParamSnapshot, TwinError> {
        self.models
            .get(objective.name())
            .ok_or_else(|| TwinError::UnknownObjective(objective.name().to_string()))
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamSnapshot)> {
        self.models.iter()
    }

    /// Persists every snapshot as a wire-format file plus a `manifest.txt`
    /// of `objective  file-name  crc32` lines.
    pub fn save(&self, dir: &Path) -> Result<(), TwinError> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (objective, snapshot) in &self.models {
            let file = format!("{objective}.uhpf");
            let bytes = serialize(snapshot);
            let crc = crc32(&bytes[..bytes.len() - 4]);
            crate::report::write_atomic(&dir.join(&file), &bytes)?;
            manifest.push_str(&format!("{objective} {file} {crc:08x}\n"));
        }
        crate::report::write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())?;
        Ok(())
    }

    /// Loads a registry directory, validating each file's checksum against
    /// both the wire CRC and the manifest entry.
    pub fn load(dir: &Path) -> Result<ModelRegistry, TwinError> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut registry = ModelRegistry::new();
        for (idx, line) in manifest.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (objective, file, crc_hex) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => {
                    return Err(TwinError::BadManifest {
                        line: line_no,
                        reason: "expected `objective file crc32`".into(),
                    })
                }
            };
            let objective = Objective::parse(objective).ok_or_else(|| TwinError::BadManifest {
                line: line_no,
                reason: format!("unknown objective `{objective}`"),
            })?;
            let expected_crc =
                u32::from_str_radix(crc_hex, 16).map_err(|e| TwinError::BadManifest {
                    line: line_no,
                    reason: format!("bad checksum: {e}"),
                })?;
            let bytes = std::fs::read(dir.join(file))?;
            let snapshot = deserialize(&bytes)?;
            let crc = crc32(&bytes[..bytes.len() - 4]);
            if crc != expected_crc {
                return Err(TwinError::BadManifest {
                    line: line_no,
                    reason: format!("manifest crc {expected_crc:08x} != file crc {crc:08x}"),
                });
            }
            registry.register(objective, snapshot);
        }
        Ok(registry)
    }
}

/// One evaluated (scenario, model) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfCell {
    pub scenario_index: usize,
    pub model: String,
    /// Checksum of the evaluated snapshot, for traceability.
    pub snapshot_crc: u32,
    pub metrics: EvalMetrics,
}

/// Cross-product of scenarios and models, sorted per scenario by the
/// scenario's objective metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfReport {
    pub cells: Vec<WhatIfCell>,
}

impl fmt::Display for WhatIfReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cells {
            writeln!(
                f,
                "scenario {} model {} crc {:08x}: concurrent {:.3} capacity {:.1} kb fairness {:.3}",
                c.scenario_index, c.model, c.snapshot_crc,
                c.metrics.mean_concurrent, c.metrics.capacity_kb, c.metrics.fairness
            )?;
        }
        Ok(())
    }
}

fn objective_metric(objective: Objective, m: &EvalMetrics) -> f64 {
    match objective {
        Objective::MaxConcurrent => m.mean_concurrent,
        Objective::MaxCapacity => m.capacity_kb,
        Objective::MaxFairness => m.fairness,
    }
}

/// Evaluates every model on every scenario. Within a scenario, rows are
/// sorted best-first on the scenario's own objective metric (ties keep model
/// name order).
pub fn what_if(
    models: &[(String, ParamSnapshot)],
    scenarios: &[Scenario],
) -> Result<WhatIfReport, TwinError> {
    if models.is_empty() || scenarios.is_empty() {
        return Err(TwinError::UnknownObjective(
            "what-if needs at least one model and one scenario".into(),
        ));
    }
    let mut cells = Vec::with_capacity(models.len() * scenarios.len());
    for (scenario_index, scenario) in scenarios.iter().enumerate() {
        let mut row: Vec<WhatIfCell> = Vec::with_capacity(models.len());
        for (name, snapshot) in models {
            let metrics = evaluate(&PolicySpec::Shared(snapshot.clone()), scenario)?;
            row.push(WhatIfCell {
                scenario_index,
                model: name.clone(),
                snapshot_crc: snapshot.checksum(),
                metrics,
            });
        }
        row.sort_by(|a, b| {
            objective_metric(scenario.objective, &b.metrics)
                .partial_cmp(&objective_metric(scenario.objective, &a.metrics))
                .unwrap()
                .then_with(|| a.model.cmp(&b.model))
        });
        cells.extend(row);
    }
    Ok(WhatIfReport { cells })
}

/// Maps every node to its subnet's snapshot. Rejects assignments that leave
/// a node uncovered or cover it twice.
pub fn compose_joint_policy(
    n: usize,
    subnets: &[(Vec<usize>, ParamSnapshot)],
) -> Result<Vec<ParamSnapshot>, TwinError> {
    let mut per_node: Vec<Option<&ParamSnapshot>> = vec![None; n];
    for (members, snapshot) in subnets {
        for &node in members {
            if node >= n {
                return Err(TwinError::BadPartition(format!(
                    "node {node} outside 0..{n}"
                )));
            }
            if per_node[node].is_some() {
                return Err(TwinError::BadPartition(format!(
                    "node {node} assigned to two subnets"
                )));
            }
            per_node[node] = Some(snapshot);
        }
    }
    per_node
        .into_iter()
        .enumerate()
        .map(|(node, s)| {
            s.cloned()
                .ok_or_else(|| TwinError::BadPartition(format!("node {node} unassigned")))
        })
        .collect()
}

/// Checksum table of a composed policy, `node -> snapshot crc`.
pub fn policy_table(assignments: &[ParamSnapshot]) -> Vec<(usize, u32)> {
    assignments
        .iter()
        .enumerate()
        .map(|(node, s)| (node, s.checksum()))
        .collect()
}

/// Standard location helpers for registry directories.
pub fn registry_path(base: &Path) -> PathBuf {
    base.join("registry")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{init_params, QNetParams};

    fn snapshot(seed: u64) -> ParamSnapshot {
        ParamSnapshot::from_params(&init_params(NetDims::DEFAULT, seed), 0, 0)
    }

    #[test]
    fn tdma_reference_evaluation_hits_one() {
        let scenario = Scenario::new(5, Objective::MaxConcurrent, 3);
        let m = evaluate(&PolicySpec::Baseline(BaselineKind::Tdma), &scenario).unwrap();
        assert_eq!(m.mean_concurrent, 1.0);
        assert_eq!(m.std_concurrent, 0.0);
        assert!(m.capacity_kb > 0.0);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let mut scenario = Scenario::new(4, Objective::MaxConcurrent, 9);
        scenario.runs = 10;
        scenario.epsilon_fail = 0.3;
        let spec = PolicySpec::Baseline(BaselineKind::Random);
        let a = evaluate(&spec, &scenario).unwrap();
        let b = evaluate(&spec, &scenario).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_snapshot_ties_break_to_silence() {
        let mut scenario = Scenario::new(3, Objective::MaxCapacity, 1);
        scenario.runs = 2;
        scenario.slots = 5;
        let zero = ParamSnapshot::from_params(&QNetParams::zeros(NetDims::DEFAULT), 0, 0);
        let m = evaluate(&PolicySpec::Shared(zero), &scenario).unwrap();
        assert_eq!(m.capacity_kb, 0.0);
        assert_eq!(m.mean_concurrent, 0.0);
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let bad = ParamSnapshot::from_params(
            &init_params(
                NetDims {
                    input: 5,
                    fc1: 8,
                    hidden: 8,
                    actions: 7,
                },
                1,
            ),
            0,
            0,
        );
        let scenario = Scenario::new(3, Objective::MaxConcurrent, 1);
        assert!(matches!(
            evaluate(&PolicySpec::Shared(bad), &scenario),
            Err(TwinError::ArchitectureMismatch { .. })
        ));
    }

    #[test]
    fn registry_select_and_missing() {
        let mut reg = ModelRegistry::new();
        let cap = snapshot(1);
        let fair = snapshot(2);
        reg.register(Objective::MaxCapacity, cap.clone());
        reg.register(Objective::MaxFairness, fair.clone());
        assert_eq!(
            reg.select_model(Objective::MaxFairness).unwrap().values,
            fair.values
        );
        assert!(matches!(
            reg.select_model(Objective::MaxConcurrent),
            Err(TwinError::UnknownObjective(_))
        ));
    }

    #[test]
    fn registry_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = ModelRegistry::new();
        reg.register(Objective::MaxCapacity, snapshot(5));
        reg.register(Objective::MaxFairness, snapshot(6));
        reg.save(dir.path()).unwrap();

        let loaded = ModelRegistry::load(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(
            loaded.select_model(Objective::MaxCapacity).unwrap().values,
            reg.select_model(Objective::MaxCapacity).unwrap().values
        );

        // Corrupt one snapshot file: loading must fail on checksum.
        let file = dir.path().join("max-capacity.uhpf");
        let mut bytes = std::fs::read(&file).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&file, bytes).unwrap();
        assert!(ModelRegistry::load(dir.path()).is_err());
    }

    #[test]
    fn what_if_single_cell_matches_evaluate() {
        let mut scenario = Scenario::new(3, Objective::MaxConcurrent, 2);
        scenario.runs = 3;
        scenario.slots = 10;
        let snap = snapshot(7);
        let direct = evaluate(&PolicySpec::Shared(snap.clone()), &scenario).unwrap();
        let report = what_if(&[("m".into(), snap)], &[scenario]).unwrap();
        assert_eq!(report.cells.len(), 1);
        assert_eq!(report.cells[0].metrics, direct);
    }

    #[test]
    fn what_if_sorts_by_scenario_objective() {
        let mut scenario = Scenario::new(3, Objective::MaxConcurrent, 4);
        scenario.runs = 2;
        scenario.slots = 10;
        let zero = ParamSnapshot::from_params(&QNetParams::zeros(NetDims::DEFAULT), 0, 0);
        let models = vec![("random-ish".to_string(), snapshot(9)), ("zero".to_string(), zero)];
        let report = what_if(&models, &[scenario]).unwrap();
        assert_eq!(report.cells.len(), 2);
        assert!(
            report.cells[0].metrics.mean_concurrent >= report.cells[1].metrics.mean_concurrent
        );
    }

    #[test]
    fn compose_partition_rules() {
        let a = snapshot(1);
        let b = snapshot(2);
        let single = compose_joint_policy(3, &[(vec![0, 1, 2], a.clone())]).unwrap();
        assert_eq!(single.len(), 3);
        assert!(single.iter().all(|s| s.values == a.values));

        let two = compose_joint_policy(4, &[(vec![0, 2], a.clone()), (vec![1, 3], b.clone())])
            .unwrap();
        assert_eq!(two[0].values, a.values);
        assert_eq!(two[1].values, b.values);
        assert_eq!(two[3].values, b.values);
        let table = policy_table(&two);
        assert_eq!(table[0].1, a.checksum());
        assert_eq!(table[1].1, b.checksum());

        assert!(compose_joint_policy(3, &[(vec![0, 1], a.clone())]).is_err());
        assert!(
            compose_joint_policy(3, &[(vec![0, 1, 2], a.clone()), (vec![2], b.clone())]).is_err()
        );
    }

    #[test]
    fn select_then_evaluate_is_referentially_transparent() {
        let mut reg = ModelRegistry::new();
        let snap = snapshot(11);
        reg.register(Objective::MaxConcurrent, snap.clone());
        let mut scenario = Scenario::new(3, Objective::MaxConcurrent, 5);
        scenario.runs = 2;
        scenario.slots = 8;
        let via_registry = evaluate(
            &PolicySpec::Shared(reg.select_model(Objective::MaxConcurrent).unwrap().clone()),
            &scenario,
        )
        .unwrap();
        let direct = evaluate(&PolicySpec::Shared(snap), &scenario).unwrap();
        assert_eq!(via_registry, direct);
    }
}
