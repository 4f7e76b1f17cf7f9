//! `uhpf` — train power-control models, compare policies under node
//! failures, sweep objectives across network sizes, and export traces.
//!
//! Exit codes: 0 success, 2 configuration/usage errors, 3 I/O errors,
//! 4 numerical failures.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use uhpf::agent::{train, TrainMode};
use uhpf::baselines::BaselineKind;
use uhpf::config::RunConfig;
use uhpf::env::Objective;
use uhpf::federation::serialize;
use uhpf::report::{self, CompareRow, SweepRow, TraceFile};
use uhpf::twin::{evaluate, evaluate_traces, ModelRegistry, PolicySpec, Scenario, TwinError};

mod exit {
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const NUMERIC: u8 = 4;
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> CliError {
        CliError {
            code: exit::CONFIG,
            message: message.into(),
        }
    }
    fn io(message: impl Into<String>) -> CliError {
        CliError {
            code: exit::IO,
            message: message.into(),
        }
    }
    fn numeric(message: impl Into<String>) -> CliError {
        CliError {
            code: exit::NUMERIC,
            message: message.into(),
        }
    }
}

impl From<uhpf::agent::TrainError> for CliError {
    fn from(e: uhpf::agent::TrainError) -> CliError {
        match &e {
            uhpf::agent::TrainError::NonFiniteLoss { .. } => CliError::numeric(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<TwinError> for CliError {
    fn from(e: TwinError) -> CliError {
        match &e {
            TwinError::Io(_) => CliError::io(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::io(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "uhpf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its snapshot plus the learning curve.
    Train {
        /// Run configuration file (key = value).
        #[arg(long)]
        config: PathBuf,
        /// Training mode: `uhpnf` (coordinated) or `iql` (independent).
        #[arg(long, default_value = "uhpnf")]
        mode: String,
        /// Master seed; fixes the whole run.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Snapshot output. Coordinated training writes one file here;
        /// independent training writes `<stem>.agent<i>.uhpf` per agent.
        #[arg(long)]
        out: PathBuf,
        /// Learning-curve CSV (default: `<out stem>.curve.csv`).
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Override train.episodes from the config.
        #[arg(long)]
        episodes: Option<u64>,
        /// Also register the snapshot under the config's objective here.
        #[arg(long)]
        register: Option<PathBuf>,
    },
    /// Evaluate policies across failure rates; one CSV row per cell.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: greedy, tdma, random, iql, uhpnf, uhpnf@<rate>.
        #[arg(long)]
        policies: String,
        /// Comma-separated evaluation failure probabilities.
        #[arg(long, default_value = "0")]
        epsilons: String,
        /// Evaluation runs per cell (overrides scenario.runs).
        #[arg(long)]
        runs: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write per-run traces (JSON); requires exactly one policy and one
        /// epsilon.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Evaluate registered models across network sizes (capacity and
    /// fairness per cell).
    SweepObjectives {
        #[arg(long)]
        config: PathBuf,
        /// Registry directory holding manifest.txt and snapshots.
        #[arg(long)]
        registry: PathBuf,
        /// Comma-separated transmitter counts.
        #[arg(long, default_value = "3,4,5")]
        n_list: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flatten a JSON trace file into per-slot CSV rows.
    Export {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    report::write_atomic(path, bytes)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn agent_path(out: &Path, agent: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("uhpf");
    out.with_file_name(format!("{stem}.agent{agent}.{ext}"))
}

fn cmd_train(
    config: &Path,
    mode: &str,
    seed: u64,
    out: &Path,
    curve: Option<PathBuf>,
    episodes: Option<u64>,
    register: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(e) = episodes {
        cfg.train.total_episodes = e;
    }
    let mode = match mode {
        "uhpnf" => TrainMode::Uhpnf,
        "iql" => TrainMode::Iql,
        other => return Err(CliError::config(format!("unknown training mode `{other}`"))),
    };

    let scenario = cfg.scenario(seed);
    let mut env = scenario.build_env()?;
    let outcome = train(&mut env, &cfg.train, &cfg.federation, mode, seed)?;

    match mode {
        TrainMode::Uhpnf => {
            write_file(out, &serialize(&outcome.team))?;
            println!("wrote {}", out.display());
        }
        TrainMode::Iql => {
            for (i, snap) in outcome.per_agent.iter().enumerate() {
                let path = agent_path(out, i);
                write_file(&path, &serialize(snap))?;
                println!("wrote {}", path.display());
            }
        }
    }

    let curve_path = curve.unwrap_or_else(|| {
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        out.with_file_name(format!("{stem}.curve.csv"))
    });
    write_file(&curve_path, report::curve_csv(&outcome.curve).as_bytes())?;
    println!("wrote {}", curve_path.display());

    if let Some(dir) = register {
        let mut registry = match ModelRegistry::load(&dir) {
            Ok(r) => r,
            Err(TwinError::Io(_)) => ModelRegistry::new(),
            Err(e) => return Err(e.into()),
        };
        registry.register(cfg.objective, outcome.team.clone());
        registry.save(&dir)?;
        println!(
            "registered {} in {}",
            cfg.objective.name(),
            dir.display()
        );
    }
    Ok(())
}

/// A comparison policy: a static baseline or a model trained on demand.
enum ComparePolicy {
    Baseline(BaselineKind),
    /// Coordinated model; `train_fail` is the failure rate injected during
    /// training (the `w/i <rate>` variants).
    Uhpnf { train_fail: f64 },
    Iql,
}

fn parse_policy(token: &str) -> Result<ComparePolicy, CliError> {
    match token {
        "greedy" => Ok(ComparePolicy::Baseline(BaselineKind::Greedy)),
        "tdma" => Ok(ComparePolicy::Baseline(BaselineKind::Tdma)),
        "random" => Ok(ComparePolicy::Baseline(BaselineKind::Random)),
        "iql" => Ok(ComparePolicy::Iql),
        "uhpnf" => Ok(ComparePolicy::Uhpnf { train_fail: -1.0 }),
        other => {
            if let Some(rate) = other.strip_prefix("uhpnf@") {
                let train_fail: f64 = rate.parse().map_err(|_| {
                    CliError::config(format!("bad failure rate in policy `{other}`"))
                })?;
                if !(0.0..=1.0).contains(&train_fail) {
                    return Err(CliError::config(format!(
                        "training failure rate {train_fail} outside [0, 1]"
                    )));
                }
                Ok(ComparePolicy::Uhpnf { train_fail })
            } else {
                Err(CliError::config(format!("unknown policy `{other}`")))
            }
        }
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|e| CliError::config(format!("bad {what} `{t}`: {e}")))
        })
        .collect()
}

fn cmd_compare(
    config: &Path,
    policies: &str,
    epsilons: &str,
    runs: Option<u64>,
    seed: u64,
    out: &Path,
    trace_out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(r) = runs {
        cfg.runs = r;
    }
    let policy_tokens: Vec<String> = policies
        .split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    if policy_tokens.is_empty() {
        return Err(CliError::config("no policies given"));
    }
    let eps_list: Vec<f64> = parse_list(epsilons, "epsilon")?;
    if eps_list.is_empty() {
        return Err(CliError::config("no epsilons given"));
    }
    for &e in &eps_list {
        if !(0.0..=1.0).contains(&e) {
            return Err(CliError::config(format!("epsilon {e} outside [0, 1]")));
        }
    }
    if trace_out.is_some() && (policy_tokens.len() != 1 || eps_list.len() != 1) {
        return Err(CliError::config(
            "--trace-out requires exactly one policy and one epsilon",
        ));
    }

    let mut rows = Vec::new();
    let mut traces: Option<TraceFile> = None;
    for token in &policy_tokens {
        let policy = parse_policy(token)?;

        // Trained policies are fit once per token, then swept over the
        // evaluation failure rates.
        let spec_base: PolicySpec = match &policy {
            ComparePolicy::Baseline(kind) => PolicySpec::Baseline(*kind),
            ComparePolicy::Uhpnf { train_fail } => {
                let mut train_scenario = cfg.scenario(seed);
                if *train_fail >= 0.0 {
                    train_scenario.epsilon_fail = *train_fail;
                }
                let mut env = train_scenario.build_env()?;
                let outcome = train(
                    &mut env,
                    &cfg.train,
                    &cfg.federation,
                    TrainMode::Uhpnf,
                    seed,
                )?;
                PolicySpec::Shared(outcome.team)
            }
            ComparePolicy::Iql => {
                let train_scenario = cfg.scenario(seed);
                let mut env = train_scenario.build_env()?;
                let outcome = train(
                    &mut env,
                    &cfg.train,
                    &cfg.federation,
                    TrainMode::Iql,
                    seed,
                )?;
                PolicySpec::PerNode(outcome.per_agent)
            }
        };

        for &eps in &eps_list {
            let mut scenario = cfg.scenario(seed);
            scenario.epsilon_fail = eps;
            let metrics = evaluate(&spec_base, &scenario)?;
            rows.push(CompareRow {
                policy: token.clone(),
                epsilon: eps,
                mean_concurrent: metrics.mean_concurrent,
                stddev: metrics.std_concurrent,
            });
            if trace_out.is_some() {
                traces = Some(TraceFile {
                    runs: evaluate_traces(&spec_base, &scenario)?,
                });
            }
        }
    }

    write_file(out, report::compare_csv(&rows).as_bytes())?;
    println!("wrote {}", out.display());
    if let (Some(path), Some(t)) = (trace_out, traces) {
        let json = serde_json::to_vec_pretty(&t)
            .map_err(|e| CliError::io(format!("trace encoding: {e}")))?;
        write_file(&path, &json)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    registry_dir: &Path,
    n_list: &str,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let registry = ModelRegistry::load(registry_dir)?;
    if registry.is_empty() {
        return Err(CliError::config(format!(
            "registry {} holds no models",
            registry_dir.display()
        )));
    }
    let ns: Vec<usize> = parse_list(n_list, "transmitter count")?;
    if ns.is_empty() || ns.contains(&0) {
        return Err(CliError::config("n list must hold positive counts"));
    }

    let mut rows = Vec::new();
    for &n in &ns {
        for (name, snapshot) in registry.iter() {
            // Each model is evaluated under the objective it was trained
            // for; the report always carries both headline metrics.
            let objective = Objective::parse(name)
                .ok_or_else(|| CliError::config(format!("bad objective `{name}` in registry")))?;
            let mut scenario: Scenario = cfg.scenario(seed);
            scenario.n = n;
            scenario.objective = objective;
            let metrics = evaluate(&PolicySpec::Shared(snapshot.clone()), &scenario)?;
            rows.push(SweepRow {
                model: name.clone(),
                n,
                capacity_kb: metrics.capacity_kb,
                fairness: metrics.fairness,
            });
        }
    }
    write_file(out, report::sweep_csv(&rows).as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_export(trace: &Path, out: &Path) -> Result<(), CliError> {
    let bytes = std::fs::read(trace)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", trace.display())))?;
    let parsed: TraceFile = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::config(format!("malformed trace {}: {e}", trace.display())))?;
    write_file(out, report::export_csv(&parsed).as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            mode,
            seed,
            out,
            curve,
            episodes,
            register,
        } => cmd_train(&config, &mode, seed, &out, curve, episodes, register),
        Command::Compare {
            config,
            policies,
            epsilons,
            runs,
            seed,
            out,
            trace_out,
        } => cmd_compare(&config, &policies, &epsilons, runs, seed, &out, trace_out),
        Command::SweepObjectives {
            config,
            registry,
            n_list,
            seed,
            out,
        } => cmd_sweep(&config, &registry, &n_list, seed, &out),
        Command::Export { trace, out } => cmd_export(&trace, &out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
