//! Run configuration: a flat `key = value` text format covering every
//! channel, topology, scenario, training, and federation parameter. Every
//! key is optional and falls back to the documented default; unknown keys
//! are hard errors so typos never pass silently.

use crate::agent::TrainConfig;
use crate::channel::ChannelParams;
use crate::env::Objective;
use crate::federation::SinkConfig;
use crate::topology::PlacementMode;
use crate::twin::Scenario;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every tunable of a run. Constructed from defaults or parsed text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub channel: ChannelParams,
    pub n: usize,
    pub radius_m: f64,
    pub height_m: f64,
    pub placement: PlacementMode,
    pub slots: usize,
    pub slot_duration_s: f64,
    pub objective: Objective,
    pub epsilon_fail: f64,
    pub runs: u64,
    pub battery_j: f64,
    pub train: TrainConfig,
    pub federation: SinkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            channel: ChannelParams::default(),
            n: 5,
            radius_m: 4000.0,
            height_m: 1000.0,
            placement: PlacementMode::Deterministic,
            slots: 60,
            slot_duration_s: 10.0,
            objective: Objective::MaxConcurrent,
            epsilon_fail: 0.0,
            runs: 60,
            battery_j: 1e6,
            train: TrainConfig::default(),
            federation: SinkConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses the `key = value` format. `#` starts a comment; blank lines are
    /// ignored; unknown or duplicate keys are rejected with their line
    /// number.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = match content.split_once('=') {
                Some((k, v)) => (k.trim().to_string(), v.trim().to_string()),
                None => {
                    return Err(ConfigError::Syntax {
                        line,
                        text: content.to_string(),
                    })
                }
            };
            if seen.contains(&key) {
                return Err(ConfigError::DuplicateKey { line, key });
            }
            cfg.apply(&key, &value, line)?;
            seen.push(key);
        }

        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason: format!("{e}"),
            })
        }

        match key {
            "channel.carrier_khz" => self.channel.carrier_khz = num(key, value, line)?,
            "channel.bandwidth_hz" => self.channel.bandwidth_hz = num(key, value, line)?,
            "channel.spreading_exponent" => {
                self.channel.spreading_exponent = num(key, value, line)?
            }
            "channel.sound_speed_ms" => self.channel.sound_speed_ms = num(key, value, line)?,
            "channel.source_level_offset_db" => {
                self.channel.source_level_offset_db = num(key, value, line)?
            }
            "channel.sinr_threshold" => self.channel.sinr_threshold = num(key, value, line)?,

            "topology.n" => self.n = num(key, value, line)?,
            "topology.radius_m" => self.radius_m = num(key, value, line)?,
            "topology.height_m" => self.height_m = num(key, value, line)?,
            "topology.placement" => {
                self.placement = match value {
                    "deterministic" => PlacementMode::Deterministic,
                    "uniform-random" => PlacementMode::UniformRandom,
                    other => {
                        return Err(ConfigError::BadValue {
                            line,
                            key: key.to_string(),
                            reason: format!(
                                "`{other}` is not `deterministic` or `uniform-random`"
                            ),
                        })
                    }
                }
            }

            "scenario.slots" => self.slots = num(key, value, line)?,
            "scenario.slot_duration_s" => self.slot_duration_s = num(key, value, line)?,
            "scenario.objective" => {
                self.objective = Objective::parse(value).ok_or_else(|| ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    reason: format!(
                        "`{value}` is not max-concurrent, max-capacity, or max-fairness"
                    ),
                })?
            }
            "scenario.epsilon_fail" => self.epsilon_fail = num(key, value, line)?,
            "scenario.runs" => self.runs = num(key, value, line)?,
            "scenario.battery_j" => self.battery_j = num(key, value, line)?,

            "train.episodes" => self.train.total_episodes = num(key, value, line)?,
            "train.minibatch" => self.train.minibatch = num(key, value, line)?,
            "train.buffer_capacity" => self.train.buffer_capacity = num(key, value, line)?,
            "train.target_update_period" => {
                self.train.target_update_period = num(key, value, line)?
            }
            "train.gamma" => self.train.gamma = num(key, value, line)?,
            "train.lr" => self.train.lr = num(key, value, line)?,
            "train.epsilon_start" => self.train.epsilon_start = num(key, value, line)?,
            "train.epsilon_end" => self.train.epsilon_end = num(key, value, line)?,
            "train.epsilon_decay_episodes" => {
                self.train.epsilon_decay_episodes = num(key, value, line)?
            }
            "train.update_period" => self.train.update_period = num(key, value, line)?,
            "train.grad_clip" => self.train.grad_clip = num(key, value, line)?,
            "train.curve_period" => self.train.curve_period = num(key, value, line)?,

            "federation.sync_period" => self.federation.sync_period = num(key, value, line)?,
            "federation.detect_window" => self.federation.detect_window = num(key, value, line)?,
            "federation.fail_threshold" => {
                self.federation.fail_threshold = num(key, value, line)?
            }
            "federation.healthy_threshold" => {
                self.federation.healthy_threshold = num(key, value, line)?
            }

            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.channel
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.n == 0 {
            return Err(ConfigError::Invalid("topology.n must be >= 1".into()));
        }
        if self.slots == 0 {
            return Err(ConfigError::Invalid("scenario.slots must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon_fail) {
            return Err(ConfigError::Invalid(format!(
                "scenario.epsilon_fail {} outside [0, 1]",
                self.epsilon_fail
            )));
        }
        if self.runs == 0 {
            return Err(ConfigError::Invalid("scenario.runs must be >= 1".into()));
        }
        if self.train.minibatch == 0 || self.train.buffer_capacity == 0 {
            return Err(ConfigError::Invalid(
                "train.minibatch and train.buffer_capacity must be >= 1".into(),
            ));
        }
        if self.train.update_period == 0
            || self.train.target_update_period == 0
            || self.train.curve_period == 0
        {
            return Err(ConfigError::Invalid("train periods must be >= 1".into()));
        }
        if self.train.epsilon_decay_episodes == 0 {
            return Err(ConfigError::Invalid(
                "train.epsilon_decay_episodes must be >= 1".into(),
            ));
        }
        if self.federation.sync_period == 0 {
            return Err(ConfigError::Invalid(
                "federation.sync_period must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// The evaluation scenario this configuration describes, bound to a seed.
    pub fn scenario(&self, seed: u64) -> Scenario {
        Scenario {
            n: self.n,
            epsilon_fail: self.epsilon_fail,
            objective: self.objective,
            placement: self.placement,
            seed,
            slots: self.slots,
            runs: self.runs,
            channel: self.channel.clone(),
            slot_duration_s: self.slot_duration_s,
            battery_capacity_j: self.battery_j,
            radius_m: self.radius_m,
            height_m: self.height_m,
        }
    }
}
