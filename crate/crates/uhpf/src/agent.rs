//! Deep recurrent Q-learning: epsilon-greedy behavior, an episode replay
//! buffer, TD targets from a periodically synced target network, and the
//! training loop in two modes — coordinated agents sharing the team reward
//! with sink-layer parameter averaging, and independent learners rewarded on
//! their own throughput.

use crate::env::{Action, Env, EnvError, SlotPolicy, ACTION_COUNT};
use crate::federation::{
    fedavg, sink_round, FederationError, ParamSnapshot, SinkConfig, SinkOutcome,
};
use crate::neural::{
    adam_step, bptt_gradients, forward, forward_sequence, init_params, AdamHyper, AdamState,
    GruState, NetDims, NeuralError, QNetParams, SequenceSample,
};
use crate::seeds::{self, tag};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("non-finite loss at episode {episode}, agent {agent}")]
    NonFiniteLoss { episode: u64, agent: usize },
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_episodes: u64,
    pub minibatch: usize,
    /// Replay capacity in episodes; the oldest episode is evicted first.
    pub buffer_capacity: usize,
    /// Hard-copy the target network every this many episodes.
    pub target_update_period: u64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes over which exploration decays linearly from start to end.
    pub epsilon_decay_episodes: u64,
    /// Run one optimizer step per agent every this many episodes.
    pub update_period: u64,
    pub lr: f64,
    /// Global-norm gradient clip applied before each optimizer step.
    pub grad_clip: f64,
    /// Emit one learning-curve point every this many episodes.
    pub curve_period: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_episodes: 300_000,
            minibatch: 32,
            buffer_capacity: 10_000,
            target_update_period: 200,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_episodes: 150_000,
            update_period: 1,
            lr: 1e-3,
            grad_clip: 10.0,
            curve_period: 100,
        }
    }
}

/// Exploration probability for a (zero-based) episode index: linear decay
/// from `epsilon_start` to `epsilon_end` over `epsilon_decay_episodes`, then
/// constant.
pub fn epsilon(episode: u64, config: &TrainConfig) -> f64 {
    if episode >= config.epsilon_decay_episodes {
        return config.epsilon_end;
    }
    let span = config.epsilon_start - config.epsilon_end;
    let frac = episode as f64 / config.epsilon_decay_episodes as f64;
    (config.epsilon_start - span * frac).max(config.epsilon_end)
}

/// Epsilon-greedy selection: with probability `eps` a uniform action,
/// otherwise the argmax with lowest-index tie-break.
pub fn select_action<R: Rng>(q: &[f64], eps: f64, rng: &mut R) -> Action {
    debug_assert_eq!(q.len(), ACTION_COUNT);
    if rng.gen::<f64>() < eps {
        return Action::new(rng.gen_range(0..ACTION_COUNT));
    }
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    Action::new(best)
}

/// One-step Q-learning target.
pub fn td_target(reward: f64, max_next_q: f64, done: bool, gamma: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * max_next_q
    }
}

/// One agent's view of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentEpisode {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

/// FIFO episode buffer with uniform without-replacement minibatch sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    episodes: VecDeque<AgentEpisode>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            episodes: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn push(&mut self, episode: AgentEpisode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &AgentEpisode> {
        self.episodes.iter()
    }

    /// Uniformly samples `count` distinct episodes; `None` while underfilled.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Option<Vec<&AgentEpisode>> {
        if self.episodes.len() < count {
            return None;
        }
        let picks = rand::seq::index::sample(rng, self.episodes.len(), count);
        Some(picks.iter().map(|i| &self.episodes[i]).collect())
    }
}

/// Copies the online parameters into the target network at every multiple of
/// the update period (1-based episode count).
pub fn update_target(
    online: &QNetParams,
    target: &mut QNetParams,
    episodes_done: u64,
    period: u64,
) {
    if episodes_done > 0 && episodes_done % period == 0 {
        target.clone_from(online);
    }
}

/// Builds the TD-target sequences for a sampled batch using the target
/// network, then applies one Adam step on the online network. Returns the
/// loss, or `None` while the buffer holds fewer than `minibatch` episodes.
pub fn train_step<R: Rng>(
    online: &mut QNetParams,
    target: &QNetParams,
    buffer: &ReplayBuffer,
    config: &TrainConfig,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<Option<f64>, TrainError> {
    let sampled = match buffer.sample(config.minibatch, rng) {
        Some(s) => s,
        None => return Ok(None),
    };

    let mut batch = Vec::with_capacity(sampled.len());
    for episode in sampled {
        let t_len = episode.obs.len();
        let target_q = forward_sequence(target, &episode.obs)?;
        let targets = (0..t_len)
            .map(|t| {
                let done = t + 1 == t_len;
                let max_next = if done {
                    0.0
                } else {
                    target_q[t + 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                };
                td_target(episode.rewards[t], max_next, done, config.gamma)
            })
            .collect();
        batch.push(SequenceSample {
            obs: episode.obs.clone(),
            actions: episode.actions.clone(),
            targets,
        });
    }

    let (mut grads, loss) = bptt_gradients(online, &batch)?;
    if config.grad_clip.is_finite() {
        clip_global_norm(&mut grads, config.grad_clip);
    }
    let hyper = AdamHyper {
        lr: config.lr,
        ..AdamHyper::default()
    };
    adam_step(online, &grads, adam, &hyper)?;
    Ok(Some(loss))
}

/// Rescales gradients so their global L2 norm does not exceed `max_norm`.
fn clip_global_norm(grads: &mut QNetParams, max_norm: f64) {
    let flat = grads.flatten();
    let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        let scaled: Vec<f64> = flat.iter().map(|g| g * scale).collect();
        *grads = QNetParams::unflatten(grads.dims, &scaled).expect("same shape");
    }
}

/// Coordinated team training versus independent learners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Shared team reward; parameters periodically averaged through the sink.
    Uhpnf,
    /// Per-agent reward (own delivered bits, normalized); no coordination.
    Iql,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Uhpnf => "uhpnf",
            TrainMode::Iql => "iql",
        }
    }
}

/// One learning-curve sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: u64,
    pub epsilon: f64,
    /// Mean per-slot team reward over the window.
    pub mean_reward: f64,
    /// Mean training loss over the window (NaN before any optimizer step).
    pub loss: f64,
}

/// Final models plus the learning curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub mode: TrainMode,
    /// Each agent's final parameters. After coordinated training these are
    /// all equal to `team`.
    pub per_agent: Vec<ParamSnapshot>,
    /// Equal-weight aggregate of the per-agent parameters.
    pub team: ParamSnapshot,
    pub curve: Vec<CurvePoint>,
}

struct AgentState {
    online: QNetParams,
    target: QNetParams,
    adam: AdamState,
    buffer: ReplayBuffer,
    explore_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    hidden: GruState,
}

/// Runs the full training loop on the given environment.
///
/// All randomness derives from `seed`; two calls with identical inputs
/// produce identical outcomes, including the learning curve.
pub fn train(
    env: &mut Env,
    train_cfg: &TrainConfig,
    sink_cfg: &SinkConfig,
    mode: TrainMode,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    let n = env.n();
    let dims = NetDims::DEFAULT;
    let slots = env.config().slots_per_episode;
    let norm = env.channel().bandwidth_hz * env.config().slot_duration_s;

    let mut agents: Vec<AgentState> = (0..n)
        .map(|i| {
            let online = init_params(dims, seeds::derive(seed, tag::INIT, i as u64));
            AgentState {
                target: online.clone(),
                adam: AdamState::new(dims),
                buffer: ReplayBuffer::new(train_cfg.buffer_capacity),
                explore_rng: ChaCha8Rng::seed_from_u64(seeds::derive(
                    seed,
                    tag::EXPLORE,
                    i as u64,
                )),
                sample_rng: ChaCha8Rng::seed_from_u64(seeds::derive(
                    seed,
                    tag::SAMPLE,
                    i as u64,
                )),
                hidden: GruState::zeros(dims.hidden),
                online,
            }
        })
        .collect();

    let mut curve = Vec::new();
    let mut window_reward = 0.0;
    let mut window_slots = 0u64;
    let mut window_loss = 0.0;
    let mut window_steps = 0u64;

    for episode in 0..train_cfg.total_episodes {
        let eps = epsilon(episode, train_cfg);
        let mut obs = env.reset(seeds::derive(seed, tag::EPISODE, episode))?;
        for a in agents.iter_mut() {
            a.hidden = GruState::zeros(dims.hidden);
        }

        let mut records: Vec<AgentEpisode> = (0..n)
            .map(|_| AgentEpisode {
                obs: Vec::with_capacity(slots),
                actions: Vec::with_capacity(slots),
                rewards: Vec::with_capacity(slots),
            })
            .collect();

        for _slot in 0..slots {
            let mut actions = Vec::with_capacity(n);
            for (i, agent) in agents.iter_mut().enumerate() {
                let (q, next) = forward(&agent.online, &obs[i], &agent.hidden)?;
                agent.hidden = next;
                actions.push(select_action(&q, eps, &mut agent.explore_rng));
            }
            let out = env.step(&actions)?;
            for i in 0..n {
                records[i].obs.push(std::mem::take(&mut obs[i]));
                records[i].actions.push(out.effective[i].index());
                let reward = match mode {
                    TrainMode::Uhpnf => out.reward,
                    TrainMode::Iql => out.metrics.bits[i] / norm,
                };
                records[i].rewards.push(reward);
            }
            window_reward += out.reward;
            window_slots += 1;
            obs = out.observations;
        }

        for (agent, record) in agents.iter_mut().zip(records) {
            agent.buffer.push(record);
        }

        let episodes_done = episode + 1;

        if episodes_done % train_cfg.update_period == 0 {
            for (i, agent) in agents.iter_mut().enumerate() {
                let loss = train_step(
                    &mut agent.online,
                    &agent.target,
                    &agent.buffer,
                    train_cfg,
                    &mut agent.adam,
                    &mut agent.sample_rng,
                )?;
                if let Some(l) = loss {
                    if !l.is_finite() {
                        return Err(TrainError::NonFiniteLoss {
                            episode: episodes_done,
                            agent: i,
                        });
                    }
                    window_loss += l;
                    window_steps += 1;
                }
            }
        }

        for agent in agents.iter_mut() {
            update_target(
                &agent.online,
                &mut agent.target,
                episodes_done,
                train_cfg.target_update_period,
            );
        }

        if mode == TrainMode::Uhpnf {
            let snapshots: Vec<Option<ParamSnapshot>> = agents
                .iter()
                .enumerate()
                .map(|(i, a)| Some(ParamSnapshot::from_params(&a.online, i as u32, episodes_done)))
                .collect();
            if let SinkOutcome::Broadcast(aggregate) =
                sink_round(&snapshots, episodes_done, sink_cfg)?
            {
                let params = aggregate.to_params()?;
                for agent in agents.iter_mut() {
                    agent.online.clone_from(&params);
                }
            }
        }

        if episodes_done % train_cfg.curve_period == 0 {
            curve.push(CurvePoint {
                episode: episodes_done,
                epsilon: eps,
                mean_reward: window_reward / window_slots.max(1) as f64,
                loss: if window_steps > 0 {
                    window_loss / window_steps as f64
                } else {
                    f64::NAN
                },
            });
            window_reward = 0.0;
            window_slots = 0;
            window_loss = 0.0;
            window_steps = 0;
        }
    }

    // A final aggregation closes coordinated training so the returned team
    // model is exactly what every node executes.
    let mut per_agent: Vec<ParamSnapshot> = agents
        .iter()
        .enumerate()
        .map(|(i, a)| ParamSnapshot::from_params(&a.online, i as u32, train_cfg.total_episodes))
        .collect();
    let team = if mode == TrainMode::Uhpnf && train_cfg.total_episodes > 0 {
        let aggregate = fedavg(&per_agent, &vec![1.0; n])?;
        let params = aggregate.to_params()?;
        per_agent = (0..n)
            .map(|i| ParamSnapshot::from_params(&params, i as u32, train_cfg.total_episodes))
            .collect();
        aggregate
    } else {
        fedavg(&per_agent, &vec![1.0; n])?
    };

    Ok(TrainOutcome {
        mode,
        per_agent,
        team,
        curve,
    })
}

/// Greedy (or epsilon-noisy) execution of a trained network for one node.
pub struct NetPolicy {
    params: QNetParams,
    hidden: GruState,
    epsilon: f64,
    rng: ChaCha8Rng,
}

impl NetPolicy {
    pub fn new(params: QNetParams, epsilon: f64, seed: u64) -> NetPolicy {
        let hidden = GruState::zeros(params.dims.hidden);
        NetPolicy {
            params,
            hidden,
            epsilon,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_snapshot(
        snapshot: &ParamSnapshot,
        epsilon: f64,
        seed: u64,
    ) -> Result<NetPolicy, FederationError> {
        Ok(NetPolicy::new(snapshot.to_params()?, epsilon, seed))
    }
}

impl SlotPolicy for NetPolicy {
    fn begin_episode(&mut self) {
        self.hidden = GruState::zeros(self.params.dims.hidden);
    }

    fn act(&mut self, _node: usize, _slot: usize, obs: &[f64]) -> Action {
        let (q, next) = forward(&self.params, obs, &self.hidden)
            .expect("trained network produced non-finite output");
        self.hidden = next;
        select_action(&q, self.epsilon, &mut self.rng)
    }
}
