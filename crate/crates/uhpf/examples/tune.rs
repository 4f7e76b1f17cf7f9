// Scratch harness for pinning design constants; not part of the deliverable.
use std::time::Instant;
use uhpf::agent::{train, TrainConfig, TrainMode};
use uhpf::baselines::{RandomPolicy, Tdma};
use uhpf::channel::ChannelParams;
use uhpf::env::{run_episode, Env, EpisodeConfig, Objective, SlotPolicy};
use uhpf::federation::SinkConfig;
use uhpf::seeds::{self, tag};
use uhpf::topology::{place_cylinder, PlacementMode};

fn tdma_mean(beta: f64, eps_fail: f64, runs: u64) -> f64 {
    let topo = place_cylinder(5, 4000.0, 1000.0, PlacementMode::Deterministic, 0).unwrap();
    let channel = ChannelParams {
        sinr_threshold: beta,
        ..ChannelParams::default()
    };
    let cfg = EpisodeConfig {
        epsilon_fail: eps_fail,
        ..EpisodeConfig::default()
    };
    let mut env = Env::new(topo, channel, cfg).unwrap();
    let mut total = 0.0;
    for r in 0..runs {
        let mut policies: Vec<Box<dyn SlotPolicy>> = (0..5)
            .map(|_| Box::new(Tdma { n: 5 }) as Box<dyn SlotPolicy>)
            .collect();
        let trace = run_episode(&mut env, seeds::derive(100, tag::EVAL_RUN, r), &mut policies).unwrap();
        total += trace.mean_concurrent();
    }
    total / runs as f64
}

fn random_mean(beta: f64, n: usize, runs: u64, seed: u64) -> f64 {
    let topo = place_cylinder(n, 4000.0, 1000.0, PlacementMode::UniformRandom, seed).unwrap();
    let channel = ChannelParams {
        sinr_threshold: beta,
        ..ChannelParams::default()
    };
    let cfg = EpisodeConfig {
        slots_per_episode: 20,
        ..EpisodeConfig::default()
    };
    let mut env = Env::new(topo, channel, cfg).unwrap();
    let mut total = 0.0;
    for r in 0..runs {
        let mut policies: Vec<Box<dyn SlotPolicy>> = (0..n)
            .map(|i| {
                Box::new(RandomPolicy::new(seeds::derive(seed, tag::POLICY, 1000 + r * 10 + i as u64)))
                    as Box<dyn SlotPolicy>
            })
            .collect();
        let trace = run_episode(&mut env, seeds::derive(seed, tag::EVAL_RUN, r), &mut policies).unwrap();
        total += trace.mean_concurrent();
    }
    total / runs as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("tdma");

    match mode {
        "tdma" => {
            for beta in [1.0, 10.0, 30.0, 50.0, 100.0] {
                let base = tdma_mean(beta, 0.0, 60);
                let degraded = tdma_mean(beta, 0.2, 200);
                println!(
                    "beta {beta:>6.1}: eps0 {base:.4}  eps0.2 {degraded:.4}  decline {:.1}%",
                    (1.0 - degraded / base) * 100.0
                );
            }
        }
        "random" => {
            for seed in 1..=5 {
                println!(
                    "seed {seed}: n=3 random mean {:.3}",
                    random_mean(50.0, 3, 50, seed)
                );
            }
        }
        "bench" => {
            // Desk-scale training throughput probe.
            let topo = place_cylinder(3, 4000.0, 1000.0, PlacementMode::UniformRandom, 1).unwrap();
            let channel = ChannelParams::default();
            let cfg = EpisodeConfig {
                slots_per_episode: 20,
                objective: Objective::MaxConcurrent,
                ..EpisodeConfig::default()
            };
            let episodes: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
            let minibatch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
            let update_period: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4);
            let mut env = Env::new(topo, channel, cfg).unwrap();
            let tc = TrainConfig {
                total_episodes: episodes,
                minibatch,
                buffer_capacity: 2000,
                target_update_period: 100,
                epsilon_decay_episodes: 10_000,
                update_period,
                curve_period: 100,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let out = train(&mut env, &tc, &SinkConfig::default(), TrainMode::Uhpnf, 1).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            println!(
                "episodes {episodes} b{minibatch} up{update_period}: {dt:.1}s  ({:.1} ep/s), last reward {:?}",
                episodes as f64 / dt,
                out.curve.last().map(|c| c.mean_reward)
            );
        }
        "full" => {
            // Criterion-3 rehearsal: train uhpnf and iql on one seed, then
            // evaluate greedily against the Random baseline.
            use uhpf::twin::{evaluate, PolicySpec, Scenario};
            let episodes: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20_000);
            let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
            let minibatch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
            let update_period: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(4);
            let decay: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(episodes / 2);
            let lr: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let grad_clip: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(10.0);

            let mut scenario = Scenario::new(3, Objective::MaxConcurrent, seed);
            scenario.placement = PlacementMode::UniformRandom;
            scenario.slots = 20;
            scenario.runs = 30;

            let tc = TrainConfig {
                total_episodes: episodes,
                minibatch,
                buffer_capacity: 2000,
                target_update_period: 200,
                epsilon_decay_episodes: decay,
                update_period,
                lr,
                grad_clip,
                curve_period: (episodes / 10).max(1),
                ..TrainConfig::default()
            };
            let sink = SinkConfig::default();

            let t0 = Instant::now();
            let mut env = scenario.build_env().unwrap();
            let uhpnf = train(&mut env, &tc, &sink, TrainMode::Uhpnf, seed).unwrap();
            let t_uhpnf = t0.elapsed().as_secs_f64();

            let t1 = Instant::now();
            let mut env = scenario.build_env().unwrap();
            let iql = train(&mut env, &tc, &sink, TrainMode::Iql, seed).unwrap();
            let t_iql = t1.elapsed().as_secs_f64();

            let m_uhpnf = evaluate(&PolicySpec::Shared(uhpnf.team.clone()), &scenario).unwrap();
            let m_iql = evaluate(&PolicySpec::PerNode(iql.per_agent.clone()), &scenario).unwrap();
            let m_rand = evaluate(
                &PolicySpec::Baseline(uhpf::baselines::BaselineKind::Random),
                &scenario,
            )
            .unwrap();

            println!(
                "seed {seed} ep {episodes} b{minibatch} up{update_period} decay {decay} lr {lr}:"
            );
            println!(
                "  uhpnf {:.3}  iql {:.3}  random {:.3}   (train {:.0}s + {:.0}s)",
                m_uhpnf.mean_concurrent, m_iql.mean_concurrent, m_rand.mean_concurrent,
                t_uhpnf, t_iql
            );
            for c in uhpnf.curve.iter() {
                println!("  curve uhpnf ep {} eps {:.2} reward {:.3} loss {:.4}", c.episode, c.epsilon, c.mean_reward, c.loss);
            }
            // Action histograms of one greedy episode per policy.
            use uhpf::twin::evaluate_traces;
            let mut small = scenario.clone();
            small.runs = 3;
            for (name, spec) in [
                ("uhpnf", PolicySpec::Shared(uhpnf.team.clone())),
                ("iql", PolicySpec::PerNode(iql.per_agent.clone())),
            ] {
                let traces = evaluate_traces(&spec, &small).unwrap();
                let mut hist = std::collections::BTreeMap::new();
                for t in &traces {
                    for s in &t.slots {
                        for &w in &s.effective_w {
                            *hist.entry(w as u64).or_insert(0u64) += 1;
                        }
                    }
                }
                println!("  {name} action watts histogram: {hist:?}  concurrent/slot {:.3}",
                    traces.iter().map(|t| t.mean_concurrent()).sum::<f64>() / traces.len() as f64);
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
