//! Node placement inside the cylindrical deployment region and failure sampling.
//!
//! Transmitters sit on the bottom plane (`z = 0`) and receivers on the top
//! plane (`z = height`). Link `i` is always the pair `tx_i -> rx_i`; the
//! pairing never changes after construction.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("node count must be at least 1")]
    EmptyTopology,
    #[error("region dimensions must be positive (radius {radius} m, height {height} m)")]
    BadRegion { radius: f64, height: f64 },
    #[error("failure probability {0} outside [0, 1]")]
    BadFailureProbability(f64),
}

/// How transmitters and receivers are laid out inside the cylinder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlacementMode {
    /// Transmitters evenly spaced on a circle of radius `radius / 2` at the
    /// bottom; receiver `i` on the same circle at the top, rotated by `pi / n`.
    Deterministic,
    /// Both endpoints drawn uniformly from their respective disks,
    /// reproducible from the seed.
    UniformRandom,
}

/// A fixed set of `n` transmitter/receiver pairs in the cylindrical region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub n: usize,
    /// Transmitter positions `(x, y, z)` in metres, all at `z = 0`.
    pub tx_pos: Vec<[f64; 3]>,
    /// Receiver positions `(x, y, z)` in metres, all at `z = height`.
    pub rx_pos: Vec<[f64; 3]>,
    pub radius_m: f64,
    pub height_m: f64,
}

impl Topology {
    /// Euclidean distance from transmitter `tx` to receiver `rx` in metres.
    pub fn distance(&self, tx: usize, rx: usize) -> f64 {
        let a = self.tx_pos[tx];
        let b = self.rx_pos[rx];
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let dz = a[2] - b[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Places `n` transmitter/receiver pairs in a cylinder of the given radius and
/// height. Random placement draws transmitters first (node order), then
/// receivers, so layouts are reproducible from the seed alone.
pub fn place_cylinder(
    n: usize,
    radius_m: f64,
    height_m: f64,
    mode: PlacementMode,
    seed: u64,
) -> Result<Topology, TopologyError> {
    if n == 0 {
        return Err(TopologyError::EmptyTopology);
    }
    if radius_m <= 0.0 || height_m <= 0.0 {
        return Err(TopologyError::BadRegion {
            radius: radius_m,
            height: height_m,
        });
    }

    let (tx_pos, rx_pos) = match mode {
        PlacementMode::Deterministic => {
            let ring = radius_m / 2.0;
            let tx = (0..n)
                .map(|i| {
                    let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    [ring * theta.cos(), ring * theta.sin(), 0.0]
                })
                .collect();
            let rx = (0..n)
                .map(|i| {
                    let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64
                        + std::f64::consts::PI / n as f64;
                    [ring * theta.cos(), ring * theta.sin(), height_m]
                })
                .collect();
            (tx, rx)
        }
        PlacementMode::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draw_disk = |z: f64, rng: &mut ChaCha8Rng| {
                let r = radius_m * rng.gen::<f64>().sqrt();
                let theta = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
                [r * theta.cos(), r * theta.sin(), z]
            };
            let tx = (0..n).map(|_| draw_disk(0.0, &mut rng)).collect();
            let rx = (0..n).map(|_| draw_disk(height_m, &mut rng)).collect();
            (tx, rx)
        }
    };

    Ok(Topology {
        n,
        tx_pos,
        rx_pos,
        radius_m,
        height_m,
    })
}

/// Which nodes have failed to load their decision model for a whole run.
///
/// Sampled once per evaluation run, never per slot: a failed node stays in
/// random-transmit mode for the rest of the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureMask {
    pub failed: Vec<bool>,
}

impl FailureMask {
    pub fn none(n: usize) -> Self {
        FailureMask {
            failed: vec![false; n],
        }
    }

    pub fn is_failed(&self, node: usize) -> bool {
        self.failed[node]
    }

    pub fn count(&self) -> usize {
        self.failed.iter().filter(|&&f| f).count()
    }
}

/// Samples an independent Bernoulli(`epsilon`) failure for each node.
pub fn sample_failures<R: Rng>(
    epsilon: f64,
    n: usize,
    rng: &mut R,
) -> Result<FailureMask, TopologyError> {
    if !(0.0..=1.0).contains(&epsilon) || epsilon.is_nan() {
        return Err(TopologyError::BadFailureProbability(epsilon));
    }
    let failed = (0..n).map(|_| rng.gen::<f64>() < epsilon).collect();
    Ok(FailureMask { failed })
}
