//! Acoustic link-budget model: absorption, spreading loss, ambient noise,
//! per-link SINR, Shannon rates, and the Jain fairness index.
//!
//! All SINR arithmetic happens in the linear domain in double precision;
//! decibels appear only at interfaces. Every function here is pure, so the
//! module is safe to call from any number of concurrent contexts.

use crate::topology::Topology;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("carrier frequency must be positive, got {0} kHz")]
    BadFrequency(f64),
    #[error("distance {0} m below the 1 m reference")]
    BadDistance(f64),
    #[error("invalid channel parameters: {0}")]
    BadParams(String),
    #[error("negative transmit power {0} W")]
    NegativePower(f64),
    #[error("negative SINR {0}")]
    NegativeSinr(f64),
    #[error("Jain index undefined: {0}")]
    JainUndefined(String),
}

/// Constants of the acoustic link-budget model.
///
/// `source_level_offset_db` converts electrical transmit power to a source
/// level: `SL = offset + 10 log10(P_W)` dB re 1 uPa at 1 m.
/// `sinr_threshold` is the linear SINR a link must reach for a slot to count
/// as a successful communication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub carrier_khz: f64,
    pub bandwidth_hz: f64,
    /// Spreading exponent `k`; 1.0 is cylindrical, 2.0 spherical.
    pub spreading_exponent: f64,
    pub sound_speed_ms: f64,
    pub source_level_offset_db: f64,
    pub sinr_threshold: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            carrier_khz: 20.0,
            bandwidth_hz: 10_000.0,
            spreading_exponent: 1.5,
            sound_speed_ms: 1500.0,
            source_level_offset_db: 170.8,
            // 17 dB decodability threshold. With the practical-spreading
            // link budget below, anything much looser lets a second
            // random-power transmission ride on top of a scheduled one, and
            // slotted schedules stop degrading under node failures.
            sinr_threshold: 50.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.carrier_khz > 0.0) {
            return Err(ChannelError::BadFrequency(self.carrier_khz));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(ChannelError::BadParams(format!(
                "bandwidth must be positive, got {} Hz",
                self.bandwidth_hz
            )));
        }
        if !(1.0..=2.0).contains(&self.spreading_exponent) {
            return Err(ChannelError::BadParams(format!(
                "spreading exponent {} outside [1, 2]",
                self.spreading_exponent
            )));
        }
        if !(self.sound_speed_ms > 0.0) {
            return Err(ChannelError::BadParams(format!(
                "sound speed must be positive, got {} m/s",
                self.sound_speed_ms
            )));
        }
        if !(self.sinr_threshold > 0.0) {
            return Err(ChannelError::BadParams(format!(
                "SINR success threshold must be positive, got {}",
                self.sinr_threshold
            )));
        }
        if !self.source_level_offset_db.is_finite() {
            return Err(ChannelError::BadParams(
                "source level offset must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Total in-band ambient noise power, linear.
    pub fn noise_linear(&self) -> f64 {
        10f64.powf(noise_level(self) / 10.0)
    }

    /// Linear source strength of a `power_w` transmission.
    pub fn source_linear(&self, power_w: f64) -> f64 {
        if power_w == 0.0 {
            0.0
        } else {
            power_w * 10f64.powf(self.source_level_offset_db / 10.0)
        }
    }
}

/// Thorp absorption coefficient in dB/km for a carrier of `f_khz`.
pub fn thorp_absorption(f_khz: f64) -> Result<f64, ChannelError> {
    if !(f_khz > 0.0) {
        return Err(ChannelError::BadFrequency(f_khz));
    }
    let f2 = f_khz * f_khz;
    Ok(0.11 * f2 / (1.0 + f2) + 44.0 * f2 / (4100.0 + f2) + 2.75e-4 * f2 + 0.003)
}

/// Transmission loss in dB over `d_m` metres: practical spreading plus Thorp
/// absorption, referenced to 1 m.
pub fn transmission_loss(d_m: f64, params: &ChannelParams) -> Result<f64, ChannelError> {
    if !(d_m >= 1.0) {
        return Err(ChannelError::BadDistance(d_m));
    }
    let spreading = 10.0 * params.spreading_exponent * d_m.log10();
    let absorption = thorp_absorption(params.carrier_khz)? * (d_m / 1000.0);
    Ok(spreading + absorption)
}

/// Total in-band ambient noise in dB: a simplified `50 - 18 log10(f)` dB/Hz
/// spectral density integrated over the receiver bandwidth.
pub fn noise_level(params: &ChannelParams) -> f64 {
    (50.0 - 18.0 * params.carrier_khz.log10()) + 10.0 * params.bandwidth_hz.log10()
}

/// Linear power gains between every transmitter and receiver.
///
/// `g[i][j]` is the gain from transmitter `j` to receiver `i`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainMatrix {
    pub n: usize,
    g: Vec<f64>,
}

impl GainMatrix {
    /// Gain from transmitter `tx` to receiver `rx`.
    #[inline]
    pub fn gain(&self, rx: usize, tx: usize) -> f64 {
        self.g[rx * self.n + tx]
    }

    pub fn entries(&self) -> &[f64] {
        &self.g
    }
}

/// Builds the gain matrix `g[i][j] = 10^(-TL(dist(tx_j, rx_i)) / 10)`.
pub fn gain_matrix(topology: &Topology, params: &ChannelParams) -> Result<GainMatrix, ChannelError> {
    params.validate()?;
    let n = topology.n;
    let mut g = vec![0.0; n * n];
    for rx in 0..n {
        for tx in 0..n {
            let tl = transmission_loss(topology.distance(tx, rx), params)?;
            g[rx * n + tx] = 10f64.powf(-tl / 10.0);
        }
    }
    Ok(GainMatrix { n, g })
}

/// Per-link linear SINR under the joint power allocation `powers_w`.
///
/// Links transmitting at 0 W report an SINR of 0. Every other link sees the
/// ambient noise plus the interference from all simultaneously active
/// transmitters.
pub fn sinr(
    powers_w: &[f64],
    gains: &GainMatrix,
    params: &ChannelParams,
) -> Result<Vec<f64>, ChannelError> {
    assert_eq!(powers_w.len(), gains.n, "one power entry per link");
    for &p in powers_w {
        if p < 0.0 || p.is_nan() {
            return Err(ChannelError::NegativePower(p));
        }
    }
    let noise = params.noise_linear();
    let sources: Vec<f64> = powers_w.iter().map(|&p| params.source_linear(p)).collect();
    let out = (0..gains.n)
        .map(|i| {
            if powers_w[i] == 0.0 {
                return 0.0;
            }
            let mut interference = 0.0;
            for (j, &s) in sources.iter().enumerate() {
                if j != i && s > 0.0 {
                    interference += s * gains.gain(i, j);
                }
            }
            sources[i] * gains.gain(i, i) / (noise + interference)
        })
        .collect();
    Ok(out)
}

/// Shannon rate `B log2(1 + sinr)` in bit/s.
pub fn shannon_rate(sinr: f64, bandwidth_hz: f64) -> Result<f64, ChannelError> {
    if sinr < 0.0 || sinr.is_nan() {
        return Err(ChannelError::NegativeSinr(sinr));
    }
    Ok(bandwidth_hz * (1.0 + sinr).log2())
}

/// Jain fairness index `(sum x)^2 / (n * sum x^2)`, in `[1/n, 1]`.
///
/// Undefined (and rejected) when the input is empty, contains a negative
/// value, or is all zero.
pub fn jain_fairness(x: &[f64]) -> Result<f64, ChannelError> {
    if x.is_empty() {
        return Err(ChannelError::JainUndefined("empty input".into()));
    }
    if x.iter().any(|&v| v < 0.0 || v.is_nan()) {
        return Err(ChannelError::JainUndefined(
            "negative or NaN value in input".into(),
        ));
    }
    let sum: f64 = x.iter().sum();
    let sum_sq: f64 = x.iter().map(|&v| v * v).sum();
    if sum_sq == 0.0 {
        return Err(ChannelError::JainUndefined("all-zero input".into()));
    }
    Ok(sum * sum / (x.len() as f64 * sum_sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{place_cylinder, PlacementMode};
    use proptest::prelude::*;

    fn params(carrier_khz: f64, bandwidth_hz: f64, k: f64) -> ChannelParams {
        ChannelParams {
            carrier_khz,
            bandwidth_hz,
            spreading_exponent: k,
            ..ChannelParams::default()
        }
    }

    #[test]
    fn thorp_limit_and_point_values() {
        // Direct evaluation of the Thorp expression as an independent check.
        let eval = |f: f64| {
            0.11 * f * f / (1.0 + f * f) + 44.0 * f * f / (4100.0 + f * f) + 2.75e-4 * f * f + 0.003
        };
        assert!((thorp_absorption(1e-9).unwrap() - 0.003).abs() < 1e-12);
        assert!((thorp_absorption(1.0).unwrap() - eval(1.0)).abs() < 1e-15);
        assert!((thorp_absorption(1.0).unwrap() - 0.069004).abs() < 5e-7);
        assert!((thorp_absorption(10.0).unwrap() - eval(10.0)).abs() < 1e-15);
        assert!((thorp_absorption(10.0).unwrap() - 1.18703).abs() < 5e-6);
        assert!(thorp_absorption(0.0).is_err());
        assert!(thorp_absorption(-3.0).is_err());
    }

    #[test]
    fn transmission_loss_reference_and_points() {
        let p = params(10.0, 10_000.0, 1.5);
        // At the 1 m reference only the absorption over one metre remains,
        // about a millidecibel.
        let tl_ref = transmission_loss(1.0, &p).unwrap();
        assert!((0.0..0.002).contains(&tl_ref), "reference loss {tl_ref}");
        // 45 dB spreading + 1.18703 dB absorption over 1 km.
        let tl1k = transmission_loss(1000.0, &p).unwrap();
        assert!((tl1k - 46.18703).abs() < 5e-6);
        // 15 log10(2000) + 2 * thorp(10).
        let tl2k = transmission_loss(2000.0, &p).unwrap();
        let expected = 15.0 * 2000f64.log10() + 2.0 * thorp_absorption(10.0).unwrap();
        assert!((tl2k - expected).abs() < 1e-12);
        assert!((tl2k - 51.8895).abs() < 5e-5);
        assert!(transmission_loss(0.5, &p).is_err());
    }

    #[test]
    fn noise_level_anchor_points() {
        assert!((noise_level(&params(1.0, 1.0, 1.5)) - 50.0).abs() < 1e-12);
        let nl20 = noise_level(&params(20.0, 10_000.0, 1.5));
        let expected = 50.0 - 18.0 * 20f64.log10() + 40.0;
        assert!((nl20 - expected).abs() < 1e-12);
        assert!((nl20 - 66.5815).abs() < 5e-5);
        assert!((noise_level(&params(10.0, 10_000.0, 1.5)) - 72.0).abs() < 1e-12);
    }

    #[test]
    fn gain_matrix_reference_distance_and_symmetry() {
        // A single pair 1 m apart has unit gain.
        let topo = Topology {
            n: 1,
            tx_pos: vec![[0.0, 0.0, 0.0]],
            rx_pos: vec![[0.0, 0.0, 1.0]],
            radius_m: 10.0,
            height_m: 1.0,
        };
        let g = gain_matrix(&topo, &params(10.0, 10_000.0, 1.5)).unwrap();
        assert!((g.gain(0, 0) - 1.0).abs() < 1e-3);

        // Mirror placement: two pairs reflected through the origin.
        let topo2 = Topology {
            n: 2,
            tx_pos: vec![[-500.0, 0.0, 0.0], [500.0, 0.0, 0.0]],
            rx_pos: vec![[-500.0, 300.0, 100.0], [500.0, -300.0, 100.0]],
            radius_m: 1000.0,
            height_m: 100.0,
        };
        let g2 = gain_matrix(&topo2, &params(10.0, 10_000.0, 1.5)).unwrap();
        assert_eq!(g2.gain(0, 1), g2.gain(1, 0));
    }

    #[test]
    fn gain_matches_transmission_loss_to_ulp() {
        let p = params(10.0, 10_000.0, 1.5);
        let topo = Topology {
            n: 1,
            tx_pos: vec![[0.0, 0.0, 0.0]],
            rx_pos: vec![[0.0, 0.0, 1000.0]],
            radius_m: 10.0,
            height_m: 1000.0,
        };
        let g = gain_matrix(&topo, &p).unwrap();
        let expected = 10f64.powf(-transmission_loss(1000.0, &p).unwrap() / 10.0);
        assert_eq!(g.gain(0, 0), expected);
        assert!((g.gain(0, 0) - 2.406e-5).abs() < 5e-9);
    }

    #[test]
    fn gain_matrix_rejects_degenerate_distance() {
        let topo = Topology {
            n: 1,
            tx_pos: vec![[0.0, 0.0, 0.0]],
            rx_pos: vec![[0.0, 0.0, 0.5]],
            radius_m: 10.0,
            height_m: 0.5,
        };
        assert!(matches!(
            gain_matrix(&topo, &ChannelParams::default()),
            Err(ChannelError::BadDistance(_))
        ));
    }

    #[test]
    fn sinr_all_silent_and_symmetry() {
        let topo = place_cylinder(2, 4000.0, 1000.0, PlacementMode::Deterministic, 0).unwrap();
        let p = ChannelParams::default();
        let g = gain_matrix(&topo, &p).unwrap();
        let silent = sinr(&[0.0, 0.0], &g, &p).unwrap();
        assert_eq!(silent, vec![0.0, 0.0]);
        // The n = 2 deterministic layout is mirror symmetric, so equal powers
        // give equal SINRs.
        let equal = sinr(&[16.0, 16.0], &g, &p).unwrap();
        assert!((equal[0] - equal[1]).abs() / equal[0] < 1e-9);
        assert!(sinr(&[-1.0, 0.0], &g, &p).is_err());
    }

    #[test]
    fn single_link_budget_matches_db_arithmetic() {
        // One active link, no interferers: the linear-domain SINR must equal
        // the dB-domain budget SL + 10 log10 P - TL - NL.
        let topo = place_cylinder(3, 4000.0, 1000.0, PlacementMode::Deterministic, 0).unwrap();
        let p = ChannelParams::default();
        let g = gain_matrix(&topo, &p).unwrap();
        let out = sinr(&[0.0, 8.0, 0.0], &g, &p).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[2], 0.0);
        let tl = transmission_loss(topo.distance(1, 1), &p).unwrap();
        let budget_db = p.source_level_offset_db + 10.0 * 8f64.log10() - tl - noise_level(&p);
        let sinr_db = 10.0 * out[1].log10();
        assert!(
            (sinr_db - budget_db).abs() < 1e-9,
            "linear {sinr_db} dB vs budget {budget_db} dB"
        );
    }

    #[test]
    fn shannon_rate_points() {
        assert_eq!(shannon_rate(0.0, 10_000.0).unwrap(), 0.0);
        assert!((shannon_rate(1.0, 10_000.0).unwrap() - 10_000.0).abs() < 1e-9);
        assert!((shannon_rate(3.0, 10_000.0).unwrap() - 20_000.0).abs() < 1e-9);
        assert!(shannon_rate(-0.1, 10_000.0).is_err());
    }

    #[test]
    fn jain_point_values() {
        assert!((jain_fairness(&[5.0, 5.0, 5.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((jain_fairness(&[7.0, 0.0, 0.0, 0.0]).unwrap() - 0.25).abs() < 1e-15);
        let v = jain_fairness(&[1.0, 2.0, 3.0]).unwrap();
        assert!((v - 36.0 / 42.0).abs() < 1e-15);
        assert!(jain_fairness(&[0.0, 0.0]).is_err());
        assert!(jain_fairness(&[]).is_err());
        assert!(jain_fairness(&[1.0, -1.0]).is_err());
    }

    proptest! {
        #[test]
        fn thorp_strictly_increasing(a in 1e-3f64..100.0, step in 1e-3f64..10.0) {
            let b = (a + step).min(100.0);
            prop_assume!(b > a);
            prop_assert!(thorp_absorption(b).unwrap() > thorp_absorption(a).unwrap());
        }

        #[test]
        fn transmission_loss_strictly_increasing(d in 1.0f64..20_000.0, step in 0.1f64..5000.0) {
            let p = ChannelParams::default();
            prop_assert!(
                transmission_loss(d + step, &p).unwrap() > transmission_loss(d, &p).unwrap()
            );
        }

        #[test]
        fn jain_bounds_and_scale_invariance(
            xs in proptest::collection::vec(0.0f64..1000.0, 1..16),
            scale in 1e-3f64..1e3,
        ) {
            prop_assume!(xs.iter().any(|&v| v > 0.0));
            let n = xs.len() as f64;
            let j = jain_fairness(&xs).unwrap();
            prop_assert!(j >= 1.0 / n - 1e-12 && j <= 1.0 + 1e-12);
            let scaled: Vec<f64> = xs.iter().map(|&v| v * scale).collect();
            prop_assert!((jain_fairness(&scaled).unwrap() - j).abs() < 1e-9);
        }

        #[test]
        fn sinr_non_increasing_in_interferer_power(
            p0 in 1.0f64..64.0,
            p1 in 0.0f64..32.0,
            extra in 0.1f64..32.0,
        ) {
            let topo = place_cylinder(2, 4000.0, 1000.0, PlacementMode::Deterministic, 0).unwrap();
            let p = ChannelParams::default();
            let g = gain_matrix(&topo, &p).unwrap();
            let before = sinr(&[p0, p1], &g, &p).unwrap()[0];
            let after = sinr(&[p0, p1 + extra], &g, &p).unwrap()[0];
            prop_assert!(after <= before + 1e-18);
        }

        #[test]
        fn shannon_monotone_in_sinr(a in 0.0f64..1e6, step in 1e-6f64..1e6) {
            prop_assert!(
                shannon_rate(a + step, 10_000.0).unwrap() > shannon_rate(a, 10_000.0).unwrap()
            );
        }
    }
}
