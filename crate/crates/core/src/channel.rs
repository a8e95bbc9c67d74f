//! UAV-to-ground and UAV-to-UAV link budgets.
//!
//! UtG path loss follows the 3GPP TR 36.777 urban-macro aerial formulas; the
//! LoS/NLoS state is always decided geometrically by the caller. UtU links
//! are free space (Friis) without small-scale fading.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::env::{Point3, WorldRealization};

/// Thermal noise power spectral density at room temperature.
pub const THERMAL_NOISE_DBM_PER_HZ: f64 = -174.0;
/// Aerial altitude range covered by the urban-macro path-loss table.
pub const UTG_MIN_ALTITUDE_M: f64 = 22.5;
pub const UTG_MAX_ALTITUDE_M: f64 = 300.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("UAV altitude {0} m outside the path-loss model range (22.5, 300] m")]
    AltitudeOutOfModel(f64),
    #[error("link distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("small-scale power gain must be non-negative, got {0}")]
    NegativeGain(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub fc_ghz: f64,
    pub bandwidth_hz: f64,
    /// Noise power integrated over `bandwidth_hz`.
    pub noise_power_dbm: f64,
    pub rician_k_db: f64,
}

impl ChannelParams {
    pub fn with_thermal_noise(fc_ghz: f64, bandwidth_hz: f64) -> Self {
        Self {
            fc_ghz,
            bandwidth_hz,
            noise_power_dbm: thermal_noise_dbm(bandwidth_hz),
            rician_k_db: 15.0,
        }
    }
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self::with_thermal_noise(2.0, 10e6)
    }
}

pub fn thermal_noise_dbm(bandwidth_hz: f64) -> f64 {
    THERMAL_NOISE_DBM_PER_HZ + 10.0 * bandwidth_hz.log10()
}

pub fn utg_path_loss_db(d3d_m: f64, h_uav_m: f64, fc_ghz: f64, los: bool) -> Result<f64, ChannelError> {
    if !(d3d_m > 0.0) {
        return Err(ChannelError::NonPositiveDistance(d3d_m));
    }
    if !(h_uav_m > UTG_MIN_ALTITUDE_M && h_uav_m <= UTG_MAX_ALTITUDE_M) {
        return Err(ChannelError::AltitudeOutOfModel(h_uav_m));
    }
    let pl = if los {
        28.0 + 22.0 * d3d_m.log10() + 20.0 * fc_ghz.log10()
    } else {
        -17.5
            + (46.0 - 7.0 * h_uav_m.log10()) * d3d_m.log10()
            + 20.0 * (40.0 * std::f64::consts::PI * fc_ghz / 3.0).log10()
    };
    Ok(pl)
}

/// Free-space loss `20 log10(d) + 20 log10(f) - 147.55`.
pub fn utu_path_loss_db(d_m: f64, fc_ghz: f64) -> Result<f64, ChannelError> {
    if !(d_m > 0.0) {
        return Err(ChannelError::NonPositiveDistance(d_m));
    }
    Ok(20.0 * d_m.log10() + 20.0 * (fc_ghz * 1e9).log10() - 147.55)
}

/// Unit-mean power gain `|h|²`: Rician with factor `rician_k_db` for LoS,
/// exponential (Rayleigh envelope) for NLoS. An infinite K is pure LoS.
pub fn small_scale_power_gain<R: Rng + ?Sized>(los: bool, rician_k_db: f64, rng: &mut R) -> f64 {
    if los {
        let k = 10f64.powf(rician_k_db / 10.0);
        if !k.is_finite() {
            return 1.0;
        }
        let los_amp = (k / (k + 1.0)).sqrt();
        let scatter = (1.0 / (2.0 * (k + 1.0))).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        let (a, b) = (los_amp + scatter * re, scatter * im);
        a * a + b * b
    } else {
        let u: f64 = rng.random();
        -(1.0 - u).ln()
    }
}

pub fn gain_linear(path_loss_db: f64, ss_gain: f64) -> f64 {
    10f64.powf(-path_loss_db / 10.0) * ss_gain
}

pub fn gain_db(path_loss_db: f64, ss_gain: f64) -> f64 {
    -path_loss_db + 10.0 * ss_gain.log10()
}

/// Shannon rate `B log2(1 + SNR)`.
pub fn link_capacity_bps(
    p_tx_dbm: f64,
    path_loss_db: f64,
    ss_gain: f64,
    noise_dbm: f64,
    bandwidth_hz: f64,
) -> Result<f64, ChannelError> {
    if !(ss_gain >= 0.0) {
        return Err(ChannelError::NegativeGain(ss_gain));
    }
    let snr_db = p_tx_dbm - path_loss_db + 10.0 * ss_gain.log10() - noise_dbm;
    Ok(capacity_from_snr_db(snr_db, bandwidth_hz))
}

pub fn capacity_from_snr_db(snr_db: f64, bandwidth_hz: f64) -> f64 {
    bandwidth_hz * (10f64.powf(snr_db / 10.0)).ln_1p() / std::f64::consts::LN_2
}

/// One evaluated radio link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSample {
    pub tx_id: usize,
    pub rx_id: usize,
    pub d3d_m: f64,
    pub los: bool,
    pub path_loss_db: f64,
    pub small_scale_power_gain: f64,
    pub channel_gain_linear: f64,
    pub capacity_bps: f64,
}

impl LinkSample {
    pub const CSV_HEADER: &'static str =
        "tx_id,rx_id,d3d_m,los,path_loss_db,small_scale_power_gain,channel_gain_linear,capacity_bps";

    pub fn gain_db(&self) -> f64 {
        gain_db(self.path_loss_db, self.small_scale_power_gain)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.tx_id,
            self.rx_id,
            self.d3d_m,
            u8::from(self.los),
            self.path_loss_db,
            self.small_scale_power_gain,
            self.channel_gain_linear,
            self.capacity_bps
        )
    }
}

/// Evaluates a UAV-to-ground link: geometric LoS, urban-macro path loss and
/// one small-scale fading draw.
#[allow(clippy::too_many_arguments)]
pub fn sample_utg_link<R: Rng + ?Sized>(
    tx_id: usize,
    rx_id: usize,
    uav: Point3,
    user: Point3,
    world: &WorldRealization,
    params: &ChannelParams,
    p_tx_dbm: f64,
    rng: &mut R,
) -> Result<LinkSample, ChannelError> {
    let d3d_m = uav.distance(user);
    let los = world.is_los(uav, user);
    let path_loss_db = utg_path_loss_db(d3d_m, uav.z, params.fc_ghz, los)?;
    let ss = small_scale_power_gain(los, params.rician_k_db, rng);
    Ok(link_sample_from_parts(
        tx_id,
        rx_id,
        d3d_m,
        los,
        path_loss_db,
        ss,
        params,
        p_tx_dbm,
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn link_sample_from_parts(
    tx_id: usize,
    rx_id: usize,
    d3d_m: f64,
    los: bool,
    path_loss_db: f64,
    small_scale_power_gain: f64,
    params: &ChannelParams,
    p_tx_dbm: f64,
) -> LinkSample {
    let snr_db = p_tx_dbm + gain_db(path_loss_db, small_scale_power_gain) - params.noise_power_dbm;
    LinkSample {
        tx_id,
        rx_id,
        d3d_m,
        los,
        path_loss_db,
        small_scale_power_gain,
        channel_gain_linear: gain_linear(path_loss_db, small_scale_power_gain),
        capacity_bps: capacity_from_snr_db(snr_db, params.bandwidth_hz),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn utg_los_golden() {
        let pl = utg_path_loss_db(100.0, 50.0, 2.0, true).unwrap();
        assert!((pl - 78.02).abs() < 0.01, "{pl}");
    }

    #[test]
    fn utg_nlos_golden() {
        let pl = utg_path_loss_db(100.0, 50.0, 2.0, false).unwrap();
        assert!((pl - 89.17).abs() < 0.01, "{pl}");
    }

    #[test]
    fn utg_los_slope() {
        let a = utg_path_loss_db(100.0, 50.0, 2.0, true).unwrap();
        let b = utg_path_loss_db(200.0, 50.0, 2.0, true).unwrap();
        assert!((b - a - 22.0 * 2f64.log10()).abs() < 1e-12);
        assert!((b - a - 6.62).abs() < 0.01);
    }

    #[test]
    fn utg_rejects_out_of_regime_altitude() {
        for h in [10.0, 22.5, 300.1, 800.0] {
            assert_eq!(
                utg_path_loss_db(100.0, h, 2.0, true),
                Err(ChannelError::AltitudeOutOfModel(h))
            );
        }
        assert!(utg_path_loss_db(100.0, 300.0, 2.0, false).is_ok());
    }

    #[test]
    fn nlos_exceeds_los_over_sweep() {
        // A UAV at 50 m cannot be closer than 48.5 m to a ground user; the
        // two formulas cross near 12 m, below any reachable distance.
        let crossover = 10f64.powf((28.0 + 20.0 * 2f64.log10() + 17.5 - 20.0 * (80.0 * std::f64::consts::PI / 3.0).log10()) / (46.0 - 7.0 * 50f64.log10() - 22.0));
        assert!(crossover < 12.0);
        let mut d = 50.0 - crate::env::USER_HEIGHT_M;
        while d <= 1e4 {
            let los = utg_path_loss_db(d, 50.0, 2.0, true).unwrap();
            let nlos = utg_path_loss_db(d, 50.0, 2.0, false).unwrap();
            assert!(nlos > los, "d={d}");
            d *= 1.05;
        }
    }

    #[test]
    fn utu_golden_values() {
        assert!((utu_path_loss_db(1.0, 2.4).unwrap() - 40.05).abs() < 0.01);
        assert!((utu_path_loss_db(1000.0, 2.4).unwrap() - 100.05).abs() < 0.01);
        let step = utu_path_loss_db(20.0, 2.4).unwrap() - utu_path_loss_db(10.0, 2.4).unwrap();
        assert!((step - 6.02).abs() < 0.01);
    }

    #[test]
    fn fading_has_unit_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for los in [true, false] {
            let n = 1_000_000;
            let mean = (0..n)
                .map(|_| small_scale_power_gain(los, 15.0, &mut rng))
                .sum::<f64>()
                / n as f64;
            assert!((mean - 1.0).abs() < 0.01, "los={los} mean={mean}");
        }
    }

    #[test]
    fn pure_los_limit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(small_scale_power_gain(true, f64::INFINITY, &mut rng), 1.0);
    }

    #[test]
    fn nlos_cdf_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let below = (0..n)
            .filter(|_| small_scale_power_gain(false, 15.0, &mut rng) <= 1.0)
            .count();
        let p = below as f64 / n as f64;
        assert!((p - (1.0 - (-1f64).exp())).abs() < 0.01, "{p}");
    }

    #[test]
    fn capacity_examples() {
        assert_eq!(link_capacity_bps(24.0, 80.0, 0.0, -104.0, 1e7).unwrap(), 0.0);
        let unit = link_capacity_bps(0.0, 0.0, 1.0, 0.0, 1e7).unwrap();
        assert!((unit - 1e7).abs() < 1e-6);
        let c = link_capacity_bps(24.0, 78.02, 1.0, -94.0, 1e7).unwrap();
        assert!((c - 1.329e8).abs() / 1.329e8 < 1e-3, "{c}");
        assert_eq!(
            link_capacity_bps(24.0, 78.0, -0.1, -94.0, 1e7),
            Err(ChannelError::NegativeGain(-0.1))
        );
    }

    #[test]
    fn capacity_monotone() {
        let mut prev = 0.0;
        for i in 1..100 {
            let c = link_capacity_bps(24.0, 90.0, i as f64 * 0.05, -104.0, 1e7).unwrap();
            assert!(c > prev);
            prev = c;
        }
        let mut prev = 0.0;
        for p in 0..40 {
            let c = link_capacity_bps(p as f64, 90.0, 1.0, -104.0, 1e7).unwrap();
            assert!(c > prev);
            prev = c;
        }
    }

    #[test]
    fn default_noise_is_thermal_over_ten_mhz() {
        assert!((ChannelParams::default().noise_power_dbm + 104.0).abs() < 1e-12);
    }

    #[test]
    fn stored_gain_matches_fields() {
        let world = crate::env::generate_world(&crate::env::WorldConfig::default()).unwrap();
        let params = ChannelParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for u in &world.users {
            let s = sample_utg_link(
                0,
                0,
                Point3::new(500.0, 500.0, 50.0),
                u.position,
                &world,
                &params,
                24.0,
                &mut rng,
            )
            .unwrap();
            assert_eq!(
                s.channel_gain_linear,
                gain_linear(s.path_loss_db, s.small_scale_power_gain)
            );
            assert!(s.capacity_bps >= 0.0);
        }
    }
}
