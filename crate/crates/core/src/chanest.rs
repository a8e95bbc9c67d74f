//! Online neural estimation of UAV-to-ground channel gains.
//!
//! Each UAV owns a dense network mapping `(uav position, user position)` to
//! the measured channel gain in dB (affinely normalised). Networks are first
//! trained offline for a number of slots, then keep training online while
//! their predictions drive user scheduling. Energy efficiency of the
//! predicted schedule is compared with a perfect-CSI schedule.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::channel::{
    gain_db, link_capacity_bps, sample_utg_link, ChannelError, ChannelParams, LinkSample, UTG_MAX_ALTITUDE_M,
};
use crate::env::{step_users, EnergyModel, EnvError, Point3, WorldConfig, WorldRealization};
use crate::neural::{train_step, Activation, Adam, DenseNet, NeuralError};
use crate::rng_stream;

#[derive(Debug, Error)]
pub enum ChanestError {
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
    #[error("estimator for UAV {uav} diverged at slot {slot}: {source}")]
    Diverged {
        uav: usize,
        slot: usize,
        #[source]
        source: NeuralError,
    },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Affine map between channel gain in dB and the `[-1, 1]` training range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainBounds {
    pub min_db: f64,
    pub max_db: f64,
}

impl GainBounds {
    pub fn normalize(&self, gain_db: f64) -> f64 {
        2.0 * (gain_db - self.min_db) / (self.max_db - self.min_db) - 1.0
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        self.min_db + (value + 1.0) * 0.5 * (self.max_db - self.min_db)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub hidden_sizes: Vec<usize>,
    pub pretrain_slots: usize,
    pub online_slots: usize,
    pub num_uavs: usize,
    pub uav_altitude_m: f64,
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    /// Users measured by each UAV per slot (one training sample each).
    pub users_per_uav: usize,
    pub holdout_fraction: f64,
    /// Gain range mapped onto `[-1, 1]`. The defaults bracket the strongest
    /// LoS link (UAV overhead) and the weakest NLoS link across the area
    /// with a 30 dB fade margin.
    pub gain_bounds: GainBounds,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_steps_per_slot: usize,
    pub replay_capacity: usize,
    pub patrol_radius_m: f64,
    pub patrol_period_slots: f64,
    pub slot_dt_s: f64,
    pub user_speed_mps: (f64, f64),
    pub energy: EnergyModel,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![512, 256],
            pretrain_slots: 736,
            online_slots: 500,
            num_uavs: 3,
            uav_altitude_m: 50.0,
            bandwidth_hz: 10e6,
            tx_power_dbm: 24.0,
            users_per_uav: 20,
            holdout_fraction: 0.2,
            gain_bounds: GainBounds {
                min_db: -160.0,
                max_db: -60.0,
            },
            learning_rate: 1e-3,
            batch_size: 32,
            train_steps_per_slot: 2,
            replay_capacity: 4096,
            patrol_radius_m: 100.0,
            patrol_period_slots: 360.0,
            slot_dt_s: 1.0,
            user_speed_mps: (1.0, 3.0),
            energy: EnergyModel::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), ChanestError> {
        let bad = |m: &str| Err(ChanestError::InvalidConfig(m.into()));
        if self.pretrain_slots == 0 || self.online_slots == 0 {
            return bad("slot counts must be positive");
        }
        if self.num_uavs == 0 || self.users_per_uav == 0 {
            return bad("need at least one UAV and one user per UAV");
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad("hidden sizes must be non-empty and non-zero");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        if !(self.gain_bounds.max_db > self.gain_bounds.min_db) {
            return bad("gain bounds must satisfy min < max");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("batch size and replay capacity must be positive");
        }
        if !(self.uav_altitude_m > 0.0 && self.uav_altitude_m <= UTG_MAX_ALTITUDE_M) {
            return bad("UAV altitude must lie in (0, 300] m");
        }
        Ok(())
    }

    pub fn holdout_count(&self) -> usize {
        ((self.users_per_uav as f64 * self.holdout_fraction).round() as usize).min(self.users_per_uav - 1)
    }
}

/// Normalised network input and target for one measured link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample {
    pub features: [f64; 6],
    pub target: f64,
}

/// One measured link together with its normalised training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotSample {
    pub uav_id: usize,
    pub user_id: usize,
    pub uav_position: Point3,
    pub user_position: Point3,
    pub link: LinkSample,
    pub sample: TrainingSample,
    pub held_out: bool,
}

fn clamp_unit(v: f64) -> (f64, bool) {
    let c = v.clamp(-1.0, 1.0);
    (c, c != v)
}

/// Position features scaled to `[-1, 1]`; the flag reports clamping.
pub fn encode_features(area_x_m: f64, area_y_m: f64, uav: Point3, user: Point3) -> ([f64; 6], bool) {
    let mut clamped = false;
    let mut f = [0.0; 6];
    for (slot, (v, span)) in f.iter_mut().zip([
        (uav.x, area_x_m),
        (uav.y, area_y_m),
        (uav.z, UTG_MAX_ALTITUDE_M),
        (user.x, area_x_m),
        (user.y, area_y_m),
        (user.z, UTG_MAX_ALTITUDE_M),
    ]) {
        let (c, hit) = clamp_unit(2.0 * v / span - 1.0);
        *slot = c;
        clamped |= hit;
    }
    (f, clamped)
}

pub fn target_from_link(link: &LinkSample, bounds: &GainBounds) -> f64 {
    bounds.normalize(gain_db(link.path_loss_db, link.small_scale_power_gain))
}

/// Per-UAV channel-gain estimator.
#[derive(Debug)]
pub struct Estimator {
    pub uav_id: usize,
    pub net: DenseNet,
    opt: Adam,
    memory: VecDeque<TrainingSample>,
    replay_capacity: usize,
    bounds: GainBounds,
    area: (f64, f64),
    rng: ChaCha8Rng,
    clamp_warnings: AtomicU64,
}

impl Estimator {
    pub fn new(uav_id: usize, cfg: &EstimatorConfig, area: (f64, f64), seed: u64) -> Result<Self, ChanestError> {
        let mut init_rng = rng_stream(seed, 100 + uav_id as u64);
        let mut sizes = vec![6];
        sizes.extend(&cfg.hidden_sizes);
        sizes.push(1);
        let net = DenseNet::new(&sizes, Activation::Relu, Activation::Identity, &mut init_rng)?;
        Ok(Self {
            uav_id,
            net,
            opt: Adam::new(cfg.learning_rate),
            memory: VecDeque::with_capacity(cfg.replay_capacity),
            replay_capacity: cfg.replay_capacity,
            bounds: cfg.gain_bounds,
            area,
            rng: rng_stream(seed, 200 + uav_id as u64),
            clamp_warnings: AtomicU64::new(0),
        })
    }

    pub fn clamp_warnings(&self) -> u64 {
        self.clamp_warnings.load(Ordering::Relaxed)
    }

    /// Normalised prediction for pre-encoded features.
    pub fn predict_normalized(&self, features: &[f64; 6]) -> Result<f64, ChanestError> {
        Ok(self.net.forward(features)?[0])
    }

    /// Predicted channel gain in dB. Out-of-range positions are clamped to
    /// the normalisation box and counted.
    pub fn predict_gain(&self, uav: Point3, user: Point3) -> Result<f64, ChanestError> {
        let (features, clamped) = encode_features(self.area.0, self.area.1, uav, user);
        if clamped {
            self.clamp_warnings.fetch_add(1, Ordering::Relaxed);
        }
        Ok(self.bounds.denormalize(self.predict_normalized(&features)?))
    }

    pub fn heldout_mse(&self, samples: &[TrainingSample]) -> Result<f64, ChanestError> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let x = Array2::from_shape_fn((samples.len(), 6), |(r, c)| samples[r].features[c]);
        let trace = self.net.forward_batch(x.view())?;
        let out = trace.output();
        Ok(samples
            .iter()
            .enumerate()
            .map(|(r, s)| (out[[r, 0]] - s.target).powi(2))
            .sum::<f64>()
            / samples.len() as f64)
    }

    pub fn remember(&mut self, samples: impl IntoIterator<Item = TrainingSample>) {
        for s in samples {
            if self.memory.len() == self.replay_capacity {
                self.memory.pop_front();
            }
            self.memory.push_back(s);
        }
    }

    /// Minibatch steps drawn from the estimator's own sample memory.
    /// Returns the mean pre-update loss.
    pub fn train(&mut self, steps: usize, batch_size: usize) -> Result<f64, NeuralError> {
        if self.memory.is_empty() || steps == 0 {
            return Ok(0.0);
        }
        let b = batch_size.min(self.memory.len());
        let mut total = 0.0;
        for _ in 0..steps {
            let picks: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..self.memory.len())).collect();
            let x = Array2::from_shape_fn((b, 6), |(r, c)| self.memory[picks[r]].features[c]);
            let y = Array2::from_shape_fn((b, 1), |(r, _)| self.memory[picks[r]].target);
            total += train_step(&mut self.net, &x, &y, &mut self.opt)?;
        }
        Ok(total / steps as f64)
    }
}

/// Simulation state of the estimation experiment: city, moving users and
/// UAVs on circular patrols at fixed altitude.
#[derive(Debug, Clone)]
pub struct ChanestSim {
    pub world: WorldRealization,
    pub channel: ChannelParams,
    pub cfg: EstimatorConfig,
    pub slot: usize,
    rng: ChaCha8Rng,
}

impl ChanestSim {
    pub fn new(
        world_cfg: &WorldConfig,
        channel: ChannelParams,
        cfg: &EstimatorConfig,
        seed: u64,
    ) -> Result<Self, ChanestError> {
        cfg.validate()?;
        let world_cfg = WorldConfig {
            n_users: cfg.num_uavs * cfg.users_per_uav,
            user_mobility: crate::env::Mobility::RandomWaypoint {
                v_min_mps: cfg.user_speed_mps.0,
                v_max_mps: cfg.user_speed_mps.1,
            },
            seed,
            ..world_cfg.clone()
        };
        let world = crate::env::generate_world(&world_cfg)?;
        let channel = ChannelParams {
            bandwidth_hz: cfg.bandwidth_hz,
            noise_power_dbm: crate::channel::thermal_noise_dbm(cfg.bandwidth_hz),
            ..channel
        };
        Ok(Self {
            world,
            channel,
            cfg: cfg.clone(),
            slot: 0,
            rng: rng_stream(seed, 1),
        })
    }

    fn area(&self) -> (f64, f64) {
        (self.world.config.area_x_m, self.world.config.area_y_m)
    }

    pub fn uav_position(&self, uav: usize, slot: usize) -> Point3 {
        let (ax, ay) = self.area();
        let j = self.cfg.num_uavs as f64;
        let base = 2.0 * PI * uav as f64 / j;
        let center = (ax / 2.0 + ax / 4.0 * base.cos(), ay / 2.0 + ay / 4.0 * base.sin());
        let phase = base + 2.0 * PI * slot as f64 / self.cfg.patrol_period_slots;
        Point3::new(
            (center.0 + self.cfg.patrol_radius_m * phase.cos()).clamp(0.0, ax),
            (center.1 + self.cfg.patrol_radius_m * phase.sin()).clamp(0.0, ay),
            self.cfg.uav_altitude_m,
        )
    }

    pub fn uav_positions(&self) -> Vec<Point3> {
        (0..self.cfg.num_uavs).map(|k| self.uav_position(k, self.slot)).collect()
    }

    /// Power drawn by one UAV while patrolling (hover, propulsion, radio).
    pub fn uav_power_w(&self) -> f64 {
        let step = 2.0 * PI * self.cfg.patrol_radius_m / self.cfg.patrol_period_slots;
        self.cfg.energy.slot_energy_j(step, self.cfg.slot_dt_s) / self.cfg.slot_dt_s
            + 10f64.powf(self.cfg.tx_power_dbm / 10.0) / 1000.0
    }

    /// Balanced nearest-user association: UAVs take turns claiming their
    /// nearest unclaimed user until each has `users_per_uav`.
    pub fn associate(&self, uavs: &[Point3]) -> Vec<Vec<usize>> {
        let mut taken = vec![false; self.world.users.len()];
        let mut out = vec![Vec::with_capacity(self.cfg.users_per_uav); uavs.len()];
        for _ in 0..self.cfg.users_per_uav {
            for (k, uav) in uavs.iter().enumerate() {
                let best = self
                    .world
                    .users
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .min_by(|(_, a), (_, b)| {
                        uav.horizontal_distance(a.position)
                            .total_cmp(&uav.horizontal_distance(b.position))
                    })
                    .map(|(i, _)| i);
                if let Some(i) = best {
                    taken[i] = true;
                    out[k].push(i);
                }
            }
        }
        out
    }

    /// Moves users and the slot clock forward, then measures every
    /// associated link of the new slot.
    pub fn advance(&mut self) -> Result<Vec<SlotSample>, ChanestError> {
        self.slot += 1;
        let (ax, ay) = self.area();
        step_users(&mut self.world.users, ax, ay, self.cfg.slot_dt_s, &mut self.rng);
        let uavs = self.uav_positions();
        let assoc = self.associate(&uavs);
        collect_slot_samples(&self.world, &uavs, &assoc, &self.channel, &self.cfg, &mut self.rng)
    }
}

/// Measures every associated UtG link and marks a held-out subset per UAV.
pub fn collect_slot_samples<R: Rng + ?Sized>(
    world: &WorldRealization,
    uavs: &[Point3],
    association: &[Vec<usize>],
    channel: &ChannelParams,
    cfg: &EstimatorConfig,
    rng: &mut R,
) -> Result<Vec<SlotSample>, ChanestError> {
    let (ax, ay) = (world.config.area_x_m, world.config.area_y_m);
    let mut out = Vec::new();
    for (k, users) in association.iter().enumerate() {
        let start = out.len();
        for &u in users {
            let user = world.users[u].position;
            let link = sample_utg_link(k, u, uavs[k], user, world, channel, cfg.tx_power_dbm, rng)?;
            let (features, _) = encode_features(ax, ay, uavs[k], user);
            out.push(SlotSample {
                uav_id: k,
                user_id: u,
                uav_position: uavs[k],
                user_position: user,
                link,
                sample: TrainingSample {
                    features,
                    target: target_from_link(&link, &cfg.gain_bounds),
                },
                held_out: false,
            });
        }
        let n = out.len() - start;
        let holdout = ((n as f64 * cfg.holdout_fraction).round() as usize).min(n.saturating_sub(1));
        let mut idx: Vec<usize> = (start..out.len()).collect();
        idx.shuffle(rng);
        for &i in &idx[..holdout] {
            out[i].held_out = true;
        }
    }
    Ok(out)
}

/// Energy efficiency of scheduling one user per UAV, once by predicted gain
/// and once by true gain. Realised rates always use the true gain.
pub fn scheduled_energy_efficiency(
    per_uav: &[Vec<(f64, LinkSample)>],
    channel: &ChannelParams,
    tx_power_dbm: f64,
    power_per_uav_w: f64,
) -> Result<(f64, f64), ChannelError> {
    let mut rate_pred = 0.0;
    let mut rate_perfect = 0.0;
    let rate = |l: &LinkSample| {
        link_capacity_bps(
            tx_power_dbm,
            l.path_loss_db,
            l.small_scale_power_gain,
            channel.noise_power_dbm,
            channel.bandwidth_hz,
        )
    };
    let argmax = |key: &dyn Fn(&(f64, LinkSample)) -> f64, cands: &[(f64, LinkSample)]| {
        cands
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |best, (i, c)| match best {
                Some((_, v)) if v >= key(c) => best,
                _ => Some((i, key(c))),
            })
            .map(|(i, _)| i)
    };
    for cands in per_uav {
        if let Some(i) = argmax(&|c| c.0, cands) {
            rate_pred += rate(&cands[i].1)?;
        }
        if let Some(i) = argmax(&|c| c.1.gain_db(), cands) {
            rate_perfect += rate(&cands[i].1)?;
        }
    }
    let power = power_per_uav_w * per_uav.len() as f64;
    Ok((rate_pred / power, rate_perfect / power))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseRow {
    pub slot: usize,
    pub uav_id: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EeRow {
    pub slot: usize,
    pub ee_predicted: f64,
    pub ee_perfect: f64,
}

fn split(samples: &[SlotSample], uav: usize) -> (Vec<TrainingSample>, Vec<TrainingSample>) {
    let mine = samples.iter().filter(|s| s.uav_id == uav);
    let train = mine.clone().filter(|s| !s.held_out).map(|s| s.sample).collect();
    let held = mine.filter(|s| s.held_out).map(|s| s.sample).collect();
    (train, held)
}

/// Fresh, untrained estimators, one per UAV.
pub fn new_estimators(sim: &ChanestSim, seed: u64) -> Result<Vec<Estimator>, ChanestError> {
    (0..sim.cfg.num_uavs)
        .map(|k| Estimator::new(k, &sim.cfg, sim.area(), seed))
        .collect()
}

fn train_all(estimators: &mut [Estimator], samples: &[SlotSample], cfg: &EstimatorConfig, slot: usize) -> Result<(), ChanestError> {
    for est in estimators.iter_mut() {
        let (train, _) = split(samples, est.uav_id);
        est.remember(train);
        est.train(cfg.train_steps_per_slot, cfg.batch_size)
            .map_err(|source| ChanestError::Diverged {
                uav: est.uav_id,
                slot,
                source,
            })?;
    }
    Ok(())
}

/// Offline (pre-training) phase: each slot is measured, its held-out MSE
/// recorded, then the training split is learned.
pub fn run_offline_phase(sim: &mut ChanestSim, estimators: &mut [Estimator]) -> Result<Vec<MseRow>, ChanestError> {
    let mut rows = Vec::with_capacity(sim.cfg.pretrain_slots * estimators.len());
    for _ in 0..sim.cfg.pretrain_slots {
        let samples = sim.advance()?;
        for est in estimators.iter() {
            let (_, held) = split(&samples, est.uav_id);
            rows.push(MseRow {
                slot: sim.slot,
                uav_id: est.uav_id,
                mse: est.heldout_mse(&held)?,
            });
        }
        train_all(estimators, &samples, &sim.cfg, sim.slot)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OnlineTrace {
    pub mse: Vec<MseRow>,
    pub ee: Vec<EeRow>,
}

/// Online phase: predict every associated link, schedule on predictions,
/// measure, record MSE and energy efficiency, then train.
pub fn run_online_phase(sim: &mut ChanestSim, estimators: &mut [Estimator]) -> Result<OnlineTrace, ChanestError> {
    let mut trace = OnlineTrace::default();
    let power = sim.uav_power_w();
    for _ in 0..sim.cfg.online_slots {
        let samples = sim.advance()?;
        let mut per_uav = vec![Vec::new(); estimators.len()];
        for est in estimators.iter() {
            let (_, held) = split(&samples, est.uav_id);
            trace.mse.push(MseRow {
                slot: sim.slot,
                uav_id: est.uav_id,
                mse: est.heldout_mse(&held)?,
            });
            for s in samples.iter().filter(|s| s.uav_id == est.uav_id) {
                let pred = est.predict_gain(s.uav_position, s.user_position)?;
                per_uav[est.uav_id].push((pred, s.link));
            }
        }
        let (ee_predicted, ee_perfect) =
            scheduled_energy_efficiency(&per_uav, &sim.channel, sim.cfg.tx_power_dbm, power)?;
        trace.ee.push(EeRow {
            slot: sim.slot,
            ee_predicted,
            ee_perfect,
        });
        train_all(estimators, &samples, &sim.cfg, sim.slot)?;
    }
    Ok(trace)
}

#[derive(Debug)]
pub struct ChanestResult {
    pub offline_mse: Vec<MseRow>,
    pub online: OnlineTrace,
    pub estimators: Vec<Estimator>,
}

impl ChanestResult {
    /// Mean MSE across UAVs for each slot, in slot order.
    pub fn slot_mean_mse(rows: &[MseRow]) -> Vec<f64> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in rows {
            match out.last_mut() {
                Some((s, sum, n)) if *s == r.slot => {
                    *sum += r.mse;
                    *n += 1;
                }
                _ => out.push((r.slot, r.mse, 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }

    pub fn mean_online_mse(&self) -> f64 {
        self.online.mse.iter().map(|r| r.mse).sum::<f64>() / self.online.mse.len() as f64
    }

    pub fn mean_ee_ratio(&self) -> f64 {
        self.online.ee.iter().map(|r| r.ee_predicted / r.ee_perfect).sum::<f64>() / self.online.ee.len() as f64
    }
}

pub fn run_chanest(
    world_cfg: &WorldConfig,
    channel: ChannelParams,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<ChanestResult, ChanestError> {
    let mut sim = ChanestSim::new(world_cfg, channel, cfg, seed)?;
    let mut estimators = new_estimators(&sim, seed)?;
    let offline_mse = run_offline_phase(&mut sim, &mut estimators)?;
    let online = run_online_phase(&mut sim, &mut estimators)?;
    Ok(ChanestResult {
        offline_mse,
        online,
        estimators,
    })
}
