//! Continuous 3-D movement control of a UAV fleet serving ground users.
//!
//! The environment rewards fair, energy-efficient coverage under QoS,
//! airspace and UAV-to-UAV connectivity constraints. A deterministic-policy
//! actor-critic learner is compared with random and one-step greedy movement.

use std::collections::VecDeque;
use std::f64::consts::PI;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::channel::{link_capacity_bps, utg_path_loss_db, ChannelError, ChannelParams, UTG_MAX_ALTITUDE_M};
use crate::env::{
    generate_world, step_uav, Airspace, EnergyModel, EnvError, Mobility, MovementAction, Point3, UavState,
    WorldConfig, WorldRealization,
};
use crate::metrics::{jain_index, MetricsError};
use crate::neural::{train_step, Activation, Adam, DenseNet, NeuralError};
use crate::rng_stream;

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("invalid placement configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged in episode {episode}: {source}")]
    Diverged {
        episode: usize,
        #[source]
        source: NeuralError,
    },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrlConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub discount: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Std of the Gaussian exploration noise in normalised action space.
    pub noise_std: f64,
    /// Noise std reached at the last training episode (linear decay).
    pub noise_std_final: f64,
    pub target_blend: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub lambda_boundary: f64,
    pub lambda_connectivity: f64,
    pub num_uavs: usize,
    pub n_users: usize,
    pub area_m: f64,
    pub h_min_m: f64,
    pub h_max_m: f64,
    pub tx_power_dbm: f64,
    pub qos_min_bps: f64,
    pub comm_range_m: f64,
    pub d_max_m: f64,
    pub episodes: usize,
    pub episode_len: usize,
    /// Uniform random actions before the actor takes over.
    pub warmup_steps: usize,
    pub eval_episodes: usize,
    pub greedy_candidates: usize,
    pub slot_dt_s: f64,
    pub rate_unit_bps: f64,
    pub energy_unit_j: f64,
    pub energy: EnergyModel,
}

impl Default for DrlConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![400, 300],
            critic_hidden: vec![400, 300],
            discount: 0.9,
            replay_capacity: 100_000,
            batch_size: 64,
            noise_std: 0.3,
            noise_std_final: 0.05,
            target_blend: 0.005,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            lambda_boundary: 1.0,
            lambda_connectivity: 1.0,
            num_uavs: 2,
            n_users: 100,
            area_m: 2500.0,
            h_min_m: 100.0,
            h_max_m: 800.0,
            tx_power_dbm: 24.0,
            qos_min_bps: 1e6,
            comm_range_m: 500.0,
            d_max_m: 50.0,
            episodes: 300,
            episode_len: 25,
            warmup_steps: 500,
            eval_episodes: 20,
            greedy_candidates: 8,
            slot_dt_s: 1.0,
            rate_unit_bps: 1e7,
            energy_unit_j: 100.0,
            energy: EnergyModel::default(),
        }
    }
}

impl DrlConfig {
    pub fn validate(&self) -> Result<(), PlacementError> {
        let bad = |m: &str| Err(PlacementError::InvalidConfig(m.into()));
        if self.num_uavs == 0 || self.n_users == 0 {
            return bad("need at least one UAV and one user");
        }
        if !(self.h_min_m > 0.0 && self.h_max_m > self.h_min_m) {
            return bad("altitude bounds must satisfy 0 < h_min < h_max");
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1)");
        }
        if self.episode_len == 0 || self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("episode length, batch size and replay capacity must be positive");
        }
        if self.greedy_candidates == 0 {
            return bad("greedy needs at least one candidate");
        }
        if !(self.d_max_m >= 0.0 && self.comm_range_m > 0.0 && self.area_m > 0.0) {
            return bad("distances must be positive");
        }
        if !(self.rate_unit_bps > 0.0 && self.energy_unit_j > 0.0) {
            return bad("reward units must be positive");
        }
        Ok(())
    }

    pub fn airspace(&self) -> Airspace {
        Airspace {
            x_max_m: self.area_m,
            y_max_m: self.area_m,
            h_min_m: self.h_min_m,
            h_max_m: self.h_max_m,
        }
    }

    pub fn state_dim(&self) -> usize {
        3 * self.num_uavs + self.n_users + 1
    }

    pub fn action_dim(&self) -> usize {
        3 * self.num_uavs
    }
}

/// Maps a normalised action in `[-1, 1]^3` onto distance, pitch and yaw.
pub fn action_from_normalized(o: &[f64], d_max_m: f64) -> MovementAction {
    let c = |v: f64| v.clamp(-1.0, 1.0);
    MovementAction {
        distance_m: (c(o[0]) + 1.0) * 0.5 * d_max_m,
        pitch_rad: c(o[1]) * PI / 2.0,
        yaw_rad: ((c(o[2]) + 1.0) * PI).rem_euclid(2.0 * PI),
    }
}

pub fn joint_action(o: &[f64], d_max_m: f64) -> Vec<MovementAction> {
    o.chunks(3).map(|c| action_from_normalized(c, d_max_m)).collect()
}

/// True iff the UAV graph with edges between pairs within `comm_range_m`
/// is connected.
pub fn connectivity_ok(positions: &[Point3], comm_range_m: f64) -> bool {
    if positions.is_empty() {
        return true;
    }
    let mut seen = vec![false; positions.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..positions.len() {
            if !seen[j] && positions[i].distance(positions[j]) <= comm_range_m {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// One-to-one partial matching, greedy by descending rate. Pairs below
/// `qos_min_bps` are never matched. Ties go to the lowest UAV id, then the
/// lowest user id. `rates[k][i]` is the rate of UAV `k` serving user `i`.
pub fn associate_users(rates: &[Vec<f64>], qos_min_bps: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = rates
        .iter()
        .enumerate()
        .flat_map(|(k, row)| row.iter().enumerate().map(move |(i, _)| (k, i)))
        .filter(|&(k, i)| rates[k][i] >= qos_min_bps)
        .collect();
    pairs.sort_by(|a, b| rates[b.0][b.1].total_cmp(&rates[a.0][a.1]).then(a.cmp(b)));
    let users = rates.first().map_or(0, Vec::len);
    let mut uav_used = vec![false; rates.len()];
    let mut user_used = vec![false; users];
    let mut out = Vec::new();
    for (k, i) in pairs {
        if !uav_used[k] && !user_used[i] {
            uav_used[k] = true;
            user_used[i] = true;
            out.push((k, i));
        }
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub sum_rate_bps: f64,
    pub fairness: f64,
    pub energy_j: f64,
    pub penalty: f64,
    pub reward: f64,
}

/// `fairness * sum_rate / energy - penalties`, with rate and energy
/// expressed in the configured units. `cumulative_rates_bps` already
/// includes this slot's service.
pub fn compute_reward(
    cumulative_rates_bps: &[f64],
    sum_rate_bps: f64,
    energy_j: f64,
    violated_boundary: bool,
    disconnected: bool,
    cfg: &DrlConfig,
) -> Result<RewardBreakdown, MetricsError> {
    if !(energy_j > 0.0) {
        return Err(MetricsError::NonPositiveEnergy(energy_j));
    }
    let fairness = jain_index(cumulative_rates_bps)?;
    let penalty = cfg.lambda_boundary * f64::from(u8::from(violated_boundary))
        + cfg.lambda_connectivity * f64::from(u8::from(disconnected));
    let reward = fairness * (sum_rate_bps / cfg.rate_unit_bps) / (energy_j / cfg.energy_unit_j) - penalty;
    Ok(RewardBreakdown {
        sum_rate_bps,
        fairness,
        energy_j,
        penalty,
        reward,
    })
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    pub matching: Vec<(usize, usize)>,
    pub violated_boundary: bool,
    pub disconnected: bool,
    pub done: bool,
}

/// Placement MDP over a fixed city and fixed (quasi-stationary) users.
#[derive(Debug, Clone)]
pub struct PlacementEnv {
    pub world: WorldRealization,
    pub channel: ChannelParams,
    pub cfg: DrlConfig,
    pub uavs: Vec<UavState>,
    pub cumulative_rates_bps: Vec<f64>,
    pub slot: usize,
    pub bits_delivered: f64,
    pub energy_used_j: f64,
}

impl PlacementEnv {
    pub fn new(cfg: &DrlConfig, world_cfg: &WorldConfig, channel: ChannelParams, seed: u64) -> Result<Self, PlacementError> {
        cfg.validate()?;
        let world = generate_world(&WorldConfig {
            area_x_m: cfg.area_m,
            area_y_m: cfg.area_m,
            n_users: cfg.n_users,
            user_mobility: Mobility::QuasiStationary,
            seed,
            ..world_cfg.clone()
        })?;
        Ok(Self::from_world(cfg, world, channel))
    }

    pub fn from_world(cfg: &DrlConfig, world: WorldRealization, channel: ChannelParams) -> Self {
        let n = world.users.len();
        Self {
            world,
            channel,
            cfg: cfg.clone(),
            uavs: Vec::new(),
            cumulative_rates_bps: vec![0.0; n],
            slot: 0,
            bits_delivered: 0.0,
            energy_used_j: 0.0,
        }
    }

    /// Starts an episode with the fleet clustered around the area centre at
    /// the lower end of the altitude range.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let c = self.cfg.area_m / 2.0;
        let airspace = self.cfg.airspace();
        let h_hi = (self.cfg.h_min_m + 200.0).min(self.cfg.h_max_m);
        self.uavs = (0..self.cfg.num_uavs)
            .map(|_| UavState {
                position: Point3::new(
                    c + rng.random_range(-100.0..=100.0),
                    c + rng.random_range(-100.0..=100.0),
                    rng.random_range(self.cfg.h_min_m..=h_hi),
                ),
                airspace,
                tx_power_dbm: self.cfg.tx_power_dbm,
                cumulative_energy_j: 0.0,
            })
            .collect();
        self.reset_from(self.uavs.clone());
    }

    pub fn reset_from(&mut self, uavs: Vec<UavState>) {
        self.uavs = uavs;
        self.cumulative_rates_bps.iter_mut().for_each(|r| *r = 0.0);
        self.slot = 0;
        self.bits_delivered = 0.0;
        self.energy_used_j = 0.0;
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.uavs.iter().map(|u| u.position).collect()
    }

    /// Average (fading-free) link rate of every UAV-user pair.
    pub fn rate_matrix(&self, positions: &[Point3]) -> Result<Vec<Vec<f64>>, ChannelError> {
        positions
            .iter()
            .map(|&uav| {
                self.world
                    .users
                    .iter()
                    .map(|u| {
                        let los = self.world.is_los(uav, u.position);
                        let d = uav.distance(u.position);
                        // The urban-macro fit stops at 300 m; higher UAVs reuse it at the ceiling.
                        let pl = utg_path_loss_db(d, uav.z.min(UTG_MAX_ALTITUDE_M), self.channel.fc_ghz, los)?;
                        link_capacity_bps(
                            self.cfg.tx_power_dbm,
                            pl,
                            1.0,
                            self.channel.noise_power_dbm,
                            self.channel.bandwidth_hz,
                        )
                    })
                    .collect()
            })
            .collect()
    }

    /// Normalised MDP state: UAV positions, squashed cumulative user rates
    /// and the slot index, all in `[-1, 1]`.
    pub fn state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.cfg.state_dim());
        for u in &self.uavs {
            let p = u.position;
            s.push(2.0 * p.x / self.cfg.area_m - 1.0);
            s.push(2.0 * p.y / self.cfg.area_m - 1.0);
            s.push(2.0 * (p.z - self.cfg.h_min_m) / (self.cfg.h_max_m - self.cfg.h_min_m) - 1.0);
        }
        let scale = 10.0 * self.cfg.rate_unit_bps;
        s.extend(self.cumulative_rates_bps.iter().map(|r| 2.0 * r / (r + scale) - 1.0));
        s.push(2.0 * self.slot as f64 / self.cfg.episode_len as f64 - 1.0);
        s
    }

    pub fn step(&mut self, actions: &[MovementAction]) -> Result<StepOutcome, PlacementError> {
        let mut energy = 0.0;
        let mut violated = false;
        let mut next = Vec::with_capacity(self.uavs.len());
        for (u, a) in self.uavs.iter().zip(actions) {
            let st = step_uav(u, a, self.cfg.slot_dt_s, &self.cfg.energy)?;
            energy += st.energy_j;
            violated |= st.violated_boundary;
            next.push(st.state);
        }
        self.uavs = next;
        let positions = self.positions();
        let disconnected = !connectivity_ok(&positions, self.cfg.comm_range_m);
        let rates = self.rate_matrix(&positions)?;
        let matching = associate_users(&rates, self.cfg.qos_min_bps);
        let mut sum_rate = 0.0;
        for &(k, i) in &matching {
            sum_rate += rates[k][i];
            self.cumulative_rates_bps[i] += rates[k][i] * self.cfg.slot_dt_s;
        }
        let reward = compute_reward(&self.cumulative_rates_bps, sum_rate, energy, violated, disconnected, &self.cfg)?;
        self.slot += 1;
        self.bits_delivered += sum_rate * self.cfg.slot_dt_s;
        self.energy_used_j += energy;
        Ok(StepOutcome {
            reward,
            matching,
            violated_boundary: violated,
            disconnected,
            done: self.slot >= self.cfg.episode_len,
        })
    }

    /// Reward the joint action would earn, without touching `self`.
    pub fn preview(&self, actions: &[MovementAction]) -> Result<RewardBreakdown, PlacementError> {
        Ok(self.clone().step(actions)?.reward)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Drl,
    Greedy,
    Random,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Drl => "drl",
            PolicyKind::Greedy => "greedy",
            PolicyKind::Random => "random",
        }
    }
}

pub fn random_normalized_action<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Random or one-step greedy movement. Greedy draws `candidate_count`
/// random joint actions from the same stream as random and keeps the one
/// with the highest previewed reward (first sampled wins ties).
pub fn baseline_policy<R: Rng + ?Sized>(
    kind: PolicyKind,
    env: &PlacementEnv,
    candidate_count: usize,
    rng: &mut R,
) -> Result<Vec<MovementAction>, PlacementError> {
    let dim = env.cfg.action_dim();
    match kind {
        PolicyKind::Random | PolicyKind::Drl => Ok(joint_action(&random_normalized_action(dim, rng), env.cfg.d_max_m)),
        PolicyKind::Greedy => {
            let mut best: Option<(f64, Vec<MovementAction>)> = None;
            for _ in 0..candidate_count.max(1) {
                let a = joint_action(&random_normalized_action(dim, rng), env.cfg.d_max_m);
                let r = env.preview(&a)?.reward;
                if best.as_ref().is_none_or(|(b, _)| r > *b) {
                    best = Some((r, a));
                }
            }
            Ok(best.map(|(_, a)| a).unwrap_or_default())
        }
    }
}

/// Actor output plus clipped Gaussian noise, in normalised action space.
pub fn act_normalized<R: Rng + ?Sized>(
    actor: &DenseNet,
    state: &[f64],
    noise_std: f64,
    rng: &mut R,
) -> Result<Vec<f64>, NeuralError> {
    let mut o = actor.forward(state)?;
    if noise_std > 0.0 {
        for v in &mut o {
            let z: f64 = StandardNormal.sample(rng);
            *v += noise_std * z;
        }
    }
    o.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(o)
}

pub fn act<R: Rng + ?Sized>(
    actor: &DenseNet,
    state: &[f64],
    noise_std: f64,
    d_max_m: f64,
    rng: &mut R,
) -> Result<Vec<MovementAction>, NeuralError> {
    Ok(joint_action(&act_normalized(actor, state, noise_std, rng)?, d_max_m))
}

#[derive(Debug, Clone, PartialEq)]
struct Transition {
    state: Vec<f64>,
    action: Vec<f64>,
    reward: f64,
    next_state: Vec<f64>,
    done: bool,
}

/// Actor-critic learner with target networks.
#[derive(Debug, Clone)]
pub struct Ddpg {
    pub actor: DenseNet,
    pub critic: DenseNet,
    actor_target: DenseNet,
    critic_target: DenseNet,
    actor_opt: Adam,
    critic_opt: Adam,
    replay: VecDeque<Transition>,
    cfg: DrlConfig,
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend(hidden);
    v.push(output);
    v
}

impl Ddpg {
    pub fn new<R: Rng + ?Sized>(cfg: &DrlConfig, rng: &mut R) -> Result<Self, NeuralError> {
        let (s, a) = (cfg.state_dim(), cfg.action_dim());
        let actor = DenseNet::new(&layer_sizes(s, &cfg.actor_hidden, a), Activation::Relu, Activation::Tanh, rng)?;
        let critic = DenseNet::new(&layer_sizes(s + a, &cfg.critic_hidden, 1), Activation::Relu, Activation::Identity, rng)?;
        Ok(Self {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            actor_opt: Adam::new(cfg.actor_lr),
            critic_opt: Adam::new(cfg.critic_lr),
            replay: VecDeque::with_capacity(cfg.replay_capacity.min(1 << 16)),
            cfg: cfg.clone(),
        })
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    fn remember(&mut self, t: Transition) {
        if self.replay.len() == self.cfg.replay_capacity {
            self.replay.pop_front();
        }
        self.replay.push_back(t);
    }

    /// One critic and one actor update from a uniform replay minibatch.
    /// Returns the critic's pre-update loss.
    pub fn update<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64, NeuralError> {
        let b = self.cfg.batch_size.min(self.replay.len());
        if b == 0 {
            return Ok(0.0);
        }
        let picks: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.replay.len())).collect();
        let (sd, ad) = (self.cfg.state_dim(), self.cfg.action_dim());
        let batch: Vec<&Transition> = picks.iter().map(|&i| &self.replay[i]).collect();
        let states = Array2::from_shape_fn((b, sd), |(r, c)| batch[r].state[c]);
        let next = Array2::from_shape_fn((b, sd), |(r, c)| batch[r].next_state[c]);

        let next_actions = self.actor_target.forward_batch(next.view())?;
        let mut next_sa = Array2::zeros((b, sd + ad));
        next_sa.slice_mut(s![.., ..sd]).assign(&next);
        next_sa.slice_mut(s![.., sd..]).assign(next_actions.output());
        let next_q = self.critic_target.forward_batch(next_sa.view())?;
        let targets = Array2::from_shape_fn((b, 1), |(r, _)| {
            let t = batch[r];
            let bootstrap = if t.done { 0.0 } else { self.cfg.discount * next_q.output()[[r, 0]] };
            t.reward + bootstrap
        });
        let mut sa = Array2::zeros((b, sd + ad));
        sa.slice_mut(s![.., ..sd]).assign(&states);
        sa.slice_mut(s![.., sd..])
            .assign(&Array2::from_shape_fn((b, ad), |(r, c)| batch[r].action[c]));
        let critic_loss = train_step(&mut self.critic, &sa, &targets, &mut self.critic_opt)?;

        let actor_trace = self.actor.forward_batch(states.view())?;
        sa.slice_mut(s![.., sd..]).assign(actor_trace.output());
        let q_trace = self.critic.forward_batch(sa.view())?;
        let d_q = Array2::from_elem((b, 1), -1.0 / b as f64);
        let (_, d_sa) = self.critic.backward(&q_trace, d_q.view());
        let d_action = d_sa.slice(s![.., sd..]).to_owned();
        let (grads, _) = self.actor.backward(&actor_trace, d_action.view());
        self.actor_opt.apply(&mut self.actor, &grads);

        self.actor_target.blend_from(&self.actor, self.cfg.target_blend);
        self.critic_target.blend_from(&self.critic, self.cfg.target_blend);
        Ok(critic_loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub mean_reward: f64,
    pub fairness: f64,
    /// Delivered bits per joule over the episode.
    pub ee: f64,
}

fn episode_stats(env: &PlacementEnv, reward_sum: f64) -> Result<EpisodeStats, PlacementError> {
    Ok(EpisodeStats {
        mean_reward: reward_sum / env.slot.max(1) as f64,
        fairness: jain_index(&env.cumulative_rates_bps)?,
        ee: crate::metrics::energy_efficiency(env.bits_delivered, env.energy_used_j)?,
    })
}

#[derive(Debug)]
pub struct TrainedPolicy {
    pub agent: Ddpg,
    pub curve: Vec<EpisodeStats>,
}

/// Error raised mid-training together with the curve recorded so far.
#[derive(Debug)]
pub struct TrainingAbort {
    pub error: PlacementError,
    pub curve: Vec<EpisodeStats>,
}

pub fn train_drl(env: &mut PlacementEnv, seed: u64) -> Result<TrainedPolicy, TrainingAbort> {
    let mut curve = Vec::with_capacity(env.cfg.episodes);
    let abort = |error: PlacementError, curve: &Vec<EpisodeStats>| TrainingAbort {
        error,
        curve: curve.clone(),
    };
    let cfg = env.cfg.clone();
    let mut agent = Ddpg::new(&cfg, &mut rng_stream(seed, 10)).map_err(|e| abort(e.into(), &curve))?;
    let mut start_rng = rng_stream(seed, 11);
    let mut explore_rng = rng_stream(seed, 12);
    let mut batch_rng = rng_stream(seed, 13);
    let mut total_steps = 0;
    for episode in 0..cfg.episodes {
        let frac = if cfg.episodes > 1 {
            episode as f64 / (cfg.episodes - 1) as f64
        } else {
            1.0
        };
        let noise = cfg.noise_std + (cfg.noise_std_final - cfg.noise_std) * frac;
        env.reset(&mut start_rng);
        let mut reward_sum = 0.0;
        loop {
            let state = env.state();
            let action = if total_steps < cfg.warmup_steps {
                random_normalized_action(cfg.action_dim(), &mut explore_rng)
            } else {
                act_normalized(&agent.actor, &state, noise, &mut explore_rng).map_err(|e| abort(e.into(), &curve))?
            };
            let out = env
                .step(&joint_action(&action, cfg.d_max_m))
                .map_err(|e| abort(e, &curve))?;
            reward_sum += out.reward.reward;
            agent.remember(Transition {
                state,
                action,
                reward: out.reward.reward,
                next_state: env.state(),
                done: out.done,
            });
            total_steps += 1;
            if agent.replay_len() >= cfg.batch_size {
                agent.update(&mut batch_rng).map_err(|source| abort(PlacementError::Diverged { episode, source }, &curve))?;
            }
            if out.done {
                break;
            }
        }
        curve.push(episode_stats(env, reward_sum).map_err(|e| abort(e, &curve))?);
    }
    Ok(TrainedPolicy { agent, curve })
}

/// Runs `episodes` evaluation episodes of one policy. Start positions come
/// from a stream shared by every policy so the comparison is paired.
pub fn evaluate_policy(
    env: &mut PlacementEnv,
    kind: PolicyKind,
    actor: Option<&DenseNet>,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeStats>, PlacementError> {
    let mut start_rng = rng_stream(seed, 20);
    let mut policy_rng = rng_stream(seed, 21);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        env.reset(&mut start_rng);
        let mut reward_sum = 0.0;
        loop {
            let actions = match (kind, actor) {
                (PolicyKind::Drl, Some(net)) => act(net, &env.state(), 0.0, env.cfg.d_max_m, &mut policy_rng)?,
                (PolicyKind::Drl, None) => {
                    return Err(PlacementError::InvalidConfig("DRL evaluation needs an actor".into()))
                }
                _ => baseline_policy(kind, env, env.cfg.greedy_candidates, &mut policy_rng)?,
            };
            let o = env.step(&actions)?;
            reward_sum += o.reward.reward;
            if o.done {
                break;
            }
        }
        out.push(episode_stats(env, reward_sum)?);
    }
    Ok(out)
}

#[derive(Debug)]
pub struct PlacementResult {
    pub curve: Vec<EpisodeStats>,
    /// `(policy, per-episode stats)` in drl, greedy, random order.
    pub evaluation: Vec<(PolicyKind, Vec<EpisodeStats>)>,
}

impl PlacementResult {
    pub fn mean_eval_reward(&self, kind: PolicyKind) -> Option<f64> {
        self.evaluation.iter().find(|(k, _)| *k == kind).map(|(_, e)| {
            e.iter().map(|s| s.mean_reward).sum::<f64>() / e.len().max(1) as f64
        })
    }
}

pub fn run_placement(
    cfg: &DrlConfig,
    world_cfg: &WorldConfig,
    channel: ChannelParams,
    seed: u64,
) -> Result<PlacementResult, TrainingAbort> {
    let mut env = PlacementEnv::new(cfg, world_cfg, channel, seed).map_err(|error| TrainingAbort {
        error,
        curve: Vec::new(),
    })?;
    let trained = train_drl(&mut env, seed)?;
    let mut eval = || -> Result<_, PlacementError> {
        let mut evaluation = Vec::new();
        for kind in [PolicyKind::Drl, PolicyKind::Greedy, PolicyKind::Random] {
            let stats = evaluate_policy(&mut env, kind, Some(&trained.agent.actor), cfg.eval_episodes, seed)?;
            evaluation.push((kind, stats));
        }
        Ok(evaluation)
    };
    match eval() {
        Ok(evaluation) => Ok(PlacementResult {
            curve: trained.curve,
            evaluation,
        }),
        Err(error) => Err(TrainingAbort {
            error,
            curve: trained.curve,
        }),
    }
}
