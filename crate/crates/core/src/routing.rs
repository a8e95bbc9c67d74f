//! Slotted packet simulation of relay UAVs forwarding sensed traffic to a
//! ground control station (GCS).
//!
//! Three next-hop rules are compared: a weighted score over predicted
//! backlog, link latency and hop count (backlog predicted from per-UAV
//! recurrent packet-arrival-rate forecasts), minimum hop count, and minimum
//! reported backlog. Neighbour backlog is only known through periodic
//! beacons.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::channel::{link_capacity_bps, thermal_noise_dbm, utu_path_loss_db, ChannelError};
use crate::env::Point3;
use crate::neural::{Adam, NeuralError, RecurrentCell};
use crate::rng_stream;

const SPEED_OF_LIGHT_MPS: f64 = 299_792_458.0;

/// Hop count of a node with no path to the GCS.
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum RoutingError {
    #[error("invalid routing configuration: {0}")]
    InvalidConfig(String),
    #[error("UAV {0} has no path to the GCS")]
    Disconnected(usize),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Protocol {
    ParPredict,
    ShortestPath,
    BacklogAware,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::ParPredict, Protocol::ShortestPath, Protocol::BacklogAware];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::ParPredict => "par_predict",
            Protocol::ShortestPath => "shortest_path",
            Protocol::BacklogAware => "backlog_aware",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown protocol {s:?}"))
    }
}

/// Poisson arrivals whose rate follows `mean * (1 + amplitude * sin(2π t / period + phase))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficModel {
    pub mean_rate: f64,
    pub amplitude: f64,
    pub period_slots: f64,
}

impl Default for TrafficModel {
    fn default() -> Self {
        Self {
            mean_rate: 0.03,
            amplitude: 0.8,
            period_slots: 400.0,
        }
    }
}

impl TrafficModel {
    pub fn rate(&self, slot: u64, phase: f64) -> f64 {
        (self.mean_rate * (1.0 + self.amplitude * (2.0 * PI * slot as f64 / self.period_slots + phase).sin())).max(0.0)
    }

    pub fn generate_arrivals<R: Rng + ?Sized>(&self, phase: f64, slot: u64, rng: &mut R) -> u32 {
        let rate = self.rate(slot, phase);
        match Poisson::new(rate) {
            Ok(p) => p.sample(rng) as u32,
            Err(_) => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreWeights {
    pub backlog: f64,
    pub latency: f64,
    pub hops: f64,
}

/// Backlog weighs as much as latency and hop count together. Min-max
/// normalisation stretches microsecond link-time differences to the full
/// `[0, 1]` range, so an even split lets link length override queueing.
impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            backlog: 0.5,
            latency: 0.25,
            hops: 0.25,
        }
    }
}

impl ScoreWeights {
    pub const EVEN: ScoreWeights = ScoreWeights {
        backlog: 1.0 / 3.0,
        latency: 1.0 / 3.0,
        hops: 1.0 / 3.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingConfig {
    pub comm_radius_m: f64,
    pub ack_timeout_ms: f64,
    pub slot_ms: f64,
    pub weights: ScoreWeights,
    /// PAR history length fed to the predictor.
    pub window: usize,
    pub predictor_hidden: usize,
    pub predictor_lr: f64,
    /// Arrival counts are divided by this before entering the predictor.
    pub par_scale: f64,
    pub packet_bits: f64,
    pub fc_ghz: f64,
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    pub loss_prob: f64,
    pub beacon_period_slots: u64,
    /// Slots a timed-out next hop stays excluded.
    pub cooldown_slots: u64,
    pub max_retries: u32,
    pub lattice_spacing_m: f64,
    pub lattice_jitter_m: f64,
    pub altitude_m: f64,
    pub traffic: TrafficModel,
    pub duration_slots: u64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            comm_radius_m: 10.0,
            ack_timeout_ms: 10.0,
            slot_ms: 1.0,
            weights: ScoreWeights::default(),
            window: 8,
            predictor_hidden: 8,
            predictor_lr: 1e-2,
            par_scale: 4.0,
            packet_bits: 1e4,
            fc_ghz: 2.4,
            bandwidth_hz: 10e6,
            tx_power_dbm: 24.0,
            loss_prob: 0.02,
            beacon_period_slots: 5,
            cooldown_slots: 10,
            max_retries: 5,
            lattice_spacing_m: 8.0,
            lattice_jitter_m: 0.5,
            altitude_m: 100.0,
            traffic: TrafficModel::default(),
            duration_slots: 6000,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<(), RoutingError> {
        let bad = |m: &str| Err(RoutingError::InvalidConfig(m.into()));
        let w = self.weights;
        if [w.backlog, w.latency, w.hops].iter().any(|v| !(*v >= 0.0)) {
            return bad("weights must be non-negative");
        }
        if ((w.backlog + w.latency + w.hops) - 1.0).abs() > 1e-9 {
            return bad("weights must sum to 1");
        }
        if !(self.ack_timeout_ms > 0.0 && self.slot_ms > 0.0) {
            return bad("ACK timeout and slot length must be positive");
        }
        if !(0.0..1.0).contains(&self.loss_prob) {
            return bad("loss probability must lie in [0, 1)");
        }
        if self.window == 0 || self.predictor_hidden == 0 || self.beacon_period_slots == 0 {
            return bad("window, predictor size and beacon period must be positive");
        }
        if !(self.traffic.mean_rate >= 0.0 && self.traffic.period_slots > 0.0) {
            return bad("traffic rate must be non-negative with a positive period");
        }
        if !(self.comm_radius_m > 0.0 && self.packet_bits > 0.0 && self.par_scale > 0.0) {
            return bad("radius, packet size and PAR scale must be positive");
        }
        Ok(())
    }

    /// ACK timeout in whole slots (at least one).
    pub fn ack_timeout_slots(&self) -> u64 {
        ((self.ack_timeout_ms / self.slot_ms).ceil() as u64).max(1)
    }

    fn slot_s(&self) -> f64 {
        self.slot_ms / 1000.0
    }
}

/// Relay positions plus the GCS. Node ids `0..J` are UAVs and `J` is the GCS.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub positions: Vec<Point3>,
    pub gcs: Point3,
    pub comm_radius_m: f64,
    pub neighbors: Vec<Vec<usize>>,
    pub hops: Vec<u32>,
}

impl Topology {
    pub fn new(positions: Vec<Point3>, gcs: Point3, comm_radius_m: f64) -> Self {
        let n = positions.len();
        let at = |i: usize| if i == n { gcs } else { positions[i] };
        let neighbors = (0..=n)
            .map(|i| (0..=n).filter(|&k| k != i && at(i).distance(at(k)) <= comm_radius_m).collect())
            .collect();
        let mut t = Self {
            positions,
            gcs,
            comm_radius_m,
            neighbors,
            hops: Vec::new(),
        };
        t.hops = min_hops_to_gcs(&t);
        t
    }

    pub fn num_uavs(&self) -> usize {
        self.positions.len()
    }

    pub fn gcs_id(&self) -> usize {
        self.positions.len()
    }

    pub fn position(&self, node: usize) -> Point3 {
        if node == self.gcs_id() {
            self.gcs
        } else {
            self.positions[node]
        }
    }

    /// Jittered square lattice, filled row by row, with the GCS at the
    /// centre of the cell diagonally outside the first lattice corner.
    pub fn lattice<R: Rng + ?Sized>(num_uavs: usize, cfg: &RoutingConfig, rng: &mut R) -> Result<Self, RoutingError> {
        let cols = (num_uavs as f64).sqrt().ceil().max(1.0) as usize;
        let s = cfg.lattice_spacing_m;
        let j = cfg.lattice_jitter_m;
        let positions = (0..num_uavs)
            .map(|i| {
                let (c, r) = ((i % cols) as f64, (i / cols) as f64);
                let dx = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
                let dy = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
                Point3::new(c * s + dx, r * s + dy, cfg.altitude_m)
            })
            .collect();
        let topo = Self::new(positions, Point3::new(-s / 2.0, -s / 2.0, cfg.altitude_m), cfg.comm_radius_m);
        topo.check_connected()?;
        Ok(topo)
    }

    pub fn check_connected(&self) -> Result<(), RoutingError> {
        match self.hops[..self.num_uavs()].iter().position(|&h| h == UNREACHABLE) {
            Some(u) => Err(RoutingError::Disconnected(u)),
            None => Ok(()),
        }
    }
}

/// Breadth-first hop counts towards the GCS for every node (GCS included,
/// at 0). Unreachable nodes get [`UNREACHABLE`].
pub fn min_hops_to_gcs(topo: &Topology) -> Vec<u32> {
    let g = topo.gcs_id();
    let mut hops = vec![UNREACHABLE; g + 1];
    hops[g] = 0;
    let mut queue = VecDeque::from([g]);
    while let Some(v) = queue.pop_front() {
        for &w in &topo.neighbors[v] {
            if hops[w] == UNREACHABLE {
                hops[w] = hops[v] + 1;
                queue.push_back(w);
            }
        }
    }
    hops
}

/// One eligible next hop as seen by the forwarding UAV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub id: usize,
    pub backlog: f64,
    pub latency_s: f64,
    pub hops: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NextHopScore {
    pub id: usize,
    pub l_hat: f64,
    pub d_hat: f64,
    pub h_hat: f64,
    pub score: f64,
}

fn min_max(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn normalize(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

pub fn score_candidates(candidates: &[Candidate], w: &ScoreWeights) -> Vec<NextHopScore> {
    let l = min_max(candidates.iter().map(|c| c.backlog));
    let d = min_max(candidates.iter().map(|c| c.latency_s));
    let h = min_max(candidates.iter().map(|c| f64::from(c.hops)));
    candidates
        .iter()
        .map(|c| {
            let l_hat = normalize(c.backlog, l);
            let d_hat = normalize(c.latency_s, d);
            let h_hat = normalize(f64::from(c.hops), h);
            NextHopScore {
                id: c.id,
                l_hat,
                d_hat,
                h_hat,
                score: w.backlog * l_hat + w.latency * d_hat + w.hops * h_hat,
            }
        })
        .collect()
}

/// Candidate with the minimum weighted score; ties go to the lowest id.
/// `None` when there is no candidate.
pub fn select_next_hop(candidates: &[Candidate], w: &ScoreWeights) -> Option<usize> {
    let chosen = score_candidates(candidates, w)
        .into_iter()
        .min_by(|a, b| a.score.total_cmp(&b.score).then(a.id.cmp(&b.id)))
        .map(|s| s.id);
    debug_assert_eq!(chosen, brute_force_next_hop(candidates, w));
    chosen
}

/// Exhaustive reference for [`select_next_hop`]: a candidate wins iff no
/// other candidate scores lower, or equal with a lower id.
pub fn brute_force_next_hop(candidates: &[Candidate], w: &ScoreWeights) -> Option<usize> {
    let score = |c: &Candidate| {
        let norm = |f: &dyn Fn(&Candidate) -> f64| {
            let lo = candidates.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = candidates.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            if hi == lo {
                0.0
            } else {
                (f(c) - lo) / (hi - lo)
            }
        };
        w.backlog * norm(&|x| x.backlog) + w.latency * norm(&|x| x.latency_s) + w.hops * norm(&|x| f64::from(x.hops))
    };
    candidates
        .iter()
        .find(|a| {
            candidates
                .iter()
                .all(|b| score(a) < score(b) || (score(a) == score(b) && a.id <= b.id))
        })
        .map(|c| c.id)
}

/// Backlog `slots_ahead` slots after `current`: predicted arrivals minus
/// nominal service per slot. Not floored at zero, so idle candidates still
/// rank by predicted inflow.
pub fn predict_backlog(current: f64, predicted_par: f64, nominal_service: f64, slots_ahead: u64) -> f64 {
    current + slots_ahead as f64 * (predicted_par - nominal_service)
}

/// Online one-step PAR forecaster. Until it has seen a full window plus one
/// target it returns the last observed PAR (zero before any observation).
#[derive(Debug, Clone)]
pub struct ParPredictor {
    pub cell: RecurrentCell,
    opt: Adam,
    history: VecDeque<f64>,
    window: usize,
    scale: f64,
    trained_steps: u64,
}

impl ParPredictor {
    pub fn new<R: Rng + ?Sized>(window: usize, hidden: usize, lr: f64, scale: f64, rng: &mut R) -> Result<Self, NeuralError> {
        Ok(Self {
            cell: RecurrentCell::new(1, hidden, rng)?,
            opt: Adam::new(lr),
            history: VecDeque::with_capacity(window + 1),
            window,
            scale,
            trained_steps: 0,
        })
    }

    fn encode(&self, par: f64) -> Vec<f64> {
        vec![(par / self.scale).min(crate::neural::FEATURE_LIMIT)]
    }

    /// Records the PAR of the slot just finished and takes one training
    /// step once a full window and its successor are available.
    pub fn observe(&mut self, par: f64) -> Result<(), NeuralError> {
        self.history.push_back(par);
        if self.history.len() > self.window {
            let seq: Vec<Vec<f64>> = self.history.iter().take(self.window).map(|&p| self.encode(p)).collect();
            let target = self.encode(par)[0];
            self.cell.train_step(&seq, target, &mut self.opt)?;
            self.trained_steps += 1;
            self.history.pop_front();
        }
        Ok(())
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    pub fn last_value(&self) -> f64 {
        self.history.back().copied().unwrap_or(0.0)
    }

    pub fn predict(&self) -> Result<f64, NeuralError> {
        if !self.is_trained() || self.history.len() < self.window {
            return Ok(self.last_value());
        }
        let seq: Vec<Vec<f64>> = self.history.iter().map(|&p| self.encode(p)).collect();
        Ok((self.cell.predict(&seq)? * self.scale).max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub id: u64,
    pub origin: usize,
    pub created_slot: u64,
    /// Nodes visited, origin first. Ends with the GCS once delivered.
    pub hops: Vec<usize>,
    pub delivered_slot: Option<u64>,
    pub retries: u32,
    /// Enqueue sequence number in the queue currently holding the packet.
    seq: u64,
}

#[derive(Debug, Clone, Default)]
struct UavQueue {
    fifo: VecDeque<Packet>,
    /// Timed-out packets awaiting retransmission, served before `fifo`.
    retx: VecDeque<Packet>,
    next_seq: u64,
    last_fifo_seq: Option<u64>,
    last_retx_seq: Option<u64>,
    cooldown_until: Vec<u64>,
}

impl UavQueue {
    fn backlog(&self) -> usize {
        self.fifo.len() + self.retx.len()
    }

    fn enqueue(&mut self, mut p: Packet) {
        p.seq = self.next_seq;
        self.next_seq += 1;
        self.fifo.push_back(p);
    }
}

#[derive(Debug, Clone)]
struct LostPacket {
    sender: usize,
    next_hop: usize,
    deadline: u64,
    packet: Packet,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Beacon {
    slot: u64,
    backlog: f64,
    predicted_par: f64,
}

/// Counters checked against the conservation and ordering invariants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InvariantReport {
    pub slots_checked: u64,
    pub conservation_violations: u64,
    pub fifo_violations: u64,
    pub cyclic_traces: u64,
    pub selections: u64,
    /// Weighted selections that disagree with [`brute_force_next_hop`].
    pub argmin_mismatches: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub delivered: u64,
    pub dropped: u64,
    pub generated: u64,
    pub queued: u64,
    pub in_flight: u64,
    pub latencies_ms: Vec<f64>,
    pub invariants: InvariantReport,
}

/// Nearest-rank 95th percentile of an unsorted sample (0 if empty).
pub fn percentile_95(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Discrete-time relay network simulator.
pub struct RoutingSim {
    pub cfg: RoutingConfig,
    pub protocol: Protocol,
    pub topo: Topology,
    queues: Vec<UavQueue>,
    lost: Vec<LostPacket>,
    pending_acks: Vec<(usize, u64, u64)>,
    beacons: Vec<Beacon>,
    predictors: Vec<ParPredictor>,
    phases: Vec<f64>,
    /// Per-link transmission plus propagation time, `[from][to]`.
    link_delay_s: Vec<Vec<f64>>,
    forwarded: Vec<Vec<u64>>,
    traffic_rng: ChaCha8Rng,
    loss_rng: ChaCha8Rng,
    slot: u64,
    next_packet_id: u64,
    stats: LatencyStats,
    check_invariants: bool,
}

impl RoutingSim {
    pub fn new(cfg: &RoutingConfig, protocol: Protocol, topo: Topology, seed: u64) -> Result<Self, RoutingError> {
        cfg.validate()?;
        if topo.num_uavs() < 1 {
            return Err(RoutingError::InvalidConfig("need at least one UAV".into()));
        }
        topo.check_connected()?;
        let n = topo.num_uavs();
        let noise = thermal_noise_dbm(cfg.bandwidth_hz);
        let mut link_delay_s = vec![vec![f64::INFINITY; n + 1]; n + 1];
        for (i, row) in link_delay_s.iter_mut().enumerate() {
            for &k in &topo.neighbors[i] {
                let d = topo.position(i).distance(topo.position(k));
                let pl = utu_path_loss_db(d, cfg.fc_ghz)?;
                let rate = link_capacity_bps(cfg.tx_power_dbm, pl, 1.0, noise, cfg.bandwidth_hz)?;
                row[k] = cfg.packet_bits / rate + d / SPEED_OF_LIGHT_MPS;
            }
        }
        let mut phase_rng = rng_stream(seed, 30);
        let phases = (0..n).map(|_| phase_rng.random_range(0.0..2.0 * PI)).collect();
        let mut init_rng = rng_stream(seed, 31);
        let predictors = if protocol == Protocol::ParPredict {
            (0..n)
                .map(|_| ParPredictor::new(cfg.window, cfg.predictor_hidden, cfg.predictor_lr, cfg.par_scale, &mut init_rng))
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            cfg: cfg.clone(),
            protocol,
            queues: (0..n)
                .map(|_| UavQueue {
                    cooldown_until: vec![0; n + 1],
                    ..UavQueue::default()
                })
                .collect(),
            topo,
            lost: Vec::new(),
            pending_acks: Vec::new(),
            beacons: vec![Beacon::default(); n],
            predictors,
            phases,
            link_delay_s,
            forwarded: vec![vec![0; n + 1]; n],
            traffic_rng: rng_stream(seed, 32),
            loss_rng: rng_stream(seed, 33),
            slot: 0,
            next_packet_id: 0,
            stats: LatencyStats::default(),
            check_invariants: true,
        })
    }

    pub fn with_invariant_checks(mut self, on: bool) -> Self {
        self.check_invariants = on;
        self
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn backlog(&self, uav: usize) -> usize {
        self.queues[uav].backlog()
    }

    /// Packets sent but not yet acknowledged (delivered or lost).
    pub fn awaiting_ack(&self) -> usize {
        self.pending_acks.len() + self.lost.len()
    }

    /// Successful transmissions per link, `[from][to]`.
    pub fn forward_counts(&self) -> &[Vec<u64>] {
        &self.forwarded
    }

    pub fn link_delay_s(&self, from: usize, to: usize) -> f64 {
        self.link_delay_s[from][to]
    }

    /// Injects one packet at `origin` as if generated in the current slot.
    pub fn inject(&mut self, origin: usize) {
        let p = self.new_packet(origin);
        self.queues[origin].enqueue(p);
    }

    fn new_packet(&mut self, origin: usize) -> Packet {
        let p = Packet {
            id: self.next_packet_id,
            origin,
            created_slot: self.slot,
            hops: vec![origin],
            delivered_slot: None,
            retries: 0,
            seq: 0,
        };
        self.next_packet_id += 1;
        self.stats.generated += 1;
        p
    }

    fn candidates(&self, j: usize) -> Vec<Candidate> {
        let hj = self.topo.hops[j];
        let gcs = self.topo.gcs_id();
        self.topo.neighbors[j]
            .iter()
            .copied()
            .filter(|&k| self.topo.hops[k] < hj && self.queues[j].cooldown_until[k] <= self.slot)
            .map(|k| {
                let backlog = if k == gcs {
                    0.0
                } else {
                    let b = self.beacons[k];
                    match self.protocol {
                        Protocol::ParPredict => {
                            predict_backlog(b.backlog, b.predicted_par, 1.0, self.slot - b.slot + 1)
                        }
                        _ => b.backlog,
                    }
                };
                Candidate {
                    id: k,
                    backlog,
                    latency_s: self.link_delay_s[j][k],
                    hops: self.topo.hops[k],
                }
            })
            .collect()
    }

    fn choose(&mut self, j: usize) -> Option<usize> {
        let cands = self.candidates(j);
        let pick = match self.protocol {
            Protocol::ParPredict => select_next_hop(&cands, &self.cfg.weights),
            Protocol::ShortestPath => cands.iter().min_by_key(|c| (c.hops, c.id)).map(|c| c.id),
            Protocol::BacklogAware => cands
                .iter()
                .min_by(|a, b| a.backlog.total_cmp(&b.backlog).then(a.id.cmp(&b.id)))
                .map(|c| c.id),
        };
        if pick.is_some() {
            self.stats.invariants.selections += 1;
        }
        if self.check_invariants
            && self.protocol == Protocol::ParPredict
            && pick != brute_force_next_hop(&cands, &self.cfg.weights)
        {
            self.stats.invariants.argmin_mismatches += 1;
        }
        pick
    }

    fn in_flight(&self) -> u64 {
        self.lost.len() as u64
    }

    fn queued(&self) -> u64 {
        self.queues.iter().map(|q| q.backlog() as u64).sum()
    }

    /// Advances the network by one slot.
    pub fn step(&mut self) -> Result<(), RoutingError> {
        let t = self.slot;
        let n = self.topo.num_uavs();
        let gcs = self.topo.gcs_id();
        let slot_s = self.cfg.slot_s();

        self.pending_acks.retain(|&(_, _, due)| due > t);
        let mut still_lost = Vec::with_capacity(self.lost.len());
        for mut lp in std::mem::take(&mut self.lost) {
            if lp.deadline > t {
                still_lost.push(lp);
                continue;
            }
            let q = &mut self.queues[lp.sender];
            q.cooldown_until[lp.next_hop] = t + self.cfg.cooldown_slots;
            lp.packet.retries += 1;
            if lp.packet.retries > self.cfg.max_retries {
                self.stats.dropped += 1;
            } else {
                lp.packet.seq = q.next_seq;
                q.next_seq += 1;
                q.retx.push_back(lp.packet);
            }
        }
        self.lost = still_lost;

        let mut arrivals = vec![0u32; n];
        for (j, a) in arrivals.iter_mut().enumerate() {
            *a = self.cfg.traffic.generate_arrivals(self.phases[j], t, &mut self.traffic_rng);
            for _ in 0..*a {
                let p = self.new_packet(j);
                self.queues[j].enqueue(p);
            }
        }

        if t % self.cfg.beacon_period_slots == 0 {
            for k in 0..n {
                let predicted_par = match self.predictors.get(k) {
                    Some(p) => p.predict()?,
                    None => 0.0,
                };
                self.beacons[k] = Beacon {
                    slot: t,
                    backlog: self.queues[k].backlog() as f64,
                    predicted_par,
                };
            }
        }

        let mut received: Vec<Vec<Packet>> = vec![Vec::new(); n];
        for j in 0..n {
            if self.queues[j].backlog() == 0 {
                continue;
            }
            let Some(k) = self.choose(j) else { continue };
            let q = &mut self.queues[j];
            let mut packet = match q.retx.pop_front() {
                Some(p) => {
                    if q.last_retx_seq.is_some_and(|s| s >= p.seq) {
                        self.stats.invariants.fifo_violations += 1;
                    }
                    q.last_retx_seq = Some(p.seq);
                    p
                }
                None => {
                    let p = q.fifo.pop_front().expect("backlog > 0");
                    if q.last_fifo_seq.is_some_and(|s| s >= p.seq) {
                        self.stats.invariants.fifo_violations += 1;
                    }
                    q.last_fifo_seq = Some(p.seq);
                    p
                }
            };
            if self.loss_rng.random::<f64>() < self.cfg.loss_prob {
                self.lost.push(LostPacket {
                    sender: j,
                    next_hop: k,
                    deadline: t + self.cfg.ack_timeout_slots(),
                    packet,
                });
                continue;
            }
            self.pending_acks.push((j, packet.id, t + 1));
            self.forwarded[j][k] += 1;
            packet.hops.push(k);
            if k == gcs {
                packet.delivered_slot = Some(t);
                let latency_s = (t - packet.created_slot) as f64 * slot_s + self.link_delay_s[j][k];
                self.stats.latencies_ms.push(latency_s * 1000.0);
                self.stats.delivered += 1;
                if self.check_invariants && has_repeat(&packet.hops) {
                    self.stats.invariants.cyclic_traces += 1;
                }
            } else {
                received[k].push(packet);
            }
        }

        for (k, batch) in received.into_iter().enumerate() {
            let count = batch.len() as u32;
            for p in batch {
                self.queues[k].enqueue(p);
            }
            if let Some(pred) = self.predictors.get_mut(k) {
                pred.observe(f64::from(arrivals[k] + count))?;
            }
        }

        self.slot += 1;
        if self.check_invariants {
            self.stats.invariants.slots_checked += 1;
            let accounted = self.stats.delivered + self.stats.dropped + self.queued() + self.in_flight();
            if accounted != self.stats.generated {
                self.stats.invariants.conservation_violations += 1;
            }
        }
        Ok(())
    }

    pub fn run(&mut self, slots: u64) -> Result<(), RoutingError> {
        for _ in 0..slots {
            self.step()?;
        }
        Ok(())
    }

    pub fn stats(&self) -> LatencyStats {
        let mut s = self.stats.clone();
        let n = s.latencies_ms.len();
        s.mean_ms = if n == 0 { 0.0 } else { s.latencies_ms.iter().sum::<f64>() / n as f64 };
        s.p95_ms = percentile_95(&s.latencies_ms);
        s.queued = self.queued();
        s.in_flight = self.in_flight();
        s
    }
}

fn has_repeat(trace: &[usize]) -> bool {
    let mut v = trace.to_vec();
    v.sort_unstable();
    v.windows(2).any(|w| w[0] == w[1])
}

/// Builds a lattice topology for `num_uavs` relays and runs one protocol.
pub fn simulate(cfg: &RoutingConfig, protocol: Protocol, num_uavs: usize, seed: u64) -> Result<LatencyStats, RoutingError> {
    if num_uavs < 2 {
        return Err(RoutingError::InvalidConfig("need at least two UAVs".into()));
    }
    let topo = Topology::lattice(num_uavs, cfg, &mut rng_stream(seed, 40))?;
    let mut sim = RoutingSim::new(cfg, protocol, topo, seed)?;
    sim.run(cfg.duration_slots)?;
    Ok(sim.stats())
}
