//! Line-oriented `section.key = value` experiment configuration.
//!
//! Every key is declared once in a registry together with its type, range
//! and default. Defaults are taken from the library's own `Default` impls.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use thiserror::Error;
use uavnet::chanest::{EstimatorConfig, GainBounds};
use uavnet::channel::{ChannelParams, UTG_MAX_ALTITUDE_M, UTG_MIN_ALTITUDE_M};
use uavnet::env::{EnergyModel, WorldConfig};
use uavnet::placement::DrlConfig;
use uavnet::routing::{Protocol, RoutingConfig, ScoreWeights, TrafficModel};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` set twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: `{key}` expects {expected}, got `{got}`")]
    Type {
        line: usize,
        key: String,
        expected: String,
        got: String,
    },
    #[error("line {line}: `{key}` = {value} is outside [{min}, {max}]")]
    Range {
        line: usize,
        key: String,
        value: String,
        min: String,
        max: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Chanest,
    Placement,
    Routing,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Chanest => "chanest",
            ExperimentKind::Placement => "placement",
            ExperimentKind::Routing => "routing",
        }
    }
}

const KINDS: &[&str] = &["chanest", "placement", "routing"];
const PROTOCOLS: &[&str] = &["par_predict", "shortest_path", "backlog_aware"];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    UInt { min: u64, max: u64 },
    Float { min: f64, max: f64 },
    Choice(&'static [&'static str]),
    Text,
    UIntList { min: u64, max: u64 },
    ChoiceList(&'static [&'static str]),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    UInt(u64),
    Float(f64),
    Text(String),
    UIntList(Vec<u64>),
    TextList(Vec<String>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::UInt(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Text(v) => write!(f, "{v}"),
            Value::UIntList(v) => {
                let parts: Vec<String> = v.iter().map(u64::to_string).collect();
                write!(f, "{}", parts.join(", "))
            }
            Value::TextList(v) => write!(f, "{}", v.join(", ")),
        }
    }
}

struct KeyDef {
    key: &'static str,
    kind: Kind,
    default: Value,
}

const POS: f64 = f64::MIN_POSITIVE;
const BIG: f64 = 1e12;

fn uint(key: &'static str, min: u64, max: u64, default: usize) -> KeyDef {
    KeyDef {
        key,
        kind: Kind::UInt { min, max },
        default: Value::UInt(default as u64),
    }
}

fn float(key: &'static str, min: f64, max: f64, default: f64) -> KeyDef {
    KeyDef {
        key,
        kind: Kind::Float { min, max },
        default: Value::Float(default),
    }
}

fn uint_list(key: &'static str, min: u64, max: u64, default: &[usize]) -> KeyDef {
    KeyDef {
        key,
        kind: Kind::UIntList { min, max },
        default: Value::UIntList(default.iter().map(|&v| v as u64).collect()),
    }
}

fn registry() -> Vec<KeyDef> {
    let world = WorldConfig::default();
    let channel = ChannelParams::default();
    let energy = EnergyModel::default();
    let est = EstimatorConfig::default();
    let drl = DrlConfig::default();
    let rt = RoutingConfig::default();
    vec![
        KeyDef {
            key: "experiment.kind",
            kind: Kind::Choice(KINDS),
            default: Value::Text("chanest".into()),
        },
        uint_list("experiment.seeds", 0, u64::MAX, &[1]),
        KeyDef {
            key: "experiment.out_dir",
            kind: Kind::Text,
            default: Value::Text("out".into()),
        },
        float("world.alpha", 0.0, 1.0, world.alpha),
        float("world.beta", 0.0, 1e5, world.beta),
        float("world.delta_m", 0.0, 1e3, world.delta_m),
        float("world.area_x_m", 1.0, 1e6, world.area_x_m),
        float("world.area_y_m", 1.0, 1e6, world.area_y_m),
        float("channel.fc_ghz", 0.1, 100.0, channel.fc_ghz),
        float("channel.rician_k_db", -50.0, 100.0, channel.rician_k_db),
        float("energy.hover_power_w", 0.0, 1e5, energy.hover_power_w),
        float("energy.propulsion_j_per_m", 0.0, 1e5, energy.propulsion_j_per_m),
        uint_list("chanest.hidden_sizes", 1, 1 << 16, &est.hidden_sizes),
        uint("chanest.pretrain_slots", 1, 1 << 32, est.pretrain_slots),
        uint("chanest.online_slots", 1, 1 << 32, est.online_slots),
        uint("chanest.num_uavs", 1, 1 << 16, est.num_uavs),
        float("chanest.uav_altitude_m", UTG_MIN_ALTITUDE_M, UTG_MAX_ALTITUDE_M, est.uav_altitude_m),
        float("chanest.bandwidth_hz", 1.0, BIG, est.bandwidth_hz),
        float("chanest.tx_power_dbm", -50.0, 60.0, est.tx_power_dbm),
        uint("chanest.users_per_uav", 1, 1 << 16, est.users_per_uav),
        float("chanest.holdout_fraction", 0.0, 0.99, est.holdout_fraction),
        float("chanest.gain_min_db", -400.0, 100.0, est.gain_bounds.min_db),
        float("chanest.gain_max_db", -400.0, 100.0, est.gain_bounds.max_db),
        float("chanest.learning_rate", POS, 1.0, est.learning_rate),
        uint("chanest.batch_size", 1, 1 << 20, est.batch_size),
        uint("chanest.train_steps_per_slot", 0, 1 << 16, est.train_steps_per_slot),
        uint("chanest.replay_capacity", 1, 1 << 32, est.replay_capacity),
        float("chanest.patrol_radius_m", 0.0, 1e5, est.patrol_radius_m),
        float("chanest.patrol_period_slots", POS, BIG, est.patrol_period_slots),
        float("chanest.slot_dt_s", POS, 1e5, est.slot_dt_s),
        float("chanest.user_speed_min_mps", 0.0, 1e3, est.user_speed_mps.0),
        float("chanest.user_speed_max_mps", 0.0, 1e3, est.user_speed_mps.1),
        uint_list("placement.actor_hidden", 1, 1 << 16, &drl.actor_hidden),
        uint_list("placement.critic_hidden", 1, 1 << 16, &drl.critic_hidden),
        float("placement.discount", 0.0, 0.9999, drl.discount),
        uint("placement.replay_capacity", 1, 1 << 32, drl.replay_capacity),
        uint("placement.batch_size", 1, 1 << 20, drl.batch_size),
        float("placement.noise_std", 0.0, 10.0, drl.noise_std),
        float("placement.noise_std_final", 0.0, 10.0, drl.noise_std_final),
        float("placement.target_blend", 0.0, 1.0, drl.target_blend),
        float("placement.actor_lr", POS, 1.0, drl.actor_lr),
        float("placement.critic_lr", POS, 1.0, drl.critic_lr),
        float("placement.lambda_boundary", 0.0, BIG, drl.lambda_boundary),
        float("placement.lambda_connectivity", 0.0, BIG, drl.lambda_connectivity),
        uint("placement.num_uavs", 1, 1 << 10, drl.num_uavs),
        uint("placement.n_users", 1, 1 << 16, drl.n_users),
        float("placement.area_m", 1.0, 1e6, drl.area_m),
        float("placement.h_min_m", POS, 1e4, drl.h_min_m),
        float("placement.h_max_m", POS, 1e4, drl.h_max_m),
        float("placement.tx_power_dbm", -50.0, 60.0, drl.tx_power_dbm),
        float("placement.qos_min_bps", 0.0, BIG, drl.qos_min_bps),
        float("placement.comm_range_m", POS, 1e6, drl.comm_range_m),
        float("placement.d_max_m", 0.0, 1e4, drl.d_max_m),
        uint("placement.episodes", 0, 1 << 32, drl.episodes),
        uint("placement.episode_len", 1, 1 << 32, drl.episode_len),
        uint("placement.warmup_steps", 0, 1 << 32, drl.warmup_steps),
        uint("placement.eval_episodes", 1, 1 << 32, drl.eval_episodes),
        uint("placement.greedy_candidates", 1, 1 << 20, drl.greedy_candidates),
        float("placement.slot_dt_s", POS, 1e5, drl.slot_dt_s),
        float("placement.rate_unit_bps", POS, BIG, drl.rate_unit_bps),
        float("placement.energy_unit_j", POS, BIG, drl.energy_unit_j),
        float("routing.comm_radius_m", POS, 1e4, rt.comm_radius_m),
        float("routing.t_th_ms", POS, 1e6, rt.ack_timeout_ms),
        float("routing.slot_ms", POS, 1e6, rt.slot_ms),
        float("routing.w_l", 0.0, 1.0, rt.weights.backlog),
        float("routing.w_d", 0.0, 1.0, rt.weights.latency),
        float("routing.w_h", 0.0, 1.0, rt.weights.hops),
        uint("routing.window", 1, 1 << 12, rt.window),
        uint("routing.predictor_hidden", 1, 1 << 12, rt.predictor_hidden),
        float("routing.predictor_lr", POS, 1.0, rt.predictor_lr),
        float("routing.par_scale", POS, 1e6, rt.par_scale),
        float("routing.packet_bits", 1.0, BIG, rt.packet_bits),
        float("routing.fc_ghz", 0.1, 100.0, rt.fc_ghz),
        float("routing.bandwidth_hz", 1.0, BIG, rt.bandwidth_hz),
        float("routing.tx_power_dbm", -50.0, 60.0, rt.tx_power_dbm),
        float("routing.loss_prob", 0.0, 0.99, rt.loss_prob),
        uint("routing.beacon_period_slots", 1, 1 << 32, rt.beacon_period_slots as usize),
        uint("routing.cooldown_slots", 0, 1 << 32, rt.cooldown_slots as usize),
        uint("routing.max_retries", 0, 1 << 16, rt.max_retries as usize),
        float("routing.lattice_spacing_m", POS, 1e4, rt.lattice_spacing_m),
        float("routing.lattice_jitter_m", 0.0, 1e4, rt.lattice_jitter_m),
        float("routing.altitude_m", 0.0, 1e4, rt.altitude_m),
        float("routing.mean_rate", 0.0, 1e6, rt.traffic.mean_rate),
        float("routing.amplitude", 0.0, 1.0, rt.traffic.amplitude),
        float("routing.period_slots", POS, BIG, rt.traffic.period_slots),
        uint("routing.duration_slots", 1, 1 << 40, rt.duration_slots as usize),
        uint_list("routing.num_uavs", 2, 1 << 12, &[5, 10, 15, 20]),
        KeyDef {
            key: "routing.protocols",
            kind: Kind::ChoiceList(PROTOCOLS),
            default: Value::TextList(PROTOCOLS.iter().map(|s| s.to_string()).collect()),
        },
    ]
}

fn expected(kind: &Kind) -> String {
    match kind {
        Kind::UInt { .. } => "a non-negative integer".into(),
        Kind::Float { .. } => "a finite number".into(),
        Kind::Choice(c) => format!("one of {}", c.join("|")),
        Kind::Text => "text".into(),
        Kind::UIntList { .. } => "a comma-separated list of non-negative integers".into(),
        Kind::ChoiceList(c) => format!("a comma-separated list of {}", c.join("|")),
    }
}

fn parse_value(def: &KeyDef, raw: &str, line: usize) -> Result<Value, ConfigError> {
    let type_err = || ConfigError::Type {
        line,
        key: def.key.into(),
        expected: expected(&def.kind),
        got: raw.into(),
    };
    let range_err = |v: String, min: String, max: String| ConfigError::Range {
        line,
        key: def.key.into(),
        value: v,
        min,
        max,
    };
    let items = || raw.split(',').map(str::trim).filter(|s| !s.is_empty());
    match def.kind {
        Kind::UInt { min, max } => {
            let v: u64 = raw.parse().map_err(|_| type_err())?;
            if v < min || v > max {
                return Err(range_err(v.to_string(), min.to_string(), max.to_string()));
            }
            Ok(Value::UInt(v))
        }
        Kind::Float { min, max } => {
            let v: f64 = raw.parse().map_err(|_| type_err())?;
            if !v.is_finite() {
                return Err(type_err());
            }
            if v < min || v > max {
                return Err(range_err(v.to_string(), min.to_string(), max.to_string()));
            }
            Ok(Value::Float(v))
        }
        Kind::Choice(choices) => choices
            .iter()
            .find(|c| **c == raw)
            .map(|c| Value::Text(c.to_string()))
            .ok_or_else(type_err),
        Kind::Text => {
            if raw.is_empty() {
                Err(type_err())
            } else {
                Ok(Value::Text(raw.into()))
            }
        }
        Kind::UIntList { min, max } => {
            let mut out = Vec::new();
            for item in items() {
                let v: u64 = item.parse().map_err(|_| type_err())?;
                if v < min || v > max {
                    return Err(range_err(v.to_string(), min.to_string(), max.to_string()));
                }
                out.push(v);
            }
            if out.is_empty() {
                return Err(type_err());
            }
            Ok(Value::UIntList(out))
        }
        Kind::ChoiceList(choices) => {
            let mut out = Vec::new();
            for item in items() {
                if !choices.contains(&item) {
                    return Err(type_err());
                }
                out.push(item.to_string());
            }
            if out.is_empty() {
                return Err(type_err());
            }
            Ok(Value::TextList(out))
        }
    }
}

/// Fully resolved configuration: every registered key has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<&'static str, Value>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            values: registry().into_iter().map(|s| (s.key, s.default)).collect(),
        }
    }
}

/// Parses configuration text. Missing keys keep their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let defs = registry();
    let mut cfg = ExperimentConfig::default();
    let mut seen: BTreeMap<&'static str, usize> = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("expected `section.key = value`, got `{content}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if !key.contains('.') || key.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("malformed key `{key}`"),
            });
        }
        let def = defs.iter().find(|s| s.key == key).ok_or_else(|| ConfigError::UnknownKey {
            line,
            key: key.into(),
        })?;
        if seen.insert(def.key, line).is_some() {
            return Err(ConfigError::Duplicate {
                line,
                key: key.into(),
            });
        }
        cfg.values.insert(def.key, parse_value(def, value, line)?);
    }
    Ok(cfg)
}

impl ExperimentConfig {
    fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    fn uint(&self, key: &str) -> u64 {
        match self.get(key) {
            Value::UInt(v) => *v,
            v => panic!("{key} holds {v:?}"),
        }
    }

    fn usize(&self, key: &str) -> usize {
        self.uint(key) as usize
    }

    fn float(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(v) => *v,
            v => panic!("{key} holds {v:?}"),
        }
    }

    fn text(&self, key: &str) -> &str {
        match self.get(key) {
            Value::Text(v) => v,
            v => panic!("{key} holds {v:?}"),
        }
    }

    fn uint_list(&self, key: &str) -> Vec<u64> {
        match self.get(key) {
            Value::UIntList(v) => v.clone(),
            v => panic!("{key} holds {v:?}"),
        }
    }

    fn text_list(&self, key: &str) -> &[String] {
        match self.get(key) {
            Value::TextList(v) => v,
            v => panic!("{key} holds {v:?}"),
        }
    }

    /// Overrides one key from text, with the same checks as the parser.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let defs = registry();
        let def = defs.iter().find(|s| s.key == key).ok_or_else(|| ConfigError::UnknownKey {
            line: 0,
            key: key.into(),
        })?;
        let v = parse_value(def, value.trim(), 0)?;
        self.values.insert(def.key, v);
        Ok(())
    }

    /// One `key = value` line per registered key, sorted by key.
    pub fn resolved_dump(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Key/value pairs that determine results (seeds and output location excluded).
    pub fn hash_pairs(&self) -> Vec<(String, String)> {
        self.values
            .iter()
            .filter(|(k, _)| !matches!(**k, "experiment.seeds" | "experiment.out_dir"))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    pub fn kind(&self) -> ExperimentKind {
        match self.text("experiment.kind") {
            "placement" => ExperimentKind::Placement,
            "routing" => ExperimentKind::Routing,
            _ => ExperimentKind::Chanest,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.uint_list("experiment.seeds")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.text("experiment.out_dir"))
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            area_x_m: self.float("world.area_x_m"),
            area_y_m: self.float("world.area_y_m"),
            alpha: self.float("world.alpha"),
            beta: self.float("world.beta"),
            delta_m: self.float("world.delta_m"),
            ..WorldConfig::default()
        }
    }

    pub fn channel(&self) -> ChannelParams {
        ChannelParams {
            fc_ghz: self.float("channel.fc_ghz"),
            rician_k_db: self.float("channel.rician_k_db"),
            ..ChannelParams::default()
        }
    }

    pub fn energy(&self) -> EnergyModel {
        EnergyModel {
            hover_power_w: self.float("energy.hover_power_w"),
            propulsion_j_per_m: self.float("energy.propulsion_j_per_m"),
        }
    }

    pub fn estimator(&self) -> Result<EstimatorConfig, ConfigError> {
        let cfg = EstimatorConfig {
            hidden_sizes: self.uint_list("chanest.hidden_sizes").into_iter().map(|v| v as usize).collect(),
            pretrain_slots: self.usize("chanest.pretrain_slots"),
            online_slots: self.usize("chanest.online_slots"),
            num_uavs: self.usize("chanest.num_uavs"),
            uav_altitude_m: self.float("chanest.uav_altitude_m"),
            bandwidth_hz: self.float("chanest.bandwidth_hz"),
            tx_power_dbm: self.float("chanest.tx_power_dbm"),
            users_per_uav: self.usize("chanest.users_per_uav"),
            holdout_fraction: self.float("chanest.holdout_fraction"),
            gain_bounds: GainBounds {
                min_db: self.float("chanest.gain_min_db"),
                max_db: self.float("chanest.gain_max_db"),
            },
            learning_rate: self.float("chanest.learning_rate"),
            batch_size: self.usize("chanest.batch_size"),
            train_steps_per_slot: self.usize("chanest.train_steps_per_slot"),
            replay_capacity: self.usize("chanest.replay_capacity"),
            patrol_radius_m: self.float("chanest.patrol_radius_m"),
            patrol_period_slots: self.float("chanest.patrol_period_slots"),
            slot_dt_s: self.float("chanest.slot_dt_s"),
            user_speed_mps: (self.float("chanest.user_speed_min_mps"), self.float("chanest.user_speed_max_mps")),
            energy: self.energy(),
        };
        if cfg.user_speed_mps.0 > cfg.user_speed_mps.1 {
            return Err(ConfigError::Invalid("chanest user speed min exceeds max".into()));
        }
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn drl(&self) -> Result<DrlConfig, ConfigError> {
        let hidden = |k: &str| self.uint_list(k).into_iter().map(|v| v as usize).collect();
        let cfg = DrlConfig {
            actor_hidden: hidden("placement.actor_hidden"),
            critic_hidden: hidden("placement.critic_hidden"),
            discount: self.float("placement.discount"),
            replay_capacity: self.usize("placement.replay_capacity"),
            batch_size: self.usize("placement.batch_size"),
            noise_std: self.float("placement.noise_std"),
            noise_std_final: self.float("placement.noise_std_final"),
            target_blend: self.float("placement.target_blend"),
            actor_lr: self.float("placement.actor_lr"),
            critic_lr: self.float("placement.critic_lr"),
            lambda_boundary: self.float("placement.lambda_boundary"),
            lambda_connectivity: self.float("placement.lambda_connectivity"),
            num_uavs: self.usize("placement.num_uavs"),
            n_users: self.usize("placement.n_users"),
            area_m: self.float("placement.area_m"),
            h_min_m: self.float("placement.h_min_m"),
            h_max_m: self.float("placement.h_max_m"),
            tx_power_dbm: self.float("placement.tx_power_dbm"),
            qos_min_bps: self.float("placement.qos_min_bps"),
            comm_range_m: self.float("placement.comm_range_m"),
            d_max_m: self.float("placement.d_max_m"),
            episodes: self.usize("placement.episodes"),
            episode_len: self.usize("placement.episode_len"),
            warmup_steps: self.usize("placement.warmup_steps"),
            eval_episodes: self.usize("placement.eval_episodes"),
            greedy_candidates: self.usize("placement.greedy_candidates"),
            slot_dt_s: self.float("placement.slot_dt_s"),
            rate_unit_bps: self.float("placement.rate_unit_bps"),
            energy_unit_j: self.float("placement.energy_unit_j"),
            energy: self.energy(),
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn routing(&self) -> Result<RoutingConfig, ConfigError> {
        let cfg = RoutingConfig {
            comm_radius_m: self.float("routing.comm_radius_m"),
            ack_timeout_ms: self.float("routing.t_th_ms"),
            slot_ms: self.float("routing.slot_ms"),
            weights: ScoreWeights {
                backlog: self.float("routing.w_l"),
                latency: self.float("routing.w_d"),
                hops: self.float("routing.w_h"),
            },
            window: self.usize("routing.window"),
            predictor_hidden: self.usize("routing.predictor_hidden"),
            predictor_lr: self.float("routing.predictor_lr"),
            par_scale: self.float("routing.par_scale"),
            packet_bits: self.float("routing.packet_bits"),
            fc_ghz: self.float("routing.fc_ghz"),
            bandwidth_hz: self.float("routing.bandwidth_hz"),
            tx_power_dbm: self.float("routing.tx_power_dbm"),
            loss_prob: self.float("routing.loss_prob"),
            beacon_period_slots: self.uint("routing.beacon_period_slots"),
            cooldown_slots: self.uint("routing.cooldown_slots"),
            max_retries: self.uint("routing.max_retries").min(u64::from(u32::MAX)) as u32,
            lattice_spacing_m: self.float("routing.lattice_spacing_m"),
            lattice_jitter_m: self.float("routing.lattice_jitter_m"),
            altitude_m: self.float("routing.altitude_m"),
            traffic: TrafficModel {
                mean_rate: self.float("routing.mean_rate"),
                amplitude: self.float("routing.amplitude"),
                period_slots: self.float("routing.period_slots"),
            },
            duration_slots: self.uint("routing.duration_slots"),
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn routing_sweep(&self) -> Vec<usize> {
        self.uint_list("routing.num_uavs").into_iter().map(|v| v as usize).collect()
    }

    pub fn routing_protocols(&self) -> Vec<Protocol> {
        self.text_list("routing.protocols")
            .iter()
            .filter_map(|p| p.parse().ok())
            .collect()
    }

    /// Builds the typed section used by the selected experiment, surfacing
    /// cross-field errors before any run starts.
    pub fn check(&self) -> Result<(), ConfigError> {
        match self.kind() {
            ExperimentKind::Chanest => self.estimator().map(drop),
            ExperimentKind::Placement => self.drl().map(drop),
            ExperimentKind::Routing => self.routing().map(drop),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let dump = cfg.resolved_dump();
        assert_eq!(dump.lines().count(), registry().len());
        assert!(dump.contains("chanest.pretrain_slots = 736\n"));
        assert!(dump.contains("routing.t_th_ms = 10\n"));
        assert_eq!(cfg.estimator().unwrap(), EstimatorConfig::default());
        assert_eq!(cfg.drl().unwrap(), DrlConfig::default());
        assert_eq!(cfg.routing().unwrap(), RoutingConfig::default());
    }

    #[test]
    fn dump_reparses_to_same_config() {
        let text = "routing.t_th_ms = 10\nrouting.w_l = 0.2\nrouting.w_d = 0.4\nrouting.w_h = 0.4\n\
                    experiment.seeds = 3, 4\nchanest.hidden_sizes = 64,32\nchannel.fc_ghz = 2.1\n";
        let a = parse_config(text).unwrap();
        let b = parse_config(&a.resolved_dump()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.seeds(), vec![3, 4]);
        assert_eq!(b.routing().unwrap().ack_timeout_ms, 10.0);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = parse_config("# header\n\n  experiment.kind = routing   # inline\n").unwrap();
        assert_eq!(cfg.kind(), ExperimentKind::Routing);
    }

    #[test]
    fn negative_count_names_the_key() {
        let err = parse_config("placement.n_users = -5").unwrap_err();
        assert!(matches!(&err, ConfigError::Type { key, line: 1, .. } if key == "placement.n_users"));
        assert!(err.to_string().contains("placement.n_users"));
    }

    #[test]
    fn range_and_unknown_and_syntax_errors() {
        let err = parse_config("\nrouting.loss_prob = 1.5").unwrap_err();
        assert!(matches!(err, ConfigError::Range { line: 2, .. }));
        let err = parse_config("routing.nope = 1").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                line: 1,
                key: "routing.nope".into()
            }
        );
        assert!(matches!(parse_config("just words"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            parse_config("experiment.kind = chanest\nexperiment.kind = routing"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(parse_config("experiment.kind = ns3"), Err(ConfigError::Type { .. })));
        assert!(matches!(parse_config("world.alpha = nan"), Err(ConfigError::Type { .. })));
        assert!(matches!(parse_config("routing.protocols = par_predict, ospf"), Err(ConfigError::Type { .. })));
    }

    #[test]
    fn cross_field_errors_surface_on_check() {
        let cfg = parse_config("experiment.kind = routing\nrouting.w_l = 0.9").unwrap();
        assert!(matches!(cfg.check(), Err(ConfigError::Invalid(_))));
        let cfg = parse_config("experiment.kind = placement\nplacement.h_min_m = 900").unwrap();
        assert!(matches!(cfg.check(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn hash_ignores_seeds_and_output() {
        let a = parse_config("experiment.seeds = 1").unwrap();
        let b = parse_config("experiment.seeds = 9\nexperiment.out_dir = elsewhere").unwrap();
        assert_eq!(a.hash_pairs(), b.hash_pairs());
        let c = parse_config("world.beta = 100").unwrap();
        assert_ne!(a.hash_pairs(), c.hash_pairs());
    }

    #[test]
    fn set_applies_parser_checks() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("experiment.seeds", "5,6,7").unwrap();
        assert_eq!(cfg.seeds(), vec![5, 6, 7]);
        assert!(cfg.set("experiment.seeds", "x").is_err());
        assert!(cfg.set("nope.key", "1").is_err());
    }
}
