//! Runs an experiment over its seeds and writes the CSV outputs.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use thiserror::Error;
use uavnet::chanest::{run_chanest, ChanestResult, MseRow};
use uavnet::metrics::{config_hash, RunSummary};
use uavnet::placement::{run_placement, EpisodeStats, PolicyKind};
use uavnet::routing::simulate;

use crate::config::{ConfigError, ExperimentConfig, ExperimentKind};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("run aborted ({failures} seed(s) failed); partial results in {dir}")]
    Aborted { dir: PathBuf, failures: usize },
}

impl RunError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Io { .. } | RunError::Aborted { .. } => 3,
        }
    }
}

/// One CSV file produced by a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: &'static str,
    pub rows: Vec<String>,
    /// The schema already carries a `seed` column.
    pub seeded: bool,
}

impl Table {
    fn new(name: &'static str, header: &'static str) -> Self {
        Self {
            name,
            header,
            rows: Vec::new(),
            seeded: false,
        }
    }

    fn render(&self) -> String {
        let mut s = String::with_capacity(self.rows.len() * 24);
        s.push_str(self.header);
        s.push('\n');
        for r in &self.rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutput {
    pub seed: u64,
    pub tables: Vec<Table>,
    pub summary: RunSummary,
    pub error: Option<String>,
}

/// What a finished run wrote.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub seeds: Vec<SeedOutput>,
}

fn mse_rows(rows: &[MseRow], table: &mut Table) {
    table
        .rows
        .extend(rows.iter().map(|r| format!("{},{},{}", r.slot, r.uav_id, r.mse)));
}

fn chanest_summary(res: &ChanestResult, mut summary: RunSummary) -> RunSummary {
    let slot_mse = ChanestResult::slot_mean_mse(&res.offline_mse);
    let first = slot_mse.first().copied().unwrap_or(f64::NAN);
    let last = slot_mse.last().copied().unwrap_or(f64::NAN);
    summary = summary
        .with_metric("mse_first_slot", first)
        .with_metric("mse_end_of_pretraining", last)
        .with_metric("mse_ratio", last / first)
        .with_metric("mean_online_mse", res.mean_online_mse())
        .with_metric("mean_ee_ratio", res.mean_ee_ratio())
        .with_metric(
            "clamp_warnings",
            res.estimators.iter().map(|e| e.clamp_warnings()).sum::<u64>() as f64,
        );
    summary
}

fn run_chanest_seed(cfg: &ExperimentConfig, seed: u64, summary: RunSummary) -> SeedOutput {
    let mut mse = Table::new("chanest_mse.csv", "slot,uav_id,mse");
    let mut ee = Table::new("chanest_ee.csv", "slot,ee_predicted,ee_perfect");
    let result = cfg
        .estimator()
        .map_err(|e| e.to_string())
        .and_then(|est| run_chanest(&cfg.world(), cfg.channel(), &est, seed).map_err(|e| e.to_string()));
    let (summary, error) = match result {
        Ok(res) => {
            mse_rows(&res.offline_mse, &mut mse);
            mse_rows(&res.online.mse, &mut mse);
            ee.rows.extend(
                res.online
                    .ee
                    .iter()
                    .map(|r| format!("{},{},{}", r.slot, r.ee_predicted, r.ee_perfect)),
            );
            (chanest_summary(&res, summary), None)
        }
        Err(e) => (summary, Some(e)),
    };
    SeedOutput {
        seed,
        tables: vec![mse, ee],
        summary,
        error,
    }
}

fn curve_rows(curve: &[EpisodeStats], table: &mut Table) {
    table.rows.extend(
        curve
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{},{},{},{}", i + 1, s.mean_reward, s.fairness, s.ee)),
    );
}

fn run_placement_seed(cfg: &ExperimentConfig, seed: u64, mut summary: RunSummary) -> SeedOutput {
    let mut curve = Table::new("drl_curve.csv", "episode,mean_reward,fairness,ee");
    let mut eval = Table::new("policy_eval.csv", "policy_kind,episode,reward");
    let drl = match cfg.drl() {
        Ok(d) => d,
        Err(e) => {
            return SeedOutput {
                seed,
                tables: vec![curve, eval],
                summary,
                error: Some(e.to_string()),
            }
        }
    };
    let error = match run_placement(&drl, &cfg.world(), cfg.channel(), seed) {
        Ok(res) => {
            curve_rows(&res.curve, &mut curve);
            for (kind, stats) in &res.evaluation {
                eval.rows.extend(
                    stats
                        .iter()
                        .enumerate()
                        .map(|(i, s)| format!("{},{},{}", kind.name(), i + 1, s.mean_reward)),
                );
            }
            for kind in [PolicyKind::Drl, PolicyKind::Greedy, PolicyKind::Random] {
                if let Some(r) = res.mean_eval_reward(kind) {
                    summary = summary.with_metric(&format!("{}_mean_reward", kind.name()), r);
                }
            }
            if let Some(last) = res.curve.last() {
                summary = summary
                    .with_metric("final_fairness", last.fairness)
                    .with_metric("final_ee", last.ee);
            }
            None
        }
        Err(abort) => {
            curve_rows(&abort.curve, &mut curve);
            Some(abort.error.to_string())
        }
    };
    SeedOutput {
        seed,
        tables: vec![curve, eval],
        summary,
        error,
    }
}

fn run_routing_seed(cfg: &ExperimentConfig, seed: u64, mut summary: RunSummary) -> SeedOutput {
    let mut table = Table::new("routing_latency.csv", "protocol,J,seed,mean_ms,p95_ms,delivered,dropped");
    table.seeded = true;
    let mut error = None;
    match cfg.routing() {
        Ok(rc) => {
            'sweep: for j in cfg.routing_sweep() {
                for p in cfg.routing_protocols() {
                    match simulate(&rc, p, j, seed) {
                        Ok(s) => {
                            table.rows.push(format!(
                                "{},{},{},{},{},{},{}",
                                p.name(),
                                j,
                                seed,
                                s.mean_ms,
                                s.p95_ms,
                                s.delivered,
                                s.dropped
                            ));
                            summary = summary.with_metric(&format!("{}_j{}_mean_ms", p.name(), j), s.mean_ms);
                        }
                        Err(e) => {
                            error = Some(format!("{} J={j}: {e}", p.name()));
                            break 'sweep;
                        }
                    }
                }
            }
        }
        Err(e) => error = Some(e.to_string()),
    }
    SeedOutput {
        seed,
        tables: vec![table],
        summary,
        error,
    }
}

/// Runs one seed of the configured experiment, in memory.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> SeedOutput {
    let hash_pairs = cfg.hash_pairs();
    let hash = config_hash(hash_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())));
    let kind = cfg.kind();
    let summary = RunSummary::new(kind.name(), &hash, seed);
    log::info!("{} seed {seed}: start", kind.name());
    let mut out = match kind {
        ExperimentKind::Chanest => run_chanest_seed(cfg, seed, summary),
        ExperimentKind::Placement => run_placement_seed(cfg, seed, summary),
        ExperimentKind::Routing => run_routing_seed(cfg, seed, summary),
    };
    out.summary.series = out
        .tables
        .iter()
        .map(|t| format!("seed_{seed}/{}", t.name))
        .collect();
    match &out.error {
        None => log::info!("{} seed {seed}: done", kind.name()),
        Some(e) => log::error!("{} seed {seed}: {e}", kind.name()),
    }
    out
}

/// Runs every seed on at most `threads` worker threads. Results come back
/// in seed-list order whatever the scheduling.
pub fn run_seeds(cfg: &ExperimentConfig, seeds: &[u64], threads: usize) -> Vec<SeedOutput> {
    let workers = threads.clamp(1, seeds.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SeedOutput>>> = Mutex::new(vec![None; seeds.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let out = run_seed(cfg, seeds[i]);
                results.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .flatten()
        .collect()
}

struct Writer {
    dir: PathBuf,
    suffix: &'static str,
    files: Vec<(PathBuf, String)>,
}

impl Writer {
    fn write(&mut self, rel: &str, contents: &str) -> Result<(), RunError> {
        let rel = format!("{rel}{}", self.suffix);
        let path = self.dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| RunError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        fs::write(&path, contents).map_err(|source| RunError::Io {
            path: path.clone(),
            source,
        })?;
        let digest: String = Sha256::digest(contents.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        self.files.push((path, format!("{rel} {digest}")));
        Ok(())
    }
}

/// Writes per-seed files, merged files, the resolved config, a summary and
/// a manifest. With any failed seed, every file name gets a `.partial`
/// suffix and `RunError::Aborted` is returned after writing.
pub fn write_outputs(cfg: &ExperimentConfig, outputs: &[SeedOutput], out_dir: &Path) -> Result<RunReport, RunError> {
    let failures = outputs.iter().filter(|o| o.error.is_some()).count();
    let mut w = Writer {
        dir: out_dir.to_path_buf(),
        suffix: if failures > 0 { ".partial" } else { "" },
        files: Vec::new(),
    };
    w.write("resolved_config.txt", &cfg.resolved_dump())?;

    for o in outputs {
        for t in &o.tables {
            w.write(&format!("seed_{}/{}", o.seed, t.name), &t.render())?;
        }
    }

    if let Some(first) = outputs.first() {
        for (idx, t) in first.tables.iter().enumerate() {
            let mut merged = String::new();
            if t.seeded {
                merged.push_str(t.header);
            } else {
                let _ = write!(merged, "seed,{}", t.header);
            }
            merged.push('\n');
            for o in outputs {
                for r in &o.tables[idx].rows {
                    if !t.seeded {
                        let _ = write!(merged, "{},", o.seed);
                    }
                    merged.push_str(r);
                    merged.push('\n');
                }
            }
            w.write(t.name, &merged)?;
        }
    }

    let mut summary = String::new();
    // Routing metric names depend on the sweep, so rows are written under
    // their own header whenever the column set changes.
    let mut last_header = String::new();
    for o in outputs {
        let header = o.summary.csv_header();
        if header != last_header {
            summary.push_str(&header);
            summary.push('\n');
            last_header = header;
        }
        summary.push_str(&o.summary.csv_row());
        summary.push('\n');
    }
    w.write("summary.csv", &summary)?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "experiment {}", cfg.kind().name());
    let hash_pairs = cfg.hash_pairs();
    let _ = writeln!(
        manifest,
        "config_hash {}",
        config_hash(hash_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    );
    let seeds: Vec<String> = outputs.iter().map(|o| o.seed.to_string()).collect();
    let _ = writeln!(manifest, "seeds {}", seeds.join(","));
    for o in outputs {
        if let Some(e) = &o.error {
            let _ = writeln!(manifest, "failed seed {}: {e}", o.seed);
        }
    }
    for (_, line) in &w.files {
        let _ = writeln!(manifest, "file {line}");
    }
    w.write("manifest.txt", &manifest)?;

    let report = RunReport {
        out_dir: out_dir.to_path_buf(),
        files: w.files.into_iter().map(|(p, _)| p).collect(),
        seeds: outputs.to_vec(),
    };
    if failures > 0 {
        return Err(RunError::Aborted {
            dir: out_dir.to_path_buf(),
            failures,
        });
    }
    Ok(report)
}

/// Checks the config, runs all seeds and writes the outputs.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, threads: usize) -> Result<RunReport, RunError> {
    cfg.check()?;
    let seeds = cfg.seeds();
    let outputs = run_seeds(cfg, &seeds, threads);
    write_outputs(cfg, &outputs, out_dir)
}

/// Worker count from `UAVNET_THREADS`, else the available parallelism.
pub fn threads_from_env() -> usize {
    std::env::var("UAVNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
