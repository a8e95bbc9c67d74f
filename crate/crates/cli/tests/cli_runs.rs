use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use uavnet_cli::runner::{run_seeds, write_outputs};
use uavnet_cli::{parse_config, run_experiment, RunError};

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn all_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL_CHANEST: &str = "experiment.kind = chanest\nchanest.hidden_sizes = 16, 8\n";

#[test]
fn chanest_default_schedule_gives_1236_rows_per_uav() {
    let cfg = parse_config(SMALL_CHANEST).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir.path(), 1).unwrap();
    let mse = read(dir.path(), "seed_1/chanest_mse.csv");
    let mut lines = mse.lines();
    assert_eq!(lines.next(), Some("slot,uav_id,mse"));
    let mut per_uav = BTreeMap::new();
    let mut slots = BTreeMap::new();
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 3);
        *per_uav.entry(f[1].to_string()).or_insert(0) += 1;
        slots.insert(f[0].parse::<usize>().unwrap(), ());
        assert!(f[2].parse::<f64>().unwrap() >= 0.0);
    }
    assert_eq!(per_uav.len(), 3);
    assert!(per_uav.values().all(|&n| n == 1236));
    assert_eq!(slots.keys().next(), Some(&1));
    assert_eq!(slots.keys().last(), Some(&1236));

    let ee = read(dir.path(), "seed_1/chanest_ee.csv");
    assert_eq!(ee.lines().next(), Some("slot,ee_predicted,ee_perfect"));
    assert_eq!(ee.lines().count(), 1 + 500);

    let merged = read(dir.path(), "chanest_mse.csv");
    assert_eq!(merged.lines().next(), Some("seed,slot,uav_id,mse"));
    assert!(merged.lines().nth(1).unwrap().starts_with("1,1,"));
    assert!(read(dir.path(), "summary.csv").contains("mse_ratio"));
    let resolved = parse_config(&read(dir.path(), "resolved_config.txt")).unwrap();
    assert_eq!(resolved, cfg);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let text = "experiment.kind = placement\nexperiment.seeds = 3, 4\nplacement.n_users = 8\n\
                placement.actor_hidden = 16, 8\nplacement.critic_hidden = 16, 8\nplacement.episodes = 4\n\
                placement.warmup_steps = 20\nplacement.batch_size = 8\nplacement.eval_episodes = 2\n";
    let cfg = parse_config(text).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, a.path(), 1).unwrap();
    run_experiment(&cfg, b.path(), 2).unwrap();
    let fa = all_files(a.path());
    assert_eq!(fa, all_files(b.path()));
    assert!(fa.contains_key("seed_4/drl_curve.csv"));

    let curve = read(a.path(), "seed_3/drl_curve.csv");
    assert_eq!(curve.lines().next(), Some("episode,mean_reward,fairness,ee"));
    assert_eq!(curve.lines().count(), 1 + 4);
    let eval = read(a.path(), "policy_eval.csv");
    assert_eq!(eval.lines().next(), Some("seed,policy_kind,episode,reward"));
    // 2 seeds x 3 policies x 2 episodes
    assert_eq!(eval.lines().count(), 1 + 12);
    for kind in ["drl", "greedy", "random"] {
        assert!(eval.lines().any(|l| l.starts_with(&format!("4,{kind},2,"))));
    }
}

#[test]
fn routing_sweep_has_one_row_per_size_and_seed() {
    let text = "experiment.kind = routing\nexperiment.seeds = 1,2,3\nrouting.num_uavs = 5, 10\n\
                routing.duration_slots = 1500\nrouting.t_th_ms = 10\n";
    let cfg = parse_config(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir.path(), 3).unwrap();
    let csv = read(dir.path(), "routing_latency.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("protocol,J,seed,mean_ms,p95_ms,delivered,dropped"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    for p in ["par_predict", "shortest_path", "backlog_aware"] {
        assert_eq!(rows.iter().filter(|r| r[0] == p).count(), 6, "{p}");
    }
    for r in &rows {
        assert_eq!(r.len(), 7);
        assert!(r[3].parse::<f64>().unwrap() > 0.0);
        assert!(r[4].parse::<f64>().unwrap() >= r[3].parse::<f64>().unwrap() * 0.5);
    }
    assert!(dir.path().join("seed_2/routing_latency.csv").exists());
}

#[test]
fn runtime_failure_marks_outputs_partial() {
    // Relays 8 m apart with a 5 m radio range cannot reach the station.
    let text = "experiment.kind = routing\nexperiment.seeds = 1\nrouting.comm_radius_m = 5\nrouting.num_uavs = 5\n";
    let cfg = parse_config(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, dir.path(), 1).unwrap_err();
    assert!(matches!(err, RunError::Aborted { failures: 1, .. }));
    assert_eq!(err.exit_code(), 3);
    assert!(dir.path().join("routing_latency.csv.partial").exists());
    assert!(dir.path().join("seed_1/routing_latency.csv.partial").exists());
    assert!(!dir.path().join("routing_latency.csv").exists());
    assert!(read(dir.path(), "manifest.txt.partial").contains("failed seed 1"));
}

#[test]
fn outputs_follow_seed_list_order() {
    let cfg = parse_config("experiment.kind = routing\nrouting.num_uavs = 5\nrouting.duration_slots = 300\n").unwrap();
    let outs = run_seeds(&cfg, &[9, 2, 5], 2);
    assert_eq!(outs.iter().map(|o| o.seed).collect::<Vec<_>>(), vec![9, 2, 5]);
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&cfg, &outs, dir.path()).unwrap();
    let manifest = read(dir.path(), "manifest.txt");
    assert!(manifest.contains("seeds 9,2,5"));
}

fn uavnet() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_uavnet"));
    cmd.env("RUST_LOG", "off");
    cmd
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "placement.n_users = -5\n").unwrap();
    let status = uavnet().arg("--config").arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let abort = dir.path().join("abort.cfg");
    fs::write(&abort, "experiment.kind = routing\nrouting.comm_radius_m = 5\nrouting.num_uavs = 5\n").unwrap();
    let out = dir.path().join("out");
    let status = uavnet().arg("--config").arg(&abort).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(3));

    let ok = dir.path().join("ok.cfg");
    fs::write(&ok, "experiment.kind = routing\nrouting.num_uavs = 5\nrouting.duration_slots = 200\n").unwrap();
    let out = dir.path().join("ok_out");
    let status = uavnet()
        .arg("--config")
        .arg(&ok)
        .args(["--seed", "7,8", "--out"])
        .arg(&out)
        .env("UAVNET_THREADS", "1")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("seed_7/routing_latency.csv").exists());
    assert!(out.join("seed_8/routing_latency.csv").exists());

    let dump = uavnet().args(["--dump-config", "--set", "routing.t_th_ms=10"]).output().unwrap();
    assert!(dump.status.success());
    let text = String::from_utf8(dump.stdout).unwrap();
    assert!(text.contains("routing.t_th_ms = 10\n"));
    assert!(parse_config(&text).is_ok());
}
