use proptest::prelude::*;
use rand::Rng;
use uavnet::env::{generate_world, is_los, Building, Point3, WorldConfig, WorldRealization};
use uavnet::rng_stream;

fn small_world(seed: u64) -> WorldRealization {
    generate_world(&WorldConfig {
        area_x_m: 150.0,
        area_y_m: 150.0,
        beta: 1000.0,
        n_users: 0,
        seed,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn inside(b: &Building, p: Point3) -> bool {
    p.x >= b.x && p.x <= b.x + b.width && p.y >= b.y && p.y <= b.y + b.depth && p.z <= b.height_m
}

/// Samples the segment every millimetre and reports whether any sample
/// lies inside a building.
fn ray_march_los(a: Point3, b: Point3, buildings: &[Building]) -> bool {
    let len = a.distance(b);
    let steps = (len / 1e-3).ceil() as usize;
    let (lo_x, hi_x) = (a.x.min(b.x), a.x.max(b.x));
    let (lo_y, hi_y) = (a.y.min(b.y), a.y.max(b.y));
    let near: Vec<&Building> = buildings
        .iter()
        .filter(|bd| bd.x <= hi_x && bd.x + bd.width >= lo_x && bd.y <= hi_y && bd.y + bd.depth >= lo_y)
        .collect();
    for i in 0..=steps {
        let t = if steps == 0 { 0.0 } else { i as f64 / steps as f64 };
        let p = a + (b - a) * t;
        if near.iter().any(|bd| inside(bd, p)) {
            return false;
        }
    }
    true
}

#[test]
fn geometric_los_matches_ray_march_on_random_pairs() {
    let world = small_world(7);
    assert!(world.buildings.len() >= 20);
    let mut rng = rng_stream(7, 99);
    let mut blocked = 0;
    for _ in 0..1000 {
        let a = Point3::new(rng.random_range(0.0..150.0), rng.random_range(0.0..150.0), rng.random_range(1.5..120.0));
        let b = Point3::new(rng.random_range(0.0..150.0), rng.random_range(0.0..150.0), rng.random_range(1.5..120.0));
        let oracle = ray_march_los(a, b, &world.buildings);
        assert_eq!(is_los(a, b, &world), oracle, "{a:?} -> {b:?}");
        blocked += usize::from(!oracle);
    }
    // Both outcomes must be exercised.
    assert!(blocked > 50 && blocked < 950, "{blocked}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn los_is_symmetric(
        ax in 0.0f64..150.0, ay in 0.0f64..150.0, az in 1.5f64..120.0,
        bx in 0.0f64..150.0, by in 0.0f64..150.0, bz in 1.5f64..120.0,
    ) {
        let world = small_world(3);
        let (a, b) = (Point3::new(ax, ay, az), Point3::new(bx, by, bz));
        prop_assert_eq!(is_los(a, b, &world), is_los(b, a, &world));
    }
}
