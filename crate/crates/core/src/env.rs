//! Urban world generation, line-of-sight tests and per-slot kinematics.
//!
//! Buildings follow the ITU statistical local building model: a built-up
//! area ratio `alpha`, a building density `beta` (per km²) and Rayleigh
//! distributed heights with mean `delta_m`. The layout itself is a jittered
//! grid of square footprints.

use std::f64::consts::PI;
use std::io::{self, Write};
use std::ops::{Add, Mul, Sub};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Height of ground users above the ground plane.
pub const USER_HEIGHT_M: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid world configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "cannot pack {count} buildings of side {side_m:.2} m into {cell_x_m:.2} x {cell_y_m:.2} m cells \
         (alpha too high for beta)"
    )]
    InfeasiblePacking {
        count: usize,
        side_m: f64,
        cell_x_m: f64,
        cell_y_m: f64,
    },
    #[error("movement action has non-finite component: {0:?}")]
    NonFiniteAction(MovementAction),
    #[error("movement distance must be non-negative, got {0}")]
    NegativeDistance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    pub fn horizontal_distance(self, other: Point3) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mobility {
    QuasiStationary,
    RandomWaypoint { v_min_mps: f64, v_max_mps: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub area_x_m: f64,
    pub area_y_m: f64,
    /// Ratio of built-up land area to total land area.
    pub alpha: f64,
    /// Buildings per km².
    pub beta: f64,
    /// Mean building height (scale of the Rayleigh height distribution).
    pub delta_m: f64,
    pub gcs_position: Point3,
    pub n_users: usize,
    pub user_mobility: Mobility,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            area_x_m: 1000.0,
            area_y_m: 1000.0,
            alpha: 0.3,
            beta: 300.0,
            delta_m: 30.0,
            gcs_position: Point3::new(0.0, 500.0, 0.0),
            n_users: 30,
            user_mobility: Mobility::QuasiStationary,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Square area of side `side_m` with the GCS at the middle of the west edge.
    pub fn square(side_m: f64) -> Self {
        Self {
            area_x_m: side_m,
            area_y_m: side_m,
            gcs_position: Point3::new(0.0, side_m / 2.0, 0.0),
            ..Self::default()
        }
    }

    pub fn area_km2(&self) -> f64 {
        self.area_x_m * self.area_y_m / 1e6
    }

    pub fn building_count(&self) -> usize {
        (self.beta * self.area_km2()).round() as usize
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if !(self.area_x_m > 0.0 && self.area_y_m > 0.0) {
            return bad("area dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1)");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be non-negative");
        }
        if !(self.delta_m > 0.0 && self.delta_m.is_finite()) {
            return bad("delta_m must be positive");
        }
        if !self.gcs_position.is_finite() {
            return bad("gcs_position must be finite");
        }
        if let Mobility::RandomWaypoint {
            v_min_mps,
            v_max_mps,
        } = self.user_mobility
        {
            if !(v_min_mps >= 0.0 && v_max_mps >= v_min_mps && v_max_mps.is_finite()) {
                return bad("random-waypoint speeds must satisfy 0 <= v_min <= v_max");
            }
        }
        Ok(())
    }
}

/// Axis-aligned box building: footprint `[x, x + width] x [y, y + depth]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Building {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub depth: f64,
    pub height_m: f64,
}

impl Building {
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.x + self.width && y >= self.y && y <= self.y + self.depth
    }

    pub fn footprint_area(&self) -> f64 {
        self.width * self.depth
    }

    /// Whether the closed segment `a`-`b` touches the building volume.
    fn blocks(&self, a: Point3, b: Point3) -> bool {
        let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
        for (start, delta, lo, hi) in [
            (a.x, b.x - a.x, self.x, self.x + self.width),
            (a.y, b.y - a.y, self.y, self.y + self.depth),
        ] {
            if delta == 0.0 {
                if start < lo || start > hi {
                    return false;
                }
            } else {
                let ta = (lo - start) / delta;
                let tb = (hi - start) / delta;
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
                if t0 > t1 {
                    return false;
                }
            }
        }
        // Height is linear along the segment, so its minimum over the
        // crossing interval sits at one of the interval ends.
        let z_at = |t: f64| a.z + t * (b.z - a.z);
        z_at(t0).min(z_at(t1)) <= self.height_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Airspace {
    pub x_max_m: f64,
    pub y_max_m: f64,
    pub h_min_m: f64,
    pub h_max_m: f64,
}

impl Airspace {
    pub fn contains(&self, p: Point3) -> bool {
        (0.0..=self.x_max_m).contains(&p.x)
            && (0.0..=self.y_max_m).contains(&p.y)
            && (self.h_min_m..=self.h_max_m).contains(&p.z)
    }

    pub fn clip(&self, p: Point3) -> Point3 {
        Point3::new(
            p.x.clamp(0.0, self.x_max_m),
            p.y.clamp(0.0, self.y_max_m),
            p.z.clamp(self.h_min_m, self.h_max_m),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UavState {
    pub position: Point3,
    pub airspace: Airspace,
    pub tx_power_dbm: f64,
    pub cumulative_energy_j: f64,
}

/// Per-UAV motion command for one slot. Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MovementAction {
    pub distance_m: f64,
    pub pitch_rad: f64,
    pub yaw_rad: f64,
}

impl MovementAction {
    pub fn hover() -> Self {
        Self::default()
    }

    pub fn displacement(&self) -> Point3 {
        let (sp, cp) = self.pitch_rad.sin_cos();
        let (sy, cy) = self.yaw_rad.sin_cos();
        Point3::new(cp * cy, cp * sy, sp) * self.distance_m
    }
}

/// Hover-plus-propulsion energy model: `hover_power_w * dt + propulsion_j_per_m * distance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    pub hover_power_w: f64,
    pub propulsion_j_per_m: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            hover_power_w: 100.0,
            propulsion_j_per_m: 5.0,
        }
    }
}

impl EnergyModel {
    pub fn slot_energy_j(&self, distance_m: f64, slot_dt_s: f64) -> f64 {
        self.hover_power_w * slot_dt_s + self.propulsion_j_per_m * distance_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UavStep {
    pub state: UavState,
    /// The unclipped target lay outside the airspace box.
    pub violated_boundary: bool,
    pub distance_moved_m: f64,
    pub energy_j: f64,
}

pub fn step_uav(
    state: &UavState,
    action: &MovementAction,
    slot_dt_s: f64,
    energy: &EnergyModel,
) -> Result<UavStep, EnvError> {
    if !(action.distance_m.is_finite() && action.pitch_rad.is_finite() && action.yaw_rad.is_finite())
    {
        return Err(EnvError::NonFiniteAction(*action));
    }
    if action.distance_m < 0.0 {
        return Err(EnvError::NegativeDistance(action.distance_m));
    }
    let target = state.position + action.displacement();
    let clipped = state.airspace.clip(target);
    let violated_boundary = !state.airspace.contains(target);
    let distance_moved_m = clipped.distance(state.position);
    let energy_j = energy.slot_energy_j(distance_moved_m, slot_dt_s);
    Ok(UavStep {
        state: UavState {
            position: clipped,
            cumulative_energy_j: state.cumulative_energy_j + energy_j,
            ..*state
        },
        violated_boundary,
        distance_moved_m,
        energy_j,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserState {
    pub position: Point3,
    pub mobility: Mobility,
    waypoint: Option<(Point3, f64)>,
}

impl UserState {
    pub fn new(position: Point3, mobility: Mobility) -> Self {
        Self {
            position,
            mobility,
            waypoint: None,
        }
    }
}

/// Advances users by one slot. Quasi-stationary users never move; random
/// waypoint users walk toward their waypoint and draw a new one on arrival.
pub fn step_users<R: Rng + ?Sized>(
    users: &mut [UserState],
    area_x_m: f64,
    area_y_m: f64,
    slot_dt_s: f64,
    rng: &mut R,
) {
    for user in users.iter_mut() {
        let Mobility::RandomWaypoint {
            v_min_mps,
            v_max_mps,
        } = user.mobility
        else {
            continue;
        };
        let mut budget = slot_dt_s;
        while budget > 0.0 {
            let (target, speed) = match user.waypoint {
                Some(w) => w,
                None => {
                    let w = (
                        Point3::new(
                            rng.random::<f64>() * area_x_m,
                            rng.random::<f64>() * area_y_m,
                            user.position.z,
                        ),
                        v_min_mps + rng.random::<f64>() * (v_max_mps - v_min_mps),
                    );
                    user.waypoint = Some(w);
                    w
                }
            };
            let remaining = target.distance(user.position);
            let reach = speed * budget;
            if speed <= 0.0 {
                break;
            }
            if reach >= remaining {
                user.position = target;
                user.waypoint = None;
                budget -= remaining / speed;
                if remaining == 0.0 {
                    break;
                }
            } else {
                user.position = user.position + (target - user.position) * (reach / remaining);
                budget = 0.0;
            }
        }
    }
}

/// Uniform-grid index over building footprints.
#[derive(Debug, Clone)]
struct BuildingIndex {
    cell_m: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl BuildingIndex {
    fn build(buildings: &[Building], area_x_m: f64, area_y_m: f64) -> Self {
        let n = buildings.len().max(1) as f64;
        let cell_m = (area_x_m * area_y_m / n).sqrt().max(1.0);
        let nx = ((area_x_m / cell_m).ceil() as usize).max(1);
        let ny = ((area_y_m / cell_m).ceil() as usize).max(1);
        let mut cells = vec![Vec::new(); nx * ny];
        let mut index = Self {
            cell_m,
            nx,
            ny,
            cells: Vec::new(),
        };
        for (i, b) in buildings.iter().enumerate() {
            let (cx0, cx1) = index.span(b.x, b.x + b.width, nx);
            let (cy0, cy1) = index.span(b.y, b.y + b.depth, ny);
            for cy in cy0..=cy1 {
                for cx in cx0..=cx1 {
                    cells[cy * nx + cx].push(i as u32);
                }
            }
        }
        index.cells = cells;
        index
    }

    fn span(&self, lo: f64, hi: f64, n: usize) -> (usize, usize) {
        let cell = |v: f64| ((v / self.cell_m).floor().max(0.0) as usize).min(n - 1);
        (cell(lo), cell(hi))
    }

    fn candidates(&self, a: Point3, b: Point3) -> impl Iterator<Item = u32> + '_ {
        let (cx0, cx1) = self.span(a.x.min(b.x), a.x.max(b.x), self.nx);
        let (cy0, cy1) = self.span(a.y.min(b.y), a.y.max(b.y), self.ny);
        (cy0..=cy1).flat_map(move |cy| {
            (cx0..=cx1).flat_map(move |cx| self.cells[cy * self.nx + cx].iter().copied())
        })
    }
}

/// A generated 3-D scene. Immutable after generation apart from user motion.
#[derive(Debug, Clone)]
pub struct WorldRealization {
    pub config: WorldConfig,
    pub buildings: Vec<Building>,
    pub users: Vec<UserState>,
    index: BuildingIndex,
}

impl WorldRealization {
    /// Builds a world from explicit parts; building footprints may extend
    /// past the area edge but are only indexed inside it.
    pub fn from_parts(config: WorldConfig, buildings: Vec<Building>, users: Vec<UserState>) -> Self {
        let index = BuildingIndex::build(&buildings, config.area_x_m, config.area_y_m);
        Self {
            config,
            buildings,
            users,
            index,
        }
    }

    pub fn gcs_position(&self) -> Point3 {
        self.config.gcs_position
    }

    pub fn is_los(&self, a: Point3, b: Point3) -> bool {
        is_los(a, b, self)
    }

    pub fn total_footprint_m2(&self) -> f64 {
        self.buildings.iter().map(Building::footprint_area).sum()
    }

    /// One building per row: `x,y,w,d,h`.
    pub fn write_buildings_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "x,y,w,d,h")?;
        for b in &self.buildings {
            writeln!(out, "{},{},{},{},{}", b.x, b.y, b.width, b.depth, b.height_m)?;
        }
        Ok(())
    }
}

/// Draws a Rayleigh variate with the given mean by inverse transform.
pub fn sample_rayleigh<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    let sigma = mean / (PI / 2.0).sqrt();
    // 1 - U lies in (0, 1], keeping the logarithm finite.
    let u: f64 = 1.0 - rng.random::<f64>();
    sigma * (-2.0 * u.ln()).sqrt()
}

pub fn generate_world(config: &WorldConfig) -> Result<WorldRealization, EnvError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let count = config.building_count();
    let mut buildings = Vec::with_capacity(count);
    if count > 0 && config.alpha > 0.0 {
        let (ax, ay) = (config.area_x_m, config.area_y_m);
        let cols = ((count as f64 * ax / ay).sqrt().ceil() as usize).max(1);
        let rows = count.div_ceil(cols);
        let (cell_x, cell_y) = (ax / cols as f64, ay / rows as f64);
        let side = (config.alpha * ax * ay / count as f64).sqrt();
        if side > cell_x || side > cell_y {
            return Err(EnvError::InfeasiblePacking {
                count,
                side_m: side,
                cell_x_m: cell_x,
                cell_y_m: cell_y,
            });
        }
        let mut cells: Vec<usize> = (0..cols * rows).collect();
        cells.shuffle(&mut rng);
        cells.truncate(count);
        cells.sort_unstable();
        for c in cells {
            let (col, row) = (c % cols, c / cols);
            let x = col as f64 * cell_x + rng.random::<f64>() * (cell_x - side);
            let y = row as f64 * cell_y + rng.random::<f64>() * (cell_y - side);
            buildings.push(Building {
                x,
                y,
                width: side,
                depth: side,
                height_m: sample_rayleigh(config.delta_m, &mut rng),
            });
        }
    }
    let users = (0..config.n_users)
        .map(|_| {
            let p = Point3::new(
                rng.random::<f64>() * config.area_x_m,
                rng.random::<f64>() * config.area_y_m,
                USER_HEIGHT_M,
            );
            UserState::new(p, config.user_mobility)
        })
        .collect();
    Ok(WorldRealization::from_parts(config.clone(), buildings, users))
}

/// True iff the segment `a`-`b` clears every building. A degenerate
/// segment (`a == b`) counts as line of sight.
pub fn is_los(a: Point3, b: Point3, world: &WorldRealization) -> bool {
    if a == b {
        return true;
    }
    // Canonical endpoint order keeps the float arithmetic symmetric.
    let (a, b) = if (a.x, a.y, a.z) <= (b.x, b.y, b.z) {
        (a, b)
    } else {
        (b, a)
    };
    let lo = a.z.min(b.z);
    !world.index.candidates(a, b).any(|i| {
        let bld = &world.buildings[i as usize];
        bld.height_m >= lo && bld.blocks(a, b)
    })
}
