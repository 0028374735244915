//! Deterministic 2D highway world.
//!
//! The road runs along +x between two walls. Lateral position `y` grows to
//! the left of a car heading along +x, so a positive steering angle turns
//! left. The ego car follows kinematic single-track dynamics at constant
//! speed; obstacle cars are axis-aligned and drive straight ahead in their
//! lane at a fixed slower speed.

pub mod geometry;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use geometry::{ray_aabb, ray_horizontal_line, rects_overlap, Rect};

/// Steering magnitude and sensor spacing: pi/12 rad (15 degrees).
pub const FRAC_PI_12: f64 = PI / 12.0;

pub const NUM_SENSORS: usize = 13;
pub const NUM_BINS: usize = 16;
pub const NUM_ACTIONS: usize = 3;

pub type SensorReadings = [f64; NUM_SENSORS];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Heading in (-pi, pi], 0 along +x.
    pub theta: f64,
    /// Speed in units per step; never changes during an episode.
    pub v: f64,
}

/// One of the three steering commands. Ordinals: 0 straight, 1 left, 2 right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SteerAction {
    Straight,
    Left,
    Right,
}

impl SteerAction {
    pub const ALL: [SteerAction; NUM_ACTIONS] = [SteerAction::Straight, SteerAction::Left, SteerAction::Right];

    pub fn ordinal(self) -> usize {
        match self {
            SteerAction::Straight => 0,
            SteerAction::Left => 1,
            SteerAction::Right => 2,
        }
    }

    pub fn from_ordinal(ordinal: usize) -> Option<Self> {
        Self::ALL.get(ordinal).copied()
    }

    /// Steering angle in radians.
    pub fn delta(self) -> f64 {
        match self {
            SteerAction::Straight => 0.0,
            SteerAction::Left => FRAC_PI_12,
            SteerAction::Right => -FRAC_PI_12,
        }
    }

    pub fn mirrored(self) -> Self {
        match self {
            SteerAction::Straight => SteerAction::Straight,
            SteerAction::Left => SteerAction::Right,
            SteerAction::Right => SteerAction::Left,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub env_length: f64,
    pub lane_width: f64,
    pub num_lanes: usize,
    /// Lower and upper wall lines.
    pub wall_y: [f64; 2],
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub wheelbase: f64,
    pub dt: f64,
    pub ego_speed: f64,
    pub obstacle_speed: f64,
    pub max_obstacles: usize,
    pub spawn_min: f64,
    pub spawn_max: f64,
    pub sensor_range: f64,
    pub num_sensors: usize,
    pub num_bins: usize,
    pub horizon: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            env_length: 100.0,
            lane_width: 4.0,
            num_lanes: 3,
            wall_y: [0.0, 12.0],
            vehicle_length: 4.0,
            vehicle_width: 2.0,
            wheelbase: 2.5,
            dt: 1.0,
            ego_speed: 1.0,
            obstacle_speed: 0.5,
            max_obstacles: 2,
            spawn_min: 20.0,
            spawn_max: 80.0,
            sensor_range: 64.0,
            num_sensors: NUM_SENSORS,
            num_bins: NUM_BINS,
            horizon: 100,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("world config: {m}")));
        if !(self.dt > 0.0) || !(self.wheelbase > 0.0) {
            return bad("dt and wheelbase must be positive");
        }
        if self.num_sensors != NUM_SENSORS || self.num_bins != NUM_BINS {
            return bad("the feature layout requires 13 sensors and 16 bins");
        }
        if self.num_lanes != 3 || self.max_obstacles > 2 {
            return bad("the highway has 3 lanes and at most 2 obstacles");
        }
        if (self.sensor_range - 0.64 * self.env_length).abs() > 1e-9 {
            return bad("sensor_range must be 64% of env_length");
        }
        if (self.wall_y[1] - self.wall_y[0] - self.lane_width * self.num_lanes as f64).abs() > 1e-9 {
            return bad("walls must enclose exactly the lanes");
        }
        if !(self.spawn_min <= self.spawn_max) || self.obstacle_speed > self.ego_speed {
            return bad("spawn range or obstacle speed out of bounds");
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        self.sensor_range / self.num_bins as f64
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        self.wall_y[0] + (lane as f64 + 0.5) * self.lane_width
    }

    /// Index of the lane whose centre is closest to `y`.
    pub fn nearest_lane(&self, y: f64) -> usize {
        let raw = ((y - self.wall_y[0]) / self.lane_width).floor();
        raw.clamp(0.0, (self.num_lanes - 1) as f64) as usize
    }

    pub fn road_center(&self) -> f64 {
        0.5 * (self.wall_y[0] + self.wall_y[1])
    }

    /// Canonical one-line text used for hashing and file headers.
    pub fn canonical_text(&self) -> String {
        format!(
            "env_length={:e} lane_width={:e} num_lanes={} wall_lo={:e} wall_hi={:e} vehicle_length={:e} \
             vehicle_width={:e} wheelbase={:e} dt={:e} ego_speed={:e} obstacle_speed={:e} max_obstacles={} \
             spawn_min={:e} spawn_max={:e} sensor_range={:e} num_sensors={} num_bins={} horizon={}",
            self.env_length,
            self.lane_width,
            self.num_lanes,
            self.wall_y[0],
            self.wall_y[1],
            self.vehicle_length,
            self.vehicle_width,
            self.wheelbase,
            self.dt,
            self.ego_speed,
            self.obstacle_speed,
            self.max_obstacles,
            self.spawn_min,
            self.spawn_max,
            self.sensor_range,
            self.num_sensors,
            self.num_bins,
            self.horizon,
        )
    }

    /// First 16 hex digits of the SHA-256 of [`canonical_text`](Self::canonical_text).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Ego-frame angle of sensor `k`: 0 ahead, 1..=6 in 15 degree steps to
    /// the right, 7..=12 mirroring 1..=6 on the left.
    pub fn sensor_angle(k: usize) -> f64 {
        debug_assert!(k < NUM_SENSORS);
        if k <= 6 {
            -(k as f64) * FRAC_PI_12
        } else {
            (k - 6) as f64 * FRAC_PI_12
        }
    }

    /// Sensor index seen by the mirrored world.
    pub fn mirrored_sensor(k: usize) -> usize {
        match k {
            0 => 0,
            1..=6 => k + 6,
            _ => k - 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub lane: usize,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
}

impl Obstacle {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.length, self.width, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    #[serde(rename = "none")]
    Running,
    CollisionWall,
    CollisionCar,
    HorizonReached,
    EndOfRoad,
}

impl Terminal {
    pub fn as_str(self) -> &'static str {
        match self {
            Terminal::Running => "none",
            Terminal::CollisionWall => "collision_wall",
            Terminal::CollisionCar => "collision_car",
            Terminal::HorizonReached => "horizon_reached",
            Terminal::EndOfRoad => "end_of_road",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Terminal::Running,
            Terminal::CollisionWall,
            Terminal::CollisionCar,
            Terminal::HorizonReached,
            Terminal::EndOfRoad,
        ]
        .into_iter()
        .find(|t| t.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        self != Terminal::Running
    }

    pub fn is_collision(self) -> bool {
        matches!(self, Terminal::CollisionWall | Terminal::CollisionCar)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub ego: VehicleState,
    pub obstacles: Vec<Obstacle>,
    pub rng_seed: u64,
    pub step: usize,
    pub terminal: Terminal,
}

impl Scenario {
    pub fn ego_rect(&self, cfg: &WorldConfig) -> Rect {
        Rect::new(self.ego.x, self.ego.y, cfg.vehicle_length, cfg.vehicle_width, self.ego.theta)
    }

    /// Reflection across the road centreline.
    pub fn mirrored(&self, cfg: &WorldConfig) -> Scenario {
        let flip = |y: f64| cfg.wall_y[0] + cfg.wall_y[1] - y;
        let mut out = self.clone();
        out.ego.y = flip(self.ego.y);
        out.ego.theta = normalize_angle(-self.ego.theta);
        for o in &mut out.obstacles {
            o.y = flip(o.y);
            o.lane = cfg.num_lanes - 1 - o.lane;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: Scenario,
    pub sensor_readings: SensorReadings,
    pub terminal: Terminal,
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(mut a: f64) -> f64 {
    while a > PI {
        a -= 2.0 * PI;
    }
    while a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// One kinematic single-track update. Position uses the pre-update heading.
pub fn step_vehicle(state: VehicleState, action: SteerAction, cfg: &WorldConfig) -> VehicleState {
    let VehicleState { x, y, theta, v } = state;
    VehicleState {
        x: x + v * theta.cos() * cfg.dt,
        y: y + v * theta.sin() * cfg.dt,
        theta: normalize_angle(theta + (v / cfg.wheelbase) * action.delta().tan() * cfg.dt),
        v,
    }
}

/// Ego at the start of the middle lane plus 0..=max_obstacles cars ahead in
/// distinct lanes.
pub fn spawn_scenario(seed: u64, cfg: &WorldConfig) -> Scenario {
    let mut rng = rng_from_seed(seed);
    let count = rng.gen_range(0..=cfg.max_obstacles);
    let mut lanes: Vec<usize> = (0..cfg.num_lanes).collect();
    lanes.shuffle(&mut rng);
    let mut obstacles: Vec<Obstacle> = lanes[..count]
        .iter()
        .map(|&lane| Obstacle {
            x: rng.gen_range(cfg.spawn_min..=cfg.spawn_max),
            y: cfg.lane_center(lane),
            lane,
            speed: cfg.obstacle_speed,
            length: cfg.vehicle_length,
            width: cfg.vehicle_width,
        })
        .collect();
    obstacles.sort_by_key(|o| o.lane);
    Scenario {
        ego: VehicleState { x: 0.0, y: cfg.lane_center(cfg.num_lanes / 2), theta: 0.0, v: cfg.ego_speed },
        obstacles,
        rng_seed: seed,
        step: 0,
        terminal: Terminal::Running,
    }
}

/// Range reading of sensor `k` from the ego centre, clamped to the sensor range.
pub fn cast_sensor(scenario: &Scenario, k: usize, cfg: &WorldConfig) -> f64 {
    let origin = (scenario.ego.x, scenario.ego.y);
    let (s, c) = (scenario.ego.theta + WorldConfig::sensor_angle(k)).sin_cos();
    let dir = (c, s);
    let mut best = cfg.sensor_range;
    for wall in cfg.wall_y {
        if let Some(t) = ray_horizontal_line(origin, dir, wall) {
            best = best.min(t);
        }
    }
    for o in &scenario.obstacles {
        if let Some(t) = ray_aabb(origin, dir, o.rect().bounds()) {
            best = best.min(t);
        }
    }
    best.clamp(0.0, cfg.sensor_range)
}

pub fn sensor_readings(scenario: &Scenario, cfg: &WorldConfig) -> SensorReadings {
    std::array::from_fn(|k| cast_sensor(scenario, k, cfg))
}

/// Collision status of the current configuration, walls checked first.
pub fn check_collision(scenario: &Scenario, cfg: &WorldConfig) -> Terminal {
    let ego = scenario.ego_rect(cfg);
    let (lo, hi) = ego.y_extent();
    if lo <= cfg.wall_y[0] || hi >= cfg.wall_y[1] {
        return Terminal::CollisionWall;
    }
    if scenario.obstacles.iter().any(|o| rects_overlap(&ego, &o.rect())) {
        return Terminal::CollisionCar;
    }
    Terminal::Running
}

pub fn step_world(scenario: &Scenario, action: SteerAction, cfg: &WorldConfig) -> Result<StepOutcome> {
    if scenario.terminal.is_terminal() {
        return Err(Error::TerminalScenario(scenario.terminal.as_str()));
    }
    let mut next = scenario.clone();
    next.ego = step_vehicle(scenario.ego, action, cfg);
    for o in &mut next.obstacles {
        o.x += o.speed * cfg.dt;
    }
    next.step += 1;
    let mut terminal = check_collision(&next, cfg);
    if terminal == Terminal::Running {
        if next.ego.x >= cfg.env_length {
            terminal = Terminal::EndOfRoad;
        } else if next.step >= cfg.horizon {
            terminal = Terminal::HorizonReached;
        }
    }
    next.terminal = terminal;
    let sensor_readings = sensor_readings(&next, cfg);
    Ok(StepOutcome { next, sensor_readings, terminal })
}
