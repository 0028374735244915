//! Expert demonstrations: a scripted lane-keeping and overtaking driver,
//! plus validation of recorded (possibly human) trajectories by replay.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{bin_index, feature_index, MuVector, FEATURE_DIM};
use crate::rng::{derive_seed, stream};
use crate::sim::{
    sensor_readings, spawn_scenario, step_world, Scenario, SteerAction, Terminal, VehicleState, WorldConfig,
    NUM_SENSORS,
};

/// An obstacle this close ahead in the ego lane triggers a lane change.
pub const TRIGGER_DISTANCE: f64 = 20.0;
/// Lateral deadband around the lane centre.
pub const LATERAL_DEADBAND: f64 = 0.25;
/// Heading deadband.
pub const HEADING_DEADBAND: f64 = 0.03;
/// Desired heading per unit of lateral error.
pub const HEADING_GAIN: f64 = 0.12;
/// Largest heading the controller asks for.
pub const MAX_HEADING: f64 = 0.45;
/// Share of collided seeds above which recording aborts.
pub const MAX_REJECT_FRACTION: f64 = 0.10;
/// Replay tolerance on positions and heading.
pub const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemoSource {
    Scripted,
    Human,
}

impl DemoSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DemoSource::Scripted => "scripted",
            DemoSource::Human => "human",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scripted" => Some(DemoSource::Scripted),
            "human" => Some(DemoSource::Human),
            _ => None,
        }
    }
}

/// One recorded timestep: the ego pose, the action taken from it (`None`
/// on the final state) and the sensor bins observed there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoStep {
    pub state: VehicleState,
    pub action: Option<SteerAction>,
    pub bins: [u8; NUM_SENSORS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub seed: u64,
    pub source: DemoSource,
    /// Unix seconds; 0 for scripted demos so that reruns are byte-identical.
    pub recorded_at: u64,
    pub steps: Vec<DemoStep>,
    pub terminal: Terminal,
}

impl Demonstration {
    pub fn actions(&self) -> Vec<SteerAction> {
        self.steps.iter().filter_map(|s| s.action).collect()
    }

    pub fn is_collision(&self) -> bool {
        self.terminal.is_collision()
    }

    pub fn lateral_positions(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.state.y).collect()
    }
}

/// Distance from the ego centre to the nearest obstacle centre ahead in
/// `lane` that the ego has not yet passed.
fn clear_distance(scenario: &Scenario, lane: usize, cfg: &WorldConfig) -> f64 {
    scenario
        .obstacles
        .iter()
        .filter(|o| o.lane == lane)
        .map(|o| o.x - scenario.ego.x)
        .filter(|&d| d > -cfg.vehicle_length)
        .fold(f64::INFINITY, f64::min)
}

/// True when an obstacle sits in the ego's lane within the trigger distance.
pub fn avoidance_trigger(scenario: &Scenario, cfg: &WorldConfig) -> bool {
    clear_distance(scenario, cfg.nearest_lane(scenario.ego.y), cfg) <= TRIGGER_DISTANCE
}

/// Lane the scripted expert steers toward.
pub fn target_lane(scenario: &Scenario, cfg: &WorldConfig) -> usize {
    let lane = cfg.nearest_lane(scenario.ego.y);
    if !avoidance_trigger(scenario, cfg) {
        return lane;
    }
    let left = (lane + 1 < cfg.num_lanes).then(|| lane + 1);
    let right = lane.checked_sub(1);
    match (left, right) {
        (Some(l), Some(r)) => {
            if clear_distance(scenario, l, cfg) >= clear_distance(scenario, r, cfg) {
                l
            } else {
                r
            }
        }
        (Some(l), None) => l,
        (None, Some(r)) => r,
        (None, None) => lane,
    }
}

/// Deterministic expert: aim for a heading proportional to the lateral
/// error to the target lane centre, then pick the action whose next heading
/// lands closest to it.
pub fn scripted_expert_action(scenario: &Scenario, cfg: &WorldConfig) -> SteerAction {
    let ego = scenario.ego;
    let err = cfg.lane_center(target_lane(scenario, cfg)) - ego.y;
    if err.abs() <= LATERAL_DEADBAND && ego.theta.abs() <= HEADING_DEADBAND {
        return SteerAction::Straight;
    }
    let desired = (HEADING_GAIN * err).clamp(-MAX_HEADING, MAX_HEADING);
    let mut best = SteerAction::Straight;
    let mut best_gap = f64::INFINITY;
    for a in SteerAction::ALL {
        let next = ego.theta + (ego.v / cfg.wheelbase) * a.delta().tan() * cfg.dt;
        let gap = (next - desired).abs();
        if gap < best_gap - 1e-12 {
            best = a;
            best_gap = gap;
        }
    }
    best
}

/// Sensor bin indices of the scenario's current readings.
pub fn bins_of(scenario: &Scenario, cfg: &WorldConfig) -> Result<[u8; NUM_SENSORS]> {
    let readings = sensor_readings(scenario, cfg);
    let mut bins = [0u8; NUM_SENSORS];
    for (b, r) in bins.iter_mut().zip(readings) {
        *b = bin_index(r, cfg)? as u8;
    }
    Ok(bins)
}

/// Drives the scenario for `seed` to a terminal state with `controller`.
pub fn drive<F>(seed: u64, cfg: &WorldConfig, source: DemoSource, mut controller: F) -> Result<Demonstration>
where
    F: FnMut(&Scenario) -> SteerAction,
{
    let mut scenario = spawn_scenario(seed, cfg);
    let mut steps = Vec::new();
    while !scenario.terminal.is_terminal() {
        let action = controller(&scenario);
        steps.push(DemoStep { state: scenario.ego, action: Some(action), bins: bins_of(&scenario, cfg)? });
        scenario = step_world(&scenario, action, cfg)?.next;
    }
    steps.push(DemoStep { state: scenario.ego, action: None, bins: bins_of(&scenario, cfg)? });
    Ok(Demonstration { seed, source, recorded_at: 0, steps, terminal: scenario.terminal })
}

/// Re-simulates `actions` from `seed`, returning every visited scenario
/// (start included).
pub fn replay(seed: u64, actions: &[SteerAction], cfg: &WorldConfig) -> Result<Vec<Scenario>> {
    let mut scenario = spawn_scenario(seed, cfg);
    let mut out = vec![scenario.clone()];
    for &a in actions {
        scenario = step_world(&scenario, a, cfg)?.next;
        out.push(scenario.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RecordOutcome {
    pub demos: Vec<Demonstration>,
    /// Seeds whose scripted drive ended in a collision.
    pub rejected: Vec<u64>,
}

/// Scenario seed of the `k`-th recording attempt.
pub fn demo_seed(master_seed: u64, k: usize) -> u64 {
    derive_seed(derive_seed(master_seed, stream::DEMOS), k as u64)
}

/// Records `n` collision-free scripted demonstrations, skipping seeds that
/// end in a collision.
pub fn record_demonstrations(n: usize, master_seed: u64, cfg: &WorldConfig) -> Result<RecordOutcome> {
    if n == 0 {
        return Err(Error::InvalidArgument("at least one demonstration is required".into()));
    }
    cfg.validate()?;
    let mut out = RecordOutcome { demos: Vec::with_capacity(n), rejected: vec![] };
    let mut attempted = 0usize;
    while out.demos.len() < n {
        let seed = demo_seed(master_seed, attempted);
        attempted += 1;
        let demo = drive(seed, cfg, DemoSource::Scripted, |s| scripted_expert_action(s, cfg))?;
        if demo.is_collision() {
            log::warn!("scripted expert collided on seed {seed}; skipping");
            out.rejected.push(seed);
            if out.rejected.len() as f64 > MAX_REJECT_FRACTION * n as f64 {
                return Err(Error::ExpertMisconfigured { rejected: out.rejected.len(), attempted });
            }
        } else {
            out.demos.push(demo);
        }
    }
    Ok(out)
}

/// Checks that the demo's actions, replayed from its seed, reproduce the
/// recorded poses, sensor bins and terminal flag.
pub fn validate_demonstration(demo: &Demonstration, cfg: &WorldConfig) -> Result<()> {
    let n = demo.steps.len();
    if n == 0 {
        return Err(Error::ReplayMismatch { step: 0, detail: "empty trajectory".into() });
    }
    if let Some(k) = demo.steps[..n - 1].iter().position(|s| s.action.is_none()) {
        return Err(Error::ReplayMismatch { step: k, detail: "missing action before the final step".into() });
    }
    let actions = demo.actions();
    let mut scenario = spawn_scenario(demo.seed, cfg);
    for (k, step) in demo.steps.iter().enumerate() {
        let s = scenario.ego;
        let r = step.state;
        let err = (s.x - r.x).abs().max((s.y - r.y).abs()).max((s.theta - r.theta).abs()).max((s.v - r.v).abs());
        if !(err <= REPLAY_TOLERANCE) {
            return Err(Error::ReplayMismatch { step: k, detail: format!("state error {err:e}") });
        }
        if bins_of(&scenario, cfg)? != step.bins {
            return Err(Error::ReplayMismatch { step: k, detail: "sensor bins differ".into() });
        }
        if k + 1 < n {
            if scenario.terminal.is_terminal() {
                return Err(Error::ReplayMismatch { step: k, detail: "episode ended before the recording".into() });
            }
            scenario = step_world(&scenario, actions[k], cfg)?.next;
        }
    }
    if scenario.terminal != demo.terminal {
        return Err(Error::ReplayMismatch {
            step: n - 1,
            detail: format!("terminal {} but recorded {}", scenario.terminal.as_str(), demo.terminal.as_str()),
        });
    }
    Ok(())
}

/// Reads a trajectory file and checks it by replay.
pub fn ingest_demonstration(path: &Path, cfg: &WorldConfig) -> Result<Demonstration> {
    let demo = crate::persist::read_trajectory(path, cfg)?;
    validate_demonstration(&demo, cfg)?;
    Ok(demo)
}

/// Discounted feature sum of one demonstration, from its recorded bins.
pub fn demo_feature_sum(demo: &Demonstration, gamma: f64) -> MuVector {
    let mut mu = vec![0.0; FEATURE_DIM];
    let mut g = 1.0;
    for step in &demo.steps {
        for (s, &b) in step.bins.iter().enumerate() {
            mu[feature_index(s, b as usize)] += g;
        }
        g *= gamma;
    }
    MuVector(mu)
}

/// Empirical expert feature expectations: the mean over demonstrations.
pub fn expert_feature_expectations(demos: &[Demonstration], gamma: f64) -> Result<MuVector> {
    if demos.is_empty() {
        return Err(Error::NoDemonstrations);
    }
    let mut acc = vec![0.0; FEATURE_DIM];
    for d in demos {
        for (a, m) in acc.iter_mut().zip(demo_feature_sum(d, gamma).0) {
            *a += m;
        }
    }
    acc.iter_mut().for_each(|a| *a /= demos.len() as f64);
    Ok(MuVector(acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Obstacle;

    fn empty(cfg: &WorldConfig) -> Scenario {
        let mut s = spawn_scenario(0, cfg);
        s.obstacles.clear();
        s
    }

    fn car(lane: usize, x: f64, cfg: &WorldConfig) -> Obstacle {
        Obstacle {
            x,
            y: cfg.lane_center(lane),
            lane,
            speed: cfg.obstacle_speed,
            length: cfg.vehicle_length,
            width: cfg.vehicle_width,
        }
    }

    #[test]
    fn centred_on_empty_road_goes_straight() {
        let cfg = WorldConfig::default();
        assert_eq!(scripted_expert_action(&empty(&cfg), &cfg), SteerAction::Straight);
    }

    #[test]
    fn blocked_lane_with_both_sides_clear_goes_left() {
        let cfg = WorldConfig::default();
        let mut s = empty(&cfg);
        s.obstacles.push(car(1, 10.0, &cfg));
        assert!(avoidance_trigger(&s, &cfg));
        assert_eq!(target_lane(&s, &cfg), 2);
        assert_eq!(scripted_expert_action(&s, &cfg), SteerAction::Left);

        // Left lane more crowded: go right.
        s.obstacles.push(car(2, 30.0, &cfg));
        assert_eq!(target_lane(&s, &cfg), 0);
        assert_eq!(scripted_expert_action(&s, &cfg), SteerAction::Right);
    }

    #[test]
    fn offset_left_of_centre_steers_right() {
        let cfg = WorldConfig::default();
        let mut s = empty(&cfg);
        s.ego.y = cfg.lane_center(1) + 1.0;
        assert_eq!(scripted_expert_action(&s, &cfg), SteerAction::Right);
        s.ego.y = cfg.lane_center(1) - 1.0;
        assert_eq!(scripted_expert_action(&s, &cfg), SteerAction::Left);
    }

    #[test]
    fn far_obstacle_does_not_trigger() {
        let cfg = WorldConfig::default();
        let mut s = empty(&cfg);
        s.obstacles.push(car(1, 20.5, &cfg));
        assert!(!avoidance_trigger(&s, &cfg));
        s.obstacles[0].x = -5.0;
        assert!(!avoidance_trigger(&s, &cfg));
    }

    #[test]
    fn scripted_demo_replays() {
        let cfg = WorldConfig::default();
        let out = record_demonstrations(5, 3, &cfg).unwrap();
        assert_eq!(out.demos.len(), 5);
        for d in &out.demos {
            validate_demonstration(d, &cfg).unwrap();
            assert_eq!(d.steps.last().unwrap().action, None);
        }
        let mut tampered = out.demos[0].clone();
        let k = tampered.steps.len() / 2;
        tampered.steps[k].action = Some(match tampered.steps[k].action.unwrap() {
            SteerAction::Left => SteerAction::Right,
            _ => SteerAction::Left,
        });
        assert!(matches!(validate_demonstration(&tampered, &cfg), Err(Error::ReplayMismatch { .. })));
    }

    #[test]
    fn expert_mu_matches_one_hot_sums() {
        let cfg = WorldConfig::default();
        let out = record_demonstrations(3, 9, &cfg).unwrap();
        let mu = expert_feature_expectations(&out.demos, 0.9).unwrap();
        // Every timestep contributes one unit per sensor.
        let per_sensor: f64 =
            out.demos.iter().map(|d| (0..d.steps.len()).map(|t| 0.9f64.powi(t as i32)).sum::<f64>()).sum::<f64>() / 3.0;
        for s in 0..NUM_SENSORS {
            let total: f64 = (0..16).map(|b| mu.0[feature_index(s, b)]).sum();
            assert!((total - per_sensor).abs() < 1e-9);
        }
        assert!(matches!(expert_feature_expectations(&[], 0.9), Err(Error::NoDemonstrations)));
    }
}
