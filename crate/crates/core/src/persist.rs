//! Line-oriented text formats for demonstrations, feature tables, network
//! checkpoints and IRL state. Every file starts with a `highway-irl <kind>
//! <version>` line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dqn::{Adam, Learner, LossKind, QNetwork};
use crate::error::{Error, Result};
use crate::expert::{DemoSource, DemoStep, Demonstration};
use crate::features::{feature_index, MuVector, WeightVector, FEATURE_DIM};
use crate::irl::IrlState;
use crate::rng::RngState;
use crate::sim::{SteerAction, Terminal, VehicleState, WorldConfig, NUM_BINS, NUM_SENSORS};

pub const TRAJECTORY_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const IRL_STATE_VERSION: u32 = 1;

/// 17 significant digits: enough for any double to survive a round trip.
fn f17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// Line cursor with 1-based line numbers for error messages.
struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { iter: text.lines().enumerate(), line: 0 }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.iter.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(Error::Corrupted(format!("unexpected end of file after line {}", self.line))),
        }
    }

    /// Next line, which must start with `key`; returns the remainder.
    fn field(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next_line()?;
        match l.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest),
            _ if l == key => Ok(""),
            _ => Err(Error::parse(self.line, format!("expected `{key}`"))),
        }
    }

    fn field_num<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.field(key)?;
        self.num(v)
    }

    fn field_floats(&mut self, key: &str) -> Result<Vec<f64>> {
        let v = self.field(key)?;
        self.floats(v)
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.trim().parse().map_err(|_| Error::parse(self.line, format!("bad number `{s}`")))
    }

    fn floats(&self, s: &str) -> Result<Vec<f64>> {
        s.split_ascii_whitespace().map(|t| self.num(t)).collect()
    }
}

fn check_header(lines: &mut Lines<'_>, kind: &str, expected: u32) -> Result<()> {
    let first = match lines.iter.next() {
        Some((_, l)) => l,
        None => return Err(Error::parse(1, "empty file")),
    };
    lines.line = 1;
    let mut parts = first.split_ascii_whitespace();
    if parts.next() != Some("highway-irl") || parts.next() != Some(kind) {
        return Err(Error::parse(1, format!("not a highway-irl {kind} file")));
    }
    let found: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| Error::parse(1, "missing version"))?;
    if found != expected {
        return Err(Error::Version { found, expected });
    }
    Ok(())
}

/// Parses the `key=value` text produced by [`WorldConfig::canonical_text`].
pub fn parse_world_config(text: &str) -> Result<WorldConfig> {
    let mut cfg = WorldConfig::default();
    let bad = |m: String| Error::parse(0, m);
    let f = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad config value `{v}`")));
    let u = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad config value `{v}`")));
    let mut seen = 0;
    for tok in text.split_ascii_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("bad config token `{tok}`")))?;
        match k {
            "env_length" => cfg.env_length = f(v)?,
            "lane_width" => cfg.lane_width = f(v)?,
            "num_lanes" => cfg.num_lanes = u(v)?,
            "wall_lo" => cfg.wall_y[0] = f(v)?,
            "wall_hi" => cfg.wall_y[1] = f(v)?,
            "vehicle_length" => cfg.vehicle_length = f(v)?,
            "vehicle_width" => cfg.vehicle_width = f(v)?,
            "wheelbase" => cfg.wheelbase = f(v)?,
            "dt" => cfg.dt = f(v)?,
            "ego_speed" => cfg.ego_speed = f(v)?,
            "obstacle_speed" => cfg.obstacle_speed = f(v)?,
            "max_obstacles" => cfg.max_obstacles = u(v)?,
            "spawn_min" => cfg.spawn_min = f(v)?,
            "spawn_max" => cfg.spawn_max = f(v)?,
            "sensor_range" => cfg.sensor_range = f(v)?,
            "num_sensors" => cfg.num_sensors = u(v)?,
            "num_bins" => cfg.num_bins = u(v)?,
            "horizon" => cfg.horizon = u(v)?,
            _ => return Err(bad(format!("unknown config key `{k}`"))),
        }
        seen += 1;
    }
    if seen != 18 {
        return Err(bad(format!("config snapshot has {seen} keys, expected 18")));
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Trajectories

pub fn format_trajectory(demo: &Demonstration, cfg: &WorldConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "highway-irl trajectory {TRAJECTORY_VERSION}");
    let _ = writeln!(s, "config_hash {}", cfg.hash());
    let _ = writeln!(s, "config {}", cfg.canonical_text());
    let _ = writeln!(s, "seed {}", demo.seed);
    let _ = writeln!(s, "source {}", demo.source.as_str());
    let _ = writeln!(s, "recorded_at {}", demo.recorded_at);
    let _ = writeln!(s, "terminal {}", demo.terminal.as_str());
    let _ = writeln!(s, "steps {}", demo.steps.len());
    let _ = writeln!(s, "# step x y theta v action bins[0..13]");
    for (k, st) in demo.steps.iter().enumerate() {
        let a = st.action.map_or("-".to_string(), |a| a.ordinal().to_string());
        let _ =
            write!(s, "{k} {} {} {} {} {a}", f17(st.state.x), f17(st.state.y), f17(st.state.theta), f17(st.state.v));
        for b in st.bins {
            let _ = write!(s, " {b}");
        }
        s.push('\n');
    }
    s.push_str("end\n");
    s
}

/// Parses a trajectory, rejecting files recorded under a different world
/// configuration than `cfg`.
pub fn parse_trajectory(text: &str, cfg: &WorldConfig) -> Result<Demonstration> {
    let mut l = Lines::new(text);
    check_header(&mut l, "trajectory", TRAJECTORY_VERSION)?;
    let hash = l.field("config_hash")?.trim().to_string();
    let snapshot = parse_world_config(l.field("config")?).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(l.line, message),
        e => e,
    })?;
    if snapshot.hash() != hash {
        return Err(Error::Corrupted("config snapshot does not match its hash".into()));
    }
    if hash != cfg.hash() {
        return Err(Error::ConfigHash { found: hash, expected: cfg.hash() });
    }
    let seed: u64 = l.field_num("seed")?;
    let source = DemoSource::parse(l.field("source")?.trim()).ok_or_else(|| Error::parse(l.line, "unknown source"))?;
    let recorded_at: u64 = l.field_num("recorded_at")?;
    let terminal =
        Terminal::parse(l.field("terminal")?.trim()).ok_or_else(|| Error::parse(l.line, "unknown terminal"))?;
    let n: usize = l.field_num("steps")?;
    let mut steps = Vec::with_capacity(n.min(100_000));
    let mut k = 0;
    while k < n {
        let line = l.next_line()?;
        if line.starts_with('#') {
            continue;
        }
        let t: Vec<&str> = line.split_ascii_whitespace().collect();
        if t.len() != 6 + NUM_SENSORS {
            return Err(Error::parse(l.line, format!("expected {} fields, found {}", 6 + NUM_SENSORS, t.len())));
        }
        if l.num::<usize>(t[0])? != k {
            return Err(Error::parse(l.line, "step index out of sequence"));
        }
        let state = VehicleState { x: l.num(t[1])?, y: l.num(t[2])?, theta: l.num(t[3])?, v: l.num(t[4])? };
        let action = match t[5] {
            "-" => None,
            a => Some(SteerAction::from_ordinal(l.num(a)?).ok_or_else(|| Error::parse(l.line, "bad action ordinal"))?),
        };
        let mut bins = [0u8; NUM_SENSORS];
        for (b, tok) in bins.iter_mut().zip(&t[6..]) {
            *b = l.num(tok)?;
            if *b as usize >= NUM_BINS {
                return Err(Error::parse(l.line, "bin index out of range"));
            }
        }
        steps.push(DemoStep { state, action, bins });
        k += 1;
    }
    if l.next_line()? != "end" {
        return Err(Error::parse(l.line, "expected `end`"));
    }
    Ok(Demonstration { seed, source, recorded_at, steps, terminal })
}

pub fn write_trajectory(path: &Path, demo: &Demonstration, cfg: &WorldConfig) -> Result<()> {
    write_text(path, &format_trajectory(demo, cfg))
}

pub fn read_trajectory(path: &Path, cfg: &WorldConfig) -> Result<Demonstration> {
    parse_trajectory(&read_text(path)?, cfg)
}

/// Trajectory files (`*.traj`) in `dir`, sorted by name.
pub fn list_trajectories(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = vec![];
    for entry in fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let p = entry.map_err(|e| Error::file(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "traj") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Feature tables

/// `sensor,bin,value` rows in sensor-major order.
pub fn format_feature_csv(values: &[f64]) -> Result<String> {
    if values.len() != FEATURE_DIM {
        return Err(Error::DimensionMismatch { expected: FEATURE_DIM, found: values.len() });
    }
    let mut s = String::from("sensor,bin,value\n");
    for sensor in 0..NUM_SENSORS {
        for bin in 0..NUM_BINS {
            let _ = writeln!(s, "{sensor},{bin},{:?}", values[feature_index(sensor, bin)]);
        }
    }
    Ok(s)
}

pub fn parse_feature_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("sensor,bin,value") {
        return Err(Error::parse(1, "expected header `sensor,bin,value`"));
    }
    let mut out = vec![f64::NAN; FEATURE_DIM];
    let mut filled = vec![false; FEATURE_DIM];
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::parse(n, "expected 3 columns"));
        }
        let sensor: usize = parts[0].parse().map_err(|_| Error::parse(n, "bad sensor"))?;
        let bin: usize = parts[1].parse().map_err(|_| Error::parse(n, "bad bin"))?;
        let value: f64 = parts[2].parse().map_err(|_| Error::parse(n, "bad value"))?;
        if sensor >= NUM_SENSORS || bin >= NUM_BINS {
            return Err(Error::parse(n, "sensor or bin out of range"));
        }
        let idx = feature_index(sensor, bin);
        if filled[idx] {
            return Err(Error::parse(n, "duplicate row"));
        }
        filled[idx] = true;
        out[idx] = value;
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        return Err(Error::Corrupted(format!("feature table is missing index {missing}")));
    }
    Ok(out)
}

pub fn write_weights(path: &Path, w: &WeightVector) -> Result<()> {
    write_text(path, &format_feature_csv(&w.0)?)
}

pub fn read_weights(path: &Path) -> Result<WeightVector> {
    Ok(WeightVector(parse_feature_csv(&read_text(path)?)?))
}

pub fn write_mu(path: &Path, mu: &MuVector) -> Result<()> {
    write_text(path, &format_feature_csv(&mu.0)?)
}

pub fn read_mu(path: &Path) -> Result<MuVector> {
    Ok(MuVector(parse_feature_csv(&read_text(path)?)?))
}

// ---------------------------------------------------------------------------
// Checkpoints

/// A learner snapshot plus the generator position and IRL round.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub learner: Learner,
    pub rng: RngState,
}

fn write_net(s: &mut String, name: &str, net: &QNetwork) {
    for (k, layer) in net.layers.iter().enumerate() {
        let _ = write!(s, "{name} {k} weights {}", layer.weights.len());
        for w in &layer.weights {
            let _ = write!(s, " {w:e}");
        }
        s.push('\n');
        let _ = write!(s, "{name} {k} bias {}", layer.bias.len());
        for b in &layer.bias {
            let _ = write!(s, " {b:e}");
        }
        s.push('\n');
    }
}

fn read_net(l: &mut Lines<'_>, name: &str, sizes: &[usize]) -> Result<QNetwork> {
    let mut net = QNetwork::zeros(sizes);
    for k in 0..net.layers.len() {
        for part in ["weights", "bias"] {
            let line = l.next_line()?;
            let mut head = line.splitn(5, ' ');
            let tag = (head.next(), head.next(), head.next());
            if tag != (Some(name), Some(k.to_string().as_str()), Some(part)) {
                return Err(Error::parse(l.line, format!("expected `{name} {k} {part}`")));
            }
            let declared: usize = l.num(head.next().unwrap_or(""))?;
            let values = l.floats(head.next().unwrap_or(""))?;
            let target: &mut Vec<f64> =
                if part == "weights" { &mut net.layers[k].weights } else { &mut net.layers[k].bias };
            if declared != target.len() || values.len() != declared {
                return Err(Error::Corrupted(format!(
                    "line {}: {name} layer {k} {part} declares {declared} values, shape needs {}, found {}",
                    l.line,
                    target.len(),
                    values.len()
                )));
            }
            *target = values;
        }
    }
    Ok(net)
}

fn loss_name(k: LossKind) -> &'static str {
    match k {
        LossKind::Mse => "mse",
        LossKind::Huber => "huber",
    }
}

pub fn format_checkpoint(c: &Checkpoint) -> String {
    let lr = &c.learner;
    let mut s = String::new();
    let _ = writeln!(s, "highway-irl checkpoint {CHECKPOINT_VERSION}");
    let _ = writeln!(s, "iteration {}", c.iteration);
    let sizes: Vec<String> = lr.online.sizes().iter().map(|x| x.to_string()).collect();
    let _ = writeln!(s, "layers {}", sizes.join(" "));
    let _ = writeln!(s, "gamma {:e}", lr.gamma);
    let _ = writeln!(s, "loss {}", loss_name(lr.loss));
    let _ = writeln!(s, "target_update_period {}", lr.target_update_period);
    let _ = writeln!(s, "train_steps {}", lr.train_steps);
    let a = &lr.adam;
    let _ = writeln!(s, "adam {:e} {:e} {:e} {:e} {}", a.learning_rate, a.beta1, a.beta2, a.eps, a.step);
    let seed: String = c.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
    let _ = writeln!(s, "rng {seed} {} {}", c.rng.stream, c.rng.word_pos);
    write_net(&mut s, "online", &lr.online);
    write_net(&mut s, "target", &lr.target);
    write_net(&mut s, "adam_m", &a.m);
    write_net(&mut s, "adam_v", &a.v);
    let _ = writeln!(s, "end {}", lr.online.num_params() * 4);
    s
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut l = Lines::new(text);
    check_header(&mut l, "checkpoint", CHECKPOINT_VERSION)?;
    let iteration: usize = l.field_num("iteration")?;
    let sizes: Vec<usize> = l.field("layers")?.split_ascii_whitespace().map(|t| l.num(t)).collect::<Result<_>>()?;
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::parse(l.line, "bad layer shape list"));
    }
    let gamma: f64 = l.field_num("gamma")?;
    let loss = match l.field("loss")?.trim() {
        "mse" => LossKind::Mse,
        "huber" => LossKind::Huber,
        other => return Err(Error::parse(l.line, format!("unknown loss `{other}`"))),
    };
    let target_update_period: usize = l.field_num("target_update_period")?;
    let train_steps: u64 = l.field_num("train_steps")?;
    let adam_line = l.field("adam")?;
    let adam_parts: Vec<&str> = adam_line.split_ascii_whitespace().collect();
    if adam_parts.len() != 5 {
        return Err(Error::parse(l.line, "adam needs 5 values"));
    }
    let rng_line = l.field("rng")?;
    let rng_parts: Vec<&str> = rng_line.split_ascii_whitespace().collect();
    if rng_parts.len() != 3 || rng_parts[0].len() != 64 {
        return Err(Error::parse(l.line, "bad rng state"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&rng_parts[0][2 * i..2 * i + 2], 16)
            .map_err(|_| Error::parse(l.line, "bad rng seed"))?;
    }
    let rng = RngState { seed, stream: l.num(rng_parts[1])?, word_pos: l.num(rng_parts[2])? };
    let online = read_net(&mut l, "online", &sizes)?;
    let target = read_net(&mut l, "target", &sizes)?;
    let m = read_net(&mut l, "adam_m", &sizes)?;
    let v = read_net(&mut l, "adam_v", &sizes)?;
    let total: usize = l.field_num("end")?;
    if total != online.num_params() * 4 {
        return Err(Error::Corrupted("parameter count in trailer does not match".into()));
    }
    let adam = Adam {
        learning_rate: l.num(adam_parts[0])?,
        beta1: l.num(adam_parts[1])?,
        beta2: l.num(adam_parts[2])?,
        eps: l.num(adam_parts[3])?,
        step: l.num(adam_parts[4])?,
        m,
        v,
    };
    let learner = Learner { online, target, adam, gamma, loss, target_update_period, train_steps };
    Ok(Checkpoint { iteration, learner, rng })
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_text(path, &format_checkpoint(c))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&read_text(path)?)
}

// ---------------------------------------------------------------------------
// IRL state

fn write_vec(s: &mut String, key: &str, v: &[f64]) {
    s.push_str(key);
    for x in v {
        let _ = write!(s, " {x:e}");
    }
    s.push('\n');
}

pub fn format_irl_state(st: &IrlState) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "highway-irl irl-state {IRL_STATE_VERSION}");
    let _ = writeln!(s, "iteration {}", st.iteration);
    let _ = writeln!(s, "dim {}", st.mu_expert.len());
    let _ = writeln!(s, "margin {:e}", st.margin);
    write_vec(&mut s, "weights", &st.weights.0);
    write_vec(&mut s, "mu_bar", &st.mu_bar.0);
    write_vec(&mut s, "mu_expert", &st.mu_expert.0);
    write_vec(&mut s, "t_history", &st.t_history);
    let _ = writeln!(s, "mu_history {}", st.mu_history.len());
    for m in &st.mu_history {
        write_vec(&mut s, "mu", &m.0);
    }
    let _ = writeln!(s, "w_history {}", st.w_history.len());
    for w in &st.w_history {
        write_vec(&mut s, "w", &w.0);
    }
    s.push_str("end\n");
    s
}

pub fn parse_irl_state(text: &str) -> Result<IrlState> {
    let mut l = Lines::new(text);
    check_header(&mut l, "irl-state", IRL_STATE_VERSION)?;
    let iteration: usize = l.field_num("iteration")?;
    let dim: usize = l.field_num("dim")?;
    let margin: f64 = l.field_num("margin")?;
    let vector = |l: &mut Lines<'_>, key: &str| -> Result<Vec<f64>> {
        let v = l.field_floats(key)?;
        if v.len() != dim {
            return Err(Error::Corrupted(format!("line {}: `{key}` has {} values, expected {dim}", l.line, v.len())));
        }
        Ok(v)
    };
    let weights = WeightVector(vector(&mut l, "weights")?);
    let mu_bar = MuVector(vector(&mut l, "mu_bar")?);
    let mu_expert = MuVector(vector(&mut l, "mu_expert")?);
    let t_history = l.field_floats("t_history")?;
    let n_mu: usize = l.field_num("mu_history")?;
    let mu_history = (0..n_mu).map(|_| vector(&mut l, "mu").map(MuVector)).collect::<Result<Vec<_>>>()?;
    let n_w: usize = l.field_num("w_history")?;
    let w_history = (0..n_w).map(|_| vector(&mut l, "w").map(WeightVector)).collect::<Result<Vec<_>>>()?;
    if l.next_line()? != "end" {
        return Err(Error::parse(l.line, "expected `end`"));
    }
    if t_history.len() != w_history.len() || t_history.last() != Some(&margin) {
        return Err(Error::Corrupted("margin history is inconsistent".into()));
    }
    Ok(IrlState { iteration, weights, margin, mu_bar, mu_expert, mu_history, t_history, w_history })
}

pub fn write_irl_state(path: &Path, st: &IrlState) -> Result<()> {
    write_text(path, &format_irl_state(st))
}

pub fn read_irl_state(path: &Path) -> Result<IrlState> {
    parse_irl_state(&read_text(path)?)
}
