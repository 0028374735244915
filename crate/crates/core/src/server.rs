//! Single-session simulator server for interactive demonstration recording
//! and greedy-policy playback.
//!
//! Transport: TCP, one JSON object per line, every message carrying
//! `"v": PROTOCOL_VERSION`. The server owns the clock: it advances the
//! simulation once per tick and streams a `state` message after each step.
//! A tick without a fresh `action` repeats the previous action.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::Deserialize;
use serde_json::{json, Value};

use crate::dqn::{greedy_action, QNetwork};
use crate::error::{Error, Result};
use crate::expert::{bins_of, validate_demonstration, DemoSource, DemoStep, Demonstration};
use crate::features::featurize;
use crate::persist::{format_trajectory, read_checkpoint};
use crate::sim::{sensor_readings, spawn_scenario, step_world, Scenario, SteerAction, WorldConfig};

pub const PROTOCOL_VERSION: u64 = 1;
pub const DEFAULT_TICK: Duration = Duration::from_millis(50);

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub tick: Duration,
    pub world: WorldConfig,
    /// Where `save` writes trajectory files.
    pub save_dir: PathBuf,
    /// Where `playback` looks up checkpoint names.
    pub checkpoint_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Start {
        seed: u64,
    },
    Action {
        ordinal: i64,
        /// Step index of the state this action answers.
        #[serde(default)]
        tick: Option<usize>,
    },
    Save {
        /// File name inside the save directory; defaults to one derived
        /// from the seed and time.
        #[serde(default)]
        name: Option<String>,
        /// Provenance tag written into the file; defaults to `human`.
        #[serde(default)]
        source: Option<String>,
        #[serde(default)]
        recorded_at: Option<u64>,
    },
    Reset,
    Playback {
        checkpoint: String,
        #[serde(default)]
        seed: u64,
    },
}

/// Decodes one line, rejecting unknown versions before looking further.
pub fn parse_client_message(line: &str) -> Result<ClientMessage> {
    let mut value: Value =
        serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed message: {e}")))?;
    let obj = value.as_object_mut().ok_or_else(|| Error::Protocol("message must be a JSON object".into()))?;
    match obj.remove("v").and_then(|v| v.as_u64()) {
        Some(PROTOCOL_VERSION) => {}
        Some(v) => return Err(Error::Protocol(format!("unsupported protocol version {v}"))),
        None => return Err(Error::Protocol("missing protocol version `v`".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::Protocol(format!("malformed message: {e}")))
}

pub fn state_message(scenario: &Scenario, cfg: &WorldConfig, mode: &str) -> Value {
    let obstacles: Vec<Value> =
        scenario.obstacles.iter().map(|o| json!({"x": o.x, "y": o.y, "length": o.length, "width": o.width})).collect();
    json!({
        "v": PROTOCOL_VERSION,
        "type": "state",
        "mode": mode,
        "step": scenario.step,
        "ego": {"x": scenario.ego.x, "y": scenario.ego.y, "theta": scenario.ego.theta, "v": scenario.ego.v},
        "obstacles": obstacles,
        "sensors": sensor_readings(scenario, cfg).to_vec(),
        "terminal": scenario.terminal.is_terminal(),
        "status": scenario.terminal.as_str(),
    })
}

fn error_message(message: &str) -> Value {
    json!({"v": PROTOCOL_VERSION, "type": "error", "message": message})
}

/// Keeps a file name inside its directory.
fn plain_file_name(name: &str) -> Result<&str> {
    let ok = !name.is_empty()
        && Path::new(name).file_name().and_then(|n| n.to_str()) == Some(name)
        && name != ".."
        && name != ".";
    if ok {
        Ok(name)
    } else {
        Err(Error::Protocol(format!("`{name}` is not a plain file name")))
    }
}

struct Recording {
    seed: u64,
    scenario: Scenario,
    steps: Vec<DemoStep>,
    last_action: SteerAction,
}

impl Recording {
    fn start(seed: u64, cfg: &WorldConfig) -> Self {
        Recording { seed, scenario: spawn_scenario(seed, cfg), steps: vec![], last_action: SteerAction::Straight }
    }

    fn advance(&mut self, cfg: &WorldConfig) -> Result<()> {
        let a = self.last_action;
        self.steps.push(DemoStep { state: self.scenario.ego, action: Some(a), bins: bins_of(&self.scenario, cfg)? });
        self.scenario = step_world(&self.scenario, a, cfg)?.next;
        if self.scenario.terminal.is_terminal() {
            self.steps.push(DemoStep { state: self.scenario.ego, action: None, bins: bins_of(&self.scenario, cfg)? });
        }
        Ok(())
    }

    fn demonstration(&self, source: DemoSource, recorded_at: u64) -> Demonstration {
        Demonstration {
            seed: self.seed,
            source,
            recorded_at,
            steps: self.steps.clone(),
            terminal: self.scenario.terminal,
        }
    }
}

struct Playback {
    net: QNetwork,
    scenario: Scenario,
}

impl Playback {
    fn advance(&mut self, cfg: &WorldConfig) -> Result<()> {
        let phi = featurize(&sensor_readings(&self.scenario, cfg), cfg)?.to_dense();
        let a = SteerAction::from_ordinal(greedy_action(&self.net.forward(&phi))).unwrap_or(SteerAction::Straight);
        self.scenario = step_world(&self.scenario, a, cfg)?.next;
        Ok(())
    }
}

enum Mode {
    Idle,
    Recording(Recording),
    Playback(Playback),
}

enum Inbound {
    Line(String),
    Closed,
}

/// Why a session ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEnd {
    ClientClosed,
}

struct Session<'a> {
    opts: &'a ServerOptions,
    out: TcpStream,
    mode: Mode,
    /// Bumped whenever a recording or playback begins.
    episodes: usize,
}

impl Session<'_> {
    fn send(&mut self, msg: &Value) -> Result<()> {
        let mut line = msg.to_string();
        line.push('\n');
        self.out.write_all(line.as_bytes())?;
        Ok(())
    }

    fn send_state(&mut self) -> Result<()> {
        let msg = match &self.mode {
            Mode::Recording(r) => state_message(&r.scenario, &self.opts.world, "record"),
            Mode::Playback(p) => state_message(&p.scenario, &self.opts.world, "playback"),
            Mode::Idle => return Ok(()),
        };
        self.send(&msg)
    }

    /// Applies one inbound line. Malformed input resets the session;
    /// invalid actions are reported and otherwise ignored.
    fn handle(&mut self, line: &str) -> Result<()> {
        let msg = match parse_client_message(line) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("{e}; resetting session");
                self.mode = Mode::Idle;
                return self.send(&error_message(&e.to_string()));
            }
        };
        match msg {
            ClientMessage::Start { seed } => {
                self.mode = Mode::Recording(Recording::start(seed, &self.opts.world));
                self.episodes += 1;
                self.send_state()
            }
            ClientMessage::Action { ordinal, tick } => match &mut self.mode {
                Mode::Recording(r) => {
                    let action = usize::try_from(ordinal).ok().and_then(SteerAction::from_ordinal);
                    match action {
                        Some(a) => {
                            if let Some(t) = tick.filter(|&t| t != r.scenario.step) {
                                log::warn!("action answers step {t} but the session is at step {}", r.scenario.step);
                            }
                            r.last_action = a;
                            Ok(())
                        }
                        None => self.send(&error_message(&format!("invalid action ordinal {ordinal}"))),
                    }
                }
                _ => self.send(&error_message("no recording in progress")),
            },
            ClientMessage::Save { name, source, recorded_at } => self.save(name, source, recorded_at),
            ClientMessage::Reset => {
                self.mode = Mode::Idle;
                Ok(())
            }
            ClientMessage::Playback { checkpoint, seed } => match self.load_playback(&checkpoint, seed) {
                Ok(p) => {
                    self.mode = Mode::Playback(p);
                    self.episodes += 1;
                    self.send_state()
                }
                Err(e) => self.send(&error_message(&e.to_string())),
            },
        }
    }

    fn load_playback(&self, checkpoint: &str, seed: u64) -> Result<Playback> {
        let path = self.opts.checkpoint_dir.join(plain_file_name(checkpoint)?);
        let ckpt = read_checkpoint(&path)?;
        Ok(Playback { net: ckpt.learner.online, scenario: spawn_scenario(seed, &self.opts.world) })
    }

    fn save(&mut self, name: Option<String>, source: Option<String>, recorded_at: Option<u64>) -> Result<()> {
        let result = (|| -> Result<String> {
            let Mode::Recording(r) = &self.mode else {
                return Err(Error::Protocol("nothing to save".into()));
            };
            if !r.scenario.terminal.is_terminal() {
                return Err(Error::Protocol("the episode is still running".into()));
            }
            let source = match source.as_deref() {
                None => DemoSource::Human,
                Some(s) => DemoSource::parse(s).ok_or_else(|| Error::Protocol(format!("unknown source `{s}`")))?,
            };
            let recorded_at = recorded_at
                .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0));
            let name = match name {
                Some(n) => plain_file_name(&n)?.to_string(),
                None => format!("{}_{}_{recorded_at}.traj", source.as_str(), r.seed),
            };
            let demo = r.demonstration(source, recorded_at);
            validate_demonstration(&demo, &self.opts.world)?;
            write_atomically(&self.opts.save_dir, &name, &format_trajectory(&demo, &self.opts.world))?;
            Ok(name)
        })();
        match result {
            Ok(name) => {
                let steps = match &self.mode {
                    Mode::Recording(r) => r.steps.len(),
                    _ => 0,
                };
                self.send(&json!({"v": PROTOCOL_VERSION, "type": "saved", "file": name, "steps": steps}))
            }
            Err(e) => self.send(&error_message(&e.to_string())),
        }
    }

    fn tick(&mut self) -> Result<()> {
        let cfg = &self.opts.world;
        let advanced = match &mut self.mode {
            Mode::Recording(r) if !r.scenario.terminal.is_terminal() => {
                r.advance(cfg)?;
                true
            }
            Mode::Playback(p) if !p.scenario.terminal.is_terminal() => {
                p.advance(cfg)?;
                true
            }
            _ => false,
        };
        if advanced {
            self.send_state()?;
        }
        Ok(())
    }
}

/// Writes through a temporary file so readers never see partial content.
fn write_atomically(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let tmp = dir.join(format!(".{name}.partial"));
    std::fs::write(&tmp, text).map_err(|e| Error::file(&tmp, e))?;
    let dest = dir.join(name);
    std::fs::rename(&tmp, &dest).map_err(|e| Error::file(&dest, e))
}

fn spawn_reader(stream: TcpStream) -> Receiver<Inbound> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let reader = BufReader::new(stream);
        for line in reader.lines() {
            match line {
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => {
                    if tx.send(Inbound::Line(l)).is_err() {
                        return;
                    }
                }
                Err(_) => break,
            }
        }
        let _ = tx.send(Inbound::Closed);
    });
    rx
}

/// Runs one client session until it disconnects. Unsaved recordings are
/// discarded.
pub fn run_session(stream: TcpStream, opts: &ServerOptions) -> Result<SessionEnd> {
    stream.set_nodelay(true)?;
    stream.set_write_timeout(Some(opts.tick.max(Duration::from_millis(10)) * 20))?;
    let inbound = spawn_reader(stream.try_clone()?);
    let mut session = Session { opts, out: stream, mode: Mode::Idle, episodes: 0 };
    let mut deadline = Instant::now() + opts.tick;
    loop {
        let wait = deadline.saturating_duration_since(Instant::now());
        match inbound.recv_timeout(wait) {
            Ok(Inbound::Line(line)) => {
                let episodes = session.episodes;
                if let Err(e) = session.handle(&line) {
                    return disconnected(e);
                }
                // A fresh episode gets a full tick before its first step.
                if session.episodes != episodes {
                    deadline = Instant::now() + opts.tick;
                }
            }
            Ok(Inbound::Closed) | Err(RecvTimeoutError::Disconnected) => return Ok(SessionEnd::ClientClosed),
            Err(RecvTimeoutError::Timeout) => {
                if let Err(e) = session.tick() {
                    return disconnected(e);
                }
                deadline += opts.tick;
                let now = Instant::now();
                if deadline < now {
                    deadline = now + opts.tick;
                }
            }
        }
    }
}

fn disconnected(e: Error) -> Result<SessionEnd> {
    match e {
        Error::Io(_) => Ok(SessionEnd::ClientClosed),
        other => Err(other),
    }
}

/// Serves sessions one at a time; stops after `max_sessions` when given.
pub fn serve(listener: TcpListener, opts: &ServerOptions, max_sessions: Option<usize>) -> Result<()> {
    for (served, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        log::info!("session from {peer}");
        match run_session(stream, opts) {
            Ok(end) => log::info!("session from {peer} ended: {end:?}"),
            Err(e) => log::error!("session from {peer} failed: {e}"),
        }
        if max_sessions.is_some_and(|m| served + 1 >= m) {
            break;
        }
    }
    Ok(())
}

pub fn serve_ui(port: u16, opts: &ServerOptions) -> Result<()> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    log::info!("listening on {}", listener.local_addr()?);
    serve(listener, opts, None)
}
