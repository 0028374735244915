//! Library side of the command-line workflows. Every command is a pure
//! function of its arguments; all randomness flows from explicit seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dqn::{DqnSolver, QNetwork};
use crate::env::HighwayEnv;
use crate::error::{Error, Result};
use crate::eval::{run_expert, run_policy, EvalReport};
use crate::expert::{expert_feature_expectations, ingest_demonstration, record_demonstrations, Demonstration};
use crate::features::{MuVector, WeightVector, FEATURE_DIM};
use crate::irl::{run_irl, IrlConfig, IrlResult, IrlState, IterationRecord, StopReason};
use crate::persist::{
    format_feature_csv, list_trajectories, read_checkpoint, read_text, read_weights, write_checkpoint, write_irl_state,
    write_text, write_trajectory, Checkpoint,
};
use crate::rng::{derive_seed, stream};
use crate::sim::WorldConfig;
use crate::toy::{exact_feature_expectations, shipped, value_iteration, ExactSolver, Horizon, TabularPolicy};

pub const MANIFEST_VERSION: u32 = 1;

/// Everything a training run reads from its config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub irl: IrlConfig,
    pub world: WorldConfig,
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {}", e.message())))?;
        cfg.world.validate()?;
        cfg.irl.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

// ---------------------------------------------------------------------------
// record

#[derive(Debug, Clone)]
pub struct RecordSummary {
    pub files: Vec<PathBuf>,
    pub rejected: Vec<u64>,
}

impl RecordSummary {
    pub fn to_text(&self) -> String {
        let mut s =
            format!("recorded {} demonstrations, {} rejected for collisions", self.files.len(), self.rejected.len());
        if !self.rejected.is_empty() {
            let seeds: Vec<String> = self.rejected.iter().map(u64::to_string).collect();
            let _ = write!(s, " (seeds {})", seeds.join(", "));
        }
        s
    }
}

pub fn demo_file_name(k: usize) -> String {
    format!("demo_{k:03}.traj")
}

/// Records `n` scripted demonstrations into `out_dir`.
pub fn cmd_record(n: usize, seed: u64, out_dir: &Path, cfg: &WorldConfig) -> Result<RecordSummary> {
    let outcome = record_demonstrations(n, seed, cfg)?;
    let mut files = Vec::with_capacity(outcome.demos.len());
    for (k, demo) in outcome.demos.iter().enumerate() {
        let path = out_dir.join(demo_file_name(k));
        write_trajectory(&path, demo, cfg)?;
        files.push(path);
    }
    Ok(RecordSummary { files, rejected: outcome.rejected })
}

/// Ingests every trajectory in `dir`, replay-checking each one.
pub fn load_demonstrations(dir: &Path, cfg: &WorldConfig) -> Result<Vec<Demonstration>> {
    let files = list_trajectories(dir)?;
    if files.is_empty() {
        return Err(Error::NoDemonstrations);
    }
    files.iter().map(|p| ingest_demonstration(p, cfg)).collect()
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RlKind {
    Dqn,
    Exact,
}

impl RlKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dqn" => Ok(RlKind::Dqn),
            "exact" => Ok(RlKind::Exact),
            other => Err(Error::InvalidArgument(format!("unknown RL solver `{other}` (expected dqn or exact)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RlKind::Dqn => "dqn",
            RlKind::Exact => "exact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvKind {
    Highway,
    Toy(String),
}

impl EnvKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "highway" => Ok(EnvKind::Highway),
            _ => match s.strip_prefix("toy:") {
                Some(name) if !name.is_empty() => Ok(EnvKind::Toy(name.to_string())),
                _ => Err(Error::InvalidArgument(format!("unknown environment `{s}` (expected highway or toy:<name>)"))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            EnvKind::Highway => "highway".into(),
            EnvKind::Toy(name) => format!("toy:{name}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    /// Required for the highway; ignored for toy environments, whose expert
    /// is the exact optimal policy of the planted reward.
    pub demo_dir: Option<PathBuf>,
    pub config: TrainConfig,
    pub out_dir: PathBuf,
    pub rl: RlKind,
    pub env: EnvKind,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stop: StopReason,
    pub iterations: usize,
    pub t_history: Vec<f64>,
    pub final_weights: Option<WeightVector>,
    pub manifest: PathBuf,
}

/// Weight and mu tables: `sensor,bin,value` for highway-sized vectors,
/// `index,value` otherwise.
pub fn format_vector_csv(values: &[f64]) -> Result<String> {
    if values.len() == FEATURE_DIM {
        return format_feature_csv(values);
    }
    let mut s = String::from("index,value\n");
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(s, "{i},{v:?}");
    }
    Ok(s)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes files under one root and remembers their digests for the manifest.
struct ArtifactWriter {
    root: PathBuf,
    digests: BTreeMap<String, String>,
}

impl ArtifactWriter {
    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        write_text(&self.root.join(rel), text)?;
        self.digests.insert(rel.to_string(), sha256_hex(text.as_bytes()));
        Ok(())
    }

    fn vector(&mut self, rel: &str, values: &[f64]) -> Result<()> {
        self.text(rel, &format_vector_csv(values)?)
    }

    fn checkpoint(&mut self, rel: &str, c: &Checkpoint) -> Result<()> {
        let path = self.root.join(rel);
        write_checkpoint(&path, c)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::file(&path, e))?;
        self.digests.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }
}

fn iteration_dir(i: usize) -> String {
    format!("iter_{i:03}")
}

fn write_iteration(w: &mut ArtifactWriter, rec: &IterationRecord) -> Result<()> {
    let dir = iteration_dir(rec.iteration);
    w.vector(&format!("{dir}/weights.csv"), &rec.weights.0)?;
    w.vector(&format!("{dir}/mu.csv"), &rec.mu.0)?;
    w.vector(&format!("{dir}/mu_bar.csv"), &rec.mu_bar.0)?;
    w.text(&format!("{dir}/margin.txt"), &format!("{:?}\n", rec.margin))
}

fn t_history_csv(t: &[f64]) -> String {
    let mut s = String::from("iteration,t\n");
    for (i, v) in t.iter().enumerate() {
        let _ = writeln!(s, "{},{v:?}", i + 1);
    }
    s
}

struct ManifestInfo<'a> {
    args: &'a TrainArgs,
    demo_files: &'a [String],
    feature_dim: usize,
}

fn manifest_text<P>(info: &ManifestInfo<'_>, result: &IrlResult<P>, digests: &BTreeMap<String, String>) -> String {
    let a = info.args;
    let mut s = String::new();
    let _ = writeln!(s, "manifest_version = {MANIFEST_VERSION}");
    let _ = writeln!(s, "rl = {:?}", a.rl.as_str());
    let _ = writeln!(s, "env = {:?}", a.env.label());
    let _ = writeln!(s, "feature_dim = {}", info.feature_dim);
    let _ = writeln!(s, "world_config_hash = {:?}", a.config.world.hash());
    let _ = writeln!(s, "stop_reason = {:?}", result.stop.as_str());
    let _ = writeln!(s, "iterations_completed = {}", result.records.len());
    let _ = writeln!(s, "monotonicity_violations = {}", result.monotonicity_violations);
    let _ = writeln!(s, "final_margin = {:?}", result.state.margin);
    let t: Vec<String> = result.state.t_history.iter().map(|v| format!("{v:?}")).collect();
    let _ = writeln!(s, "t_history = [{}]", t.join(", "));
    let demos: Vec<String> = info.demo_files.iter().map(|f| format!("{f:?}")).collect();
    let _ = writeln!(s, "demonstrations = [{}]", demos.join(", "));
    s.push_str("\n[artifacts]\n");
    for (name, digest) in digests {
        let _ = writeln!(s, "{name:?} = {digest:?}");
    }
    s.push_str("\n[config]\n");
    for line in a.config.to_toml().lines() {
        // Nest the config tables under `config`.
        if let Some(table) = line.strip_prefix('[') {
            let _ = writeln!(s, "[config.{table}");
        } else {
            let _ = writeln!(s, "{line}");
        }
    }
    s
}

fn finish_run<P>(
    w: &mut ArtifactWriter,
    info: &ManifestInfo<'_>,
    result: &IrlResult<P>,
    final_checkpoint: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    w.text("t_history.csv", &t_history_csv(&result.state.t_history))?;
    if let Some(fw) = &result.policy_weights {
        w.vector("final_weights.csv", &fw.0)?;
    }
    if let Some(c) = final_checkpoint {
        w.checkpoint("final.ckpt", c)?;
    }
    write_irl_state(&w.root.join("irl_state.txt"), &result.state)?;
    let state_text =
        std::fs::read(w.root.join("irl_state.txt")).map_err(|e| Error::file(w.root.join("irl_state.txt"), e))?;
    w.digests.insert("irl_state.txt".into(), sha256_hex(&state_text));
    let manifest = w.root.join("manifest.toml");
    write_text(&manifest, &manifest_text(info, result, &w.digests))?;
    Ok(TrainOutcome {
        stop: result.stop,
        iterations: result.records.len(),
        t_history: result.state.t_history.clone(),
        final_weights: result.policy_weights.clone(),
        manifest,
    })
}

/// Runs the projection loop and writes its artifacts under `out_dir`:
/// `iter_NNN/{weights,mu,mu_bar}.csv`, `iter_NNN/checkpoint.ckpt` (DQN),
/// `final_weights.csv`, `final.ckpt` (DQN), `t_history.csv`,
/// `irl_state.txt` and `manifest.toml`.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    args.config.irl.validate()?;
    let mut writer = ArtifactWriter { root: args.out_dir.clone(), digests: BTreeMap::new() };
    match (&args.rl, &args.env) {
        (RlKind::Exact, EnvKind::Toy(name)) => train_toy(args, name, &mut writer),
        (RlKind::Dqn, EnvKind::Highway) => train_highway(args, &mut writer),
        (rl, env) => Err(Error::InvalidArgument(format!(
            "solver `{}` does not support environment `{}` (use dqn with highway or exact with toy:<name>)",
            rl.as_str(),
            env.label()
        ))),
    }
}

fn train_toy(args: &TrainArgs, name: &str, w: &mut ArtifactWriter) -> Result<TrainOutcome> {
    let mdp = shipped(name)?;
    let planted = mdp.planted.clone().ok_or_else(|| {
        Error::InvalidArgument(format!("toy MDP `{name}` has no planted reward to build an expert from"))
    })?;
    let vi = value_iteration(&mdp, &planted, 1e-12)?;
    let expert = TabularPolicy::deterministic(&vi.policy, mdp.n_actions);
    let mu_expert = exact_feature_expectations(&mdp, &expert, Horizon::Infinite)?;
    let mut solver = ExactSolver::new(&mdp);
    let result = run_irl(mu_expert, &args.config.irl, &mut solver, |_, rec, _| write_iteration(w, rec))?;
    let info = ManifestInfo { args, demo_files: &[], feature_dim: mdp.feature_dim() };
    finish_run(w, &info, &result, None)
}

fn train_highway(args: &TrainArgs, w: &mut ArtifactWriter) -> Result<TrainOutcome> {
    let dir = args
        .demo_dir
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("the highway environment needs a demonstration directory".into()))?;
    let cfg = &args.config.world;
    cfg.validate()?;
    let demos = load_demonstrations(dir, cfg)?;
    let demo_files: Vec<String> = list_trajectories(dir)?
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let mu_expert = expert_feature_expectations(&demos, args.config.irl.gamma)?;
    w.vector("mu_expert.csv", &mu_expert.0)?;
    let mut solver = DqnSolver::from_config(HighwayEnv::new(cfg.clone()), &args.config.irl);
    let mut last: Option<Checkpoint> = None;
    let result = run_irl(mu_expert, &args.config.irl, &mut solver, |_, rec, policy| {
        write_iteration(w, rec)?;
        let ckpt = Checkpoint { iteration: rec.iteration, learner: policy.learner.clone(), rng: policy.rng };
        w.checkpoint(&format!("{}/checkpoint.ckpt", iteration_dir(rec.iteration)), &ckpt)?;
        last = Some(ckpt);
        Ok(())
    })?;
    // A degenerate final round still produced a policy; keep it.
    if result.stop == StopReason::DegenerateProjection {
        if let Some(p) = &result.policy {
            last = Some(Checkpoint { iteration: result.state.iteration, learner: p.learner.clone(), rng: p.rng });
        }
    }
    let info = ManifestInfo { args, demo_files: &demo_files, feature_dim: FEATURE_DIM };
    finish_run(w, &info, &result, last.as_ref())
}

/// Rebuilds the IRL state of a finished or interrupted run.
pub fn load_run_state(out_dir: &Path) -> Result<IrlState> {
    crate::persist::read_irl_state(&out_dir.join("irl_state.txt"))
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    /// Recovered reward weights to export next to the report.
    pub weights: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Expert feature expectations come from these demos when given,
    /// otherwise from the scripted expert on the evaluation scenarios.
    pub demo_dir: Option<PathBuf>,
    pub world: WorldConfig,
    pub gamma: f64,
}

/// Base seed of the evaluation scenarios for a user seed.
pub fn evaluation_base_seed(seed: u64) -> u64 {
    derive_seed(seed, stream::EVAL)
}

/// Greedy policy of `net` against the scripted expert; writes
/// `report.toml`, `mu_agent.csv`, `mu_expert.csv`, `mu_diff.csv` and,
/// when weights are given, `weights.csv`.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvalReport> {
    if args.n == 0 {
        return Err(Error::InvalidArgument("--n must be at least 1".into()));
    }
    args.world.validate()?;
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let weights = args.weights.as_deref().map(read_weights).transpose()?;
    let report = evaluate_network(&ckpt.learner.online, args)?;
    write_text(&args.out_dir.join("report.toml"), &report.to_text())?;
    write_text(&args.out_dir.join("mu_agent.csv"), &format_feature_csv(&report.mu_agent.0)?)?;
    write_text(&args.out_dir.join("mu_expert.csv"), &format_feature_csv(&report.mu_expert.0)?)?;
    let diff: Vec<f64> = report.mu_diff_table.values().collect();
    write_text(&args.out_dir.join("mu_diff.csv"), &format_feature_csv(&diff)?)?;
    if let Some(w) = weights {
        write_text(&args.out_dir.join("weights.csv"), &format_feature_csv(&w.0)?)?;
    }
    Ok(report)
}

pub fn evaluate_network(net: &QNetwork, args: &EvaluateArgs) -> Result<EvalReport> {
    let base = evaluation_base_seed(args.seed);
    let agent = run_policy(net, args.n, base, &args.world, args.gamma)?;
    let expert = run_expert(args.n, base, &args.world, args.gamma)?;
    let mu_expert: MuVector = match &args.demo_dir {
        Some(dir) => expert_feature_expectations(&load_demonstrations(dir, &args.world)?, args.gamma)?,
        None => expert.mu.clone(),
    };
    EvalReport::build(&agent, mu_expert, Some(&expert))
}
