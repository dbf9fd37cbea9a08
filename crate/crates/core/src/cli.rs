//! Command-line front end: dataset generation, training, evaluation and
//! sweeps, each writing CSVs plus a manifest under `<out>/<command>/<run-id>/`.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::agents::{train_offline, train_online_dqn, AgentParams, BcqAgent, Checkpoint, Deployment, DqnAgent, TrainConfig};
use crate::dataset::{self, BehaviorPolicy, Dataset};
use crate::env::NetworkConfig;
use crate::error::{Error, Result};
use crate::eval::{self, aggregate_runs, ccdf, optimal_reference, EvalReport, TrainLog};
use crate::repro::{config_hash, derive_seed, repeat_seed};

const STREAM_FINAL_EVAL: u64 = 7;
const STREAM_RANDOM_POLICY: u64 = 8;

/// Every experiment knob in one flat JSON object. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub network: NetworkConfig,
    pub hidden: Vec<usize>,
    pub tau: f64,
    pub top_k: usize,
    pub max_iterations: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub tau_s: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub replay_capacity: usize,
    pub final_epsilon: f64,
    /// Deployment used by the in-training evaluations of the offline agent.
    pub deployment: Deployment,
    pub dataset_size: usize,
    pub behavior_policy: BehaviorPolicy,
    pub final_eval_episodes: usize,
    pub ccdf_resolution: f64,
    pub repeats: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let agent = AgentParams::default();
        let train = TrainConfig::default();
        Self {
            network: NetworkConfig::default(),
            hidden: agent.hidden,
            tau: agent.tau,
            top_k: agent.top_k,
            max_iterations: train.max_iterations,
            minibatch_size: train.minibatch_size,
            learning_rate: train.learning_rate,
            tau_s: train.tau_s,
            eval_every: train.eval_every,
            eval_episodes: train.eval_episodes,
            replay_capacity: train.replay_capacity,
            final_epsilon: train.final_epsilon,
            deployment: Deployment::Bcmq,
            dataset_size: 20_000,
            behavior_policy: BehaviorPolicy::Uniform,
            final_eval_episodes: 1000,
            ccdf_resolution: 0.5,
            repeats: 10,
            workers: 1,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn agent_params(&self) -> AgentParams {
        AgentParams { hidden: self.hidden.clone(), tau: self.tau, gamma: self.network.discount, top_k: self.top_k }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            max_iterations: self.max_iterations,
            minibatch_size: self.minibatch_size,
            learning_rate: self.learning_rate,
            tau_s: self.tau_s,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            replay_capacity: self.replay_capacity,
            final_epsilon: self.final_epsilon,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.agent_params().validate()?;
        self.train_config(self.seed).validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.dataset_size == 0 || self.final_eval_episodes == 0 || self.repeats == 0 || self.workers == 0 {
            return bad("dataset_size, final_eval_episodes, repeats and workers must be positive");
        }
        if !(self.ccdf_resolution > 0.0) {
            return bad("ccdf_resolution must be positive");
        }
        Ok(())
    }

    /// Seed of the final evaluation episodes. Equal for every mode, so
    /// evaluations of different policies see matched channels.
    pub fn final_eval_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_FINAL_EVAL)
    }

    fn known_keys() -> BTreeSet<String> {
        match serde_json::to_value(ExperimentConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => BTreeSet::new(),
        }
    }

    fn from_value(value: Value) -> Result<Self> {
        if let Value::Object(m) = &value {
            let known = Self::known_keys();
            if let Some(k) = m.keys().find(|k| !known.contains(*k)) {
                return Err(Error::InvalidConfig(format!("unknown config key `{k}`")));
            }
        } else {
            return Err(Error::InvalidConfig("config must be a JSON object".into()));
        }
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads `path` (or the defaults) and applies `key=value` overrides, where
    /// `value` is JSON or else a bare string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
            }
            None => json!({}),
        };
        let known = Self::known_keys();
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{item}` is not key=value")))?;
            if !known.contains(key) {
                return Err(Error::Usage(format!("unknown config key `{key}`")));
            }
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            if let Value::Object(m) = &mut value {
                m.insert(key.to_string(), parsed);
            }
        }
        let config = Self::from_value(value)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Parser)]
#[command(name = "bcmq", version, about = "Offline BCQ/BCMQ beam and power control experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Behavior policy (overrides the config).
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Uniform,
    Biased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algo {
    Bcq,
    Dqn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Bcq,
    Bcmq,
    Dqn,
    Optimal,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Lr,
    BatchSize,
    Quality,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an offline dataset under the behavior policy.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train an agent and write its log and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        algo: Algo,
        /// Dataset file (bcq only).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a policy on fresh episodes and write returns and the SINR CCDF.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Checkpoint file (bcq, bcmq and dqn modes).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Repeat offline training over a list of values of one knob.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Repeats per value (overrides the config).
        #[arg(long)]
        repeats: Option<usize>,
    },
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) => 2,
        Error::InvalidConfig(_) => 3,
        Error::Format { .. } => 4,
        Error::Io(_) => 5,
        _ => 1,
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(p) = common.policy {
        let tag = match p {
            PolicyArg::Uniform => "uniform",
            PolicyArg::Biased => "biased",
        };
        overrides.push(format!("behavior_policy={tag}"));
    }
    ExperimentConfig::load(common.config.as_deref(), &overrides)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

/// Output directory and manifest of one command invocation.
struct Run {
    dir: PathBuf,
    manifest: Map<String, Value>,
    outputs: Vec<String>,
}

impl Run {
    fn start(out: &Path, command: &str, config: &ExperimentConfig, extra: Value) -> Result<Self> {
        let identity = json!({ "command": command, "config": config, "extra": extra });
        let run_id = config_hash(&identity);
        let dir = out.join(command).join(&run_id);
        fs::create_dir_all(&dir)?;
        let mut manifest = Map::new();
        manifest.insert("command".into(), command.into());
        manifest.insert("run_id".into(), run_id.into());
        manifest.insert("config_hash".into(), config_hash(config).into());
        manifest.insert("seed".into(), config.seed.into());
        manifest.insert("extra".into(), extra);
        manifest.insert("config".into(), serde_json::to_value(config)?);
        Ok(Self { dir, manifest, outputs: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.manifest.insert("outputs".into(), self.outputs.clone().into());
        let text = serde_json::to_string_pretty(&Value::Object(self.manifest))?;
        fs::write(self.dir.join("manifest.json"), text + "\n")?;
        Ok(self.dir)
    }
}

pub fn cmd_gen_data(common: &Common) -> Result<PathBuf> {
    let config = resolve(common)?;
    let network = config.network.build()?;
    let ds = dataset::generate(&network, config.behavior_policy, config.dataset_size, config.seed)?;
    let mut run = Run::start(&common.out, "gen-data", &config, json!({ "policy": config.behavior_policy.tag() }))?;
    ds.save(&run.path("dataset.bin"))?;
    println!("wrote {} transitions to {}", ds.len(), run.dir.join("dataset.bin").display());
    run.finish()
}

pub fn cmd_train(common: &Common, algo: Algo, dataset_path: Option<&Path>) -> Result<PathBuf> {
    let config = resolve(common)?;
    let network = config.network.build()?;
    let params = config.agent_params();
    let train = config.train_config(config.seed);
    let (obs_dim, num_actions) = (config.network.observation_dim(), config.network.num_actions());
    match (algo, dataset_path) {
        (Algo::Bcq, None) => return Err(Error::Usage("--algo bcq needs --dataset".into())),
        (Algo::Dqn, Some(_)) => return Err(Error::Usage("--algo dqn learns online and takes no --dataset".into())),
        _ => {}
    }
    let (log, checkpoint, extra) = match algo {
        Algo::Bcq => {
            let path = dataset_path.expect("checked above");
            let ds = Dataset::load(path)?;
            if ds.meta.config_hash != config_hash(&config.network) {
                return Err(Error::InvalidConfig("dataset was generated under a different network config".into()));
            }
            let mut agent = BcqAgent::new(obs_dim, num_actions, params, train.learning_rate, config.seed)?;
            let log = train_offline(&mut agent, &ds, &network, &train, config.deployment)?;
            (log, Checkpoint::from_bcq(&agent), json!({ "algo": "bcq", "dataset": file_digest(path)? }))
        }
        Algo::Dqn => {
            let mut agent = DqnAgent::new(obs_dim, num_actions, &params, train.learning_rate, config.seed)?;
            let log = train_online_dqn(&mut agent, &network, &train)?;
            (log, Checkpoint::from_dqn(&agent, &params), json!({ "algo": "dqn" }))
        }
    };
    let mut run = Run::start(&common.out, "train", &config, extra)?;
    log.write_csv(&run.path("log.csv"))?;
    checkpoint.save(&run.path("checkpoint.bin"))?;
    run.manifest.insert("training_interactions".into(), log.training_interactions.into());
    if let Some(r) = log.final_mean_reward() {
        println!("final mean reward {r:.4}");
    }
    run.finish()
}

fn evaluate_mode(config: &ExperimentConfig, mode: Mode, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let network = config.network.build()?;
    let (obs_dim, num_actions) = (config.network.observation_dim(), config.network.num_actions());
    let (n, seed) = (config.final_eval_episodes, config.final_eval_seed());
    let load = || -> Result<Checkpoint> {
        let path = checkpoint.ok_or_else(|| Error::Usage("this mode needs --checkpoint".into()))?;
        Checkpoint::load(path, obs_dim, num_actions)
    };
    match mode {
        Mode::Bcq | Mode::Bcmq => {
            let agent = load()?.into_bcq(config.learning_rate).map_err(|e| Error::Usage(e.to_string()))?;
            let deployment = if mode == Mode::Bcq { Deployment::Bcq } else { Deployment::Bcmq };
            agent.evaluate(&network, deployment, n, seed)
        }
        Mode::Dqn => load()?.into_dqn(config.learning_rate).map_err(|e| Error::Usage(e.to_string()))?.evaluate(&network, n, seed),
        Mode::Optimal => optimal_reference(&network, n, seed),
        Mode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_RANDOM_POLICY));
            eval::evaluate_policy(&network, n, seed, "random", |_, _| Ok(rng.gen_range(0..num_actions)))
        }
    }
}

pub fn cmd_eval(common: &Common, mode: Mode, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let config = resolve(common)?;
    if matches!(mode, Mode::Optimal | Mode::Random) && checkpoint.is_some() {
        return Err(Error::Usage("optimal and random modes take no --checkpoint".into()));
    }
    let report = evaluate_mode(&config, mode, checkpoint)?;
    let digest = checkpoint.map(file_digest).transpose()?;
    let mode_tag = report.tag.clone();
    let mut run = Run::start(&common.out, "eval", &config, json!({ "mode": mode_tag, "checkpoint": digest }))?;
    report.write_returns_csv(&run.path("returns.csv"))?;
    ccdf(&report.sinr_db, config.ccdf_resolution)?.write_csv(&run.path("ccdf.csv"))?;
    let mut w = csv::Writer::from_path(run.path("summary.csv"))?;
    w.write_record(["mode", "episodes", "mean_return", "std_return", "retained_sinr_samples", "discarded_sinr_samples"])?;
    w.write_record([
        report.tag.clone(),
        report.episodes.to_string(),
        report.mean_return().to_string(),
        report.std_return().to_string(),
        report.sinr_db.len().to_string(),
        report.discarded.to_string(),
    ])?;
    w.flush()?;
    println!("{} mean return {:.4} over {} episodes", report.tag, report.mean_return(), report.episodes);
    run.finish()
}

/// Runs `jobs` on `workers` threads; results come back in job order.
pub fn run_pool<T, F>(jobs: usize, workers: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..jobs).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let out = job(i);
                *slots[i].lock().expect("result slot") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

/// One offline run: dataset from the behavior policy, BCQ training.
pub fn offline_run(config: &ExperimentConfig, seed: u64) -> Result<TrainLog> {
    let network = config.network.build()?;
    let ds = dataset::generate(&network, config.behavior_policy, config.dataset_size, seed)?;
    let train = config.train_config(seed);
    let mut agent = BcqAgent::new(
        config.network.observation_dim(),
        config.network.num_actions(),
        config.agent_params(),
        train.learning_rate,
        seed,
    )?;
    train_offline(&mut agent, &ds, &network, &train, config.deployment)
}

fn apply_axis(base: &ExperimentConfig, axis: Axis, value: &str) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    let bad = || Error::Usage(format!("invalid value `{value}` for axis {axis:?}"));
    match axis {
        Axis::Lr => c.learning_rate = value.parse().map_err(|_| bad())?,
        Axis::BatchSize => c.dataset_size = value.parse().map_err(|_| bad())?,
        Axis::Quality => c.behavior_policy = BehaviorPolicy::from_tag(value).ok_or_else(bad)?,
    }
    c.validate()?;
    Ok(c)
}

pub fn cmd_sweep(common: &Common, axis: Axis, values: &[String], repeats: Option<usize>) -> Result<PathBuf> {
    let mut config = resolve(common)?;
    if let Some(r) = repeats {
        if r == 0 {
            return Err(Error::Usage("--repeats must be positive".into()));
        }
        config.repeats = r;
    }
    if values.is_empty() {
        return Err(Error::Usage("--values needs at least one value".into()));
    }
    let configs = values.iter().map(|v| apply_axis(&config, axis, v)).collect::<Result<Vec<_>>>()?;
    let axis_tag = match axis {
        Axis::Lr => "lr",
        Axis::BatchSize => "batch_size",
        Axis::Quality => "quality",
    };
    let mut run = Run::start(&common.out, "sweep", &config, json!({ "axis": axis_tag, "values": values }))?;
    let repeats = config.repeats;
    let results = run_pool(configs.len() * repeats, config.workers, |j| {
        offline_run(&configs[j / repeats], repeat_seed(config.seed, (j % repeats) as u64))
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut summary = csv::Writer::from_path(run.path("summary.csv"))?;
    summary.write_record(["axis", "value", "repeats", "final_mean", "final_std"])?;
    for (v, logs) in values.iter().zip(results.chunks(repeats)) {
        let band = aggregate_runs(logs)?;
        band.write_csv(&run.path(&format!("{axis_tag}_{v}.csv")))?;
        summary.write_record([
            axis_tag.to_string(),
            v.clone(),
            repeats.to_string(),
            band.mean.last().copied().unwrap_or(f64::NAN).to_string(),
            band.std.last().copied().unwrap_or(f64::NAN).to_string(),
        ])?;
    }
    summary.flush()?;
    run.finish()
}

pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::GenData { common } => cmd_gen_data(&common),
        Command::Train { common, algo, dataset } => cmd_train(&common, algo, dataset.as_deref()),
        Command::Eval { common, mode, checkpoint } => cmd_eval(&common, mode, checkpoint.as_deref()),
        Command::Sweep { common, axis, values, repeats } => cmd_sweep(&common, axis, &values, repeats),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
