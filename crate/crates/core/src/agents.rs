//! Discrete batch-constrained Q-learning, the one-step rollout deployment
//! policy and the online DQN baseline.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::container::{self, Payload};
use crate::dataset::{Dataset, Minibatch, Transition};
use crate::env::{decode_action, shift_index, Env, Network, NetworkConfig};
use crate::error::{Error, FormatError, Result};
use crate::eval::{self, EvalReport, LogRow, TrainLog};
use crate::nn::{mse_loss, nll_loss, AdamState, DenseNet, Head};
use crate::repro::derive_seed;

const STREAM_Q: u64 = 0;
const STREAM_G: u64 = 1;
const STREAM_MINIBATCH: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_ENV: u64 = 4;
const STREAM_EXPLORE: u64 = 5;

/// Hyperparameters shared by the agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentParams {
    pub hidden: Vec<usize>,
    /// Batch-constraint threshold on `p(a|s) / max p`.
    pub tau: f64,
    pub gamma: f64,
    pub top_k: usize,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self { hidden: vec![64, 64], tau: 0.3, gamma: 0.9, top_k: 2 }
    }
}

impl AgentParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!("tau = {} outside [0, 1]", self.tau)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("gamma = {} outside [0, 1)", self.gamma)));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden layers must be non-empty".into()));
        }
        Ok(())
    }

    pub fn layer_dims(&self, obs_dim: usize, num_actions: usize) -> Vec<usize> {
        let mut dims = vec![obs_dim];
        dims.extend(&self.hidden);
        dims.push(num_actions);
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    /// Target mixing: `θ' ← τ_s·θ' + (1 − τ_s)·θ`.
    pub tau_s: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Online baseline only.
    pub replay_capacity: usize,
    /// Online baseline only: ε reached halfway through training.
    pub final_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 3000,
            minibatch_size: 32,
            learning_rate: 1e-4,
            tau_s: 0.995,
            eval_every: 250,
            eval_episodes: 100,
            replay_capacity: 10_000,
            final_epsilon: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.max_iterations == 0 || self.minibatch_size == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("iteration, minibatch, eval_every and eval_episodes counts must be positive");
        }
        if self.replay_capacity < self.minibatch_size {
            return bad("replay_capacity must hold at least one minibatch");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau_s) {
            return bad("tau_s must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.final_epsilon) {
            return bad("final_epsilon must lie in [0, 1]");
        }
        Ok(())
    }

    /// Seed of the evaluation episodes used during training.
    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_EVAL)
    }

    fn num_eval_points(&self) -> usize {
        self.max_iterations.div_ceil(self.eval_every)
    }

    fn is_eval_point(&self, iteration: usize) -> bool {
        iteration % self.eval_every == 0 || iteration == self.max_iterations
    }
}

/// Action selection at deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deployment {
    Bcq,
    Bcmq,
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("tau = {tau} outside [0, 1]")))
    }
}

/// Actions whose probability is at least `tau` times the largest one. The
/// most probable action always has ratio 1, so the result is never empty.
pub fn allowed_from_log_probs(log_probs: &[f64], tau: f64) -> Vec<usize> {
    let m = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    log_probs
        .iter()
        .enumerate()
        .filter(|&(_, &lp)| (lp - m).exp() >= tau)
        .map(|(a, _)| a)
        .collect()
}

pub fn allowed_actions(g: &DenseNet, state: &[f64], tau: f64) -> Result<Vec<usize>> {
    check_tau(tau)?;
    Ok(allowed_from_log_probs(&g.predict_one(state)?, tau))
}

/// Highest `q` over `candidates`, ties to the earliest candidate.
fn masked_argmax(q: &[f64], candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    for &a in &candidates[1..] {
        if q[a] > q[best] {
            best = a;
        }
    }
    best
}

pub fn greedy_action(q: &[f64]) -> usize {
    let mut best = 0;
    for a in 1..q.len() {
        if q[a] > q[best] {
            best = a;
        }
    }
    best
}

/// `y = r` for terminal transitions, otherwise
/// `r + γ·max_{a' allowed at s'} Q_target(s', a')`.
pub fn bcq_targets(q_target: &DenseNet, g: &DenseNet, batch: &Minibatch, gamma: f64, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let next_q = q_target.predict(batch.next_states.view())?;
    let next_lp = g.predict(batch.next_states.view())?;
    Ok((0..batch.len())
        .map(|i| {
            if batch.dones[i] {
                return batch.rewards[i];
            }
            let lp = next_lp.row(i).to_vec();
            let m = allowed_from_log_probs(&lp, tau)
                .into_iter()
                .map(|a| next_q[[i, a]])
                .fold(f64::NEG_INFINITY, f64::max);
            batch.rewards[i] + gamma * m
        })
        .collect())
}

/// `y = r` for terminal transitions, otherwise `r + γ·max_a' Q_target(s', a')`.
pub fn dqn_targets(q_target: &DenseNet, batch: &Minibatch, gamma: f64) -> Result<Vec<f64>> {
    let next_q = q_target.predict(batch.next_states.view())?;
    Ok((0..batch.len())
        .map(|i| {
            if batch.dones[i] {
                return batch.rewards[i];
            }
            let m = next_q.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            batch.rewards[i] + gamma * m
        })
        .collect())
}

/// One MSE step of `Q(s, a)` toward fixed targets. Returns the loss.
fn q_regression_step(q: &mut DenseNet, adam: &mut AdamState, batch: &Minibatch, targets: &[f64]) -> Result<f64> {
    let (out, cache) = q.forward(batch.states.view())?;
    let pred: Vec<f64> = batch.actions.iter().enumerate().map(|(i, &a)| out[[i, a]]).collect();
    let (loss, grad) = mse_loss(&pred, targets)?;
    let mut grad_out = Array2::zeros(out.raw_dim());
    for (i, (&a, g)) in batch.actions.iter().zip(grad).enumerate() {
        grad_out[[i, a]] = g;
    }
    let grads = q.backward(&cache, grad_out.view())?;
    adam.apply(q, &grads)?;
    Ok(loss)
}

fn check_batch(batch: &Minibatch, num_actions: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty minibatch".into()));
    }
    if batch.actions.iter().any(|&a| a >= num_actions) {
        return Err(Error::InvalidInput("minibatch action outside the action space".into()));
    }
    Ok(())
}

/// Applies the index part of an action to an observation. Positions are kept
/// and fading is not modelled, since it is not observed.
pub fn predict_next_state(state: &[f64], action: usize, config: &NetworkConfig) -> Result<Vec<f64>> {
    if state.len() != config.observation_dim() {
        return Err(Error::InvalidInput(format!(
            "observation has {} entries, expected {}",
            state.len(),
            config.observation_dim()
        )));
    }
    let deltas = decode_action(action, config.num_ues())?;
    let p_scale = (config.num_power_levels() - 1) as f64;
    let f_scale = (config.codebook_size - 1) as f64;
    let mut next = state.to_vec();
    for (u, d) in deltas.iter().enumerate() {
        let p = (state[4 * u] * p_scale).round().clamp(0.0, p_scale) as usize;
        let f = (state[4 * u + 1] * f_scale).round().clamp(0.0, f_scale) as usize;
        next[4 * u] = shift_index(p, d.power, config.num_power_levels()) as f64 / p_scale;
        next[4 * u + 1] = shift_index(f, d.beam, config.codebook_size) as f64 / f_scale;
    }
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct BcqAgent {
    pub q: DenseNet,
    pub q_target: DenseNet,
    pub g: DenseNet,
    pub q_adam: AdamState,
    pub g_adam: AdamState,
    pub params: AgentParams,
}

impl BcqAgent {
    pub fn new(obs_dim: usize, num_actions: usize, params: AgentParams, learning_rate: f64, seed: u64) -> Result<Self> {
        params.validate()?;
        let dims = params.layer_dims(obs_dim, num_actions);
        let q = DenseNet::new(&dims, Head::Linear, derive_seed(seed, STREAM_Q))?;
        let g = DenseNet::new(&dims, Head::LogSoftmax, derive_seed(seed, STREAM_G))?;
        Ok(Self::from_nets(q.clone(), q, g, params, learning_rate))
    }

    pub fn from_nets(q: DenseNet, q_target: DenseNet, g: DenseNet, params: AgentParams, learning_rate: f64) -> Self {
        let q_adam = AdamState::new(&q, learning_rate);
        let g_adam = AdamState::new(&g, learning_rate);
        Self { q, q_target, g, q_adam, g_adam, params }
    }

    pub fn num_actions(&self) -> usize {
        self.q.output_dim()
    }

    pub fn allowed_actions(&self, state: &[f64]) -> Result<Vec<usize>> {
        allowed_actions(&self.g, state, self.params.tau)
    }

    /// Greedy in `Q` over the allowed set, ties to the smallest id.
    pub fn bcq_policy(&self, state: &[f64]) -> Result<usize> {
        let allowed = self.allowed_actions(state)?;
        Ok(masked_argmax(&self.q.predict_one(state)?, &allowed))
    }

    /// The `top_k` allowed actions by `Q(s, ·)`, best first, ties to the
    /// smaller id.
    pub fn top_k(&self, state: &[f64]) -> Result<Vec<usize>> {
        let q = self.q.predict_one(state)?;
        let mut allowed = self.allowed_actions(state)?;
        allowed.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
        allowed.truncate(self.params.top_k);
        Ok(allowed)
    }

    /// Value of the predicted next state reached by `action`: the masked max
    /// of `Q` there.
    pub fn rollout_score(&self, state: &[f64], action: usize, config: &NetworkConfig) -> Result<f64> {
        let next = predict_next_state(state, action, config)?;
        let allowed = self.allowed_actions(&next)?;
        let q = self.q.predict_one(&next)?;
        Ok(allowed.into_iter().map(|a| q[a]).fold(f64::NEG_INFINITY, f64::max))
    }

    /// Scores each top-k candidate by [`Self::rollout_score`] and returns the
    /// best. Ties go to the higher `Q(s, a)`, then the smaller id.
    pub fn bcmq_rollout_action(&self, state: &[f64], config: &NetworkConfig) -> Result<usize> {
        let candidates = self.top_k(state)?;
        let mut best = candidates[0];
        let mut best_score = self.rollout_score(state, best, config)?;
        for &a in &candidates[1..] {
            let s = self.rollout_score(state, a, config)?;
            if s > best_score {
                best = a;
                best_score = s;
            }
        }
        Ok(best)
    }

    pub fn act(&self, state: &[f64], deployment: Deployment, config: &NetworkConfig) -> Result<usize> {
        match deployment {
            Deployment::Bcq => self.bcq_policy(state),
            Deployment::Bcmq => self.bcmq_rollout_action(state, config),
        }
    }

    pub fn targets(&self, batch: &Minibatch) -> Result<Vec<f64>> {
        bcq_targets(&self.q_target, &self.g, batch, self.params.gamma, self.params.tau)
    }

    /// Q regression toward the masked targets, a likelihood step on the
    /// batch-policy net and a soft target update. Returns `(q_loss, g_loss)`.
    pub fn bcq_train_step(&mut self, batch: &Minibatch, tau_s: f64) -> Result<(f64, f64)> {
        check_batch(batch, self.num_actions())?;
        let targets = self.targets(batch)?;
        let q_loss = q_regression_step(&mut self.q, &mut self.q_adam, batch, &targets)?;
        let (log_probs, cache) = self.g.forward(batch.states.view())?;
        let (g_loss, grad) = nll_loss(log_probs.view(), &batch.actions)?;
        let grads = self.g.backward(&cache, grad.view())?;
        self.g_adam.apply(&mut self.g, &grads)?;
        self.q_target.soft_update(&self.q, tau_s)?;
        Ok((q_loss, g_loss))
    }

    pub fn evaluate(&self, network: &Network, deployment: Deployment, n_episodes: usize, seed: u64) -> Result<EvalReport> {
        let cfg = network.config();
        let tag = match deployment {
            Deployment::Bcq => "bcq",
            Deployment::Bcmq => "bcmq",
        };
        eval::evaluate_policy(network, n_episodes, seed, tag, |_, obs| self.act(obs, deployment, cfg))
    }
}

/// Bounded replay memory that overwrites its oldest entry when full.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: Vec::with_capacity(capacity), next: 0 })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Minibatch> {
        if batch_size == 0 || batch_size > self.items.len() {
            return Err(Error::InvalidInput(format!(
                "cannot draw {batch_size} from {} stored transitions",
                self.items.len()
            )));
        }
        let width = self.items[0].state.len();
        let picks = (0..batch_size).map(|_| {
            let i = rng.gen_range(0..self.items.len());
            (i, &self.items[i])
        });
        Ok(Minibatch::from_transitions(picks, width))
    }
}

/// Linear decay from 1 to `final_epsilon` over the first half of training.
pub fn epsilon_at(iteration: usize, max_iterations: usize, final_epsilon: f64) -> f64 {
    let half = (max_iterations as f64 / 2.0).max(1.0);
    let frac = (iteration as f64 / half).min(1.0);
    1.0 - (1.0 - final_epsilon) * frac
}

#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub q: DenseNet,
    pub q_target: DenseNet,
    pub adam: AdamState,
    pub gamma: f64,
    pub epsilon: f64,
}

impl DqnAgent {
    pub fn new(obs_dim: usize, num_actions: usize, params: &AgentParams, learning_rate: f64, seed: u64) -> Result<Self> {
        params.validate()?;
        let dims = params.layer_dims(obs_dim, num_actions);
        let q = DenseNet::new(&dims, Head::Linear, derive_seed(seed, STREAM_Q))?;
        Ok(Self::from_nets(q.clone(), q, params.gamma, learning_rate))
    }

    pub fn from_nets(q: DenseNet, q_target: DenseNet, gamma: f64, learning_rate: f64) -> Self {
        let adam = AdamState::new(&q, learning_rate);
        Self { q, q_target, adam, gamma, epsilon: 1.0 }
    }

    pub fn num_actions(&self) -> usize {
        self.q.output_dim()
    }

    pub fn greedy(&self, state: &[f64]) -> Result<usize> {
        Ok(greedy_action(&self.q.predict_one(state)?))
    }

    /// ε-greedy. Always draws the coin first, so the stream does not depend
    /// on the network.
    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<usize> {
        if rng.gen::<f64>() < self.epsilon {
            Ok(rng.gen_range(0..self.num_actions()))
        } else {
            self.greedy(state)
        }
    }

    pub fn targets(&self, batch: &Minibatch) -> Result<Vec<f64>> {
        dqn_targets(&self.q_target, batch, self.gamma)
    }

    pub fn dqn_train_step(&mut self, batch: &Minibatch, tau_s: f64) -> Result<f64> {
        check_batch(batch, self.num_actions())?;
        let targets = self.targets(batch)?;
        let loss = q_regression_step(&mut self.q, &mut self.adam, batch, &targets)?;
        self.q_target.soft_update(&self.q, tau_s)?;
        Ok(loss)
    }

    pub fn evaluate(&self, network: &Network, n_episodes: usize, seed: u64) -> Result<EvalReport> {
        eval::evaluate_policy(network, n_episodes, seed, "dqn", |_, obs| self.greedy(obs))
    }
}

fn log_row(iteration: usize, report: &EvalReport, q_losses: &mut Vec<f64>, g_losses: &mut Vec<f64>) -> LogRow {
    let row = LogRow {
        iteration,
        mean_reward: report.mean_return(),
        std_reward: report.std_return(),
        q_loss: eval::mean(q_losses),
        g_loss: eval::mean(g_losses),
    };
    q_losses.clear();
    g_losses.clear();
    row
}

/// Trains from the fixed batch only; the environment is touched solely by
/// the periodic evaluations, on episodes seeded by [`TrainConfig::eval_seed`].
pub fn train_offline(
    agent: &mut BcqAgent,
    dataset: &Dataset,
    network: &Network,
    config: &TrainConfig,
    deployment: Deployment,
) -> Result<TrainLog> {
    config.validate()?;
    let net_cfg = network.config();
    if dataset.meta.obs_dim != net_cfg.observation_dim() || dataset.meta.num_actions != net_cfg.num_actions() {
        return Err(Error::InvalidInput("dataset does not match the network dimensions".into()));
    }
    if agent.num_actions() != net_cfg.num_actions() || agent.q.input_dim() != net_cfg.observation_dim() {
        return Err(Error::InvalidInput("agent does not match the network dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_MINIBATCH));
    let batch_size = config.minibatch_size.min(dataset.len());
    let mut log = TrainLog { rows: Vec::with_capacity(config.num_eval_points()), training_interactions: 0 };
    let (mut q_losses, mut g_losses) = (Vec::new(), Vec::new());
    for it in 1..=config.max_iterations {
        let batch = dataset.sample_minibatch(batch_size, &mut rng)?;
        let (ql, gl) = agent.bcq_train_step(&batch, config.tau_s)?;
        q_losses.push(ql);
        g_losses.push(gl);
        if config.is_eval_point(it) {
            let report = agent.evaluate(network, deployment, config.eval_episodes, config.eval_seed())?;
            log.rows.push(log_row(it, &report, &mut q_losses, &mut g_losses));
        }
    }
    Ok(log)
}

/// ε-greedy interaction, one environment step and at most one gradient step
/// per iteration. Learning starts once the memory holds a minibatch.
pub fn train_online_dqn(agent: &mut DqnAgent, network: &Network, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    let net_cfg = network.config();
    if agent.num_actions() != net_cfg.num_actions() || agent.q.input_dim() != net_cfg.observation_dim() {
        return Err(Error::InvalidInput("agent does not match the network dimensions".into()));
    }
    let mut env = Env::new(network.clone(), derive_seed(config.seed, STREAM_ENV));
    let mut explore = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_EXPLORE));
    let mut sampler = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_MINIBATCH));
    let mut memory = ReplayMemory::new(config.replay_capacity)?;
    let mut log = TrainLog { rows: Vec::with_capacity(config.num_eval_points()), training_interactions: 0 };
    let (mut q_losses, mut g_losses) = (Vec::new(), Vec::new());
    let mut obs = env.reset();
    for it in 1..=config.max_iterations {
        agent.epsilon = epsilon_at(it - 1, config.max_iterations, config.final_epsilon);
        let action = agent.act(&obs, &mut explore)?;
        let out = env.step(action)?;
        let next_obs = network.observe(&out.next_state);
        memory.push(Transition {
            state: obs.iter().map(|&x| x as f32).collect(),
            action,
            reward: out.reward as f32,
            next_state: next_obs.iter().map(|&x| x as f32).collect(),
            done: out.done,
        });
        obs = if out.done { env.reset() } else { next_obs };
        if memory.len() >= config.minibatch_size {
            let batch = memory.sample(config.minibatch_size, &mut sampler)?;
            q_losses.push(agent.dqn_train_step(&batch, config.tau_s)?);
        }
        if config.is_eval_point(it) {
            let report = agent.evaluate(network, config.eval_episodes, config.eval_seed())?;
            log.rows.push(log_row(it, &report, &mut q_losses, &mut g_losses));
        }
    }
    log.training_interactions = env.interactions();
    Ok(log)
}

const CHECKPOINT_KIND: &str = "checkpoint";

/// Network weights of a trained agent. Optimizer moments are not kept, so a
/// loaded agent is meant for deployment.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Bcq { q: DenseNet, q_target: DenseNet, g: DenseNet, params: AgentParams },
    Dqn { q: DenseNet, q_target: DenseNet, params: AgentParams },
}

impl Checkpoint {
    pub fn algo(&self) -> &'static str {
        match self {
            Checkpoint::Bcq { .. } => "bcq",
            Checkpoint::Dqn { .. } => "dqn",
        }
    }

    pub fn from_bcq(agent: &BcqAgent) -> Self {
        Checkpoint::Bcq {
            q: agent.q.clone(),
            q_target: agent.q_target.clone(),
            g: agent.g.clone(),
            params: agent.params.clone(),
        }
    }

    pub fn from_dqn(agent: &DqnAgent, params: &AgentParams) -> Self {
        Checkpoint::Dqn { q: agent.q.clone(), q_target: agent.q_target.clone(), params: params.clone() }
    }

    fn nets(&self) -> Vec<(&'static str, &DenseNet)> {
        match self {
            Checkpoint::Bcq { q, q_target, g, .. } => vec![("q", q), ("q_target", q_target), ("g", g)],
            Checkpoint::Dqn { q, q_target, .. } => vec![("q", q), ("q_target", q_target)],
        }
    }

    fn params(&self) -> &AgentParams {
        match self {
            Checkpoint::Bcq { params, .. } | Checkpoint::Dqn { params, .. } => params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let nets = self.nets();
        let values: Vec<f64> = nets.iter().flat_map(|(_, n)| n.params().copied()).collect();
        let mut meta = Map::new();
        meta.insert("algo".into(), self.algo().into());
        meta.insert("params".into(), serde_json::to_value(self.params())?);
        meta.insert(
            "nets".into(),
            Value::Array(
                nets.iter()
                    .map(|(name, n)| json!({"name": name, "head": n.head(), "dims": n.layer_dims()}))
                    .collect(),
            ),
        );
        container::encode(CHECKPOINT_KIND, 1, &meta, &Payload::F64(values))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Loads a checkpoint and checks every net against the expected
    /// `obs_dim → hidden → num_actions` architecture.
    pub fn load(path: &Path, obs_dim: usize, num_actions: usize) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, obs_dim, num_actions).map_err(|kind| Error::format(path, kind))
    }

    pub fn from_bytes(bytes: &[u8], obs_dim: usize, num_actions: usize) -> std::result::Result<Self, FormatError> {
        let corrupt = |m: String| FormatError::CorruptHeader(m);
        let c = container::decode(bytes, CHECKPOINT_KIND)?;
        let values = match c.payload {
            Payload::F64(v) => v,
            Payload::F32(_) => return Err(corrupt("checkpoint payload must be f64".into())),
        };
        let params: AgentParams = serde_json::from_value(c.meta.get("params").cloned().unwrap_or(Value::Null))
            .map_err(|e| corrupt(format!("agent parameters: {e}")))?;
        let expected = params.layer_dims(obs_dim, num_actions);
        let specs = c
            .meta
            .get("nets")
            .and_then(Value::as_array)
            .ok_or_else(|| corrupt("missing net list".into()))?;
        let mut offset = 0;
        let mut nets = Vec::new();
        for spec in specs {
            let head: Head = serde_json::from_value(spec["head"].clone()).map_err(|e| corrupt(format!("head: {e}")))?;
            let dims: Vec<usize> =
                serde_json::from_value(spec["dims"].clone()).map_err(|e| corrupt(format!("dims: {e}")))?;
            if dims != expected {
                return Err(FormatError::DimensionMismatch(format!(
                    "checkpoint net has dims {dims:?}, configuration expects {expected:?}"
                )));
            }
            let count: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
            let slice = values
                .get(offset..offset + count)
                .ok_or_else(|| corrupt("payload shorter than the declared nets".into()))?;
            let net = DenseNet::from_flat(&dims, head, slice).map_err(|e| corrupt(e.to_string()))?;
            nets.push(net);
            offset += count;
        }
        if offset != values.len() {
            return Err(FormatError::TrailingBytes((values.len() - offset) * 8));
        }
        let algo = c.meta.get("algo").and_then(Value::as_str).unwrap_or("");
        let mut it = nets.into_iter();
        let mut next = || it.next().ok_or_else(|| corrupt("too few nets".into()));
        match (algo, specs.len()) {
            ("bcq", 3) => Ok(Checkpoint::Bcq { q: next()?, q_target: next()?, g: next()?, params }),
            ("dqn", 2) => Ok(Checkpoint::Dqn { q: next()?, q_target: next()?, params }),
            _ => Err(corrupt(format!("unknown algorithm {algo:?} with {} nets", specs.len()))),
        }
    }

    pub fn into_bcq(self, learning_rate: f64) -> Result<BcqAgent> {
        match self {
            Checkpoint::Bcq { q, q_target, g, params } => Ok(BcqAgent::from_nets(q, q_target, g, params, learning_rate)),
            Checkpoint::Dqn { .. } => Err(Error::InvalidInput("checkpoint holds a DQN agent".into())),
        }
    }

    pub fn into_dqn(self, learning_rate: f64) -> Result<DqnAgent> {
        match self {
            Checkpoint::Dqn { q, q_target, params } => Ok(DqnAgent::from_nets(q, q_target, params.gamma, learning_rate)),
            Checkpoint::Bcq { .. } => Err(Error::InvalidInput("checkpoint holds a BCQ agent".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, BehaviorPolicy};
    use proptest::prelude::*;

    fn network() -> Network {
        NetworkConfig::default().build().unwrap()
    }

    /// Single-layer net whose output is exactly its bias.
    fn bias_net(bias: &[f64], head: Head, obs_dim: usize) -> DenseNet {
        let mut values = vec![0.0; obs_dim * bias.len()];
        values.extend_from_slice(bias);
        DenseNet::from_flat(&[obs_dim, bias.len()], head, &values).unwrap()
    }

    #[test]
    fn filter_hand_cases() {
        let lp: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        assert_eq!(allowed_from_log_probs(&lp, 0.5), vec![0, 1]);
        assert_eq!(allowed_from_log_probs(&lp, 0.0), vec![0, 1, 2]);
        assert_eq!(allowed_from_log_probs(&lp, 1.0), vec![0]);
        let g = bias_net(&[0.0, 2.0, 2.0, -1.0], Head::LogSoftmax, 3);
        assert_eq!(allowed_actions(&g, &[0.1, 0.2, 0.3], 1.0).unwrap(), vec![1, 2]);
        assert!(allowed_actions(&g, &[0.1, 0.2, 0.3], 1.5).is_err());
    }

    #[test]
    fn bcq_policy_hand_cases() {
        let q = bias_net(&[0.0, 5.0, 3.0, 1.0], Head::Linear, 2);
        // Probabilities ∝ [1, e^-3, 1, e^-3]: only 0 and 2 pass τ = 0.5.
        let g = bias_net(&[0.0, -3.0, 0.0, -3.0], Head::LogSoftmax, 2);
        let params = AgentParams { hidden: vec![], tau: 0.5, ..AgentParams::default() };
        let mut agent = BcqAgent::from_nets(q.clone(), q, g, params, 1e-3);
        assert_eq!(agent.allowed_actions(&[0.0, 0.0]).unwrap(), vec![0, 2]);
        assert_eq!(agent.bcq_policy(&[0.0, 0.0]).unwrap(), 2);
        agent.params.tau = 0.0;
        assert_eq!(agent.bcq_policy(&[0.0, 0.0]).unwrap(), 1);
        agent.g = bias_net(&[0.0, -3.0, -3.0, -3.0], Head::LogSoftmax, 2);
        agent.params.tau = 0.5;
        assert_eq!(agent.bcq_policy(&[0.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn ties_prefer_smaller_ids() {
        assert_eq!(greedy_action(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(masked_argmax(&[1.0, 3.0, 3.0, 3.0], &[0, 2, 3]), 2);
    }

    fn hand_batch() -> Minibatch {
        let t = |s: [f32; 2], a, r, n: [f32; 2], done| Transition {
            state: s.to_vec(),
            action: a,
            reward: r,
            next_state: n.to_vec(),
            done,
        };
        let ts = [
            t([0.0, 1.0], 0, 1.0, [1.0, 0.0], false),
            t([1.0, 0.0], 2, -2.0, [0.5, 0.5], true),
            t([0.5, 0.5], 1, 0.5, [0.0, 2.0], false),
        ];
        Minibatch::from_transitions(ts.iter().enumerate(), 2)
    }

    #[test]
    fn bellman_targets_match_hand_evaluation() {
        // Q_target(s') = W·s' + b with W = [[1, 0, -1], [0, 2, 0]], b = [0, 0, 1].
        let q_target = DenseNet::from_flat(&[2, 3], Head::Linear, &[1.0, 0.0, -1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        // G logits = [s'_0, 0, 0]: probs ∝ [e, 1, 1] at (1, 0) and uniform at (0, 2).
        let g = DenseNet::from_flat(&[2, 3], Head::LogSoftmax, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let batch = hand_batch();
        let gamma = 0.9;

        // s' = (1, 0): Q = [1, 0, 0]; ratios [1, 1/e, 1/e]. With τ = 0.5 only
        // action 0 survives, so y = 1 + 0.9·1.
        // s' = (0, 2): Q = [0, 4, 1]; all ratios 1, so y = 0.5 + 0.9·4.
        let y = bcq_targets(&q_target, &g, &batch, gamma, 0.5).unwrap();
        assert!((y[0] - 1.9).abs() < 1e-12);
        assert_eq!(y[1], -2.0);
        assert!((y[2] - 4.1).abs() < 1e-12);

        let y = dqn_targets(&q_target, &batch, gamma).unwrap();
        assert!((y[0] - 1.9).abs() < 1e-12);
        assert_eq!(y[1], -2.0);
        assert!((y[2] - 4.1).abs() < 1e-12);

        // Stronger preference for action 2 at (1, 0) changes the masked max.
        let g2 = DenseNet::from_flat(&[2, 3], Head::LogSoftmax, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let y = bcq_targets(&q_target, &g2, &batch, gamma, 0.5).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12);

        let y = bcq_targets(&q_target, &g, &batch, 0.0, 0.5).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn train_steps_reject_empty_batches() {
        let mut bcq = BcqAgent::new(2, 3, AgentParams::default(), 1e-3, 0).unwrap();
        let empty = Minibatch::from_transitions(std::iter::empty::<(usize, &Transition)>(), 2);
        assert!(bcq.bcq_train_step(&empty, 0.9).is_err());
        let mut dqn = DqnAgent::new(2, 3, &AgentParams::default(), 1e-3, 0).unwrap();
        assert!(dqn.dqn_train_step(&empty, 0.9).is_err());
    }

    #[test]
    fn train_step_moves_q_toward_targets() {
        let mut agent = BcqAgent::new(2, 3, AgentParams { hidden: vec![8], ..AgentParams::default() }, 1e-2, 4).unwrap();
        let batch = hand_batch();
        let first = agent.bcq_train_step(&batch, 0.5).unwrap();
        let mut last = first;
        for _ in 0..200 {
            last = agent.bcq_train_step(&batch, 0.5).unwrap();
        }
        assert!(last.1 < first.1, "{first:?} -> {last:?}");
        assert_ne!(agent.q, agent.q_target);
    }

    #[test]
    fn next_state_prediction() {
        let cfg = NetworkConfig::default();
        let net = cfg.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut state = net.reset(&mut rng);
        state.ues[0].power_index = 3;
        state.ues[0].beam_index = 1;
        state.ues[1].power_index = 5;
        state.ues[1].beam_index = 2;
        let obs = net.observe(&state);
        for a in 0..16 {
            let predicted = predict_next_state(&obs, a, &cfg).unwrap();
            let actual = net.observe(&net.step(&state, a, &mut rng.clone()).unwrap().next_state);
            assert_eq!(predicted, actual, "action {a}");
            for u in 0..2 {
                assert_eq!(predicted[4 * u + 2..4 * u + 4], obs[4 * u + 2..4 * u + 4]);
            }
        }
        // Everything at the bottom and pushed down stays put.
        for ue in &mut state.ues {
            ue.power_index = 0;
            ue.beam_index = 0;
        }
        let obs = net.observe(&state);
        assert_eq!(predict_next_state(&obs, 0, &cfg).unwrap(), obs);
        assert!(predict_next_state(&obs, 16, &cfg).is_err());
        assert!(predict_next_state(&obs[..3], 0, &cfg).is_err());
    }

    #[test]
    fn rollout_hand_case() {
        // One UE, two power levels, two codewords: four actions. Obs width 4.
        let cfg = NetworkConfig {
            bs_positions: vec![(0.0, 0.0)],
            power_levels: vec![1e-6, 1e-5],
            codebook_size: 2,
            ..NetworkConfig::default()
        };
        // Q depends on the power and beam entries of the observation:
        // Q(s, a) = w_a·(p, f) + b_a.
        let w = [[0.0, 0.0], [0.0, 0.0], [0.0, 3.0], [1.0, 0.0]];
        let b = [0.0, 0.0, 2.0, 2.1];
        let mut values = vec![0.0; 4 * 4];
        for (a, wa) in w.iter().enumerate() {
            values[a] = wa[0];
            values[4 + a] = wa[1];
        }
        values.extend_from_slice(&b);
        let q = DenseNet::from_flat(&[4, 4], Head::Linear, &values).unwrap();
        let g = bias_net(&[0.0; 4], Head::LogSoftmax, 4);
        let params = AgentParams { hidden: vec![], tau: 0.3, gamma: 0.9, top_k: 2 };
        let agent = BcqAgent::from_nets(q.clone(), q, g, params, 1e-3);

        // s = (p=0, f=0): Q(s) = [0, 0, 2, 2.1], top-2 = [3, 2].
        // Action 3 = (+1, +1) → ŝ = (1, 1): Q = [0, 0, 5, 3.1], score 5.
        // Action 2 = (+1, −1) → ŝ = (1, 0): Q = [0, 0, 2, 3.1], score 3.1.
        let s = [0.0, 0.0, 0.3, -0.2];
        assert_eq!(agent.top_k(&s).unwrap(), vec![3, 2]);
        assert!((agent.rollout_score(&s, 3, &cfg).unwrap() - 5.0).abs() < 1e-12);
        assert!((agent.rollout_score(&s, 2, &cfg).unwrap() - 3.1).abs() < 1e-12);
        assert_eq!(agent.bcmq_rollout_action(&s, &cfg).unwrap(), 3);
        assert_eq!(agent.bcq_policy(&s).unwrap(), 3);

        // With k = 1 the rollout reduces to the filtered greedy policy.
        let mut k1 = agent.clone();
        k1.params.top_k = 1;
        assert_eq!(k1.bcmq_rollout_action(&s, &cfg).unwrap(), k1.bcq_policy(&s).unwrap());

        // Equal scores fall back to Q(s, ·); a lower Q(s, 3) then lets action 2 win.
        let mut flipped = agent.clone();
        let mut v = values.clone();
        v[4 + 2] = -3.0;
        v[16 + 2] = 2.05;
        flipped.q = DenseNet::from_flat(&[4, 4], Head::Linear, &v).unwrap();
        // s: Q = [0, 0, 2.05, 2.1], top-2 = [3, 2].
        // ŝ(3) = (1, 1): Q = [0, 0, -0.95, 3.1] → 3.1.
        // ŝ(2) = (1, 0): Q = [0, 0, 2.05, 3.1] → 3.1. Tie → higher Q(s,·) → 3.
        assert_eq!(flipped.bcmq_rollout_action(&s, &cfg).unwrap(), 3);
        v[16 + 3] = 1.0;
        flipped.q = DenseNet::from_flat(&[4, 4], Head::Linear, &v).unwrap();
        // s: Q = [0, 0, 2.05, 1.0], top-2 = [2, 3].
        // ŝ(2) = (1, 0): Q = [0, 0, 2.05, 2.0] → 2.05.
        // ŝ(3) = (1, 1): Q = [0, 0, -0.95, 2.0] → 2.0.
        assert_eq!(flipped.bcmq_rollout_action(&s, &cfg).unwrap(), 2);
    }

    #[test]
    fn epsilon_schedule_and_policy() {
        assert_eq!(epsilon_at(0, 100, 0.05), 1.0);
        assert!((epsilon_at(25, 100, 0.05) - 0.525).abs() < 1e-12);
        assert!((epsilon_at(50, 100, 0.05) - 0.05).abs() < 1e-12);
        assert!((epsilon_at(99, 100, 0.05) - 0.05).abs() < 1e-12);

        let mut agent = DqnAgent::new(8, 16, &AgentParams::default(), 1e-3, 1).unwrap();
        let obs = [0.1; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        agent.epsilon = 0.0;
        let greedy = agent.greedy(&obs).unwrap();
        assert!((0..50).all(|_| agent.act(&obs, &mut rng).unwrap() == greedy));
        agent.epsilon = 1.0;
        let mut counts = [0usize; 16];
        for _ in 0..16_000 {
            counts[agent.act(&obs, &mut rng).unwrap()] += 1;
        }
        // Binomial(16000, 1/16): σ ≈ 30.6, so 5σ is about 153.
        assert!(counts.iter().all(|&c| (847..=1153).contains(&c)), "{counts:?}");
    }

    #[test]
    fn replay_memory_is_bounded() {
        let mut m = ReplayMemory::new(5).unwrap();
        for k in 0..12 {
            m.push(Transition { state: vec![k as f32], action: 0, reward: k as f32, next_state: vec![0.0], done: false });
            assert!(m.len() <= 5);
        }
        assert_eq!(m.len(), 5);
        let mut rewards: Vec<f32> = m.items.iter().map(|t| t.reward).collect();
        rewards.sort_by(f32::total_cmp);
        assert_eq!(rewards, vec![7.0, 8.0, 9.0, 10.0, 11.0]);
        let b = m.sample(5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b.states.dim(), (5, 1));
        assert!(m.sample(6, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(ReplayMemory::new(0).is_err());
    }

    fn small_train(max_iterations: usize, eval_every: usize) -> TrainConfig {
        TrainConfig { max_iterations, eval_every, eval_episodes: 2, seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn offline_training_bookkeeping() {
        let net = network();
        let ds = generate(&net, BehaviorPolicy::Uniform, 200, 1).unwrap();
        let run = || {
            let mut agent = BcqAgent::new(8, 16, AgentParams::default(), 1e-4, 5).unwrap();
            train_offline(&mut agent, &ds, &net, &small_train(25, 10), Deployment::Bcmq).unwrap()
        };
        let log = run();
        assert_eq!(log.rows.len(), 3);
        assert_eq!(log.rows.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![10, 20, 25]);
        assert_eq!(log.training_interactions, 0);
        assert_eq!(log, run());
        assert!(log.rows.iter().all(|r| r.q_loss.is_finite() && r.g_loss.is_finite()));

        let mut agent = BcqAgent::new(8, 16, AgentParams::default(), 1e-4, 5).unwrap();
        let other = Network::new(NetworkConfig { ues_per_bs: 2, ..NetworkConfig::default() }).unwrap();
        assert!(train_offline(&mut agent, &ds, &other, &small_train(5, 5), Deployment::Bcq).is_err());
    }

    #[test]
    fn online_training_bookkeeping() {
        let net = network();
        let run = || {
            let mut agent = DqnAgent::new(8, 16, &AgentParams::default(), 1e-4, 5).unwrap();
            let log = train_online_dqn(&mut agent, &net, &small_train(60, 20)).unwrap();
            (log, agent.epsilon)
        };
        let (log, eps) = run();
        assert_eq!(log.rows.len(), 3);
        assert_eq!(log.training_interactions, 60);
        assert!((eps - 0.05).abs() < 1e-12);
        assert!(log.rows[0].g_loss.is_nan());
        assert_eq!(format!("{:?}", log.rows), format!("{:?}", run().0.rows));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let agent = BcqAgent::new(8, 16, AgentParams::default(), 1e-4, 2).unwrap();
        let ck = Checkpoint::from_bcq(&agent);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path, 8, 16).unwrap();
        assert_eq!(back, ck);
        let restored = back.into_bcq(1e-4).unwrap();
        assert_eq!(restored.g, agent.g);
        match Checkpoint::load(&path, 12, 16) {
            Err(Error::Format { kind: FormatError::DimensionMismatch(_), .. }) => {}
            other => panic!("expected dimension mismatch, got {other:?}"),
        }

        let dqn = DqnAgent::new(8, 16, &AgentParams::default(), 1e-4, 2).unwrap();
        let ck = Checkpoint::from_dqn(&dqn, &AgentParams::default());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, 8, 16).unwrap();
        assert_eq!(back.algo(), "dqn");
        assert!(back.clone().into_bcq(1e-4).is_err());
        assert_eq!(back.into_dqn(1e-4).unwrap().q, dqn.q);
    }

    #[test]
    fn agent_params_validation() {
        assert!(AgentParams { tau: 1.1, ..AgentParams::default() }.validate().is_err());
        assert!(AgentParams { gamma: 1.0, ..AgentParams::default() }.validate().is_err());
        assert!(AgentParams { top_k: 0, ..AgentParams::default() }.validate().is_err());
        assert!(TrainConfig { eval_every: 0, ..TrainConfig::default() }.validate().is_err());
    }

    fn arb_net() -> impl Strategy<Value = (u64, Vec<f64>, f64, f64)> {
        (any::<u64>(), prop::collection::vec(-1.0f64..1.0, 8), 0.0f64..=1.0, 0.0f64..=1.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn filter_is_nonempty_monotone_and_keeps_argmax((seed, state, t1, t2) in arb_net()) {
            let g = DenseNet::new(&[8, 16, 16], Head::LogSoftmax, seed).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let wide = allowed_actions(&g, &state, lo).unwrap();
            let narrow = allowed_actions(&g, &state, hi).unwrap();
            prop_assert!(!narrow.is_empty());
            prop_assert!(narrow.iter().all(|a| wide.contains(a)));
            let lp = g.predict_one(&state).unwrap();
            prop_assert!(narrow.contains(&greedy_action(&lp)));
        }

        #[test]
        fn deployed_actions_stay_in_the_allowed_set((seed, state, tau, _) in arb_net()) {
            let params = AgentParams { hidden: vec![16], tau, ..AgentParams::default() };
            let agent = BcqAgent::new(8, 16, params, 1e-4, seed).unwrap();
            let cfg = NetworkConfig::default();
            let allowed = agent.allowed_actions(&state).unwrap();
            prop_assert!(allowed.contains(&agent.bcq_policy(&state).unwrap()));
            let top = agent.top_k(&state).unwrap();
            prop_assert!(top.iter().all(|a| allowed.contains(a)));
            prop_assert!(top.contains(&agent.bcmq_rollout_action(&state, &cfg).unwrap()));
        }
    }
}
