//! The fixed offline batch: generation under a behavior policy, persistence in
//! the binary container and minibatch sampling.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::container::{self, Payload};
use crate::env::Network;
use crate::error::{Error, FormatError, Result};
use crate::repro::{config_hash, derive_seed};

const KIND: &str = "dataset";

/// One `(s, a, r, s', done)` record, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: usize,
    pub reward: f32,
    pub next_state: Vec<f32>,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorPolicy {
    /// Uniform over every joint action.
    Uniform,
    /// Uniform over the first `⌈|A|/4⌉` action ids.
    Biased,
}

impl BehaviorPolicy {
    pub fn support(self, num_actions: usize) -> usize {
        match self {
            BehaviorPolicy::Uniform => num_actions,
            BehaviorPolicy::Biased => num_actions.div_ceil(4),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            BehaviorPolicy::Uniform => "uniform",
            BehaviorPolicy::Biased => "biased",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "uniform" => Some(BehaviorPolicy::Uniform),
            "biased" => Some(BehaviorPolicy::Biased),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, num_actions: usize, rng: &mut R) -> usize {
        rng.gen_range(0..self.support(num_actions))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config_hash: String,
    pub policy: BehaviorPolicy,
    pub seed: u64,
    pub obs_dim: usize,
    pub num_actions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub meta: DatasetMeta,
}

/// Seed of the environment stream for the `episode`-th behavior episode.
pub fn episode_seed(seed: u64, episode: u64) -> u64 {
    derive_seed(seed, episode)
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Rolls the behavior policy through fresh episodes until `n_samples`
/// transitions are recorded. Episode `e` draws its layout and fading from
/// [`episode_seed`]`(seed, e)`; actions come from a separate stream.
pub fn generate(network: &Network, policy: BehaviorPolicy, n_samples: usize, seed: u64) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("a dataset needs at least one sample".into()));
    }
    let cfg = network.config();
    let num_actions = cfg.num_actions();
    let mut action_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let mut transitions = Vec::with_capacity(n_samples);
    let mut episode = 0u64;
    while transitions.len() < n_samples {
        let mut env_rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, episode));
        let mut state = network.reset(&mut env_rng);
        let mut obs = network.observe(&state);
        while transitions.len() < n_samples && state.slot < cfg.episode_length {
            let action = policy.sample(num_actions, &mut action_rng);
            let out = network.step(&state, action, &mut env_rng)?;
            let next_obs = network.observe(&out.next_state);
            transitions.push(Transition {
                state: to_f32(&obs),
                action,
                reward: out.reward as f32,
                next_state: to_f32(&next_obs),
                done: out.done,
            });
            state = out.next_state;
            obs = next_obs;
        }
        episode += 1;
    }
    Ok(Dataset {
        transitions,
        meta: DatasetMeta {
            config_hash: config_hash(cfg),
            policy,
            seed,
            obs_dim: cfg.observation_dim(),
            num_actions,
        },
    })
}

/// Columnar minibatch ready for the training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub indices: Vec<usize>,
    pub states: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<bool>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn from_transitions<'a, I>(items: I, obs_dim: usize) -> Self
    where
        I: IntoIterator<Item = (usize, &'a Transition)>,
    {
        let mut indices = Vec::new();
        let mut states = Vec::new();
        let mut next_states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut dones = Vec::new();
        for (i, t) in items {
            indices.push(i);
            states.extend(t.state.iter().map(|&x| x as f64));
            next_states.extend(t.next_state.iter().map(|&x| x as f64));
            actions.push(t.action);
            rewards.push(t.reward as f64);
            dones.push(t.done);
        }
        let n = actions.len();
        Self {
            indices,
            states: Array2::from_shape_vec((n, obs_dim), states).expect("uniform observation width"),
            actions,
            rewards,
            next_states: Array2::from_shape_vec((n, obs_dim), next_states).expect("uniform observation width"),
            dones,
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Uniform sampling with replacement.
    pub fn sample_minibatch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Minibatch> {
        if self.transitions.is_empty() {
            return Err(Error::InvalidInput("cannot sample from an empty dataset".into()));
        }
        if batch_size == 0 || batch_size > self.transitions.len() {
            return Err(Error::InvalidInput(format!(
                "batch size {batch_size} outside [1, {}]",
                self.transitions.len()
            )));
        }
        let picks = (0..batch_size).map(|_| {
            let i = rng.gen_range(0..self.transitions.len());
            (i, &self.transitions[i])
        });
        Ok(Minibatch::from_transitions(picks, self.meta.obs_dim))
    }

    /// Keeps the first `n` transitions.
    pub fn truncated(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidInput(format!("cannot keep {n} of {} transitions", self.len())));
        }
        Ok(Dataset { transitions: self.transitions[..n].to_vec(), meta: self.meta.clone() })
    }

    fn record_len(&self) -> usize {
        2 * self.meta.obs_dim + 3
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = self.meta.obs_dim;
        let mut values = Vec::with_capacity(self.len() * self.record_len());
        for t in &self.transitions {
            if t.state.len() != d || t.next_state.len() != d {
                return Err(Error::InvalidInput("transition width differs from obs_dim".into()));
            }
            values.extend_from_slice(&t.state);
            values.push(t.action as f32);
            values.push(t.reward);
            values.extend_from_slice(&t.next_state);
            values.push(if t.done { 1.0 } else { 0.0 });
        }
        let meta = match serde_json::to_value(&self.meta)? {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        container::encode(KIND, self.record_len(), &meta, &Payload::F32(values))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|kind| Error::format(path, kind))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Dataset, FormatError> {
        let c = container::decode(bytes, KIND)?;
        let meta: DatasetMeta = serde_json::from_value(Value::Object(c.meta))
            .map_err(|e| FormatError::CorruptHeader(format!("dataset metadata: {e}")))?;
        let d = meta.obs_dim;
        if c.record_len != 2 * d + 3 {
            return Err(FormatError::DimensionMismatch(format!(
                "record length {} does not fit obs_dim {d}",
                c.record_len
            )));
        }
        let values = match c.payload {
            Payload::F32(v) => v,
            Payload::F64(_) => return Err(FormatError::CorruptHeader("dataset payload must be f32".into())),
        };
        let mut transitions = Vec::with_capacity(c.num_records);
        for (k, rec) in values.chunks_exact(c.record_len).enumerate() {
            let action = rec[d];
            if action < 0.0 || action.fract() != 0.0 || action as usize >= meta.num_actions {
                return Err(FormatError::CorruptHeader(format!("record {k} has invalid action {action}")));
            }
            let done = rec[2 * d + 2];
            if done != 0.0 && done != 1.0 {
                return Err(FormatError::CorruptHeader(format!("record {k} has invalid done flag {done}")));
            }
            transitions.push(Transition {
                state: rec[..d].to_vec(),
                action: action as usize,
                reward: rec[d + 1],
                next_state: rec[d + 2..2 * d + 2].to_vec(),
                done: done == 1.0,
            });
        }
        Ok(Dataset { transitions, meta })
    }
}
