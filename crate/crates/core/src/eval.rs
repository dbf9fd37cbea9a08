//! Policy evaluation on fresh episodes, SINR CCDFs and learning-curve
//! aggregation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Network, NetworkState, StepOutcome};
use crate::error::{Error, Result};
use crate::repro::derive_seed;

pub const SINR_WINDOW_DB: (f64, f64) = (-5.0, 60.0);

/// Outcome of `episodes` evaluation episodes. `sinr_db` only keeps samples
/// inside [`SINR_WINDOW_DB`]; `discarded` counts the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tag: String,
    pub seed: u64,
    pub episodes: usize,
    pub returns: Vec<f64>,
    pub step_rewards: Vec<f64>,
    pub sinr_db: Vec<f64>,
    pub discarded: usize,
}

impl EvalReport {
    pub fn mean_return(&self) -> f64 {
        mean(&self.returns)
    }

    pub fn std_return(&self) -> f64 {
        population_std(&self.returns)
    }

    pub fn write_returns_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["episode", "return"])?;
        for (e, r) in self.returns.iter().enumerate() {
            w.write_record([e.to_string(), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn to_db(linear: f64) -> f64 {
    if linear > 0.0 {
        10.0 * linear.log10()
    } else {
        f64::NEG_INFINITY
    }
}

/// Seed of the environment stream for evaluation episode `episode`. Every
/// policy evaluated under the same `seed` sees the same layouts and fading.
pub fn eval_episode_seed(seed: u64, episode: u64) -> u64 {
    derive_seed(seed, episode)
}

fn run_episodes<S>(network: &Network, n_episodes: usize, seed: u64, tag: &str, mut step: S) -> Result<EvalReport>
where
    S: FnMut(&NetworkState, &mut ChaCha8Rng) -> Result<StepOutcome>,
{
    if n_episodes == 0 {
        return Err(Error::InvalidInput("evaluation needs at least one episode".into()));
    }
    let mut report = EvalReport {
        tag: tag.to_string(),
        seed,
        episodes: n_episodes,
        returns: Vec::with_capacity(n_episodes),
        step_rewards: Vec::new(),
        sinr_db: Vec::new(),
        discarded: 0,
    };
    let (lo, hi) = SINR_WINDOW_DB;
    for e in 0..n_episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_episode_seed(seed, e as u64));
        let mut state = network.reset(&mut rng);
        let mut ret = 0.0;
        loop {
            let out = step(&state, &mut rng)?;
            ret += out.reward;
            report.step_rewards.push(out.reward);
            for &s in &out.per_ue_sinr {
                let db = to_db(s);
                if (lo..=hi).contains(&db) {
                    report.sinr_db.push(db);
                } else {
                    report.discarded += 1;
                }
            }
            state = out.next_state;
            if out.done {
                break;
            }
        }
        report.returns.push(ret);
    }
    Ok(report)
}

/// Runs `policy(state, observation) -> action` on `n_episodes` fresh
/// episodes. The policy never sees the environment RNG, so channel draws are
/// matched across policies evaluated with the same `seed`.
pub fn evaluate_policy<P>(network: &Network, n_episodes: usize, seed: u64, tag: &str, mut policy: P) -> Result<EvalReport>
where
    P: FnMut(&NetworkState, &[f64]) -> Result<usize>,
{
    run_episodes(network, n_episodes, seed, tag, |state, rng| {
        let action = policy(state, &network.observe(state))?;
        network.step(state, action, rng)
    })
}

/// The exhaustive-search reference on the same episodes as
/// [`evaluate_policy`] with equal `seed`.
pub fn optimal_reference(network: &Network, n_episodes: usize, seed: u64) -> Result<EvalReport> {
    run_episodes(network, n_episodes, seed, "optimal", |state, rng| network.step_optimal(state, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcdfCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl CcdfCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["snr_db", "ccdf"])?;
        for (x, v) in self.grid.iter().zip(&self.values) {
            w.write_record([x.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// True when `self` is at least `other` at every grid point.
    pub fn dominates(&self, other: &CcdfCurve) -> bool {
        self.grid == other.grid && self.values.iter().zip(&other.values).all(|(a, b)| a >= b)
    }

    pub fn is_non_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Empirical `P(X > x)` on the grid `−5, −5 + resolution, …, 60` dB, over the
/// samples inside that window.
pub fn ccdf(samples_db: &[f64], resolution: f64) -> Result<CcdfCurve> {
    if !(resolution > 0.0) {
        return Err(Error::InvalidInput(format!("grid resolution {resolution} must be positive")));
    }
    let (lo, hi) = SINR_WINDOW_DB;
    let mut kept: Vec<f64> = samples_db.iter().copied().filter(|x| (lo..=hi).contains(x)).collect();
    if kept.is_empty() {
        return Err(Error::EmptySamples);
    }
    kept.sort_by(f64::total_cmp);
    let steps = ((hi - lo) / resolution + 1e-9).floor() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| lo + i as f64 * resolution).collect();
    let n = kept.len() as f64;
    let values = grid
        .iter()
        .map(|&x| (kept.len() - kept.partition_point(|&s| s <= x)) as f64 / n)
        .collect();
    Ok(CcdfCurve { grid, values })
}

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub q_loss: f64,
    pub g_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Environment steps taken to produce training data (zero offline).
    pub training_interactions: u64,
}

impl TrainLog {
    pub fn final_mean_reward(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean_reward)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pointwise mean and population standard deviation across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub iterations: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Band {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "mean", "lo", "hi"])?;
        for ((x, m), s) in self.iterations.iter().zip(&self.mean).zip(&self.std) {
            w.write_record([x.to_string(), m.to_string(), (m - s).to_string(), (m + s).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn aggregate_runs(logs: &[TrainLog]) -> Result<Band> {
    let first = logs.first().ok_or_else(|| Error::InvalidInput("no runs to aggregate".into()))?;
    let iterations: Vec<usize> = first.rows.iter().map(|r| r.iteration).collect();
    for log in logs {
        if log.rows.iter().map(|r| r.iteration).ne(iterations.iter().copied()) {
            return Err(Error::InvalidInput("runs do not share an evaluation grid".into()));
        }
    }
    let mut mean_v = Vec::with_capacity(iterations.len());
    let mut std_v = Vec::with_capacity(iterations.len());
    for i in 0..iterations.len() {
        // Sorting first makes the fold independent of run order.
        let mut xs: Vec<f64> = logs.iter().map(|l| l.rows[i].mean_reward).collect();
        xs.sort_by(f64::total_cmp);
        mean_v.push(mean(&xs));
        std_v.push(population_std(&xs));
    }
    Ok(Band { iterations, mean: mean_v, std: std_v })
}
