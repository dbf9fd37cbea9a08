//! Two-cell downlink environment: state, joint discrete action, SINR, clipped
//! sum-SINR reward, episode dynamics and the exhaustive configuration search.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::radio::{self, ChannelVector, Codebook, PathLossParams, Position};

/// Static description of the network and the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub bs_positions: Vec<Position>,
    pub cell_radius: f64,
    pub ues_per_bs: usize,
    pub num_antennas: usize,
    pub codebook_size: usize,
    /// Transmit power levels in Watts per 15 kHz subcarrier, ascending.
    pub power_levels: Vec<f64>,
    pub episode_length: usize,
    /// Receiver temperature, Kelvin.
    pub temperature: f64,
    /// Bandwidth, Hz.
    pub bandwidth: f64,
    /// Boltzmann constant, J/K.
    pub boltzmann: f64,
    /// `(min, max)` bounds for the summed SINR reward.
    pub sinr_clip: (f64, f64),
    pub discount: f64,
    pub path_loss: PathLossParams,
    /// Largest number of joint configurations the exhaustive search may visit.
    pub search_budget: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            bs_positions: vec![(0.0, 0.0), (0.0, 255.0)],
            cell_radius: 150.0,
            ues_per_bs: 1,
            num_antennas: 4,
            codebook_size: 4,
            power_levels: log_spaced(1e-7, 1e-4, 8),
            episode_length: 20,
            temperature: 290.0,
            bandwidth: 15_000.0,
            boltzmann: 1.38e-23,
            sinr_clip: (-50.0, 200.0),
            discount: 0.9,
            path_loss: PathLossParams::default(),
            search_budget: 1_000_000,
        }
    }
}

/// `n` values from `lo` to `hi` (inclusive), evenly spaced in log scale.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

impl NetworkConfig {
    pub fn num_bs(&self) -> usize {
        self.bs_positions.len()
    }

    pub fn num_ues(&self) -> usize {
        self.bs_positions.len() * self.ues_per_bs
    }

    pub fn num_power_levels(&self) -> usize {
        self.power_levels.len()
    }

    pub fn num_actions(&self) -> usize {
        4usize.pow(self.num_ues() as u32)
    }

    pub fn serving_bs(&self, ue: usize) -> usize {
        ue / self.ues_per_bs
    }

    /// Length of the flat observation vector.
    pub fn observation_dim(&self) -> usize {
        4 * self.num_ues()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.bs_positions.is_empty() {
            return bad("at least one base station is required".into());
        }
        for (i, a) in self.bs_positions.iter().enumerate() {
            if !(a.0.is_finite() && a.1.is_finite()) {
                return bad(format!("base station {i} has a non-finite position"));
            }
            if self.bs_positions[..i].contains(a) {
                return bad(format!("base station {i} duplicates an earlier position"));
            }
        }
        if !(self.cell_radius > 0.0) {
            return bad("cell_radius must be positive".into());
        }
        if self.ues_per_bs == 0 {
            return bad("ues_per_bs must be at least 1".into());
        }
        if self.num_ues() > 12 {
            return bad(format!("{} UEs give an unrepresentable action space", self.num_ues()));
        }
        if self.num_antennas == 0 {
            return bad("num_antennas must be at least 1".into());
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2".into());
        }
        if self.power_levels.len() < 2 {
            return bad("at least two power levels are required".into());
        }
        if self.power_levels.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return bad("power levels must be finite and non-negative".into());
        }
        if self.power_levels.windows(2).any(|w| w[0] >= w[1]) {
            return bad("power levels must be strictly ascending".into());
        }
        if self.episode_length == 0 {
            return bad("episode_length must be at least 1".into());
        }
        if !(self.sinr_clip.0 < self.sinr_clip.1) {
            return bad("sinr_clip min must be below max".into());
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1)".into());
        }
        if !(self.temperature >= 0.0 && self.bandwidth >= 0.0 && self.boltzmann >= 0.0) {
            return bad("noise parameters must be non-negative".into());
        }
        self.path_loss.validate()
    }

    /// Thermal noise power `k_B · T_K · B`, Watts.
    pub fn noise_power(&self) -> f64 {
        self.boltzmann * self.temperature * self.bandwidth
    }

    pub fn build(&self) -> Result<Network> {
        Network::new(self.clone())
    }
}

/// Per-UE link parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct UeState {
    pub power_index: usize,
    pub beam_index: usize,
    pub position: Position,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub ues: Vec<UeState>,
    /// `channels[u][b]` is the channel from BS `b` to UE `u`.
    pub channels: Vec<Vec<ChannelVector>>,
    pub slot: usize,
}

impl NetworkState {
    /// Flat numeric dump: slot, then per UE (power, beam, x, y), then every
    /// channel coefficient as (re, im) in `channels[u][b][m]` order.
    pub fn to_record(&self) -> Vec<f64> {
        let mut out = vec![self.slot as f64];
        for ue in &self.ues {
            out.extend([ue.power_index as f64, ue.beam_index as f64, ue.position.0, ue.position.1]);
        }
        for row in &self.channels {
            for h in row {
                for c in &h.coefficients {
                    out.extend([c.re, c.im]);
                }
            }
        }
        out
    }

    pub fn indices(&self) -> Vec<(usize, usize)> {
        self.ues.iter().map(|u| (u.power_index, u.beam_index)).collect()
    }
}

/// Per-UE direction of change for power and beam index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UeDelta {
    pub power: i8,
    pub beam: i8,
}

impl UeDelta {
    /// Digit 0 ↔ (−1,−1), 1 ↔ (−1,+1), 2 ↔ (+1,−1), 3 ↔ (+1,+1).
    pub fn from_digit(d: usize) -> Self {
        let sign = |bit: bool| if bit { 1 } else { -1 };
        Self { power: sign(d & 2 != 0), beam: sign(d & 1 != 0) }
    }

    pub fn digit(self) -> usize {
        (usize::from(self.power > 0) << 1) | usize::from(self.beam > 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JointAction {
    pub deltas: Vec<UeDelta>,
}

impl JointAction {
    pub fn encode(&self) -> usize {
        encode_action(&self.deltas)
    }

    pub fn decode(action: usize, num_ues: usize) -> Result<Self> {
        decode_action(action, num_ues).map(|deltas| Self { deltas })
    }
}

/// Mixed-radix base-4 encoding with UE 0 in the least significant digit.
pub fn encode_action(deltas: &[UeDelta]) -> usize {
    deltas.iter().rev().fold(0, |acc, d| acc * 4 + d.digit())
}

pub fn decode_action(action: usize, num_ues: usize) -> Result<Vec<UeDelta>> {
    let size = 4usize.pow(num_ues as u32);
    if action >= size {
        return Err(Error::InvalidInput(format!("action {action} outside [0, {size})")));
    }
    let mut rest = action;
    Ok((0..num_ues)
        .map(|_| {
            let d = UeDelta::from_digit(rest % 4);
            rest /= 4;
            d
        })
        .collect())
}

pub(crate) fn shift_index(index: usize, delta: i8, len: usize) -> usize {
    (index as i64 + delta as i64).clamp(0, len as i64 - 1) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: NetworkState,
    pub reward: f64,
    pub per_ue_sinr: Vec<f64>,
    pub done: bool,
}

/// Result of the brute-force search over joint (power, beam) assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalConfig {
    /// `(power_index, beam_index)` per UE.
    pub indices: Vec<(usize, usize)>,
    pub reward: f64,
    pub evaluated: u64,
}

/// A validated network with its codebook and noise power precomputed.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    codebook: Codebook,
    noise: f64,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let codebook = radio::dft_codebook(config.num_antennas, config.codebook_size)?;
        let noise = config.noise_power();
        Ok(Self { config, codebook, noise })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn noise_power(&self) -> f64 {
        self.noise
    }

    /// Starts an episode: UEs uniform in the disk around their serving BS,
    /// middle power level, beam 0, fresh channels.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> NetworkState {
        let cfg = &self.config;
        let ues = (0..cfg.num_ues())
            .map(|u| {
                let center = cfg.bs_positions[cfg.serving_bs(u)];
                let r = cfg.cell_radius * rng.gen::<f64>().sqrt();
                let phi = rng.gen_range(0.0..2.0 * PI);
                UeState {
                    power_index: cfg.num_power_levels() / 2,
                    beam_index: 0,
                    position: (center.0 + r * phi.cos(), center.1 + r * phi.sin()),
                }
            })
            .collect::<Vec<_>>();
        let channels = self.draw_channels(&ues, rng);
        NetworkState { ues, channels, slot: 0 }
    }

    fn draw_channels<R: Rng + ?Sized>(&self, ues: &[UeState], rng: &mut R) -> Vec<Vec<ChannelVector>> {
        let cfg = &self.config;
        ues.iter()
            .map(|ue| {
                cfg.bs_positions
                    .iter()
                    .map(|&bs| radio::sample_channel(ue.position, bs, cfg.num_antennas, &cfg.path_loss, rng))
                    .collect()
            })
            .collect()
    }

    fn check_state(&self, state: &NetworkState) -> Result<()> {
        let cfg = &self.config;
        if state.ues.len() != cfg.num_ues() || state.channels.len() != cfg.num_ues() {
            return Err(Error::InvalidInput(format!(
                "state has {} UEs, network has {}",
                state.ues.len(),
                cfg.num_ues()
            )));
        }
        for (u, ue) in state.ues.iter().enumerate() {
            if ue.power_index >= cfg.num_power_levels() || ue.beam_index >= cfg.codebook_size {
                return Err(Error::InvalidInput(format!("UE {u} has out-of-range indices")));
            }
            if state.channels[u].len() != cfg.num_bs() {
                return Err(Error::InvalidInput(format!("UE {u} lacks a channel per BS")));
            }
        }
        Ok(())
    }

    /// `gains[u][b][f] = |h_{u,b}ᴴ f|²` for every codebook entry `f`.
    fn beam_gains(&self, state: &NetworkState) -> Vec<Vec<Vec<f64>>> {
        state
            .channels
            .iter()
            .map(|row| row.iter().map(|h| self.codebook.entries().map(|f| h.beam_gain(f)).collect()).collect())
            .collect()
    }

    fn sinr_from_gains(&self, gains: &[Vec<Vec<f64>>], indices: &[(usize, usize)], u: usize) -> f64 {
        let cfg = &self.config;
        let own_bs = cfg.serving_bs(u);
        let (p, f) = indices[u];
        let signal = cfg.power_levels[p] * gains[u][own_bs][f];
        let interference: f64 = indices
            .iter()
            .enumerate()
            .filter(|&(other, _)| cfg.serving_bs(other) != own_bs)
            .map(|(other, &(po, fo))| cfg.power_levels[po] * gains[u][cfg.serving_bs(other)][fo])
            .sum();
        signal / (interference + self.noise)
    }

    /// Linear SINR of UE `u`; interference comes from the UEs served by other BSs.
    pub fn sinr(&self, state: &NetworkState, u: usize) -> Result<f64> {
        self.check_state(state)?;
        if u >= self.config.num_ues() {
            return Err(Error::InvalidInput(format!("UE index {u} out of range")));
        }
        Ok(self.sinr_from_gains(&self.beam_gains(state), &state.indices(), u))
    }

    pub fn sinrs(&self, state: &NetworkState) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let gains = self.beam_gains(state);
        let idx = state.indices();
        Ok((0..self.config.num_ues()).map(|u| self.sinr_from_gains(&gains, &idx, u)).collect())
    }

    pub fn clip_reward(&self, sum_sinr: f64) -> f64 {
        let (lo, hi) = self.config.sinr_clip;
        sum_sinr.clamp(lo, hi)
    }

    /// Clipped sum of linear SINRs.
    pub fn reward(&self, state: &NetworkState) -> Result<f64> {
        Ok(self.clip_reward(self.sinrs(state)?.iter().sum()))
    }

    /// Applies `action`, redraws small-scale fading and scores the new state.
    pub fn step<R: Rng + ?Sized>(&self, state: &NetworkState, action: usize, rng: &mut R) -> Result<StepOutcome> {
        let deltas = decode_action(action, self.config.num_ues())?;
        self.check_state(state)?;
        let cfg = &self.config;
        let indices = state
            .ues
            .iter()
            .zip(&deltas)
            .map(|(ue, d)| {
                (
                    shift_index(ue.power_index, d.power, cfg.num_power_levels()),
                    shift_index(ue.beam_index, d.beam, cfg.codebook_size),
                )
            })
            .collect::<Vec<_>>();
        self.advance(state, rng, |_| indices)
    }

    /// Like [`Network::step`], but sets the next indices to the best joint
    /// configuration for the freshly drawn channels.
    pub fn step_optimal<R: Rng + ?Sized>(&self, state: &NetworkState, rng: &mut R) -> Result<StepOutcome> {
        self.check_state(state)?;
        self.search_size()?;
        self.advance(state, rng, |next| self.search(next).indices)
    }

    fn advance<R, F>(&self, state: &NetworkState, rng: &mut R, choose: F) -> Result<StepOutcome>
    where
        R: Rng + ?Sized,
        F: FnOnce(&NetworkState) -> Vec<(usize, usize)>,
    {
        let t_max = self.config.episode_length;
        if state.slot >= t_max {
            return Err(Error::EpisodeFinished(state.slot));
        }
        let mut next = NetworkState {
            ues: state.ues.clone(),
            channels: self.draw_channels(&state.ues, rng),
            slot: state.slot + 1,
        };
        let chosen = choose(&next);
        for (ue, (p, f)) in next.ues.iter_mut().zip(chosen) {
            ue.power_index = p;
            ue.beam_index = f;
        }
        let per_ue_sinr = self.sinrs(&next)?;
        let reward = self.clip_reward(per_ue_sinr.iter().sum());
        let done = next.slot == t_max;
        Ok(StepOutcome { next_state: next, reward, per_ue_sinr, done })
    }

    fn search_size(&self) -> Result<u64> {
        let cfg = &self.config;
        let per_ue = (cfg.num_power_levels() * cfg.codebook_size) as u128;
        let total = per_ue.checked_pow(cfg.num_ues() as u32).unwrap_or(u128::MAX);
        if total > cfg.search_budget as u128 {
            return Err(Error::SearchTooLarge { candidates: total, budget: cfg.search_budget });
        }
        Ok(total as u64)
    }

    /// Brute force over all `(P·F)^N_UE` joint assignments at the state's
    /// channels. Assignments with equal clipped reward are ranked by their
    /// unclipped sum-SINR; exact ties keep the lexicographically smallest.
    pub fn exhaustive_optimal(&self, state: &NetworkState) -> Result<OptimalConfig> {
        self.check_state(state)?;
        self.search_size()?;
        Ok(self.search(state))
    }

    fn search(&self, state: &NetworkState) -> OptimalConfig {
        let cfg = &self.config;
        let gains = self.beam_gains(state);
        let n = cfg.num_ues();
        let (np, nf) = (cfg.num_power_levels(), cfg.codebook_size);
        let mut current = vec![(0usize, 0usize); n];
        let mut best = OptimalConfig { indices: current.clone(), reward: f64::NEG_INFINITY, evaluated: 0 };
        let mut best_sum = f64::NEG_INFINITY;
        loop {
            let sum: f64 = (0..n).map(|u| self.sinr_from_gains(&gains, &current, u)).sum();
            let r = self.clip_reward(sum);
            best.evaluated += 1;
            if r > best.reward || (r == best.reward && sum > best_sum) {
                best.reward = r;
                best_sum = sum;
                best.indices.clone_from(&current);
            }
            // Odometer with the last UE's beam as the fastest digit, so the
            // visiting order is lexicographic in (p0, f0, p1, f1, ...).
            let mut pos = n;
            loop {
                if pos == 0 {
                    return best;
                }
                pos -= 1;
                let slot = &mut current[pos];
                slot.1 += 1;
                if slot.1 < nf {
                    break;
                }
                slot.1 = 0;
                slot.0 += 1;
                if slot.0 < np {
                    break;
                }
                slot.0 = 0;
            }
        }
    }

    /// Flat observation: per UE `[power/(P−1), beam/(F−1), dx/R, dy/R]`, where
    /// `(dx, dy)` is the offset from the serving BS.
    pub fn observe(&self, state: &NetworkState) -> Vec<f64> {
        let cfg = &self.config;
        let p_scale = (cfg.num_power_levels() - 1) as f64;
        let f_scale = (cfg.codebook_size - 1) as f64;
        let mut obs = Vec::with_capacity(cfg.observation_dim());
        for (u, ue) in state.ues.iter().enumerate() {
            let bs = cfg.bs_positions[cfg.serving_bs(u)];
            obs.push(ue.power_index as f64 / p_scale);
            obs.push(ue.beam_index as f64 / f_scale);
            obs.push((ue.position.0 - bs.0) / cfg.cell_radius);
            obs.push((ue.position.1 - bs.1) / cfg.cell_radius);
        }
        obs
    }
}

/// Gym-style wrapper owning the network, the current episode and its RNG.
/// Counts every `step` call so callers can prove they never touched it.
#[derive(Debug, Clone)]
pub struct Env {
    network: Network,
    rng: ChaCha8Rng,
    state: Option<NetworkState>,
    interactions: u64,
}

impl Env {
    pub fn new(network: Network, seed: u64) -> Self {
        Self { network, rng: ChaCha8Rng::seed_from_u64(seed), state: None, interactions: 0 }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn interactions(&self) -> u64 {
        self.interactions
    }

    pub fn state(&self) -> Option<&NetworkState> {
        self.state.as_ref()
    }

    pub fn reset(&mut self) -> Vec<f64> {
        let s = self.network.reset(&mut self.rng);
        let obs = self.network.observe(&s);
        self.state = Some(s);
        obs
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::InvalidState("step called before reset".into()))?;
        let out = self.network.step(state, action, &mut self.rng)?;
        self.interactions += 1;
        self.state = Some(out.next_state.clone());
        Ok(out)
    }
}
