//! Beamforming codebooks, uniform-linear-array steering vectors, close-in
//! log-distance path loss and the geometric multipath channel generator.
//!
//! The array is a half-wavelength ULA whose axis is the y-axis, so the
//! steering phase of element `m` toward a point at angle `θ` (measured from
//! the x-axis) is `π·m·sin θ`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub type Position = (f64, f64);

/// A finite set of unit-norm beamforming vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<Vec<Complex64>>,
    num_antennas: usize,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_antennas(&self) -> usize {
        self.num_antennas
    }

    pub fn entry(&self, index: usize) -> Option<&[Complex64]> {
        self.entries.get(index).map(Vec::as_slice)
    }

    pub fn entries(&self) -> impl Iterator<Item = &[Complex64]> {
        self.entries.iter().map(Vec::as_slice)
    }
}

/// Builds the `F`-entry DFT codebook for `M` antennas: entry `i` has
/// components `exp(j·2π·m·i/F)/√M`.
pub fn dft_codebook(num_antennas: usize, size: usize) -> Result<Codebook> {
    if num_antennas == 0 || size == 0 {
        return Err(Error::InvalidConfig(format!(
            "codebook needs M >= 1 and F >= 1 (got M = {num_antennas}, F = {size})"
        )));
    }
    let scale = 1.0 / (num_antennas as f64).sqrt();
    let entries = (0..size)
        .map(|i| {
            (0..num_antennas)
                .map(|m| {
                    let phase = 2.0 * PI * (m * i) as f64 / size as f64;
                    Complex64::from_polar(scale, phase)
                })
                .collect()
        })
        .collect();
    Ok(Codebook { entries, num_antennas })
}

/// Unit-norm ULA steering vector toward `angle` (radians).
pub fn array_response(angle: f64, num_antennas: usize) -> Vec<Complex64> {
    let scale = 1.0 / (num_antennas as f64).sqrt();
    let s = angle.sin();
    (0..num_antennas)
        .map(|m| Complex64::from_polar(scale, PI * m as f64 * s))
        .collect()
}

/// Close-in free-space-reference path loss parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathLossParams {
    /// Carrier frequency, Hz.
    pub carrier_freq: f64,
    /// Reference distance d0, meters.
    pub ref_distance: f64,
    /// Path loss exponent α.
    pub exponent: f64,
    /// Number of propagation paths L.
    pub num_paths: usize,
}

impl Default for PathLossParams {
    fn default() -> Self {
        Self { carrier_freq: 28e9, ref_distance: 1.0, exponent: 3.0, num_paths: 3 }
    }
}

impl PathLossParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.carrier_freq > 0.0
            && self.ref_distance > 0.0
            && self.exponent > 0.0
            && self.num_paths >= 1
            && self.carrier_freq.is_finite()
            && self.ref_distance.is_finite()
            && self.exponent.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad path loss parameters {self:?}")))
        }
    }

    /// Free-space loss at the reference distance, dB.
    pub fn reference_loss_db(&self) -> f64 {
        20.0 * (4.0 * PI * self.ref_distance * self.carrier_freq / SPEED_OF_LIGHT).log10()
    }
}

/// `FSPL(d0) + 10·α·log10(d/d0)`, with `d` clamped up to `d0`.
pub fn path_loss_db(distance: f64, params: &PathLossParams) -> Result<f64> {
    if !(distance > 0.0) || !distance.is_finite() {
        return Err(Error::InvalidInput(format!("distance must be positive, got {distance}")));
    }
    let d = distance.max(params.ref_distance);
    Ok(params.reference_loss_db() + 10.0 * params.exponent * (d / params.ref_distance).log10())
}

/// Linear large-scale power gain between two points (distance clamped to `d0`).
pub fn large_scale_gain(ue_pos: Position, bs_pos: Position, params: &PathLossParams) -> f64 {
    let d = distance(ue_pos, bs_pos).max(params.ref_distance);
    // d >= d0 > 0, so path_loss_db cannot fail here.
    let pl = params.reference_loss_db() + 10.0 * params.exponent * (d / params.ref_distance).log10();
    10f64.powf(-pl / 10.0)
}

pub fn distance(a: Position, b: Position) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Angle of the line-of-sight direction from `bs_pos` to `ue_pos`.
pub fn line_of_sight_angle(ue_pos: Position, bs_pos: Position) -> f64 {
    (ue_pos.1 - bs_pos.1).atan2(ue_pos.0 - bs_pos.0)
}

/// MISO channel between one BS array and one single-antenna UE.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector {
    pub coefficients: Vec<Complex64>,
    pub large_scale_gain: f64,
}

impl ChannelVector {
    pub fn norm_sqr(&self) -> f64 {
        self.coefficients.iter().map(Complex64::norm_sqr).sum()
    }

    /// `|hᴴ v|²`
    pub fn beam_gain(&self, beam: &[Complex64]) -> f64 {
        self.coefficients
            .iter()
            .zip(beam)
            .map(|(h, v)| h.conj() * v)
            .sum::<Complex64>()
            .norm_sqr()
    }
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Draws one geometric-channel realization. Path 1 follows the line of sight,
/// the remaining paths arrive from uniform angles in `[-π/2, π/2]`; every path
/// gain is complex standard normal.
pub fn sample_channel<R: Rng + ?Sized>(
    ue_pos: Position,
    bs_pos: Position,
    num_antennas: usize,
    params: &PathLossParams,
    rng: &mut R,
) -> ChannelVector {
    let gain = large_scale_gain(ue_pos, bs_pos, params);
    let los = line_of_sight_angle(ue_pos, bs_pos);
    sample_channel_with_gain(gain, los, num_antennas, params.num_paths, rng)
}

pub(crate) fn sample_channel_with_gain<R: Rng + ?Sized>(
    gain: f64,
    los_angle: f64,
    num_antennas: usize,
    num_paths: usize,
    rng: &mut R,
) -> ChannelVector {
    let amplitude = (gain / num_paths as f64).sqrt() * (num_antennas as f64).sqrt();
    let mut coefficients = vec![Complex64::new(0.0, 0.0); num_antennas];
    for path in 0..num_paths {
        let angle = if path == 0 { los_angle } else { rng.gen_range(-PI / 2.0..=PI / 2.0) };
        let g = complex_normal(rng) * amplitude;
        for (c, a) in coefficients.iter_mut().zip(array_response(angle, num_antennas)) {
            *c += g * a;
        }
    }
    ChannelVector { coefficients, large_scale_gain: gain }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn norm(v: &[Complex64]) -> f64 {
        v.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt()
    }

    fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
        a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
    }

    #[test]
    fn trivial_codebook() {
        let cb = dft_codebook(1, 1).unwrap();
        assert_eq!(cb.entry(0).unwrap(), &[Complex64::new(1.0, 0.0)]);
    }

    #[test]
    fn two_point_dft_is_orthogonal() {
        let cb = dft_codebook(2, 2).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let e0 = cb.entry(0).unwrap();
        let e1 = cb.entry(1).unwrap();
        assert!((e0[0] - Complex64::new(s, 0.0)).norm() < 1e-12);
        assert!((e0[1] - Complex64::new(s, 0.0)).norm() < 1e-12);
        assert!((e1[0] - Complex64::new(s, 0.0)).norm() < 1e-12);
        assert!((e1[1] - Complex64::new(-s, 0.0)).norm() < 1e-12);
        assert!(inner(e0, e1).norm() < 1e-12);
    }

    #[test]
    fn square_dft_entries_are_orthonormal() {
        let cb = dft_codebook(4, 4).unwrap();
        for (i, a) in cb.entries().enumerate() {
            assert!((norm(a) - 1.0).abs() < 1e-12);
            for b in cb.entries().skip(i + 1) {
                assert!(inner(a, b).norm() < 1e-9);
            }
        }
        let wide = dft_codebook(3, 7).unwrap();
        assert!(wide.entries().all(|e| (norm(e) - 1.0).abs() < 1e-9));
    }

    #[test]
    fn zero_sized_codebook_is_rejected() {
        assert!(matches!(dft_codebook(0, 4), Err(Error::InvalidConfig(_))));
        assert!(matches!(dft_codebook(4, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn steering_vectors() {
        let a = array_response(0.0, 4);
        for c in &a {
            assert!((c - Complex64::new(0.5, 0.0)).norm() < 1e-12);
        }
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let a = array_response(PI / 2.0, 2);
        assert!((a[0] - Complex64::new(s, 0.0)).norm() < 1e-12);
        assert!((a[1] - Complex64::new(-s, 0.0)).norm() < 1e-12);
        for k in 0..50 {
            let angle = -3.0 + 0.13 * k as f64;
            assert!((norm(&array_response(angle, 8)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_path_loss_at_28ghz() {
        // 20·log10(4π·1·28e9 / 299792458), evaluated independently.
        let pl = path_loss_db(1.0, &PathLossParams::default()).unwrap();
        assert!((pl - 61.390_943_848_727_76).abs() < 1e-9, "{pl}");
    }

    #[test]
    fn decade_adds_ten_alpha() {
        let p = PathLossParams::default();
        let near = path_loss_db(1.0, &p).unwrap();
        let far = path_loss_db(10.0, &p).unwrap();
        assert!((far - near - 30.0).abs() < 1e-12);
    }

    #[test]
    fn path_loss_clamps_and_rejects() {
        let p = PathLossParams::default();
        assert_eq!(path_loss_db(0.25, &p).unwrap(), path_loss_db(1.0, &p).unwrap());
        assert!(matches!(path_loss_db(0.0, &p), Err(Error::InvalidInput(_))));
        assert!(matches!(path_loss_db(-3.0, &p), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn channel_is_deterministic_given_seed() {
        let p = PathLossParams::default();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            sample_channel((40.0, -12.0), (0.0, 0.0), 4, &p, &mut rng)
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn colocated_ue_uses_reference_loss() {
        let p = PathLossParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = sample_channel((5.0, 5.0), (5.0, 5.0), 4, &p, &mut rng);
        let expected = 10f64.powf(-p.reference_loss_db() / 10.0);
        assert!((h.large_scale_gain - expected).abs() <= expected * 1e-12);
    }

    #[test]
    fn mean_channel_energy_matches_closed_form() {
        // E‖h‖² = M·G for unit-power path gains and unit-norm steering vectors.
        let p = PathLossParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let (ue, bs) = ((60.0, 80.0), (0.0, 0.0));
        let n = 100_000;
        let mut total = 0.0;
        let mut gain = 0.0;
        for _ in 0..n {
            let h = sample_channel(ue, bs, 4, &p, &mut rng);
            gain = h.large_scale_gain;
            total += h.norm_sqr();
        }
        let ratio = total / n as f64 / (4.0 * gain);
        assert!((0.98..=1.02).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn path_loss_is_monotone() {
        let p = PathLossParams { exponent: 2.3, ..PathLossParams::default() };
        let mut prev = path_loss_db(1.0, &p).unwrap();
        for k in 1..200 {
            let pl = path_loss_db(1.0 + k as f64 * 1.7, &p).unwrap();
            assert!(pl > prev);
            prev = pl;
        }
    }
}
