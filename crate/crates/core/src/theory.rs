//! Gradient reversal on finite sums of plane waves.
//!
//! A test function is `f(x) = Σⱼ aⱼ cos(ξⱼ·x + φⱼ)`. Its spectrum is a set of
//! point masses, so the band split, the band mass and every gradient are
//! exact and the reversal bound becomes a plain inequality between numbers.
//!
//! For a band `B(ωu, δ)` and `x₁ = x₀ + (π/ω)u`, each in-band wave shifts its
//! phase by `π + m` with `|m| ≤ πδ/ω`, so
//!
//! ```text
//! ‖∇f_h(x₀) + ∇f_h(x₁)‖ ≤ Σ_band |aⱼ|‖ξⱼ‖·|m| ≤ π(δ/ω)·M,   M = Σ_band |aⱼ|‖ξⱼ‖.
//! ```
//!
//! `T = π(δ/ω)M` is the distortion term. With `L = ‖∇f_h(x₀)‖` and
//! `εL ≥ sup‖∇f_l‖`, the normalized gradients satisfy
//! `‖g₀ + g₁‖ ≤ 2(T + 2εL) / ((1 − ε)L − T)` whenever `(1 − ε)L > T`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthdata::{stable_hash, Rng};

/// Absolute slack used when comparing measured quantities with bounds.
pub const COMPARISON_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid band: {0}")]
    InvalidBand(String),
    #[error("high-frequency gradients do not dominate: (1 - eps) L = {lhs} <= T = {distortion}")]
    Assumption3 { lhs: f64, distortion: f64 },
    #[error("invalid bound inputs: {0}")]
    InvalidInput(String),
    #[error("zero gradient at {0}")]
    ZeroGradient(&'static str),
    #[error("low-frequency ratio eps = {0} is not below 1")]
    EpsTooLarge(f64),
    #[error("zero vector")]
    ZeroVector,
    #[error("eta = {0} is outside (0, pi)")]
    EtaOutOfRange(f64),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a cos(ξ·x + φ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneWave {
    pub amplitude: f64,
    pub frequency: Vec<f64>,
    pub phase: f64,
}

impl PlaneWave {
    fn canonical(mut self) -> Self {
        if let Some(&first) = self.frequency.iter().find(|v| **v != 0.0) {
            if first < 0.0 {
                // cos(-ξ·x + φ) = cos(ξ·x - φ)
                self.frequency.iter_mut().for_each(|v| *v = -*v);
                self.phase = -self.phase;
            }
        }
        self
    }

    fn argument(&self, x: &[f64]) -> f64 {
        dot(&self.frequency, x) + self.phase
    }

    /// `|a|·‖ξ‖`, the sup of this wave's gradient norm.
    pub fn gradient_scale(&self) -> f64 {
        self.amplitude.abs() * norm(&self.frequency)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneWaveSum {
    dim: usize,
    waves: Vec<PlaneWave>,
}

impl PlaneWaveSum {
    /// Builds the sum, rewriting each frequency so its first nonzero
    /// component is positive.
    pub fn new(dim: usize, waves: Vec<PlaneWave>) -> Result<Self, TheoryError> {
        for w in &waves {
            if w.frequency.len() != dim {
                return Err(TheoryError::Dimension {
                    expected: dim,
                    got: w.frequency.len(),
                });
            }
        }
        Ok(Self {
            dim,
            waves: waves.into_iter().map(PlaneWave::canonical).collect(),
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, waves: vec![] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn waves(&self) -> &[PlaneWave] {
        &self.waves
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }

    fn check(&self, x: &[f64]) -> Result<(), TheoryError> {
        if x.len() != self.dim {
            return Err(TheoryError::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, TheoryError> {
        self.check(x)?;
        Ok(self
            .waves
            .iter()
            .map(|w| w.amplitude * w.argument(x).cos())
            .sum())
    }
}

/// `∇f(x) = −Σⱼ aⱼ sin(ξⱼ·x + φⱼ) ξⱼ`.
pub fn grad_at(f: &PlaneWaveSum, x: &[f64]) -> Result<Vec<f64>, TheoryError> {
    f.check(x)?;
    let mut g = vec![0.0; f.dim];
    for w in &f.waves {
        let s = -w.amplitude * w.argument(x).sin();
        for (gi, xi) in g.iter_mut().zip(&w.frequency) {
            *gi += s * xi;
        }
    }
    Ok(g)
}

/// The ball of radius `delta` around `omega·u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    u: Vec<f64>,
    omega: f64,
    delta: f64,
}

impl BandSpec {
    pub fn new(u: Vec<f64>, omega: f64, delta: f64) -> Result<Self, TheoryError> {
        if u.is_empty() || (norm(&u) - 1.0).abs() > 1e-12 {
            return Err(TheoryError::InvalidBand(format!(
                "direction must be a unit vector, has norm {}",
                norm(&u)
            )));
        }
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(TheoryError::InvalidBand(format!("omega = {omega}")));
        }
        if !(delta > 0.0 && delta < omega) {
            return Err(TheoryError::InvalidBand(format!(
                "need 0 < delta < omega, got delta = {delta}, omega = {omega}"
            )));
        }
        Ok(Self { u, omega, delta })
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Copy with a different bandwidth.
    pub fn with_delta(&self, delta: f64) -> Result<Self, TheoryError> {
        Self::new(self.u.clone(), self.omega, delta)
    }

    /// Whether the real wave at `±ξ` has spectral mass in the band. Since
    /// `δ < ω` at most one of the two signs can qualify.
    pub fn contains(&self, xi: &[f64]) -> bool {
        let dist = |sign: f64| {
            xi.iter()
                .zip(&self.u)
                .map(|(x, u)| (sign * x - self.omega * u).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        dist(1.0) <= self.delta || dist(-1.0) <= self.delta
    }

    /// `(π/ω)·u`.
    pub fn half_period_shift(&self) -> Vec<f64> {
        self.u.iter().map(|u| PI / self.omega * u).collect()
    }
}

/// Partitions the waves of `f` into in-band (`f_h`) and the rest (`f_l`).
pub fn band_split(f: &PlaneWaveSum, band: &BandSpec) -> (PlaneWaveSum, PlaneWaveSum) {
    let (high, low): (Vec<_>, Vec<_>) = f
        .waves
        .iter()
        .cloned()
        .partition(|w| band.contains(&w.frequency));
    (
        PlaneWaveSum {
            dim: f.dim,
            waves: high,
        },
        PlaneWaveSum {
            dim: f.dim,
            waves: low,
        },
    )
}

/// `M = Σⱼ |aⱼ|·‖ξⱼ‖` over the given waves.
pub fn band_mass(f_h: &PlaneWaveSum) -> f64 {
    f_h.waves.iter().map(PlaneWave::gradient_scale).sum()
}

/// `T = π(δ/ω)·M`.
pub fn distortion(band: &BandSpec, mass: f64) -> f64 {
    PI * (band.delta / band.omega) * mass
}

/// `2(T + 2εL) / ((1 − ε)L − T)`, defined only when `(1 − ε)L > T`.
pub fn reversal_bound(l: f64, eps: f64, distortion: f64) -> Result<f64, TheoryError> {
    if !(l > 0.0 && l.is_finite())
        || eps.is_nan()
        || eps < 0.0
        || distortion.is_nan()
        || distortion < 0.0
    {
        return Err(TheoryError::InvalidInput(format!(
            "L = {l}, eps = {eps}, T = {distortion}"
        )));
    }
    let denom = (1.0 - eps) * l - distortion;
    if denom.is_nan() || denom <= 0.0 {
        return Err(TheoryError::Assumption3 {
            lhs: (1.0 - eps) * l,
            distortion,
        });
    }
    Ok(2.0 * (distortion + 2.0 * eps * l) / denom)
}

/// `(‖a/‖a‖ + b/‖b‖‖, 2‖a + b‖ / min(‖a‖, ‖b‖))`.
pub fn unit_sum_inequality(a: &[f64], b: &[f64]) -> Result<(f64, f64), TheoryError> {
    if a.len() != b.len() {
        return Err(TheoryError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(TheoryError::ZeroVector);
    }
    let unit_sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x / na + y / nb).collect();
    let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
    Ok((norm(&unit_sum), 2.0 * norm(&sum) / na.min(nb)))
}

/// True when `bound_rhs ≤ 2 sin(η/2)`, which forces the angle between the
/// normalized gradients to be at least `π − η`.
pub fn angle_guarantee(bound_rhs: f64, eta: f64) -> Result<bool, TheoryError> {
    if !(eta > 0.0 && eta < PI) {
        return Err(TheoryError::EtaOutOfRange(eta));
    }
    Ok(bound_rhs <= 2.0 * (eta / 2.0).sin())
}

/// Every quantity involved in one reversal check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversalReport {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    /// `‖∇f_h(x₀)‖`
    pub l: f64,
    pub eps: f64,
    pub band_mass: f64,
    /// `π(δ/ω)M`
    pub distortion: f64,
    pub m_over_l: f64,
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
    pub measured_sum_norm: f64,
    /// Absent when the dominance condition fails.
    pub bound_rhs: Option<f64>,
    /// Angle between `g₀` and `g₁`, in `[0, π]`.
    pub angle: f64,
    pub assumption3_ok: bool,
    pub bound_holds: bool,
    /// `‖∇f_h(x₀) + ∇f_h(x₁)‖`
    pub high_sum_norm: f64,
    pub high_sum_ok: bool,
    pub grad_norm_x0: f64,
    pub grad_norm_x1: f64,
    pub grad_floor_ok: bool,
}

pub fn verify_reversal(
    f: &PlaneWaveSum,
    band: &BandSpec,
    x0: &[f64],
) -> Result<ReversalReport, TheoryError> {
    f.check(x0)?;
    if band.u.len() != f.dim {
        return Err(TheoryError::Dimension {
            expected: f.dim,
            got: band.u.len(),
        });
    }
    let (f_h, f_l) = band_split(f, band);
    let x1: Vec<f64> = x0
        .iter()
        .zip(band.half_period_shift())
        .map(|(x, s)| x + s)
        .collect();

    let gh0 = grad_at(&f_h, x0)?;
    let gh1 = grad_at(&f_h, &x1)?;
    let l = norm(&gh0);
    if l == 0.0 {
        return Err(TheoryError::ZeroGradient("x0 (high-frequency part)"));
    }
    let eps = f_l.waves.iter().map(PlaneWave::gradient_scale).sum::<f64>() / l;
    if eps >= 1.0 {
        return Err(TheoryError::EpsTooLarge(eps));
    }
    let mass = band_mass(&f_h);
    let t = distortion(band, mass);

    let grad0 = grad_at(f, x0)?;
    let grad1 = grad_at(f, &x1)?;
    let (n0, n1) = (norm(&grad0), norm(&grad1));
    if n0 == 0.0 {
        return Err(TheoryError::ZeroGradient("x0"));
    }
    if n1 == 0.0 {
        return Err(TheoryError::ZeroGradient("x1"));
    }
    let g0: Vec<f64> = grad0.iter().map(|v| v / n0).collect();
    let g1: Vec<f64> = grad1.iter().map(|v| v / n1).collect();
    let sum: Vec<f64> = g0.iter().zip(&g1).map(|(a, b)| a + b).collect();
    let diff: Vec<f64> = g0.iter().zip(&g1).map(|(a, b)| a - b).collect();
    let measured = norm(&sum);
    let angle = 2.0 * norm(&diff).atan2(measured);

    let bound_rhs = reversal_bound(l, eps, t).ok();
    let assumption3_ok = bound_rhs.is_some();
    let bound_holds = bound_rhs.is_some_and(|rhs| measured <= rhs + COMPARISON_SLACK);

    let high_sum: Vec<f64> = gh0.iter().zip(&gh1).map(|(a, b)| a + b).collect();
    let high_sum_norm = norm(&high_sum);
    let high_sum_ok = high_sum_norm <= t + COMPARISON_SLACK;
    let grad_floor_ok =
        n0 >= (1.0 - eps) * l - COMPARISON_SLACK && n1 >= (1.0 - eps) * l - t - COMPARISON_SLACK;

    Ok(ReversalReport {
        x0: x0.to_vec(),
        x1,
        l,
        eps,
        band_mass: mass,
        distortion: t,
        m_over_l: mass / l,
        g0,
        g1,
        measured_sum_norm: measured,
        bound_rhs,
        angle,
        assumption3_ok,
        bound_holds,
        high_sum_norm,
        high_sum_ok,
        grad_norm_x0: n0,
        grad_norm_x1: n1,
        grad_floor_ok,
    })
}

/// One randomly generated reversal problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryTrial {
    pub f: PlaneWaveSum,
    pub band: BandSpec,
    pub x0: Vec<f64>,
    /// Rejected `x₀` draws before one met the carrier-gradient threshold.
    pub resamples: usize,
}

const MAX_X0_DRAWS: usize = 10_000;

fn random_unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_in_ball(rng: &mut Rng, d: usize, radius: f64) -> Vec<f64> {
    let dir = random_unit(rng, d);
    let r = radius * rng.uniform().powf(1.0 / d as f64);
    dir.into_iter().map(|x| x * r).collect()
}

fn random_sign(rng: &mut Rng) -> f64 {
    if rng.next_u64() & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Draws a band-dominated test function, its band, and a point `x₀` where
/// the in-band gradient is at least half its peak.
///
/// `d ∈ {1,2,3}`; a carrier at `ωu` with `|a| ∈ [1,4]`, `ω ∈ [8,64]`; up to
/// three sidebands within `δ ∈ [0.01ω, 0.1ω]` of the carrier, each with at
/// most a tenth of its amplitude; one to eight waves with `‖ξ‖ ≤ 2` scaled so
/// `ε ≤ 0.05`. Returns `None` if no acceptable `x₀` turns up.
pub fn random_trial(seed: u64) -> Option<TheoryTrial> {
    let mut rng = Rng::new(seed);
    let d = 1 + rng.below(3);
    let u = random_unit(&mut rng, d);
    let omega = rng.uniform_range(8.0, 64.0);
    let delta = omega * rng.uniform_range(0.01, 0.1);
    let carrier_amp = rng.uniform_range(1.0, 4.0);
    let band = BandSpec::new(u.clone(), omega, delta).ok()?;

    let mut high = vec![PlaneWave {
        amplitude: random_sign(&mut rng) * carrier_amp,
        frequency: u.iter().map(|x| x * omega).collect(),
        phase: rng.uniform_range(0.0, 2.0 * PI),
    }];
    for _ in 0..rng.below(4) {
        let r = random_in_ball(&mut rng, d, delta);
        high.push(PlaneWave {
            amplitude: random_sign(&mut rng) * carrier_amp * rng.uniform_range(0.0, 0.1),
            frequency: u.iter().zip(&r).map(|(x, r)| x * omega + r).collect(),
            phase: rng.uniform_range(0.0, 2.0 * PI),
        });
    }
    let f_h = PlaneWaveSum::new(d, high.clone()).ok()?;

    let span = 2.0 * PI;
    let mut resamples = 0;
    let x0 = loop {
        if resamples >= MAX_X0_DRAWS {
            return None;
        }
        let x: Vec<f64> = (0..d).map(|_| rng.uniform_range(-span, span)).collect();
        let l = norm(&grad_at(&f_h, &x).ok()?);
        if l >= 0.5 * carrier_amp * omega {
            break x;
        }
        resamples += 1;
    };
    let l = norm(&grad_at(&f_h, &x0).ok()?);

    let n_low = 1 + rng.below(8);
    let mut low: Vec<PlaneWave> = (0..n_low)
        .map(|_| {
            let dir = random_unit(&mut rng, d);
            let k = rng.uniform_range(0.05, 2.0);
            PlaneWave {
                amplitude: random_sign(&mut rng) * rng.uniform_range(0.1, 1.0),
                frequency: dir.into_iter().map(|x| x * k).collect(),
                phase: rng.uniform_range(0.0, 2.0 * PI),
            }
        })
        .collect();
    let raw: f64 = low.iter().map(PlaneWave::gradient_scale).sum();
    let target_eps = 0.05 * rng.uniform_open0();
    let scale = target_eps * l / raw;
    low.iter_mut().for_each(|w| w.amplitude *= scale);

    high.extend(low);
    Some(TheoryTrial {
        f: PlaneWaveSum::new(d, high).ok()?,
        band,
        x0,
        resamples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub seed: u64,
    pub resamples: usize,
    pub report: ReversalReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub trials: usize,
    /// Trials where the dominance condition held.
    pub assumption3_ok: usize,
    /// Trials where the dominance condition held and the bound held.
    pub passes: usize,
    /// Trials abandoned because no valid `x₀` or gradient was found.
    pub skips: usize,
    pub x0_resamples: usize,
    pub bound_violations: usize,
    pub high_sum_violations: usize,
    pub grad_floor_violations: usize,
    pub angle_identity_violations: usize,
    pub max_m_over_l: f64,
}

/// Runs `trials` random reversal checks. Trial `i` uses the seed
/// `stable_hash(base_seed, i)`.
pub fn run_campaign(base_seed: u64, trials: usize) -> (Vec<TrialRecord>, CampaignSummary) {
    let mut records = Vec::with_capacity(trials);
    let mut s = CampaignSummary {
        trials,
        ..Default::default()
    };
    for index in 0..trials {
        let seed = stable_hash(base_seed, index as u64);
        let Some(trial) = random_trial(seed) else {
            s.skips += 1;
            continue;
        };
        let Ok(report) = verify_reversal(&trial.f, &trial.band, &trial.x0) else {
            s.skips += 1;
            continue;
        };
        s.x0_resamples += trial.resamples;
        if report.assumption3_ok {
            s.assumption3_ok += 1;
            if report.bound_holds {
                s.passes += 1;
            } else {
                s.bound_violations += 1;
            }
        }
        if !report.high_sum_ok {
            s.high_sum_violations += 1;
        }
        if !report.grad_floor_ok {
            s.grad_floor_violations += 1;
        }
        if (report.measured_sum_norm - 2.0 * (report.angle / 2.0).cos()).abs() > 1e-10 {
            s.angle_identity_violations += 1;
        }
        s.max_m_over_l = s.max_m_over_l.max(report.m_over_l);
        records.push(TrialRecord {
            index,
            seed,
            resamples: trial.resamples,
            report,
        });
    }
    (records, s)
}
