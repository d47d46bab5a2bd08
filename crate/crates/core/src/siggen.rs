//! Deterministic IQ snapshot synthesis for background noise and the jammer
//! archetypes (pulsed, out-of-band tone, noise, tone, chirp, two chirps).
//!
//! All generators are pure functions of their spec and seed. Jammers are
//! normalized to unit average power; [`mix`] scales them to a target
//! jammer-to-noise ratio against a background.

use crate::error::{ensure, Result};
use crate::seed::rng_from_seed;
use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

pub type Sample = Complex<f32>;

/// Capture parameters of the recording hardware.
pub const HARDWARE_SAMPLE_RATE_HZ: f64 = 62.5e6;
pub const HARDWARE_DURATION_MS: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct IqSnapshot {
    pub samples: Vec<Sample>,
    pub sample_rate_hz: f64,
    pub duration_ms: f64,
}

impl IqSnapshot {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean of |s|² over the snapshot, accumulated in f64.
    pub fn mean_power(&self) -> f64 {
        mean_power(&self.samples)
    }
}

pub fn sample_count(duration_ms: f64, sample_rate_hz: f64) -> Result<usize> {
    ensure!(
        duration_ms.is_finite() && duration_ms > 0.0,
        "duration must be positive, got {duration_ms} ms"
    );
    ensure!(
        sample_rate_hz.is_finite() && sample_rate_hz > 0.0,
        "sample rate must be positive, got {sample_rate_hz} Hz"
    );
    let n = (sample_rate_hz * duration_ms / 1000.0).round();
    ensure!(n >= 1.0, "snapshot of {duration_ms} ms at {sample_rate_hz} Hz has no samples");
    Ok(n as usize)
}

fn mean_power(samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.norm_sqr() as f64).sum::<f64>() / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    Low,
    Medium,
    High,
}

/// Noise power in dB (relative to linear power 1.0) for each background level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundLevels {
    pub low_db: f64,
    pub medium_db: f64,
    pub high_db: f64,
}

impl Default for BackgroundLevels {
    fn default() -> Self {
        Self { low_db: -10.0, medium_db: 0.0, high_db: 10.0 }
    }
}

impl BackgroundLevels {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.low_db.is_finite() && self.high_db.is_finite(),
            "background levels must be finite"
        );
        ensure!(
            self.low_db < self.medium_db && self.medium_db < self.high_db,
            "background levels must increase strictly: {self:?}"
        );
        Ok(())
    }

    pub fn db(&self, intensity: Intensity) -> f64 {
        match intensity {
            Intensity::Low => self.low_db,
            Intensity::Medium => self.medium_db,
            Intensity::High => self.high_db,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub intensity: Intensity,
    pub levels: BackgroundLevels,
    pub seed: u64,
}

impl BackgroundSpec {
    pub fn new(intensity: Intensity, seed: u64) -> Self {
        Self { intensity, levels: BackgroundLevels::default(), seed }
    }

    pub fn noise_power_db(&self) -> f64 {
        self.levels.db(self.intensity)
    }

    pub fn noise_power(&self) -> f64 {
        db_to_linear(self.noise_power_db())
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Circularly-symmetric complex Gaussian noise at the level's power.
pub fn gen_background(spec: &BackgroundSpec, duration_ms: f64, sample_rate_hz: f64) -> Result<IqSnapshot> {
    spec.levels.validate()?;
    let n = sample_count(duration_ms, sample_rate_hz)?;
    let mut rng = rng_from_seed(spec.seed);
    let sigma = (spec.noise_power() / 2.0).sqrt();
    let samples = (0..n).map(|_| complex_gaussian(&mut rng, sigma)).collect();
    Ok(IqSnapshot { samples, sample_rate_hz, duration_ms })
}

fn complex_gaussian<R: Rng>(rng: &mut R, sigma: f64) -> Sample {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex::new((sigma * re) as f32, (sigma * im) as f32)
}

/// One linear frequency sweep, repeated every `period_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub f0_hz: f64,
    pub f1_hz: f64,
    pub period_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JammerKind {
    /// Constant-envelope wideband noise gated on for `duty_cycle` of every period.
    Pulsed { duty_cycle: f64, pulse_period_ms: f64 },
    /// Complex exponential outside the receiver passband.
    OutOfBandTone { tone_freq_hz: f64, passband_edge_hz: f64 },
    /// Gaussian noise occupying `bandwidth_hz` around DC.
    Noise { bandwidth_hz: f64 },
    Tone { tone_freq_hz: f64 },
    Chirp { sweep: Sweep },
    TwoChirps { first: Sweep, second: Sweep },
}

impl JammerKind {
    pub fn name(&self) -> &'static str {
        match self {
            JammerKind::Pulsed { .. } => "pulsed",
            JammerKind::OutOfBandTone { .. } => "out_of_band_tone",
            JammerKind::Noise { .. } => "noise",
            JammerKind::Tone { .. } => "tone",
            JammerKind::Chirp { .. } => "chirp",
            JammerKind::TwoChirps { .. } => "two_chirps",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JammerSpec {
    #[serde(flatten)]
    pub kind: JammerKind,
    pub jnr_db: f64,
    pub seed: u64,
}

impl JammerSpec {
    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        ensure!(self.jnr_db.is_finite(), "jnr_db must be finite");
        let nyquist = sample_rate_hz / 2.0;
        let check_sweep = |s: &Sweep| -> Result<()> {
            ensure!(
                s.period_ms.is_finite() && s.period_ms > 0.0,
                "chirp period must be positive, got {}",
                s.period_ms
            );
            ensure!(s.f0_hz != s.f1_hz, "chirp needs f0 != f1, both {}", s.f0_hz);
            ensure!(
                s.f0_hz.abs() < nyquist && s.f1_hz.abs() < nyquist,
                "chirp endpoints must lie within +-{nyquist} Hz"
            );
            Ok(())
        };
        match &self.kind {
            JammerKind::Pulsed { duty_cycle, pulse_period_ms } => {
                ensure!(
                    *duty_cycle > 0.0 && *duty_cycle <= 1.0,
                    "duty cycle must lie in (0, 1], got {duty_cycle}"
                );
                ensure!(
                    pulse_period_ms.is_finite() && *pulse_period_ms > 0.0,
                    "pulse period must be positive, got {pulse_period_ms}"
                );
            }
            JammerKind::OutOfBandTone { tone_freq_hz, passband_edge_hz } => {
                ensure!(*passband_edge_hz > 0.0, "passband edge must be positive");
                ensure!(
                    tone_freq_hz.abs() > *passband_edge_hz && tone_freq_hz.abs() < nyquist,
                    "out-of-band tone at {tone_freq_hz} Hz must satisfy {passband_edge_hz} < |f| < {nyquist}"
                );
            }
            JammerKind::Noise { bandwidth_hz } => {
                ensure!(
                    *bandwidth_hz > 0.0 && *bandwidth_hz <= sample_rate_hz,
                    "noise bandwidth must lie in (0, {sample_rate_hz}], got {bandwidth_hz}"
                );
            }
            JammerKind::Tone { tone_freq_hz } => {
                ensure!(tone_freq_hz.abs() < nyquist, "tone at {tone_freq_hz} Hz exceeds Nyquist");
            }
            JammerKind::Chirp { sweep } => check_sweep(sweep)?,
            JammerKind::TwoChirps { first, second } => {
                check_sweep(first)?;
                check_sweep(second)?;
            }
        }
        Ok(())
    }
}

/// Unit-average-power jammer waveform.
pub fn gen_jammer(spec: &JammerSpec, duration_ms: f64, sample_rate_hz: f64) -> Result<IqSnapshot> {
    let n = sample_count(duration_ms, sample_rate_hz)?;
    spec.validate(sample_rate_hz)?;
    let mut rng = rng_from_seed(spec.seed);
    let fs = sample_rate_hz;
    let raw: Vec<Complex<f64>> = match spec.kind {
        JammerKind::Pulsed { duty_cycle, pulse_period_ms } => {
            let period = pulse_period_ms * 1e-3 * fs;
            let offset: f64 = rng.random::<f64>() * period;
            (0..n)
                .map(|i| {
                    let phase: f64 = rng.random::<f64>() * TAU;
                    let pos = ((i as f64 + offset) / period).fract();
                    if pos < duty_cycle {
                        Complex::from_polar(1.0, phase)
                    } else {
                        Complex::new(0.0, 0.0)
                    }
                })
                .collect()
        }
        JammerKind::OutOfBandTone { tone_freq_hz, .. } | JammerKind::Tone { tone_freq_hz } => {
            let phase0 = rng.random::<f64>() * TAU;
            (0..n)
                .map(|i| Complex::from_polar(1.0, phase0 + TAU * tone_freq_hz * i as f64 / fs))
                .collect()
        }
        JammerKind::Noise { bandwidth_hz } => band_limited_noise(&mut rng, n, fs, bandwidth_hz),
        JammerKind::Chirp { sweep } => sweep_waveform(&mut rng, &sweep, n, fs),
        JammerKind::TwoChirps { first, second } => {
            let a = sweep_waveform(&mut rng, &first, n, fs);
            let b = sweep_waveform(&mut rng, &second, n, fs);
            a.into_iter().zip(b).map(|(x, y)| x + y).collect()
        }
    };
    Ok(IqSnapshot { samples: normalize_unit_power(&raw), sample_rate_hz, duration_ms })
}

/// Band-limited complex Gaussian noise of unit power, centred at DC.
pub fn band_limited_noise<R: Rng>(rng: &mut R, n: usize, sample_rate_hz: f64, bandwidth_hz: f64) -> Vec<Complex<f64>> {
    let mut spectrum: Vec<Complex<f64>> = (0..n)
        .map(|k| {
            let bin = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            let f = bin * sample_rate_hz / n as f64;
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            if 2.0 * f.abs() <= bandwidth_hz {
                Complex::new(re, im)
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    if spectrum.iter().all(|c| c.norm_sqr() == 0.0) {
        spectrum[0] = Complex::new(1.0, 0.0);
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spectrum);
    let p = spectrum.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
    let scale = 1.0 / p.sqrt();
    spectrum.iter().map(|c| c * scale).collect()
}

fn sweep_waveform<R: Rng>(rng: &mut R, sweep: &Sweep, n: usize, fs: f64) -> Vec<Complex<f64>> {
    let period = sweep.period_ms * 1e-3 * fs;
    let mut phase = rng.random::<f64>() * TAU;
    (0..n)
        .map(|i| {
            let pos = (i as f64 / period).fract();
            let freq = sweep.f0_hz + (sweep.f1_hz - sweep.f0_hz) * pos;
            let s = Complex::from_polar(1.0, phase);
            phase = (phase + TAU * freq / fs).rem_euclid(TAU);
            s
        })
        .collect()
}

fn normalize_unit_power(raw: &[Complex<f64>]) -> Vec<Sample> {
    let p = raw.iter().map(|c| c.norm_sqr()).sum::<f64>() / raw.len() as f64;
    let scale = if p > 0.0 { 1.0 / p.sqrt() } else { 0.0 };
    raw.iter().map(|c| Complex::new((c.re * scale) as f32, (c.im * scale) as f32)).collect()
}

/// Gain applied to `jammer` so that its power over the background's equals
/// `10^(jnr_db / 10)`. Zero for an all-zero jammer.
pub fn mix_gain(background: &IqSnapshot, jammer: &IqSnapshot, jnr_db: f64) -> Result<f64> {
    check_compatible(background, jammer)?;
    ensure!(jnr_db.is_finite(), "jnr_db must be finite");
    let pj = jammer.mean_power();
    if pj == 0.0 {
        return Ok(0.0);
    }
    Ok((db_to_linear(jnr_db) * background.mean_power() / pj).sqrt())
}

fn check_compatible(a: &IqSnapshot, b: &IqSnapshot) -> Result<()> {
    ensure!(
        a.len() == b.len(),
        "snapshot lengths differ: {} vs {}",
        a.len(),
        b.len()
    );
    ensure!(
        a.sample_rate_hz == b.sample_rate_hz,
        "sample rates differ: {} vs {}",
        a.sample_rate_hz,
        b.sample_rate_hz
    );
    Ok(())
}

/// `background + g * jammer` with `g` from [`mix_gain`].
pub fn mix(background: &IqSnapshot, jammer: &IqSnapshot, jnr_db: f64) -> Result<IqSnapshot> {
    let g = mix_gain(background, jammer, jnr_db)?;
    if g == 0.0 {
        return Ok(background.clone());
    }
    add_scaled(background, jammer, g)
}

/// `base + gain * other`, sample by sample.
pub fn add_scaled(base: &IqSnapshot, other: &IqSnapshot, gain: f64) -> Result<IqSnapshot> {
    check_compatible(base, other)?;
    let g = gain as f32;
    let samples = base.samples.iter().zip(&other.samples).map(|(b, j)| b + j * g).collect();
    Ok(IqSnapshot { samples, ..base.clone() })
}
