//! A synthetic motor-imagery generator with a controllable session shift.
//!
//! Each trial mixes `E` latent sources into `E` channels. Every latent source
//! carries a band-limited rhythm; during class `j` the rhythm of source `j`
//! is attenuated by the ERD depth. A broadband background (AR(1), white by
//! default) and white sensor noise are added on top, and every channel of
//! every trial is scaled by a small random gain. The target session perturbs
//! the mixing matrix to `(I + εG) M`, adds a per-channel gain drift and raises
//! the noise.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TrialSet;
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};

/// Sinusoids summed to form one band-limited rhythm.
const RHYTHM_COMPONENTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    /// Trials of each class in each session.
    pub trials_per_class: usize,
    /// Band of the class-modulated rhythm, Hz.
    pub band_hz: (f64, f64),
    /// Fractional amplitude drop of the class source's rhythm.
    pub erd_depth: f64,
    /// Log-normal spread of per-trial rhythm amplitude.
    pub amplitude_jitter: f64,
    /// Standard deviation of white sensor noise.
    pub noise: f64,
    /// Standard deviation of the AR(1) background process.
    pub background: f64,
    /// Pole of the AR(1) background process; 0 gives white background.
    pub background_pole: f64,
    /// Off-identity spread of the source-session mixing matrix.
    pub mixing_spread: f64,
    /// Session-shift strength ε.
    pub shift: f64,
    /// Standard deviation of per-channel log-gain drift per unit shift. The
    /// target session draws a fixed offset per channel plus an independent
    /// fluctuation per trial, both with this spread times ε.
    pub gain_drift: f64,
    /// Standard deviation of per-trial, per-channel log-gain fluctuation
    /// present in both sessions.
    pub gain_jitter: f64,
    /// Relative noise increase per unit shift.
    pub noise_growth: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            channels: 8,
            samples: 512,
            fs: 128.0,
            trials_per_class: 60,
            band_hz: (8.0, 13.0),
            erd_depth: 0.7,
            amplitude_jitter: 0.25,
            noise: 0.5,
            background: 1.0,
            background_pole: 0.0,
            mixing_spread: 0.5,
            shift: 0.5,
            gain_drift: 0.5,
            gain_jitter: 0.1,
            noise_growth: 0.5,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > self.channels {
            return Err(Error::Config(format!(
                "need 2 <= classes <= channels, got {} classes and {} channels",
                self.classes, self.channels
            )));
        }
        let (lo, hi) = self.band_hz;
        if !(lo > 0.0 && lo < hi && hi < self.fs / 2.0) {
            return Err(Error::Config(format!("rhythm band [{lo}, {hi}] Hz must lie in (0, {})", self.fs / 2.0)));
        }
        if !(0.0..=1.0).contains(&self.erd_depth) {
            return Err(Error::Config(format!("ERD depth {} outside [0, 1]", self.erd_depth)));
        }
        if !(0.0..1.0).contains(&self.background_pole) {
            return Err(Error::Config(format!("background pole {} outside [0, 1)", self.background_pole)));
        }
        if self.shift < 0.0 || self.trials_per_class == 0 || self.samples == 0 {
            return Err(Error::Config("shift must be nonnegative and sessions non-empty".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(e: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..e * e)
        .map(|_| scale * normal(rng) / (e as f64).sqrt())
        .collect()
}

fn identity_plus(e: usize, m: &[f64]) -> Vec<f64> {
    let mut out = m.to_vec();
    for i in 0..e {
        out[i * e + i] += 1.0;
    }
    out
}

fn matmul(e: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; e * e];
    for i in 0..e {
        for k in 0..e {
            let aik = a[i * e + k];
            for j in 0..e {
                out[i * e + j] += aik * b[k * e + j];
            }
        }
    }
    out
}

/// Generative parameters of one recording session.
struct Session {
    mixing: Vec<f64>,
    noise: f64,
    /// Fixed log-gain of each channel.
    log_gain: Vec<f64>,
    /// Spread of the per-trial log-gain fluctuation.
    trial_gain_sd: f64,
}

fn rhythm(cfg: &SynthConfig, rng: &mut Rng) -> Vec<f64> {
    let (lo, hi) = cfg.band_hz;
    let comps: Vec<(f64, f64)> = (0..RHYTHM_COMPONENTS)
        .map(|_| (rng.gen_range(lo..hi), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    // Unit variance: each sinusoid contributes 1/2.
    let norm = (2.0 / RHYTHM_COMPONENTS as f64).sqrt();
    (0..cfg.samples)
        .map(|k| {
            let t = k as f64 / cfg.fs;
            norm * comps.iter().map(|(f, p)| (std::f64::consts::TAU * f * t + p).sin()).sum::<f64>()
        })
        .collect()
}

fn background(cfg: &SynthConfig, rng: &mut Rng) -> Vec<f64> {
    let pole = cfg.background_pole;
    let innovation = (1.0 - pole * pole).sqrt();
    let mut v = normal(rng);
    (0..cfg.samples)
        .map(|_| {
            v = pole * v + innovation * normal(rng);
            cfg.background * v
        })
        .collect()
}

fn session_trials(cfg: &SynthConfig, session: &Session, tag: u16, rng: &mut Rng) -> Result<TrialSet> {
    let (e, t) = (cfg.channels, cfg.samples);
    let mut labels: Vec<usize> = (0..cfg.classes).flat_map(|c| std::iter::repeat(c).take(cfg.trials_per_class)).collect();
    labels.shuffle(rng);
    let jitter = Normal::new(0.0, cfg.amplitude_jitter).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(labels.len() * e * t);
    let mut latent = vec![0.0; e * t];
    for &y in &labels {
        for k in 0..e {
            let mut amp = jitter.sample(rng).exp();
            if k == y {
                amp *= 1.0 - cfg.erd_depth;
            }
            let r = rhythm(cfg, rng);
            let b = background(cfg, rng);
            for s in 0..t {
                latent[k * t + s] = amp * r[s] + b[s];
            }
        }
        for c in 0..e {
            let gain = (session.log_gain[c] + session.trial_gain_sd * normal(rng)).exp();
            for s in 0..t {
                let mixed: f64 = (0..e).map(|k| session.mixing[c * e + k] * latent[k * t + s]).sum();
                let n = normal(rng);
                data.push(gain * (mixed + session.noise * n));
            }
        }
    }
    let n = labels.len();
    TrialSet::new(e, t, data, Some(labels), cfg.fs, cfg.classes)?.with_sessions(vec![tag; n])
}

/// Source (session tag 1) and target (session tag 2) sessions of one
/// synthetic participant. With `shift == 0` both are drawn from the same
/// process.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(TrialSet, TrialSet)> {
    cfg.validate()?;
    let seeds = SeedStream::new(cfg.seed);
    let e = cfg.channels;
    let mut mix_rng = seeds.rng("mixing");
    let mixing = identity_plus(e, &gaussian_matrix(e, cfg.mixing_spread, &mut mix_rng));

    let mut shift_rng = seeds.rng("shift");
    let g = gaussian_matrix(e, cfg.shift, &mut shift_rng);
    let drift = cfg.shift * cfg.gain_drift;
    let log_gain: Vec<f64> = (0..e).map(|_| drift * normal(&mut shift_rng)).collect();
    let target_mixing = matmul(e, &identity_plus(e, &g), &mixing);

    let source = Session {
        mixing,
        noise: cfg.noise,
        log_gain: vec![0.0; e],
        trial_gain_sd: cfg.gain_jitter,
    };
    let target = Session {
        mixing: target_mixing,
        noise: cfg.noise * (1.0 + cfg.noise_growth * cfg.shift),
        log_gain,
        trial_gain_sd: cfg.gain_jitter.hypot(drift),
    };
    let s = session_trials(cfg, &source, 1, &mut seeds.rng("source-trials"))?;
    let t = session_trials(cfg, &target, 2, &mut seeds.rng("target-trials"))?;
    Ok((s, t))
}
