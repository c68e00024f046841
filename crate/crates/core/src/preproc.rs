//! Domain-invariant preprocessing: bandpass filtering, exponential moving
//! standardization, per-channel `[-1, 1]` scaling and Euclidean alignment.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::TrialSet;
use crate::error::{Error, Result};

pub const EMA_EPS: f64 = 1e-4;
pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Blackman,
    Rectangular,
}

impl Window {
    fn weight(self, n: usize, order: usize) -> f64 {
        let x = 2.0 * std::f64::consts::PI * n as f64 / order as f64;
        match self {
            Window::Blackman => 0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos(),
            Window::Rectangular => 1.0,
        }
    }
}

/// Linear-phase bandpass FIR filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub fs: f64,
    pub window: Window,
}

fn sinc_lowpass(cutoff: f64, m: f64) -> f64 {
    // Ideal lowpass impulse response at offset `m` for a cutoff in cycles/sample.
    if m == 0.0 {
        2.0 * cutoff
    } else {
        (2.0 * std::f64::consts::PI * cutoff * m).sin() / (std::f64::consts::PI * m)
    }
}

/// Windowed-sinc bandpass design: the difference of two ideal lowpass
/// responses, tapered by `window` and scaled to unit gain at the band center.
pub fn design_fir(order: usize, low_hz: f64, high_hz: f64, fs: f64, window: Window) -> Result<FirFilter> {
    if order == 0 || order % 2 != 0 {
        return Err(Error::Config(format!("filter order must be even and positive, got {order}")));
    }
    if !(fs > 0.0) || !(low_hz > 0.0) || !(low_hz < high_hz) || !(high_hz < fs / 2.0) {
        return Err(Error::Config(format!(
            "band [{low_hz}, {high_hz}] Hz must satisfy 0 < low < high < {} Hz",
            fs / 2.0
        )));
    }
    let (f1, f2) = (low_hz / fs, high_hz / fs);
    let half = order / 2;
    let mut taps = vec![0.0; order + 1];
    for n in 0..=half {
        let m = n as f64 - half as f64;
        let v = (sinc_lowpass(f2, m) - sinc_lowpass(f1, m)) * window.weight(n, order);
        taps[n] = v;
        taps[order - n] = v;
    }
    let mut filter = FirFilter {
        taps,
        order,
        low_hz,
        high_hz,
        fs,
        window,
    };
    let gain = filter.magnitude(0.5 * (low_hz + high_hz));
    for t in &mut filter.taps {
        *t /= gain;
    }
    Ok(filter)
}

impl FirFilter {
    /// `|H(f)|` by direct evaluation of the DTFT of the taps.
    pub fn magnitude(&self, hz: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * hz / self.fs;
        let (re, im) = self
            .taps
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (n, h)| (re + h * (w * n as f64).cos(), im - h * (w * n as f64).sin()));
        (re * re + im * im).sqrt()
    }

    pub fn magnitude_db(&self, hz: f64) -> f64 {
        20.0 * self.magnitude(hz).max(1e-300).log10()
    }

    /// Filters one channel. The group delay of `order / 2` samples is removed
    /// and edges are extended by replication, so the output has the input's
    /// length and time registration.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() <= self.order {
            return Err(Error::Config(format!(
                "trial of {} samples is too short for a filter of order {}",
                x.len(),
                self.order
            )));
        }
        let half = self.order / 2;
        let mut padded = Vec::with_capacity(x.len() + self.order);
        padded.extend(std::iter::repeat(x[0]).take(half));
        padded.extend_from_slice(x);
        padded.extend(std::iter::repeat(x[x.len() - 1]).take(half));
        Ok((0..x.len())
            .map(|k| {
                self.taps
                    .iter()
                    .zip(&padded[k..k + self.order + 1])
                    .map(|(h, v)| h * v)
                    .sum()
            })
            .collect())
    }
}

/// Filters every channel of every trial.
pub fn filter_trials(trials: &TrialSet, fir: &FirFilter) -> Result<TrialSet> {
    let mut out = trials.clone();
    for i in 0..trials.len() {
        for c in 0..trials.channels() {
            let y = fir.apply(trials.channel(i, c))?;
            out.channel_mut(i, c).copy_from_slice(&y);
        }
    }
    Ok(out)
}

/// Exponential moving standardization.
///
/// Each channel is treated as one continuous stream running through the
/// trials in set order. With `d = decay`:
/// `m_k = d m_{k-1} + (1 - d) x_k`,
/// `v_k = d v_{k-1} + (1 - d) (x_k - m_k)^2`,
/// `y_k = (x_k - m_k) / sqrt(max(v_k, EMA_EPS))`.
/// The running mean and variance start from the first trial's per-channel
/// mean and variance.
pub fn ema_standardize(trials: &TrialSet, decay: f64) -> Result<TrialSet> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::Config(format!("EMA decay {decay} outside (0, 1)")));
    }
    let mut out = trials.clone();
    if trials.is_empty() {
        return Ok(out);
    }
    for c in 0..trials.channels() {
        let first = trials.channel(0, c);
        let t = first.len() as f64;
        let mut m = first.iter().sum::<f64>() / t;
        let mut v = first.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t;
        for i in 0..trials.len() {
            let dst = out.channel_mut(i, c);
            for (y, &x) in dst.iter_mut().zip(trials.channel(i, c)) {
                m = decay * m + (1.0 - decay) * x;
                v = decay * v + (1.0 - decay) * (x - m) * (x - m);
                *y = (x - m) / v.max(EMA_EPS).sqrt();
            }
        }
    }
    Ok(out)
}

/// Scales each channel of one trial by its maximum absolute value. Returns the
/// number of identically zero channels, which pass through unchanged.
pub fn channel_normalize(trial: &mut [f64], channels: usize) -> usize {
    let samples = trial.len() / channels;
    let mut zero = 0;
    for ch in trial.chunks_mut(samples) {
        let peak = ch.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if peak == 0.0 {
            zero += 1;
            continue;
        }
        for v in ch {
            *v /= peak;
        }
    }
    zero
}

/// Applies [`channel_normalize`] to every trial; returns the zero-channel tally.
pub fn normalize_trials(trials: &TrialSet) -> (TrialSet, usize) {
    let mut out = trials.clone();
    let channels = trials.channels();
    let zero = (0..trials.len())
        .map(|i| channel_normalize(out.trial_mut(i), channels))
        .sum();
    (out, zero)
}

/// Mean trial covariance of one domain and its inverse square root.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentState {
    pub channels: usize,
    /// `(1/n) sum_i x_i x_i^T`, row-major `channels x channels`.
    pub mean_cov: Vec<f64>,
    /// `mean_cov^{-1/2}`, row-major.
    pub whitener: Vec<f64>,
    pub trials: usize,
    /// Eigenvalues raised to the floor before inversion.
    pub floored: usize,
}

/// Fits Euclidean alignment on `trials`.
///
/// Eigenvalues below `EIGEN_FLOOR * max` are raised to that floor before the
/// inverse square root; their number is reported in `floored`.
pub fn fit_alignment(trials: &TrialSet) -> Result<AlignmentState> {
    if trials.is_empty() {
        return Err(Error::Config("alignment needs at least one trial".into()));
    }
    let (e, t) = (trials.channels(), trials.samples());
    let mut cov = vec![0.0; e * e];
    for i in 0..trials.len() {
        let x = trials.trial(i);
        for a in 0..e {
            let xa = &x[a * t..(a + 1) * t];
            for b in a..e {
                let xb = &x[b * t..(b + 1) * t];
                cov[a * e + b] += xa.iter().zip(xb).map(|(p, q)| p * q).sum::<f64>();
            }
        }
    }
    let n = trials.len() as f64;
    for a in 0..e {
        for b in a..e {
            let v = cov[a * e + b] / n;
            cov[a * e + b] = v;
            cov[b * e + a] = v;
        }
    }
    let (whitener, floored) = inverse_sqrt(&cov, e);
    Ok(AlignmentState {
        channels: e,
        mean_cov: cov,
        whitener,
        trials: trials.len(),
        floored,
    })
}

/// Inverse square root of a symmetric positive semi-definite matrix via its
/// eigendecomposition, with eigenvalues floored relative to the largest.
pub fn inverse_sqrt(sym: &[f64], e: usize) -> (Vec<f64>, usize) {
    let m = DMatrix::from_row_slice(e, e, sym);
    let eig = SymmetricEigen::new(m);
    let max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let floor = EIGEN_FLOOR * max;
    let mut floored = 0;
    let inv: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            let l = if l < floor || l <= 0.0 {
                floored += 1;
                floor.max(f64::MIN_POSITIVE)
            } else {
                l
            };
            1.0 / l.sqrt()
        })
        .collect();
    let q = &eig.eigenvectors;
    let mut out = vec![0.0; e * e];
    for a in 0..e {
        for b in a..e {
            let v: f64 = (0..e).map(|k| q[(a, k)] * inv[k] * q[(b, k)]).sum();
            out[a * e + b] = v;
            out[b * e + a] = v;
        }
    }
    (out, floored)
}

/// `x_i <- whitener * x_i` for every trial.
pub fn apply_alignment(trials: &TrialSet, state: &AlignmentState) -> Result<TrialSet> {
    let (e, t) = (trials.channels(), trials.samples());
    if e != state.channels {
        return Err(Error::shape(
            "apply_alignment",
            format!("alignment fitted on {} channels, trials have {e}", state.channels),
        ));
    }
    let mut out = trials.clone();
    for i in 0..trials.len() {
        let x = trials.trial(i);
        let y = out.trial_mut(i);
        y.fill(0.0);
        for a in 0..e {
            let dst = &mut y[a * t..(a + 1) * t];
            for b in 0..e {
                let w = state.whitener[a * e + b];
                for (d, s) in dst.iter_mut().zip(&x[b * t..(b + 1) * t]) {
                    *d += w * s;
                }
            }
        }
    }
    Ok(out)
}

/// Which preprocessing stages run, and their settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocConfig {
    pub filter: bool,
    pub filter_order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub ema: bool,
    pub ema_decay: f64,
    /// Channel normalization followed by Euclidean alignment.
    pub invariants: bool,
    /// Finer-grained switches within `invariants`.
    pub normalize: bool,
    pub align: bool,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            filter: true,
            filter_order: 200,
            low_hz: 4.0,
            high_hz: 38.0,
            ema: true,
            ema_decay: 0.999,
            invariants: true,
            normalize: true,
            align: true,
        }
    }
}

/// Diagnostics from preprocessing one domain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocReport {
    pub zero_channels: usize,
    pub floored_eigenvalues: usize,
}

/// Runs filter, EMA standardization, channel normalization and alignment, in
/// that order, on one domain. Alignment is fitted on the domain itself.
pub fn preprocess_domain(trials: &TrialSet, cfg: &PreprocConfig) -> Result<(TrialSet, PreprocReport)> {
    let mut report = PreprocReport::default();
    let mut x = trials.clone();
    if cfg.filter {
        let fir = design_fir(cfg.filter_order, cfg.low_hz, cfg.high_hz, trials.fs, Window::Blackman)?;
        x = filter_trials(&x, &fir)?;
    }
    if cfg.ema {
        x = ema_standardize(&x, cfg.ema_decay)?;
    }
    if cfg.invariants && cfg.normalize {
        let (y, zero) = normalize_trials(&x);
        x = y;
        report.zero_channels = zero;
    }
    if cfg.invariants && cfg.align {
        let state = fit_alignment(&x)?;
        report.floored_eigenvalues = state.floored;
        x = apply_alignment(&x, &state)?;
    }
    Ok((x, report))
}

/// Mean of `x_i x_i^T` over a set, row-major.
pub fn mean_covariance(trials: &TrialSet) -> Vec<f64> {
    fit_alignment(trials).map(|s| s.mean_cov).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn set(channels: usize, samples: usize, data: Vec<f64>) -> TrialSet {
        TrialSet::new(channels, samples, data, None, 250.0, 2).unwrap()
    }

    fn frob_from_identity(m: &[f64], e: usize) -> f64 {
        let mut s = 0.0;
        for a in 0..e {
            for b in 0..e {
                let d = m[a * e + b] - if a == b { 1.0 } else { 0.0 };
                s += d * d;
            }
        }
        s.sqrt()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn fir_is_symmetric_with_small_dc_gain() {
        let f = design_fir(200, 4.0, 38.0, 250.0, Window::Blackman).unwrap();
        assert_eq!(f.taps.len(), 201);
        for k in 0..=200 {
            assert_eq!(f.taps[k], f.taps[200 - k]);
        }
        assert!(f.magnitude(0.0) < 1e-3, "{}", f.magnitude(0.0));
    }

    #[test]
    fn fir_magnitude_response() {
        let f = design_fir(200, 4.0, 38.0, 250.0, Window::Blackman).unwrap();
        let mut hz = 6.0;
        while hz <= 36.0 {
            assert!(f.magnitude_db(hz) >= -3.0, "{hz} Hz: {}", f.magnitude_db(hz));
            hz += 0.25;
        }
        let mut hz = 0.0;
        while hz <= 1.0 {
            assert!(f.magnitude_db(hz) <= -40.0, "{hz} Hz: {}", f.magnitude_db(hz));
            hz += 0.05;
        }
        let mut hz = 60.0;
        while hz <= 125.0 {
            assert!(f.magnitude_db(hz) <= -40.0, "{hz} Hz: {}", f.magnitude_db(hz));
            hz += 0.25;
        }
    }

    #[test]
    fn fir_rejects_bad_bands() {
        assert!(design_fir(200, 38.0, 4.0, 250.0, Window::Blackman).is_err());
        assert!(design_fir(200, 4.0, 130.0, 250.0, Window::Blackman).is_err());
        assert!(design_fir(201, 4.0, 38.0, 250.0, Window::Blackman).is_err());
    }

    #[test]
    fn filter_passes_20hz_and_blocks_drift() {
        let f = design_fir(200, 4.0, 38.0, 250.0, Window::Blackman).unwrap();
        let n = 5000;
        let tone: Vec<f64> = (0..n).map(|k| (2.0 * std::f64::consts::PI * 20.0 * k as f64 / 250.0).sin()).collect();
        let y = f.apply(&tone).unwrap();
        let ratio = rms(&y[500..n - 500]) / rms(&tone[500..n - 500]);
        assert!((0.9..=1.1).contains(&ratio), "{ratio}");

        let drift: Vec<f64> = (0..n).map(|k| (2.0 * std::f64::consts::PI * 0.5 * k as f64 / 250.0).sin()).collect();
        let y = f.apply(&drift).unwrap();
        let ratio = rms(&y[500..n - 500]) / rms(&drift[500..n - 500]);
        assert!(ratio < 0.01, "{ratio}");

        let zeros = vec![0.0; 300];
        assert!(f.apply(&zeros).unwrap().iter().all(|&v| v == 0.0));
        assert!(f.apply(&zeros[..200]).is_err());
    }

    #[test]
    fn filter_preserves_length() {
        let f = design_fir(200, 4.0, 38.0, 250.0, Window::Blackman).unwrap();
        let s = set(2, 400, (0..800).map(|v| (v as f64 * 0.3).sin()).collect());
        let y = filter_trials(&s, &f).unwrap();
        assert_eq!(y.samples(), 400);
    }

    #[test]
    fn ema_constant_goes_to_zero_and_stays_finite() {
        let s = set(1, 4000, vec![3.0; 4000]);
        let y = ema_standardize(&s, 0.999).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert!(y.data()[3999].abs() < 1e-9);
    }

    #[test]
    fn ema_unit_noise_variance() {
        let mut rng = crate::rng::Rng::seed_from_u64(42);
        let data: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = set(1, 20_000, data);
        let y = ema_standardize(&s, 0.999).unwrap();
        let tail = &y.data()[5000..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let var = tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / tail.len() as f64;
        assert!((0.5..=2.0).contains(&var), "{var}");
    }

    #[test]
    fn ema_rejects_bad_decay() {
        let s = set(1, 10, vec![0.0; 10]);
        assert!(ema_standardize(&s, 1.0).is_err());
    }

    #[test]
    fn channel_normalize_examples() {
        let mut x = vec![2.0, -4.0, 1.0, 0.0, 0.0, 0.0];
        let zero = channel_normalize(&mut x, 2);
        assert_eq!(x, vec![0.5, -1.0, 0.25, 0.0, 0.0, 0.0]);
        assert_eq!(zero, 1);
        let before = x.clone();
        channel_normalize(&mut x, 2);
        assert_eq!(x, before);
    }

    #[test]
    fn alignment_scalar_and_diagonal_cases() {
        // x x^T = 4 I
        let s = set(2, 2, vec![2.0, 0.0, 0.0, 2.0]);
        let st = fit_alignment(&s).unwrap();
        for (a, b) in st.whitener.iter().zip([0.5, 0.0, 0.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        // R = diag(1, 4)
        let s = set(2, 2, vec![1.0, 0.0, 0.0, 2.0]);
        let st = fit_alignment(&s).unwrap();
        for (a, b) in st.whitener.iter().zip([1.0, 0.0, 0.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn whitener_squared_inverts_random_spd() {
        let mut rng = crate::rng::Rng::seed_from_u64(3);
        for _ in 0..20 {
            let e = 5;
            let a: Vec<f64> = (0..e * e).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut r = vec![0.0; e * e];
            for i in 0..e {
                for j in 0..e {
                    r[i * e + j] = (0..e).map(|k| a[i * e + k] * a[j * e + k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 };
                }
            }
            let (w, floored) = inverse_sqrt(&r, e);
            assert_eq!(floored, 0);
            let mul = |x: &[f64], y: &[f64]| {
                let mut o = vec![0.0; e * e];
                for i in 0..e {
                    for j in 0..e {
                        o[i * e + j] = (0..e).map(|k| x[i * e + k] * y[k * e + j]).sum();
                    }
                }
                o
            };
            let p = mul(&mul(&w, &w), &r);
            assert!(frob_from_identity(&p, e) < 1e-8);
        }
    }

    #[test]
    fn self_alignment_whitens_and_identity_is_noop() {
        let mut rng = crate::rng::Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..10 * 4 * 50).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = set(4, 50, data);
        let st = fit_alignment(&s).unwrap();
        let y = apply_alignment(&s, &st).unwrap();
        assert!(frob_from_identity(&mean_covariance(&y), 4) < 1e-6);

        let ident = AlignmentState {
            channels: 4,
            mean_cov: vec![],
            whitener: (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
            trials: 0,
            floored: 0,
        };
        assert_eq!(apply_alignment(&s, &ident).unwrap(), s);
        let other = set(3, 50, vec![0.0; 150]);
        assert!(apply_alignment(&other, &st).is_err());
    }

    #[test]
    fn rank_deficient_covariance_is_floored() {
        // Second channel is a copy of the first.
        let s = set(2, 3, vec![1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
        let st = fit_alignment(&s).unwrap();
        assert_eq!(st.floored, 1);
        assert!(st.whitener.iter().all(|v| v.is_finite()));
    }
}
