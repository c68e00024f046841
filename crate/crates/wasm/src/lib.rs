//! Three interactive views onto the library for the static demo page in
//! `www/`: a bandpass filter's magnitude response, Euclidean alignment of a
//! synthetic session pair, and MMD as a function of kernel bandwidth.

use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

use sdda::autodiff::{Tape, Tensor};
use sdda::data::{generate_synthetic, SynthConfig};
use sdda::losses::{median_sq_distance, mmd_loss, Bandwidth};
use sdda::preproc::{design_fir, mean_covariance, preprocess_domain, PreprocConfig, Window};
use sdda::rng::SeedStream;

fn js(e: sdda::Error) -> JsError {
    JsError::new(&e.to_string())
}

// Each export is a thin wrapper over a plain Rust function so the logic can
// be tested natively, where constructing a `JsError` would abort.

/// Paired abscissa and ordinate arrays.
#[wasm_bindgen]
pub struct Curve {
    x: Vec<f64>,
    y: Vec<f64>,
}

#[wasm_bindgen]
impl Curve {
    #[wasm_bindgen(getter)]
    pub fn x(&self) -> Vec<f64> {
        self.x.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn y(&self) -> Vec<f64> {
        self.y.clone()
    }
}

impl Curve {
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.x.iter().copied().zip(self.y.iter().copied())
    }
}

/// Magnitude response in dB of the windowed-sinc bandpass filter, sampled
/// at `points` frequencies from 0 to Nyquist.
pub fn fir_curve(order: usize, low_hz: f64, high_hz: f64, fs: f64, blackman: bool, points: usize) -> sdda::Result<Curve> {
    let window = if blackman { Window::Blackman } else { Window::Rectangular };
    let fir = design_fir(order, low_hz, high_hz, fs, window)?;
    let n = points.max(2);
    let x: Vec<f64> = (0..n).map(|i| 0.5 * fs * i as f64 / (n - 1) as f64).collect();
    // Floor the exact zeros at DC and Nyquist so the plot stays finite.
    let y = x.iter().map(|&f| fir.magnitude_db(f).max(-160.0)).collect();
    Ok(Curve { x, y })
}

#[wasm_bindgen(js_name = firResponse)]
pub fn fir_response(order: usize, low_hz: f64, high_hz: f64, fs: f64, blackman: bool, points: usize) -> Result<Curve, JsError> {
    fir_curve(order, low_hz, high_hz, fs, blackman, points).map_err(js)
}

/// Mean covariances of a synthetic source and target session before and
/// after Euclidean alignment, each row-major `channels x channels`.
#[wasm_bindgen]
pub struct AlignmentView {
    channels: usize,
    source_before: Vec<f64>,
    target_before: Vec<f64>,
    source_after: Vec<f64>,
    target_after: Vec<f64>,
}

fn frobenius_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[wasm_bindgen]
impl AlignmentView {
    #[wasm_bindgen(getter)]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[wasm_bindgen(getter, js_name = sourceBefore)]
    pub fn source_before(&self) -> Vec<f64> {
        self.source_before.clone()
    }

    #[wasm_bindgen(getter, js_name = targetBefore)]
    pub fn target_before(&self) -> Vec<f64> {
        self.target_before.clone()
    }

    #[wasm_bindgen(getter, js_name = sourceAfter)]
    pub fn source_after(&self) -> Vec<f64> {
        self.source_after.clone()
    }

    #[wasm_bindgen(getter, js_name = targetAfter)]
    pub fn target_after(&self) -> Vec<f64> {
        self.target_after.clone()
    }

    /// Frobenius distance between the two sessions' mean covariances.
    #[wasm_bindgen(getter, js_name = gapBefore)]
    pub fn gap_before(&self) -> f64 {
        frobenius_gap(&self.source_before, &self.target_before)
    }

    #[wasm_bindgen(getter, js_name = gapAfter)]
    pub fn gap_after(&self) -> f64 {
        frobenius_gap(&self.source_after, &self.target_after)
    }
}

/// Generates a small session pair at the given shift, runs the full
/// preprocessing chain with and without the alignment step, and reports the
/// resulting mean covariances.
pub fn alignment_view(shift: f64, seed: u32) -> sdda::Result<AlignmentView> {
    let synth = SynthConfig {
        shift,
        seed: u64::from(seed),
        samples: 256,
        trials_per_class: 20,
        ..SynthConfig::default()
    };
    let (source, target) = generate_synthetic(&synth)?;
    let unaligned = PreprocConfig {
        align: false,
        ..PreprocConfig::default()
    };
    let aligned = PreprocConfig::default();
    let cov = |set, cfg| -> sdda::Result<Vec<f64>> { Ok(mean_covariance(&preprocess_domain(set, cfg)?.0)) };
    Ok(AlignmentView {
        channels: source.channels(),
        source_before: cov(&source, &unaligned)?,
        target_before: cov(&target, &unaligned)?,
        source_after: cov(&source, &aligned)?,
        target_after: cov(&target, &aligned)?,
    })
}

#[wasm_bindgen(js_name = alignmentDemo)]
pub fn alignment_demo(shift: f64, seed: u32) -> Result<AlignmentView, JsError> {
    alignment_view(shift, seed).map_err(js)
}

/// MMD between two Gaussian batches as the kernel bandwidth varies.
#[wasm_bindgen]
pub struct MmdView {
    curve: Curve,
    median: f64,
    family: f64,
}

#[wasm_bindgen]
impl MmdView {
    /// σ² values on the x axis and the single-kernel MMD on the y axis.
    #[wasm_bindgen(getter)]
    pub fn curve(&self) -> Curve {
        Curve {
            x: self.curve.x.clone(),
            y: self.curve.y.clone(),
        }
    }

    /// Median squared distance between the pooled rows.
    #[wasm_bindgen(getter)]
    pub fn median(&self) -> f64 {
        self.median
    }

    /// MMD under the five-kernel median family used for training.
    #[wasm_bindgen(getter)]
    pub fn family(&self) -> f64 {
        self.family
    }
}

fn gaussian_batch(n: usize, dim: usize, offset: f64, rng: &mut sdda::rng::Rng) -> Tensor {
    let data = (0..n * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z + offset
        })
        .collect();
    Tensor::new(&[n, dim], data).expect("n x dim buffer")
}

fn mmd_value(s: &Tensor, t: &Tensor, policy: Bandwidth) -> sdda::Result<f64> {
    let mut tape = Tape::new();
    let (sv, tv) = (tape.constant(s.clone()), tape.constant(t.clone()));
    let out = mmd_loss(&mut tape, sv, tv, policy)?;
    Ok(tape.value(out).data()[0])
}

/// Draws `n` rows from `N(0, I)` and `n` rows from `N(offset, I)` in `dim`
/// dimensions and evaluates the MMD for `points` bandwidths spaced
/// logarithmically across four decades around the median heuristic.
pub fn mmd_view(offset: f64, n: usize, dim: usize, seed: u32, points: usize) -> sdda::Result<MmdView> {
    let n = n.max(2);
    let dim = dim.max(1);
    let mut rng = SeedStream::new(u64::from(seed)).rng("mmd-demo");
    let s = gaussian_batch(n, dim, 0.0, &mut rng);
    let t = gaussian_batch(n, dim, offset, &mut rng);
    let median = median_sq_distance(&s, &t);
    let m = if median > 0.0 { median } else { 1.0 };
    let k = points.max(2);
    let x: Vec<f64> = (0..k).map(|i| m * 10f64.powf(-2.0 + 4.0 * i as f64 / (k - 1) as f64)).collect();
    let y = x.iter().map(|&s2| mmd_value(&s, &t, Bandwidth::Fixed(s2))).collect::<Result<_, _>>()?;
    Ok(MmdView {
        curve: Curve { x, y },
        median,
        family: mmd_value(&s, &t, Bandwidth::MedianFamily)?,
    })
}

#[wasm_bindgen(js_name = mmdCurve)]
pub fn mmd_curve(offset: f64, n: usize, dim: usize, seed: u32, points: usize) -> Result<MmdView, JsError> {
    mmd_view(offset, n, dim, seed, points).map_err(js)
}
