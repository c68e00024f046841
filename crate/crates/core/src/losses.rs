//! Softmax, cosine center and Gaussian-kernel MMD losses and their weighted
//! combination `L = L_s + λ1 L_c + λ2 L_d`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scale factors applied to the median heuristic in the default kernel family.
pub const MEDIAN_FAMILY: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Mean cross entropy of `labels` under `logits` (`[b, C]`).
pub fn softmax_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    tape.nll(lp, labels)
}

/// Per-class centroids on the unit sphere, moved by their own update rule
/// rather than by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterBank {
    classes: usize,
    dim: usize,
    centers: Vec<f64>,
    pub gamma: f64,
    /// Number of updates in which each class was present.
    pub updates: Vec<u64>,
}

fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn unit(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    row.iter().map(|x| x / n).collect()
}

impl CenterBank {
    /// Random unit-norm centers.
    pub fn new(classes: usize, dim: usize, gamma: f64, rng: &mut Rng) -> Self {
        let centers = (0..classes).flat_map(|_| random_unit(dim, rng)).collect();
        Self {
            classes,
            dim,
            centers,
            gamma,
            updates: vec![0; classes],
        }
    }

    pub fn from_centers(centers: Tensor, gamma: f64) -> Result<Self> {
        if centers.ndim() != 2 {
            return Err(Error::shape("center_bank", format!("centers must be 2-D, got {:?}", centers.shape())));
        }
        let (classes, dim) = (centers.shape()[0], centers.shape()[1]);
        Ok(Self {
            classes,
            dim,
            centers: centers.into_data(),
            gamma,
            updates: vec![0; classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, j: usize) -> &[f64] {
        &self.centers[j * self.dim..(j + 1) * self.dim]
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&[self.classes, self.dim], self.centers.clone()).expect("bank geometry")
    }

    /// `c_j <- c_j - γ Δc_j` with
    /// `Δc_j = Σ_{i: y_i = j} (c_j - h̄_i) / (1 + n_j)` over ℓ2-normalized
    /// embeddings `h̄_i`. Classes absent from the batch do not move. Rows that
    /// collapse to zero are redrawn from `rng`.
    pub fn update(&mut self, embeddings: &Tensor, labels: &[usize], rng: &mut Rng) -> Result<()> {
        let s = embeddings.shape();
        if s.len() != 2 || s[1] != self.dim || s[0] != labels.len() {
            return Err(Error::shape(
                "update_centers",
                format!("embeddings {s:?} with {} labels vs bank width {}", labels.len(), self.dim),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        let mut delta = vec![0.0; self.centers.len()];
        let mut counts = vec![0usize; self.classes];
        for (i, &y) in labels.iter().enumerate() {
            let h = unit(&embeddings.data()[i * self.dim..(i + 1) * self.dim]);
            counts[y] += 1;
            for k in 0..self.dim {
                delta[y * self.dim + k] += self.centers[y * self.dim + k] - h[k];
            }
        }
        for j in 0..self.classes {
            if counts[j] == 0 {
                continue;
            }
            self.updates[j] += 1;
            let scale = self.gamma / (1.0 + counts[j] as f64);
            let row = &mut self.centers[j * self.dim..(j + 1) * self.dim];
            for (c, d) in row.iter_mut().zip(&delta[j * self.dim..(j + 1) * self.dim]) {
                *c -= scale * d;
            }
            if row.iter().all(|&v| v == 0.0) {
                row.copy_from_slice(&random_unit(self.dim, rng));
            }
        }
        Ok(())
    }
}

/// `1 - mean_i cos(h_i, c_{y_i})`. Gradients reach the embeddings only.
pub fn cosine_center_loss(tape: &mut Tape, embeddings: Var, labels: &[usize], bank: &CenterBank) -> Result<Var> {
    tape.cosine_center(embeddings, &bank.tensor(), labels)
}

/// Kernel bandwidth policy for the MMD term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Five kernels with `σ² = m · {1/4, 1/2, 1, 2, 4}`, `m` the median
    /// squared distance between distinct rows of the joint batch.
    MedianFamily,
    /// A single kernel with this `σ²`.
    Fixed(f64),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::MedianFamily
    }
}

/// Median squared distance over all distinct row pairs of `[s; t]`.
pub fn median_sq_distance(s: &Tensor, t: &Tensor) -> f64 {
    let dim = s.shape()[1];
    let rows: Vec<&[f64]> = s.data().chunks(dim).chain(t.data().chunks(dim)).collect();
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(kernels::sq_dist(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    if d.len() % 2 == 1 {
        d[m]
    } else {
        0.5 * (d[m - 1] + d[m])
    }
}

/// Kernel variances for one batch pair. The median heuristic is computed from
/// values only, so bandwidths act as constants under differentiation.
pub fn bandwidths(policy: Bandwidth, s: &Tensor, t: &Tensor) -> Result<Vec<f64>> {
    match policy {
        Bandwidth::Fixed(v) if v > 0.0 && v.is_finite() => Ok(vec![v]),
        Bandwidth::Fixed(v) => Err(Error::Config(format!("fixed MMD bandwidth must be positive, got {v}"))),
        Bandwidth::MedianFamily => {
            let m = median_sq_distance(s, t);
            // All rows identical: any bandwidth gives zero discrepancy.
            let m = if m > 0.0 && m.is_finite() { m } else { 1.0 };
            Ok(MEDIAN_FAMILY.iter().map(|f| f * m).collect())
        }
    }
}

/// Biased squared MMD between source and target embeddings.
pub fn mmd_loss(tape: &mut Tape, source: Var, target: Var, policy: Bandwidth) -> Result<Var> {
    if tape.value(source).ndim() != 2 || tape.value(target).ndim() != 2 {
        return Err(Error::shape("mmd", "embeddings must be 2-D"));
    }
    if tape.value(source).is_empty() || tape.value(target).is_empty() {
        return Err(Error::shape("mmd", "empty batch"));
    }
    let sigma2 = bandwidths(policy, tape.value(source), tape.value(target))?;
    tape.mmd(source, target, &sigma2)
}

/// Trade-off weights λ1 (center) and λ2 (MMD).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) || !lambda1.is_finite() || !lambda2.is_finite() {
            return Err(Error::Config(format!(
                "trade-off weights must be finite and nonnegative, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} is {v}")))
    }
}

/// `L_s + λ1 L_c + λ2 L_d` on scalars.
pub fn total_loss_value(ls: f64, lc: f64, ld: f64, w: LossWeights) -> Result<f64> {
    check_finite("softmax loss", ls)?;
    check_finite("center loss", lc)?;
    check_finite("mmd loss", ld)?;
    Ok(ls + w.lambda1 * lc + w.lambda2 * ld)
}

/// `L_s + λ1 L_c + λ2 L_d` on the tape. Absent terms are skipped; with both
/// absent the softmax node itself is returned, so the graph is exactly the
/// single-loss one.
pub fn total_loss(tape: &mut Tape, ls: Var, lc: Option<Var>, ld: Option<Var>, w: LossWeights) -> Result<Var> {
    check_finite("softmax loss", tape.value(ls).item())?;
    let mut terms = vec![(ls, 1.0)];
    for (name, term, weight) in [("center loss", lc, w.lambda1), ("mmd loss", ld, w.lambda2)] {
        if let Some(v) = term {
            check_finite(name, tape.value(v).item())?;
            terms.push((v, weight));
        }
    }
    if terms.len() == 1 {
        return Ok(ls);
    }
    tape.weighted_sum(&terms)
}
