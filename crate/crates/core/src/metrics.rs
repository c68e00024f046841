//! Accuracy, Cohen's kappa, confusion matrices and per-participant tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tensor};
use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::models::Model;

/// Trials per eval-mode forward pass.
const EVAL_BATCH: usize = 64;

/// `κ = (acc - 1/C) / (1 - 1/C)`.
pub fn kappa(acc: f64, classes: usize) -> f64 {
    let p0 = 1.0 / classes as f64;
    (acc - p0) / (1.0 - p0)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub classes: usize,
    pub accuracy: f64,
    pub kappa: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Mean cross entropy, when logits were available.
    pub loss: Option<f64>,
}

impl EvalReport {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::shape(
                "evaluate",
                format!("{} predictions for {} labels", predicted.len(), labels.len()),
            ));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &y) in predicted.iter().zip(labels) {
            if y >= classes || p >= classes {
                return Err(Error::LabelOutOfRange {
                    label: y.max(p),
                    classes,
                });
            }
            confusion[y][p] += 1;
        }
        let n = labels.len();
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
        Ok(Self {
            n,
            classes,
            accuracy,
            kappa: kappa(accuracy, classes),
            confusion,
            loss: None,
        })
    }

    /// Predictions and mean cross entropy from `[n, C]` logits.
    pub fn from_logits(logits: &Tensor, labels: &[usize]) -> Result<Self> {
        let (n, c) = (logits.shape()[0], logits.shape()[1]);
        let predicted: Vec<usize> = logits.data().chunks(c).map(argmax).collect();
        let mut report = Self::from_predictions(&predicted, labels, c)?;
        let mut lp = vec![0.0; n * c];
        kernels::log_softmax_rows(n, c, logits.data(), &mut lp);
        let nll = -labels.iter().enumerate().map(|(i, &y)| lp[i * c + y]).sum::<f64>();
        report.loss = Some(if n == 0 { 0.0 } else { nll / n as f64 });
        Ok(report)
    }
}

/// Eval-mode logits and embeddings of every trial in `set`, in set order.
pub fn infer_set(model: &Model, set: &TrialSet) -> Result<(Tensor, Tensor)> {
    let spec = &model.spec;
    if set.channels() != spec.channels || set.samples() != spec.samples {
        return Err(Error::shape(
            "evaluate",
            format!(
                "model expects {}x{} trials, set has {}x{}",
                spec.channels,
                spec.samples,
                set.channels(),
                set.samples()
            ),
        ));
    }
    let mut logits = Vec::with_capacity(set.len() * spec.classes);
    let mut emb = Vec::with_capacity(set.len() * spec.embedding_dim());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (l, e) = model.infer(&set.batch(chunk))?;
        logits.extend_from_slice(l.data());
        emb.extend_from_slice(e.data());
    }
    Ok((
        Tensor::new(&[set.len(), spec.classes], logits)?,
        Tensor::new(&[set.len(), spec.embedding_dim()], emb)?,
    ))
}

/// Argmax predictions of `model` on a labeled set, with eval-mode batch norm
/// and no dropout.
pub fn evaluate(model: &Model, set: &TrialSet) -> Result<EvalReport> {
    let labels = set
        .labels()
        .ok_or_else(|| Error::Config("evaluation needs a labeled trial set".into()))?;
    let (logits, _) = infer_set(model, set)?;
    EvalReport::from_logits(&logits, labels)
}

/// Mean accuracy over repetitions with the matching kappa.
pub fn aggregate(reports: &[EvalReport]) -> (f64, f64) {
    if reports.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let acc = reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64;
    (acc, kappa(acc, reports[0].classes))
}

/// Methods as rows, participants as columns, and a final
/// "Average acc (kappa)" column, as in the paper's result tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub participants: Vec<String>,
    pub classes: usize,
    /// `(method, accuracy per participant in [0, 1])`.
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ResultTable {
    pub fn new(participants: Vec<String>, classes: usize) -> Self {
        Self {
            participants,
            classes,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, method: impl Into<String>, accuracies: Vec<f64>) -> Result<()> {
        if accuracies.len() != self.participants.len() {
            return Err(Error::shape(
                "result_table",
                format!("{} accuracies for {} participants", accuracies.len(), self.participants.len()),
            ));
        }
        self.rows.push((method.into(), accuracies));
        Ok(())
    }

    fn mean(acc: &[f64]) -> f64 {
        acc.iter().sum::<f64>() / acc.len() as f64
    }

    /// `67.75(0.570)` style cell.
    fn summary(&self, acc: &[f64]) -> String {
        let m = Self::mean(acc);
        format!("{:.2}({:.3})", 100.0 * m, kappa(m, self.classes))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for p in &self.participants {
            let _ = write!(s, ",{p}");
        }
        s.push_str(",average_acc,average_kappa\n");
        for (method, acc) in &self.rows {
            s.push_str(method);
            for a in acc {
                let _ = write!(s, ",{:.2}", 100.0 * a);
            }
            let m = Self::mean(acc);
            let _ = writeln!(s, ",{:.2},{:.3}", 100.0 * m, kappa(m, self.classes));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let method_w = self.rows.iter().map(|(m, _)| m.len()).max().unwrap_or(6).max(6);
        let cell_w = self.participants.iter().map(String::len).max().unwrap_or(0).max(6);
        let mut s = format!("{:<method_w$}", "Method");
        for p in &self.participants {
            let _ = write!(s, " | {p:>cell_w$}");
        }
        s.push_str(" | Average acc (kappa)\n");
        let _ = writeln!(s, "{}", "-".repeat(s.trim_end().chars().count()));
        for (method, acc) in &self.rows {
            let _ = write!(s, "{method:<method_w$}");
            for a in acc {
                let _ = write!(s, " | {:>cell_w$.2}", 100.0 * a);
            }
            let _ = writeln!(s, " | {}", self.summary(acc));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_examples() {
        assert!((kappa(0.6775, 4) - 0.570).abs() < 5e-4);
        assert!((kappa(0.80, 2) - 0.600).abs() < 1e-12);
        assert_eq!(kappa(0.25, 4), 0.0);
        assert_eq!(kappa(1.0, 3), 1.0);
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let r = EvalReport::from_predictions(&labels, &labels, 4).unwrap();
        assert_eq!((r.accuracy, r.kappa), (1.0, 1.0));
        let r = EvalReport::from_predictions(&[2; 8], &labels, 4).unwrap();
        assert_eq!(r.accuracy, 0.25);
        assert_eq!(r.kappa, 0.0);
        let trace: usize = (0..4).map(|c| r.confusion[c][c]).sum();
        assert_eq!(trace as f64 / 8.0, r.accuracy);
        for row in &r.confusion {
            assert_eq!(row.iter().sum::<usize>(), 2);
        }
    }

    #[test]
    fn ties_go_to_lowest_class() {
        assert_eq!(argmax(&[0.3, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn table_layout() {
        let mut t = ResultTable::new(vec!["A01".into(), "A02".into()], 4);
        t.push("VA-EEGNet", vec![0.70, 0.6550]).unwrap();
        let text = t.to_text();
        assert!(text.contains("Average acc (kappa)"));
        assert!(text.contains("67.75(0.570)"));
        assert!(t.to_csv().starts_with("method,A01,A02,average_acc,average_kappa\n"));
        assert!(t.push("x", vec![0.5]).is_err());
    }
}
