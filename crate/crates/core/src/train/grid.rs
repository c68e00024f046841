use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_siamese, RunStatus, TrainConfig};
use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::metrics;
use crate::models::ModelSpec;
use crate::rng::SeedStream;

pub const LAMBDA1_GRID: [f64; 6] = [0.0, 0.2, 1.0, 2.0, 10.0, 15.0];
pub const LAMBDA2_GRID: [f64; 6] = [0.0, 0.02, 0.05, 0.1, 0.2, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Target accuracy of each repetition.
    pub accuracies: Vec<f64>,
    /// Mean over repetitions; NaN when any repetition failed.
    pub mean: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    /// Row-major: `cells[i * lambda2.len() + j]` holds `(lambda1[i], lambda2[j])`.
    pub cells: Vec<GridCell>,
    pub best: Option<(f64, f64)>,
    pub best_accuracy: f64,
    /// How cells were scored. Always labeled target accuracy, which is an
    /// oracle selection rule rather than a deployable one.
    pub selection: String,
}

impl GridResult {
    pub fn cell(&self, lambda1: f64, lambda2: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.lambda1 == lambda1 && c.lambda2 == lambda2)
    }

    /// Mean accuracies as a matrix: one row per λ1, one column per λ2.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda1\\lambda2");
        for l2 in &self.lambda2 {
            s.push_str(&format!(",{l2}"));
        }
        s.push('\n');
        for (i, l1) in self.lambda1.iter().enumerate() {
            s.push_str(&l1.to_string());
            for j in 0..self.lambda2.len() {
                let m = self.cells[i * self.lambda2.len() + j].mean;
                s.push_str(&format!(",{m}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Picks the highest mean accuracy; ties go to the smaller λ2, then the
/// smaller λ1. NaN cells never win.
pub fn select_best(cells: &[GridCell]) -> Option<&GridCell> {
    cells.iter().filter(|c| !c.mean.is_nan()).fold(None, |best: Option<&GridCell>, c| match best {
        None => Some(c),
        Some(b) => {
            let better = c.mean > b.mean
                || (c.mean == b.mean && (c.lambda2 < b.lambda2 || (c.lambda2 == b.lambda2 && c.lambda1 < b.lambda1)));
            Some(if better { c } else { b })
        }
    })
}

/// Trains every `(λ1, λ2)` cell `base.repetitions` times and scores each run
/// on the labeled `eval_target`. Repetition `r` of every cell uses the same
/// derived seed. Runs execute in parallel and are merged by
/// (cell, repetition) index.
pub fn grid_search(
    source: &TrialSet,
    target: &TrialSet,
    eval_target: &TrialSet,
    spec: &ModelSpec,
    base: &TrainConfig,
    lambda1: &[f64],
    lambda2: &[f64],
) -> Result<GridResult> {
    base.validate()?;
    if !eval_target.is_labeled() {
        return Err(Error::Config("grid search scores cells on a labeled target set".into()));
    }
    let reps = base.repetitions;
    let seeds = SeedStream::new(base.seed);
    let jobs: Vec<(usize, usize, usize)> = (0..lambda1.len())
        .flat_map(|i| (0..lambda2.len()).flat_map(move |j| (0..reps).map(move |r| (i, j, r))))
        .collect();
    let outcomes: Vec<std::result::Result<f64, String>> = jobs
        .par_iter()
        .map(|&(i, j, r)| {
            let cfg = TrainConfig {
                lambda1: lambda1[i],
                lambda2: lambda2[j],
                seed: seeds.split_index(r as u64).seed(),
                ..base.clone()
            };
            let run = train_siamese(source, target, spec, &cfg, None).map_err(|e| e.to_string())?;
            if let RunStatus::Diverged { reason, .. } = run.record.status {
                return Err(reason);
            }
            metrics::evaluate(&run.model, eval_target)
                .map(|rep| rep.accuracy)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut cells = Vec::with_capacity(lambda1.len() * lambda2.len());
    for (i, &l1) in lambda1.iter().enumerate() {
        for (j, &l2) in lambda2.iter().enumerate() {
            let base_idx = (i * lambda2.len() + j) * reps;
            let runs = &outcomes[base_idx..base_idx + reps];
            let error = runs.iter().find_map(|o| o.as_ref().err().cloned());
            let accuracies: Vec<f64> = runs.iter().map(|o| *o.as_ref().unwrap_or(&f64::NAN)).collect();
            let mean = if error.is_some() {
                f64::NAN
            } else {
                accuracies.iter().sum::<f64>() / reps as f64
            };
            cells.push(GridCell {
                lambda1: l1,
                lambda2: l2,
                accuracies,
                mean,
                error,
            });
        }
    }
    let best = select_best(&cells);
    Ok(GridResult {
        lambda1: lambda1.to_vec(),
        lambda2: lambda2.to_vec(),
        best: best.map(|c| (c.lambda1, c.lambda2)),
        best_accuracy: best.map_or(f64::NAN, |c| c.mean),
        cells,
        selection: "oracle: mean labeled target-session accuracy".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(l1: f64, l2: f64, mean: f64) -> GridCell {
        GridCell {
            lambda1: l1,
            lambda2: l2,
            accuracies: vec![mean],
            mean,
            error: None,
        }
    }

    #[test]
    fn all_equal_selects_origin() {
        let cells: Vec<GridCell> = LAMBDA1_GRID
            .iter()
            .flat_map(|&a| LAMBDA2_GRID.iter().map(move |&b| cell(a, b, 0.5)))
            .rev()
            .collect();
        let b = select_best(&cells).unwrap();
        assert_eq!((b.lambda1, b.lambda2), (0.0, 0.0));
    }

    #[test]
    fn tie_prefers_smaller_lambda2_then_lambda1() {
        let cells = vec![cell(0.2, 0.05, 0.8), cell(10.0, 0.02, 0.8), cell(1.0, 0.02, 0.8), cell(0.0, 0.5, 0.7)];
        let b = select_best(&cells).unwrap();
        assert_eq!((b.lambda1, b.lambda2), (1.0, 0.02));
    }

    #[test]
    fn nan_cells_never_win() {
        let cells = vec![cell(0.0, 0.0, f64::NAN), cell(1.0, 0.1, 0.3)];
        assert_eq!(select_best(&cells).unwrap().lambda1, 1.0);
        assert!(select_best(&[cell(0.0, 0.0, f64::NAN)]).is_none());
    }
}
