//! Central finite-difference verification of the tape's analytic gradients.

use rand::Rng as _;
use rand::SeedableRng;

use super::tape::{BnMode, Padding, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Coordinates probed per leaf tensor; larger leaves are strided.
const MAX_PROBES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    ConvValid,
    ConvSame,
    DepthwiseConv,
    BatchNormTrain,
    BatchNormEval,
    Square,
    Log,
    Elu,
    AvgPool,
    Dropout,
    Dense,
    LogSoftmax,
    SoftmaxLoss,
    CosineCenterLoss,
    MmdLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::ConvValid,
        OpKind::ConvSame,
        OpKind::DepthwiseConv,
        OpKind::BatchNormTrain,
        OpKind::BatchNormEval,
        OpKind::Square,
        OpKind::Log,
        OpKind::Elu,
        OpKind::AvgPool,
        OpKind::Dropout,
        OpKind::Dense,
        OpKind::LogSoftmax,
        OpKind::SoftmaxLoss,
        OpKind::CosineCenterLoss,
        OpKind::MmdLoss,
    ];

    /// Rank of the input shape the kind expects.
    pub fn input_rank(self) -> usize {
        match self {
            OpKind::Dense | OpKind::LogSoftmax | OpKind::SoftmaxLoss | OpKind::CosineCenterLoss | OpKind::MmdLoss => 2,
            _ => 4,
        }
    }

    /// A random admissible input shape for this kind.
    pub fn random_shape(self, rng: &mut Rng) -> Vec<usize> {
        match self.input_rank() {
            2 => vec![rng.gen_range(2..9), rng.gen_range(2..7)],
            _ => vec![
                rng.gen_range(2..5),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(4..12),
            ],
        }
    }
}

/// Leaves plus the function under test, built from a seed.
struct Case {
    leaves: Vec<Tensor>,
    readout: Option<Tensor>,
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

fn away_from_zero(t: Tensor, margin: f64) -> Tensor {
    t.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

fn make_case(kind: OpKind, shape: &[usize], rng: &mut Rng) -> Result<Case> {
    if shape.len() != kind.input_rank() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(
            "grad_check",
            format!("{kind:?} needs a rank-{} shape with positive extents, got {shape:?}", kind.input_rank()),
        ));
    }
    let x = Tensor::randn(shape, rng);
    let case = match kind {
        OpKind::ConvValid | OpKind::ConvSame | OpKind::DepthwiseConv => {
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let (groups, cout, kh, kw, padding) = match kind {
                OpKind::ConvValid => (1, 3, h.min(2), w.min(3), Padding::Valid),
                OpKind::ConvSame => (1, 2, h.min(3), 4, Padding::Same),
                _ => (c, c, h.min(2), 3.min(w), Padding::Valid),
            };
            let wt = Tensor::randn(&[cout, c / groups, kh, kw], rng);
            let b = Tensor::randn(&[cout], rng);
            Case {
                leaves: vec![x, wt, b],
                readout: None,
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), padding, groups)),
            }
        }
        OpKind::BatchNormTrain | OpKind::BatchNormEval => {
            let c = shape[1];
            let gamma = Tensor::uniform(&[c], 0.5, 1.5, rng);
            let beta = Tensor::randn(&[c], rng);
            let train = kind == OpKind::BatchNormTrain;
            let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
            Case {
                leaves: vec![x, gamma, beta],
                readout: None,
                build: Box::new(move |t, v| {
                    let mode = if train {
                        BnMode::Train
                    } else {
                        BnMode::Eval { mean: &mean, var: &var }
                    };
                    Ok(t.batch_norm(v[0], v[1], v[2], mode)?.0)
                }),
            }
        }
        OpKind::Square => Case {
            leaves: vec![x],
            readout: None,
            build: Box::new(|t, v| t.square(v[0])),
        },
        OpKind::Log => Case {
            leaves: vec![Tensor::uniform(shape, 0.2, 3.0, rng)],
            readout: None,
            build: Box::new(|t, v| t.log(v[0])),
        },
        OpKind::Elu => Case {
            leaves: vec![away_from_zero(x, 0.1)],
            readout: None,
            build: Box::new(|t, v| t.elu(v[0])),
        },
        OpKind::AvgPool => {
            let kw = shape[3].min(3);
            Case {
                leaves: vec![x],
                readout: None,
                build: Box::new(move |t, v| t.avg_pool(v[0], (1, kw), (1, 2))),
            }
        }
        OpKind::Dropout => {
            let mask_seed: u64 = rng.gen();
            Case {
                leaves: vec![x],
                readout: None,
                build: Box::new(move |t, v| t.dropout(v[0], 0.5, &mut Rng::seed_from_u64(mask_seed))),
            }
        }
        OpKind::Dense => {
            let fin = shape[1];
            let w = Tensor::randn(&[3, fin], rng);
            let b = Tensor::randn(&[3], rng);
            Case {
                leaves: vec![x, w, b],
                readout: None,
                build: Box::new(|t, v| t.dense(v[0], v[1], Some(v[2]))),
            }
        }
        OpKind::LogSoftmax => Case {
            leaves: vec![x],
            readout: None,
            build: Box::new(|t, v| t.log_softmax(v[0])),
        },
        OpKind::SoftmaxLoss => {
            let classes = shape[1];
            let labels: Vec<usize> = (0..shape[0]).map(|_| rng.gen_range(0..classes)).collect();
            Case {
                leaves: vec![x],
                readout: Some(Tensor::scalar(1.0)),
                build: Box::new(move |t, v| {
                    let lp = t.log_softmax(v[0])?;
                    t.nll(lp, &labels)
                }),
            }
        }
        OpKind::CosineCenterLoss => {
            let classes = 3;
            let centers = Tensor::randn(&[classes, shape[1]], rng);
            let labels: Vec<usize> = (0..shape[0]).map(|_| rng.gen_range(0..classes)).collect();
            Case {
                leaves: vec![x],
                readout: Some(Tensor::scalar(1.0)),
                build: Box::new(move |t, v| t.cosine_center(v[0], &centers, &labels)),
            }
        }
        OpKind::MmdLoss => {
            let target = Tensor::randn(shape, rng).map(|v| 0.5 * v + 0.3);
            let sigma2 = vec![0.5 * shape[1] as f64, 2.0 * shape[1] as f64];
            Case {
                leaves: vec![x, target],
                readout: Some(Tensor::scalar(1.0)),
                build: Box::new(move |t, v| t.mmd(v[0], v[1], &sigma2)),
            }
        }
    };
    Ok(case)
}

fn scalar_of(case: &Case, leaves: &[Tensor], readout: &Tensor) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.input(l.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = if tape.value(out).len() == 1 && readout.len() == 1 {
        tape.weighted_sum(&[(out, readout.item())])?
    } else {
        tape.dot(out, readout)?
    };
    Ok((tape, vars, loss))
}

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Maximum relative error between analytic gradients and central differences
/// with step [`FD_STEP`] over every leaf of the case built for `kind`.
/// Deterministic in `seed`.
pub fn grad_check(kind: OpKind, shape: &[usize], seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let case = make_case(kind, shape, &mut rng)?;

    // Random readout so every output coordinate contributes distinctly.
    let readout = match &case.readout {
        Some(r) => r.clone(),
        None => {
            let mut probe = Tape::new();
            let vars: Vec<Var> = case.leaves.iter().map(|l| probe.input(l.clone())).collect();
            let out = (case.build)(&mut probe, &vars)?;
            Tensor::randn(probe.value(out).shape(), &mut rng)
        }
    };

    let (tape, vars, loss) = scalar_of(&case, &case.leaves, &readout)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut leaves = case.leaves.clone();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; leaves[li].len()]);
        let n = leaves[li].len();
        let stride = n.div_ceil(MAX_PROBES).max(1);
        for k in (0..n).step_by(stride) {
            let orig = leaves[li].data()[k];
            leaves[li].data_mut()[k] = orig + FD_STEP;
            let (t_plus, _, l_plus) = scalar_of(&case, &leaves, &readout)?;
            leaves[li].data_mut()[k] = orig - FD_STEP;
            let (t_minus, _, l_minus) = scalar_of(&case, &leaves, &readout)?;
            leaves[li].data_mut()[k] = orig;
            let numeric = (t_plus.value(l_plus).item() - t_minus.value(l_minus).item()) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[k], numeric));
        }
    }
    Ok(worst)
}
