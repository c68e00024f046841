use std::collections::HashMap;

use rand::Rng as _;

use super::kernels::{self, BnSaved, ConvGeom, Dims4, Pad2d, PoolGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LOG_FLOOR: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    #[cfg(test)]
    pub(crate) fn from_index_for_tests(i: usize) -> Self {
        Var(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding: output extent `in - k + 1`.
    Valid,
    /// Output extent equals input extent; the extra sample of an even kernel
    /// goes on the trailing side.
    Same,
}

impl Padding {
    fn amounts(self, k: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let before = (k - 1) / 2;
                (before, k - 1 - before)
            }
        }
    }
}

/// Batch statistics produced by a training-mode batch norm, used by the
/// caller to advance running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        dims: Dims4,
        saved: BnSaved,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        dims: Dims4,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Square(Var),
    Log(Var),
    Elu(Var),
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LogSoftmax(Var),
    Nll {
        logp: Var,
        labels: Vec<usize>,
    },
    CosineCenter {
        h: Var,
        centers: Tensor,
        labels: Vec<usize>,
    },
    Mmd {
        s: Var,
        t: Var,
        sigma2: Vec<f64>,
    },
    Dot {
        x: Var,
        w: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A parameter is registered at most once per tape: every branch that reads
/// it receives the same [`Var`], and gradients from all branches accumulate
/// into that one node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    log_clamps: usize,
}

fn dims4(op: &'static str, t: &Tensor) -> Result<Dims4> {
    if t.ndim() != 4 {
        return Err(Error::shape(op, format!("expected a 4-D [n, c, h, w] input, got {:?}", t.shape())));
    }
    Ok(Dims4::from_shape(t.shape()))
}

fn rows_cols(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::shape(op, format!("expected a 2-D [rows, cols] input, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

fn unit(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_EPS);
    (v.iter().map(|a| a / norm).collect(), norm)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of log inputs that fell below [`LOG_FLOOR`] and were clamped.
    pub fn log_clamps(&self) -> usize {
        self.log_clamps
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Data that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient (used for input sensitivities).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// The node holding parameter `id`, registering it on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding, groups: usize) -> Result<Var> {
        let input = dims4("conv2d", self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("weight must be 4-D, got {ws:?}")));
        }
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if groups == 0 || input.c % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("channels in={} out={cout} not divisible by groups={groups}", input.c),
            ));
        }
        if cin_g * groups != input.c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} != weight in-channels {cin_g} x groups {groups}", input.c),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias shape {:?} != [{cout}]", self.value(b).shape())));
            }
        }
        let (top, bottom) = padding.amounts(kh);
        let (left, right) = padding.amounts(kw);
        let (ph, pw) = (input.h + top + bottom, input.w + left + right);
        if kh > ph {
            return Err(Error::shape("conv2d", format!("kernel height {kh} exceeds input height {}", input.h)));
        }
        if kw > pw {
            return Err(Error::shape("conv2d", format!("kernel width {kw} exceeds input width {}", input.w)));
        }
        let output = Dims4 {
            n: input.n,
            c: cout,
            h: ph - kh + 1,
            w: pw - kw + 1,
        };
        let geom = ConvGeom {
            input,
            output,
            kh,
            kw,
            groups,
            pad: Pad2d { top, bottom, left, right },
        };
        let mut out = vec![0.0; output.len()];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let rg = self.rg(&[Some(x), Some(w), b]);
        self.push("conv2d", Tensor::new(&output.to_shape(), out)?, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Batch norm over the `c` axis of a 4-D input.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let dims = dims4("batch_norm", self.value(x))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != dims.c {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} has {} entries for {} channels", self.value(v).len(), dims.c),
                ));
            }
        }
        let rg = self.rg(&[Some(x), Some(gamma), Some(beta)]);
        let mut out = vec![0.0; dims.len()];
        match mode {
            BnMode::Train => {
                let m = dims.n * dims.plane();
                if m < 2 {
                    return Err(Error::shape("batch_norm", "training mode needs at least two values per channel"));
                }
                let (saved, mean, var) = kernels::batch_norm_train(
                    dims,
                    self.value(x).data(),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    BN_EPS,
                    &mut out,
                );
                let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
                let v = self.push(
                    "batch_norm",
                    Tensor::new(&dims.to_shape(), out)?,
                    Op::BatchNormTrain { x, gamma, beta, dims, saved },
                    rg,
                )?;
                Ok((v, Some(BatchStats { mean, var: unbiased })))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != dims.c || var.len() != dims.c {
                    return Err(Error::shape("batch_norm", "running statistics do not match channel count"));
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let (g, b) = (self.value(gamma).data(), self.value(beta).data());
                let xs = self.value(x).data();
                let p = dims.plane();
                for n in 0..dims.n {
                    for c in 0..dims.c {
                        let base = (n * dims.c + c) * p;
                        for i in base..base + p {
                            out[i] = g[c] * (xs[i] - mean[c]) * inv_std[c] + b[c];
                        }
                    }
                }
                let v = self.push(
                    "batch_norm",
                    Tensor::new(&dims.to_shape(), out)?,
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        dims,
                        mean: mean.to_vec(),
                        inv_std,
                    },
                    rg,
                )?;
                Ok((v, None))
            }
        }
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        let rg = self.requires_grad(x);
        self.push("square", out, Op::Square(x), rg)
    }

    /// Natural log with inputs clamped to at least [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let clamps = self.value(x).data().iter().filter(|&&v| v < LOG_FLOOR).count();
        self.log_clamps += clamps;
        let out = self.value(x).map(|v| v.max(LOG_FLOOR).ln());
        let rg = self.requires_grad(x);
        self.push("log", out, Op::Log(x), rg)
    }

    /// ELU with unit alpha.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        let rg = self.requires_grad(x);
        self.push("elu", out, Op::Elu(x), rg)
    }

    pub fn avg_pool(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let input = dims4("avg_pool", self.value(x))?;
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::shape("avg_pool", "kernel and stride must be positive"));
        }
        if kh > input.h {
            return Err(Error::shape("avg_pool", format!("kernel height {kh} exceeds input height {}", input.h)));
        }
        if kw > input.w {
            return Err(Error::shape("avg_pool", format!("kernel width {kw} exceeds input width {}", input.w)));
        }
        let output = Dims4 {
            n: input.n,
            c: input.c,
            h: (input.h - kh) / sh + 1,
            w: (input.w - kw) / sw + 1,
        };
        let geom = PoolGeom { input, output, kh, kw, sh, sw };
        let mut out = vec![0.0; output.len()];
        kernels::avg_pool_forward(&geom, self.value(x).data(), &mut out);
        let rg = self.requires_grad(x);
        self.push("avg_pool", Tensor::new(&output.to_shape(), out)?, Op::AvgPool { x, geom }, rg)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.requires_grad(x);
        self.push("dropout", out, Op::Dropout { x, mask }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        self.push("reshape", out, Op::Reshape(x), rg)
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    /// `x @ w^T + b` with `w` of shape `[out, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = rows_cols("dense", self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || ws[1] != fin {
            return Err(Error::shape("dense", format!("weight {ws:?} does not accept {fin} input features")));
        }
        let fout = ws[0];
        if let Some(b) = b {
            if self.value(b).shape() != [fout] {
                return Err(Error::shape("dense", format!("bias shape {:?} != [{fout}]", self.value(b).shape())));
            }
        }
        let mut out = vec![0.0; n * fout];
        kernels::dense_forward(
            n,
            fin,
            fout,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let rg = self.rg(&[Some(x), Some(w), b]);
        self.push("dense", Tensor::new(&[n, fout], out)?, Op::Dense { x, w, b }, rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols("log_softmax", self.value(x))?;
        let mut out = vec![0.0; r * c];
        kernels::log_softmax_rows(r, c, self.value(x).data(), &mut out);
        let rg = self.requires_grad(x);
        self.push("log_softmax", Tensor::new(&[r, c], out)?, Op::LogSoftmax(x), rg)
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = rows_cols("nll", self.value(logp))?;
        if labels.len() != r {
            return Err(Error::shape("nll", format!("{} labels for {r} rows", labels.len())));
        }
        check_labels(labels, c)?;
        let lp = self.value(logp).data();
        let loss = -labels.iter().enumerate().map(|(i, &y)| lp[i * c + y]).sum::<f64>() / r as f64;
        let rg = self.requires_grad(logp);
        self.push(
            "nll",
            Tensor::scalar(loss),
            Op::Nll {
                logp,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// `1 - mean_i cos(h_i, centers[labels[i]])`. `centers` is held constant.
    pub fn cosine_center(&mut self, h: Var, centers: &Tensor, labels: &[usize]) -> Result<Var> {
        let (r, dim) = rows_cols("cosine_center", self.value(h))?;
        let (classes, cdim) = rows_cols("cosine_center", centers)?;
        if cdim != dim {
            return Err(Error::shape("cosine_center", format!("center width {cdim} != embedding width {dim}")));
        }
        if labels.len() != r || r == 0 {
            return Err(Error::shape("cosine_center", format!("{} labels for {r} rows", labels.len())));
        }
        check_labels(labels, classes)?;
        let hd = self.value(h).data();
        let cd = centers.data();
        let mut cos_sum = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let (hu, _) = unit(&hd[i * dim..(i + 1) * dim]);
            let (cu, _) = unit(&cd[y * dim..(y + 1) * dim]);
            cos_sum += hu.iter().zip(&cu).map(|(a, b)| a * b).sum::<f64>();
        }
        let loss = 1.0 - cos_sum / r as f64;
        let rg = self.requires_grad(h);
        self.push(
            "cosine_center",
            Tensor::scalar(loss),
            Op::CosineCenter {
                h,
                centers: centers.clone(),
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Biased squared MMD between rows of `s` and `t` under a Gaussian kernel
    /// averaged over the variances in `sigma2`.
    pub fn mmd(&mut self, s: Var, t: Var, sigma2: &[f64]) -> Result<Var> {
        let (ns, ds) = rows_cols("mmd", self.value(s))?;
        let (nt, dt) = rows_cols("mmd", self.value(t))?;
        if ns == 0 || nt == 0 {
            return Err(Error::shape("mmd", "empty batch"));
        }
        if ds != dt {
            return Err(Error::shape("mmd", format!("source width {ds} != target width {dt}")));
        }
        if sigma2.is_empty() || sigma2.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("MMD bandwidths must be positive".into()));
        }
        let value = kernels::mmd_forward(ns, nt, ds, self.value(s).data(), self.value(t).data(), sigma2);
        let rg = self.rg(&[Some(s), Some(t)]);
        self.push(
            "mmd",
            Tensor::scalar(value),
            Op::Mmd {
                s,
                t,
                sigma2: sigma2.to_vec(),
            },
            rg,
        )
    }

    /// `sum(x * w)` for a constant `w`; a generic scalar readout.
    pub fn dot(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        if self.value(x).shape() != w.shape() {
            return Err(Error::shape(
                "dot",
                format!("{:?} vs {:?}", self.value(x).shape(), w.shape()),
            ));
        }
        let v = self.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let rg = self.requires_grad(x);
        self.push("dot", Tensor::scalar(v), Op::Dot { x, w: w.clone() }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let w = Tensor::full(self.value(x).shape(), 1.0);
        self.dot(x, &w)
    }

    /// `sum_i w_i * term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::NotScalar(self.value(v).shape().to_vec()));
            }
            total += w * self.value(v).item();
        }
        let rg = terms.iter().any(|(v, _)| self.requires_grad(*v));
        self.push("weighted_sum", Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::EmptyTape);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Hands out the gradient buffer of `v`, allocated on first use.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let mut gx = wants(*x).then(|| vec![0.0; nodes[x.0].value.len()]);
                let mut gw = wants(*w).then(|| vec![0.0; nodes[w.0].value.len()]);
                let mut gb = b.filter(|b| wants(*b)).map(|b| vec![0.0; nodes[b.0].value.len()]);
                kernels::conv2d_backward(
                    geom,
                    nodes[x.0].value.data(),
                    nodes[w.0].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                add_into(grads, nodes, *x, gx);
                add_into(grads, nodes, *w, gw);
                if let Some(b) = b {
                    add_into(grads, nodes, *b, gb);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, dims, saved } => {
                let mut gx = wants(*x).then(|| vec![0.0; dims.len()]);
                let mut gg = wants(*gamma).then(|| vec![0.0; dims.c]);
                let mut gb = wants(*beta).then(|| vec![0.0; dims.c]);
                kernels::batch_norm_train_backward(
                    *dims,
                    saved,
                    nodes[gamma.0].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                add_into(grads, nodes, *x, gx);
                add_into(grads, nodes, *gamma, gg);
                add_into(grads, nodes, *beta, gb);
            }
            Op::BatchNormEval { x, gamma, beta, dims, mean, inv_std } => {
                let p = dims.plane();
                let xs = nodes[x.0].value.data();
                let gam = nodes[gamma.0].value.data();
                let mut gx = wants(*x).then(|| vec![0.0; dims.len()]);
                let mut gg = vec![0.0; dims.c];
                let mut gb = vec![0.0; dims.c];
                for n in 0..dims.n {
                    for c in 0..dims.c {
                        let base = (n * dims.c + c) * p;
                        for i in base..base + p {
                            gg[c] += g[i] * (xs[i] - mean[c]) * inv_std[c];
                            gb[c] += g[i];
                            if let Some(gx) = gx.as_mut() {
                                gx[i] += g[i] * gam[c] * inv_std[c];
                            }
                        }
                    }
                }
                add_into(grads, nodes, *x, gx);
                add_into(grads, nodes, *gamma, wants(*gamma).then_some(gg));
                add_into(grads, nodes, *beta, wants(*beta).then_some(gb));
            }
            Op::Square(x) => {
                let xs = nodes[x.0].value.data();
                let dst = slot(grads, nodes, *x);
                for ((d, gv), xv) in dst.iter_mut().zip(g).zip(xs) {
                    *d += 2.0 * xv * gv;
                }
            }
            Op::Log(x) => {
                let xs = nodes[x.0].value.data();
                let dst = slot(grads, nodes, *x);
                for ((d, gv), xv) in dst.iter_mut().zip(g).zip(xs) {
                    if *xv >= LOG_FLOOR {
                        *d += gv / xv;
                    }
                }
            }
            Op::Elu(x) => {
                let xs = nodes[x.0].value.data();
                let dst = slot(grads, nodes, *x);
                for ((d, gv), xv) in dst.iter_mut().zip(g).zip(xs) {
                    *d += if *xv > 0.0 { *gv } else { gv * xv.exp() };
                }
            }
            Op::AvgPool { x, geom } => {
                let dst = slot(grads, nodes, *x);
                kernels::avg_pool_backward(geom, g, dst);
            }
            Op::Dropout { x, mask } => {
                let dst = slot(grads, nodes, *x);
                for ((d, gv), m) in dst.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
            Op::Reshape(x) => {
                let dst = slot(grads, nodes, *x);
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Dense { x, w, b } => {
                let (n, fin) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let fout = nodes[w.0].value.shape()[0];
                let mut gx = wants(*x).then(|| vec![0.0; n * fin]);
                let mut gw = wants(*w).then(|| vec![0.0; fout * fin]);
                let mut gb = b.filter(|b| wants(*b)).map(|_| vec![0.0; fout]);
                kernels::dense_backward(
                    n,
                    fin,
                    fout,
                    nodes[x.0].value.data(),
                    nodes[w.0].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                add_into(grads, nodes, *x, gx);
                add_into(grads, nodes, *w, gw);
                if let Some(b) = b {
                    add_into(grads, nodes, *b, gb);
                }
            }
            Op::LogSoftmax(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let y = node.value.data();
                let dst = slot(grads, nodes, *x);
                kernels::log_softmax_backward(r, c, y, g, dst);
            }
            Op::Nll { logp, labels } => {
                let c = nodes[logp.0].value.shape()[1];
                let scale = g[0] / labels.len() as f64;
                let dst = slot(grads, nodes, *logp);
                for (i, &y) in labels.iter().enumerate() {
                    dst[i * c + y] -= scale;
                }
            }
            Op::CosineCenter { h, centers, labels } => {
                let dim = centers.shape()[1];
                let hd = nodes[h.0].value.data();
                let scale = g[0] / labels.len() as f64;
                let dst = slot(grads, nodes, *h);
                for (i, &y) in labels.iter().enumerate() {
                    let (hu, hn) = unit(&hd[i * dim..(i + 1) * dim]);
                    let (cu, _) = unit(&centers.data()[y * dim..(y + 1) * dim]);
                    let cos: f64 = hu.iter().zip(&cu).map(|(a, b)| a * b).sum();
                    for k in 0..dim {
                        dst[i * dim + k] -= scale * (cu[k] - cos * hu[k]) / hn;
                    }
                }
            }
            Op::Mmd { s, t, sigma2 } => {
                let (ns, dim) = (nodes[s.0].value.shape()[0], nodes[s.0].value.shape()[1]);
                let nt = nodes[t.0].value.shape()[0];
                let mut gs = wants(*s).then(|| vec![0.0; ns * dim]);
                let mut gt = wants(*t).then(|| vec![0.0; nt * dim]);
                kernels::mmd_backward(
                    ns,
                    nt,
                    dim,
                    nodes[s.0].value.data(),
                    nodes[t.0].value.data(),
                    sigma2,
                    g[0],
                    gs.as_deref_mut(),
                    gt.as_deref_mut(),
                );
                add_into(grads, nodes, *s, gs);
                add_into(grads, nodes, *t, gt);
            }
            Op::Dot { x, w } => {
                let dst = slot(grads, nodes, *x);
                for (d, wv) in dst.iter_mut().zip(w.data()) {
                    *d += g[0] * wv;
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if wants(v) {
                        slot(grads, nodes, v)[0] += g[0] * w;
                    }
                }
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: Option<Vec<f64>>) {
    let Some(g) = g else { return };
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (d, s) in existing.iter_mut().zip(&g) {
                *d += s;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`]: gradients of every leaf reachable from the loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every parameter registered on `tape` into the
    /// store's gradient buffers.
    pub fn accumulate(&self, tape: &Tape, store: &mut ParamStore) {
        for (&id, &v) in &tape.params {
            if let Some(g) = self.get(v) {
                for (d, s) in store.get_mut(id).grad.data_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}
