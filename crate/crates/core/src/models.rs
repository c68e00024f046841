//! The shallow ConvNet and EEGNet reference architectures, built for any
//! `(E, T, C)`, with per-layer parameter accounting.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, ParamGroup, ParamId, ParamStore, Padding, Tape, Tensor, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    ConvNet,
    EegNet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::ConvNet => "convnet",
            Arch::EegNet => "eegnet",
        }
    }

    /// Learning rate used for this backbone.
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Arch::ConvNet => 1e-4,
            Arch::EegNet => 1e-3,
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "convnet" => Ok(Arch::ConvNet),
            "eegnet" => Ok(Arch::EegNet),
            other => Err(Error::Config(format!("unknown model '{other}' (expected convnet or eegnet)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        padding: PadMode,
        groups: usize,
        bias: bool,
    },
    /// Depthwise `(1, k)` convolution followed by a pointwise `1 x 1` one.
    SeparableConv {
        channels: usize,
        out_ch: usize,
        kernel: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Square,
    Log,
    Elu,
    AvgPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Dropout {
        p: f64,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Valid,
    Same,
}

impl From<PadMode> for Padding {
    fn from(p: PadMode) -> Self {
        match p {
            PadMode::Valid => Padding::Valid,
            PadMode::Same => Padding::Same,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// Row label as printed in the architecture tables.
    pub label: String,
    pub kind: LayerKind,
    /// `(maps, height, width)` after this layer.
    pub out_shape: (usize, usize, usize),
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match &self.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                groups,
                bias,
                ..
            } => out_ch * (in_ch / groups) * kernel.0 * kernel.1 + if *bias { *out_ch } else { 0 },
            LayerKind::SeparableConv { channels, out_ch, kernel } => channels * kernel + channels * out_ch,
            LayerKind::BatchNorm { channels } => 2 * channels,
            LayerKind::Dense { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }
}

/// A declarative layer list. Layers before `split` form the feature
/// extractor; its flattened output is the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub channels: usize,
    pub samples: usize,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    pub split: usize,
}

struct Builder {
    layers: Vec<LayerSpec>,
    shape: (usize, usize, usize),
}

impl Builder {
    fn new(channels: usize, samples: usize) -> Self {
        Self {
            layers: Vec::new(),
            shape: (1, channels, samples),
        }
    }

    fn push(&mut self, label: &str, kind: LayerKind) -> Result<()> {
        let (c, h, w) = self.shape;
        let too_small = |detail: String| Error::Layer {
            layer: label.to_string(),
            detail,
        };
        self.shape = match &kind {
            LayerKind::Conv {
                out_ch, kernel, padding, ..
            } => match padding {
                PadMode::Same => (*out_ch, h, w),
                PadMode::Valid => {
                    if kernel.0 > h || kernel.1 > w {
                        return Err(too_small(format!("kernel {kernel:?} exceeds input {h}x{w}")));
                    }
                    (*out_ch, h - kernel.0 + 1, w - kernel.1 + 1)
                }
            },
            LayerKind::SeparableConv { out_ch, .. } => (*out_ch, h, w),
            LayerKind::AvgPool { kernel, stride } => {
                if kernel.0 > h || kernel.1 > w {
                    return Err(too_small(format!("pool {kernel:?} exceeds input {h}x{w}")));
                }
                (c, (h - kernel.0) / stride.0 + 1, (w - kernel.1) / stride.1 + 1)
            }
            LayerKind::Dense { outputs, .. } => (*outputs, 1, 1),
            _ => (c, h, w),
        };
        self.layers.push(LayerSpec {
            label: label.to_string(),
            kind,
            out_shape: self.shape,
        });
        Ok(())
    }

    fn flat(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }
}

fn check_dims(channels: usize, samples: usize, classes: usize) -> Result<()> {
    if channels == 0 || samples == 0 {
        return Err(Error::Config(format!("input must be non-empty, got {channels}x{samples}")));
    }
    if classes < 2 {
        return Err(Error::Config(format!("need at least two classes, got {classes}")));
    }
    Ok(())
}

/// Shallow ConvNet: temporal conv, spatial conv, batch norm, square, average
/// pooling, log, dropout, then a classifier spanning the remaining width.
pub fn build_convnet(channels: usize, samples: usize, classes: usize) -> Result<ModelSpec> {
    check_dims(channels, samples, classes)?;
    let mut b = Builder::new(channels, samples);
    let conv = |in_ch, out_ch, kernel, bias| LayerKind::Conv {
        in_ch,
        out_ch,
        kernel,
        padding: PadMode::Valid,
        groups: 1,
        bias,
    };
    b.push("Temporal Conv", conv(1, 40, (1, 25), true))?;
    b.push("Spatial Conv", conv(40, 40, (channels, 1), false))?;
    b.push("BatchNorm", LayerKind::BatchNorm { channels: 40 })?;
    b.push("Square Activation", LayerKind::Square)?;
    b.push(
        "Average Pooling",
        LayerKind::AvgPool {
            kernel: (1, 75),
            stride: (1, 15),
        },
    )?;
    b.push("Logarithm Activation", LayerKind::Log)?;
    b.push("Dropout", LayerKind::Dropout { p: 0.5 })?;
    let split = b.layers.len();
    let inputs = b.flat();
    b.push("Conv2d", LayerKind::Dense { inputs, outputs: classes })?;
    Ok(ModelSpec {
        arch: Arch::ConvNet,
        channels,
        samples,
        classes,
        layers: b.layers,
        split,
    })
}

/// EEGNet with 8 temporal filters, depth multiplier 1 and 16 separable filters.
pub fn build_eegnet(channels: usize, samples: usize, classes: usize) -> Result<ModelSpec> {
    check_dims(channels, samples, classes)?;
    if samples < 64 {
        return Err(Error::Layer {
            layer: "Temporal Conv".into(),
            detail: format!("needs at least 64 samples, got {samples}"),
        });
    }
    let mut b = Builder::new(channels, samples);
    b.push(
        "Temporal Conv",
        LayerKind::Conv {
            in_ch: 1,
            out_ch: 8,
            kernel: (1, 64),
            padding: PadMode::Same,
            groups: 1,
            bias: false,
        },
    )?;
    b.push("BatchNorm", LayerKind::BatchNorm { channels: 8 })?;
    b.push(
        "Depthwise Conv",
        LayerKind::Conv {
            in_ch: 8,
            out_ch: 8,
            kernel: (channels, 1),
            padding: PadMode::Valid,
            groups: 8,
            bias: false,
        },
    )?;
    b.push("BatchNorm", LayerKind::BatchNorm { channels: 8 })?;
    b.push("ELU Action", LayerKind::Elu)?;
    b.push(
        "Average Pooling",
        LayerKind::AvgPool {
            kernel: (1, 4),
            stride: (1, 4),
        },
    )?;
    b.push("Dropout", LayerKind::Dropout { p: 0.5 })?;
    b.push(
        "Separable Conv",
        LayerKind::SeparableConv {
            channels: 8,
            out_ch: 16,
            kernel: 16,
        },
    )?;
    b.push("BatchNorm", LayerKind::BatchNorm { channels: 16 })?;
    b.push("ELU Action", LayerKind::Elu)?;
    b.push(
        "Average Pooling",
        LayerKind::AvgPool {
            kernel: (1, 8),
            stride: (1, 8),
        },
    )?;
    b.push("Dropout", LayerKind::Dropout { p: 0.5 })?;
    let split = b.layers.len();
    let inputs = b.flat();
    b.push("Fully Connected", LayerKind::Dense { inputs, outputs: classes })?;
    Ok(ModelSpec {
        arch: Arch::EegNet,
        channels,
        samples,
        classes,
        layers: b.layers,
        split,
    })
}

pub fn build(arch: Arch, channels: usize, samples: usize, classes: usize) -> Result<ModelSpec> {
    match arch {
        Arch::ConvNet => build_convnet(channels, samples, classes),
        Arch::EegNet => build_eegnet(channels, samples, classes),
    }
}

impl ModelSpec {
    /// Width of the embedding, i.e. the classifier's input.
    pub fn embedding_dim(&self) -> usize {
        let (c, h, w) = self.layers[self.split - 1].out_shape;
        c * h * w
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// One line per layer, `key=value` fields, preceded by a model header.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "model arch={} channels={} samples={} classes={} split={} embedding={} params={}",
            self.arch.name(),
            self.channels,
            self.samples,
            self.classes,
            self.split,
            self.embedding_dim(),
            self.total_params()
        );
        for (i, l) in self.layers.iter().enumerate() {
            let (c, h, w) = l.out_shape;
            let group = if i < self.split { "feature" } else { "classifier" };
            let _ = write!(s, "layer index={i} label=\"{}\" group={group}", l.label);
            match &l.kind {
                LayerKind::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    padding,
                    groups,
                    bias,
                } => {
                    let pad = if *padding == PadMode::Same { "same" } else { "valid" };
                    let _ = write!(
                        s,
                        " kind=conv in={in_ch} out={out_ch} kernel={}x{} padding={pad} groups={groups} bias={bias}",
                        kernel.0, kernel.1
                    );
                }
                LayerKind::SeparableConv { channels, out_ch, kernel } => {
                    let _ = write!(s, " kind=separable in={channels} out={out_ch} kernel=1x{kernel} padding=same");
                }
                LayerKind::BatchNorm { channels } => {
                    let _ = write!(s, " kind=batchnorm channels={channels}");
                }
                LayerKind::Square => s.push_str(" kind=square"),
                LayerKind::Log => s.push_str(" kind=log"),
                LayerKind::Elu => s.push_str(" kind=elu"),
                LayerKind::AvgPool { kernel, stride } => {
                    let _ = write!(
                        s,
                        " kind=avgpool kernel={}x{} stride={}x{}",
                        kernel.0, kernel.1, stride.0, stride.1
                    );
                }
                LayerKind::Dropout { p } => {
                    let _ = write!(s, " kind=dropout p={p}");
                }
                LayerKind::Dense { inputs, outputs } => {
                    let _ = write!(s, " kind=dense in={inputs} out={outputs}");
                }
            }
            let _ = writeln!(s, " out_shape={c}x{h}x{w} params={}", l.param_count());
        }
        s
    }

    /// Rebuilds a spec from the header of [`ModelSpec::to_text`] and checks
    /// that every layer line matches.
    pub fn from_text(text: &str) -> Result<Self> {
        let header = text
            .lines()
            .find(|l| l.starts_with("model "))
            .ok_or_else(|| Error::Config("model spec has no header line".into()))?;
        let field = |key: &str| -> Result<&str> {
            header
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Config(format!("model header lacks '{key}'")))
        };
        let num = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| Error::Config(format!("model header field '{key}' is not an integer")))
        };
        let arch: Arch = field("arch")?.parse()?;
        let spec = build(arch, num("channels")?, num("samples")?, num("classes")?)?;
        if spec.to_text().trim() != text.trim() {
            return Err(Error::Config("model spec text does not match the rebuilt architecture".into()));
        }
        Ok(spec)
    }
}

/// One row of a parameter-count comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub label: String,
    pub params: usize,
    pub paper: Option<usize>,
}

impl CountRow {
    pub fn matches(&self) -> Option<bool> {
        self.paper.map(|p| p == self.params)
    }

    pub fn delta(&self) -> Option<i64> {
        self.paper.map(|p| self.params as i64 - p as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    /// `"IIA"` or `"IIB"` when the channel count selects a printed column.
    pub reference: Option<String>,
    pub rows: Vec<CountRow>,
    pub total: CountRow,
}

impl ParamCount {
    /// Rows with a printed value that differs from the computed one.
    pub fn mismatches(&self) -> Vec<&CountRow> {
        self.rows
            .iter()
            .chain(std::iter::once(&self.total))
            .filter(|r| r.matches() == Some(false))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:>8} {:>8} {:>7}  {}",
            "layer",
            "params",
            "paper",
            "delta",
            self.reference.as_deref().unwrap_or("no reference")
        );
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            let paper = r.paper.map_or("-".to_string(), |p| p.to_string());
            let delta = r.delta().map_or("-".to_string(), |d| format!("{d:+}"));
            let flag = match r.matches() {
                Some(true) => "match",
                Some(false) => "MISMATCH",
                None => "",
            };
            let _ = writeln!(s, "{:<22} {:>8} {:>8} {:>7}  {flag}", r.label, r.params, paper, delta);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,paper,delta,match\n");
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.label,
                r.params,
                r.paper.map_or(String::new(), |p| p.to_string()),
                r.delta().map_or(String::new(), |d| d.to_string()),
                r.matches().map_or(String::new(), |m| m.to_string())
            );
        }
        s
    }
}

/// Printed parameter counts for layers that carry parameters, in layer order,
/// as `(label, IIA value, IIB value)`, followed by the printed totals.
fn paper_reference(arch: Arch) -> (&'static [(&'static str, Option<usize>, Option<usize>)], (usize, usize)) {
    match arch {
        Arch::ConvNet => (
            &[
                ("Temporal Conv", Some(1040), Some(1040)),
                ("Spatial Conv", Some(35200), Some(4800)),
                ("BatchNorm", Some(80), Some(80)),
                ("Conv2d", Some(11044), Some(4162)),
            ],
            (47364, 10082),
        ),
        Arch::EegNet => (
            &[
                ("Temporal Conv", Some(512), Some(512)),
                ("BatchNorm", Some(16), Some(16)),
                ("Depthwise Conv", Some(176), Some(24)),
                // The second column of this row is blank in the printed table.
                ("BatchNorm", Some(16), None),
                ("Separable Conv", Some(272), Some(128)),
                ("BatchNorm", Some(32), Some(32)),
                ("Fully Connected", Some(1988), Some(738)),
            ],
            (3012, 1610),
        ),
    }
}

/// Per-layer parameter counts compared against the printed tables. The
/// column is chosen by channel count: 22 channels for IIA, 3 for IIB.
pub fn count_params(spec: &ModelSpec) -> ParamCount {
    let (table, totals) = paper_reference(spec.arch);
    let column = match spec.channels {
        22 => Some(0),
        3 => Some(1),
        _ => None,
    };
    let mut refs = table.iter();
    let rows: Vec<CountRow> = spec
        .layers
        .iter()
        .filter(|l| l.param_count() > 0)
        .map(|l| {
            let paper = column.and_then(|col| {
                let (label, a, b) = refs.next()?;
                debug_assert_eq!(*label, l.label);
                if col == 0 {
                    *a
                } else {
                    *b
                }
            });
            CountRow {
                label: l.label.clone(),
                params: l.param_count(),
                paper,
            }
        })
        .collect();
    ParamCount {
        reference: column.map(|c| if c == 0 { "IIA".to_string() } else { "IIB".to_string() }),
        total: CountRow {
            label: "Total".into(),
            params: spec.total_params(),
            paper: column.map(|c| if c == 0 { totals.0 } else { totals.1 }),
        },
        rows,
    }
}

/// Running batch-norm estimates for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// Graph nodes produced by one forward pass.
pub struct Forward {
    /// `[b, L]` flattened feature-extractor output.
    pub embedding: Var,
    /// `[b, C]` unnormalized class scores.
    pub logits: Var,
    /// Batch statistics of each batch-norm layer (train mode only), keyed by
    /// layer index.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

/// A built network: spec, parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    /// Parameter ids owned by each layer, in layer order.
    pub layer_params: Vec<Vec<ParamId>>,
    pub running: Vec<Option<RunningStats>>,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-limit..limit)).collect()).expect("init shape")
}

impl Model {
    /// Glorot-uniform weights, zero biases, unit batch-norm scales.
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        let mut layer_params = Vec::with_capacity(spec.layers.len());
        let mut running = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let group = if i < spec.split {
                ParamGroup::FeatureExtractor
            } else {
                ParamGroup::Classifier
            };
            let name = |p: &str| format!("{i}.{}.{p}", l.label.to_lowercase().replace(' ', "_"));
            let mut ids = Vec::new();
            let mut stats = None;
            match &l.kind {
                LayerKind::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    groups,
                    bias,
                    ..
                } => {
                    let cin = in_ch / groups;
                    let rf = kernel.0 * kernel.1;
                    let w = glorot(&[*out_ch, cin, kernel.0, kernel.1], cin * rf, out_ch / groups * rf, rng);
                    ids.push(params.add(name("weight"), w, group));
                    if *bias {
                        ids.push(params.add(name("bias"), Tensor::zeros(&[*out_ch]), group));
                    }
                }
                LayerKind::SeparableConv { channels, out_ch, kernel } => {
                    let dw = glorot(&[*channels, 1, 1, *kernel], *kernel, *kernel, rng);
                    ids.push(params.add(name("depthwise"), dw, group));
                    let pw = glorot(&[*out_ch, *channels, 1, 1], *channels, *out_ch, rng);
                    ids.push(params.add(name("pointwise"), pw, group));
                }
                LayerKind::BatchNorm { channels } => {
                    ids.push(params.add(name("gamma"), Tensor::full(&[*channels], 1.0), group));
                    ids.push(params.add(name("beta"), Tensor::zeros(&[*channels]), group));
                    stats = Some(RunningStats {
                        mean: vec![0.0; *channels],
                        var: vec![1.0; *channels],
                    });
                }
                LayerKind::Dense { inputs, outputs } => {
                    let w = glorot(&[*outputs, *inputs], *inputs, *outputs, rng);
                    ids.push(params.add(name("weight"), w, group));
                    ids.push(params.add(name("bias"), Tensor::zeros(&[*outputs]), group));
                }
                _ => {}
            }
            layer_params.push(ids);
            running.push(stats);
        }
        Self {
            spec,
            params,
            layer_params,
            running,
        }
    }

    /// Records a forward pass of `input` (`[b, 1, E, T]`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Forward> {
        let s = input.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.spec.channels || s[3] != self.spec.samples {
            return Err(Error::shape(
                "model input",
                format!(
                    "expected [b, 1, {}, {}], got {s:?}",
                    self.spec.channels, self.spec.samples
                ),
            ));
        }
        let mut x = tape.constant(input.clone());
        let mut batch_stats = Vec::new();
        let mut embedding = None;
        for (i, l) in self.spec.layers.iter().enumerate() {
            if i == self.spec.split {
                let e = tape.flatten(x)?;
                embedding = Some(e);
                x = e;
            }
            let p = |tape: &mut Tape, k: usize| tape.param(&self.params, self.layer_params[i][k]);
            x = match &l.kind {
                LayerKind::Conv {
                    padding, groups, bias, ..
                } => {
                    let w = p(tape, 0);
                    let b = if *bias { Some(p(tape, 1)) } else { None };
                    tape.conv2d(x, w, b, (*padding).into(), *groups)?
                }
                LayerKind::SeparableConv { channels, .. } => {
                    let dw = p(tape, 0);
                    let pw = p(tape, 1);
                    let y = tape.conv2d(x, dw, None, Padding::Same, *channels)?;
                    tape.conv2d(y, pw, None, Padding::Valid, 1)?
                }
                LayerKind::BatchNorm { .. } => {
                    let (g, b) = (p(tape, 0), p(tape, 1));
                    let (y, stats) = match mode {
                        Mode::Train => tape.batch_norm(x, g, b, BnMode::Train)?,
                        Mode::Eval => {
                            let r = self.running[i].as_ref().expect("batch norm has running stats");
                            tape.batch_norm(
                                x,
                                g,
                                b,
                                BnMode::Eval {
                                    mean: &r.mean,
                                    var: &r.var,
                                },
                            )?
                        }
                    };
                    if let Some(st) = stats {
                        batch_stats.push((i, st));
                    }
                    y
                }
                LayerKind::Square => tape.square(x)?,
                LayerKind::Log => tape.log(x)?,
                LayerKind::Elu => tape.elu(x)?,
                LayerKind::AvgPool { kernel, stride } => tape.avg_pool(x, *kernel, *stride)?,
                LayerKind::Dropout { p: rate } => match mode {
                    Mode::Train => tape.dropout(x, *rate, rng)?,
                    Mode::Eval => x,
                },
                LayerKind::Dense { .. } => {
                    let (w, b) = (p(tape, 0), p(tape, 1));
                    tape.dense(x, w, Some(b))?
                }
            };
        }
        Ok(Forward {
            embedding: embedding.expect("classifier follows the split"),
            logits: x,
            batch_stats,
        })
    }

    /// Blends batch statistics into the running estimates with momentum
    /// [`BN_MOMENTUM`].
    pub fn update_running(&mut self, batch_stats: &[(usize, BatchStats)]) {
        for (i, st) in batch_stats {
            if let Some(r) = self.running[*i].as_mut() {
                for (m, b) in r.mean.iter_mut().zip(&st.mean) {
                    *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
                }
                for (v, b) in r.var.iter_mut().zip(&st.var) {
                    *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
                }
            }
        }
    }

    /// Eval-mode logits and embeddings for a batch.
    pub fn infer(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        // Eval mode draws nothing from the stream.
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(0);
        let f = self.forward(&mut tape, input, Mode::Eval, &mut rng)?;
        Ok((tape.value(f.logits).clone(), tape.value(f.embedding).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn convnet_table_values_iia() {
        let spec = build_convnet(22, 1125, 4).unwrap();
        let c = count_params(&spec);
        let got: Vec<usize> = c.rows.iter().map(|r| r.params).collect();
        assert_eq!(got, vec![1040, 35200, 80, 11044]);
        assert_eq!(c.total.params, 47364);
        assert!(c.mismatches().is_empty());
        assert_eq!(spec.embedding_dim(), 40 * 69);
    }

    #[test]
    fn convnet_iib_spatial_and_classifier_delta() {
        let c = count_params(&build_convnet(3, 750, 2).unwrap());
        assert_eq!(c.rows[1].params, 4800);
        assert_eq!(c.rows[1].matches(), Some(true));
        // 40 * 44 * 2 + 2 against the printed 4162.
        assert_eq!(c.rows[3].params, 3522);
        assert_eq!(c.rows[3].delta(), Some(-640));
    }

    #[test]
    fn eegnet_closed_form_counts() {
        for (e, depth) in [(22, 176), (3, 24)] {
            let c = count_params(&build_eegnet(e, 1125, 4).unwrap());
            assert_eq!(c.rows[0].params, 512);
            assert_eq!(c.rows[1].params, 16);
            assert_eq!(c.rows[2].params, depth);
            assert_eq!(c.rows[5].params, 32);
            assert_eq!(c.rows[4].params, 256);
            assert_eq!(c.rows[4].delta(), Some(if e == 22 { -16 } else { 128 }));
        }
    }

    #[test]
    fn short_trials_name_the_layer() {
        match build_convnet(22, 90, 4).unwrap_err() {
            Error::Layer { layer, .. } => assert_eq!(layer, "Average Pooling"),
            e => panic!("{e}"),
        }
        match build_eegnet(3, 40, 2).unwrap_err() {
            Error::Layer { layer, .. } => assert_eq!(layer, "Temporal Conv"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn store_count_equals_declared_total() {
        for spec in [build_convnet(22, 1125, 4).unwrap(), build_eegnet(3, 750, 2).unwrap()] {
            let m = Model::new(spec.clone(), &mut Rng::seed_from_u64(1));
            assert_eq!(m.params.count(), spec.total_params());
        }
    }

    #[test]
    fn forward_shapes() {
        for spec in [build_convnet(4, 200, 3).unwrap(), build_eegnet(4, 128, 3).unwrap()] {
            let m = Model::new(spec.clone(), &mut Rng::seed_from_u64(2));
            let mut rng = Rng::seed_from_u64(3);
            let x = Tensor::randn(&[5, 1, 4, spec.samples], &mut rng);
            for mode in [Mode::Train, Mode::Eval] {
                let mut tape = Tape::new();
                let f = m.forward(&mut tape, &x, mode, &mut rng).unwrap();
                assert_eq!(tape.value(f.logits).shape(), &[5, 3]);
                assert_eq!(tape.value(f.embedding).shape(), &[5, spec.embedding_dim()]);
            }
        }
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = build_eegnet(8, 512, 2).unwrap();
        let text = spec.to_text();
        assert!(text.contains("label=\"Depthwise Conv\""));
        assert_eq!(ModelSpec::from_text(&text).unwrap(), spec);
        assert_eq!(build_eegnet(8, 512, 2).unwrap(), spec);
    }
}
