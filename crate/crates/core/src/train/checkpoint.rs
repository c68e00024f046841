//! Checkpoints: a text header describing every buffer, a blank line, then the
//! buffers as raw little-endian `f64` in header order.
//!
//! ```text
//! SDDA-CHECKPOINT 1
//! model arch=eegnet channels=8 ...        (model spec, one line per layer)
//! layer index=0 ...
//! param name=0.temporal_conv.weight shape=8x1x1x64
//! running layer=1 channels=8
//! centers classes=2 dim=256 gamma=0.5
//!
//! <binary payload>
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::CenterBank;
use crate::models::{Model, ModelSpec};
use crate::rng::Rng;

const MAGIC: &str = "SDDA-CHECKPOINT 1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub centers: Option<CenterBank>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Config(format!("checkpoint: {}", detail.into()))
}

pub fn write_checkpoint(path: &Path, model: &Model, centers: Option<&CenterBank>) -> Result<()> {
    let mut header = format!("{MAGIC}\n{}", model.spec.to_text());
    let mut payload: Vec<f64> = Vec::new();
    for (_, p) in model.params.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("param name={} shape={}\n", p.name, shape.join("x")));
        payload.extend_from_slice(p.value.data());
    }
    for (i, r) in model.running.iter().enumerate() {
        if let Some(r) = r {
            header.push_str(&format!("running layer={i} channels={}\n", r.mean.len()));
            payload.extend_from_slice(&r.mean);
            payload.extend_from_slice(&r.var);
        }
    }
    if let Some(bank) = centers {
        header.push_str(&format!(
            "centers classes={} dim={} gamma={}\n",
            bank.classes(),
            bank.dim(),
            bank.gamma
        ));
        payload.extend_from_slice(bank.tensor().data());
    }
    header.push('\n');
    let mut bytes = header.into_bytes();
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| bad(format!("line '{line}' lacks '{key}'")))
}

fn num(line: &str, key: &str) -> Result<usize> {
    field(line, key)?
        .parse()
        .map_err(|_| bad(format!("'{key}' in '{line}' is not an integer")))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("missing header terminator"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
    let body = &bytes[split + 2..];
    if body.len() % 8 != 0 {
        return Err(Error::Truncated {
            expected: body.len().div_ceil(8) * 8,
            found: body.len(),
        });
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::BadMagic);
    }
    let spec_text: String = header
        .lines()
        .filter(|l| l.starts_with("model ") || l.starts_with("layer "))
        .map(|l| format!("{l}\n"))
        .collect();
    let spec = ModelSpec::from_text(&spec_text)?;
    // Initial values are overwritten below; the stream only fixes shapes.
    let mut model = Model::new(spec, &mut <Rng as rand::SeedableRng>::seed_from_u64(0));
    let mut centers = None;
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<Vec<f64>> {
        if cursor + n > values.len() {
            return Err(Error::Truncated {
                expected: (cursor + n) * 8,
                found: values.len() * 8,
            });
        }
        let out = values[cursor..cursor + n].to_vec();
        cursor += n;
        Ok(out)
    };
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut next_param = ids.into_iter();
    for line in header.lines() {
        if line.starts_with("param ") {
            let id = next_param.next().ok_or_else(|| bad("more parameters than the model has"))?;
            let name = field(line, "name")?;
            let shape: Vec<usize> = field(line, "shape")?
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape in '{line}'"))))
                .collect::<Result<_>>()?;
            let p = model.params.get_mut(id);
            if p.name != name || p.value.shape() != shape.as_slice() {
                return Err(bad(format!("parameter '{name}' {shape:?} does not match '{}'", p.name)));
            }
            let n = p.value.len();
            p.value = Tensor::new(&shape, take(n)?)?;
        } else if line.starts_with("running ") {
            let layer = num(line, "layer")?;
            let c = num(line, "channels")?;
            let slot = model
                .running
                .get_mut(layer)
                .and_then(Option::as_mut)
                .ok_or_else(|| bad(format!("layer {layer} has no running statistics")))?;
            if slot.mean.len() != c {
                return Err(bad(format!("running statistics of layer {layer} have {c} channels")));
            }
            slot.mean = take(c)?;
            slot.var = take(c)?;
        } else if line.starts_with("centers ") {
            let (k, d) = (num(line, "classes")?, num(line, "dim")?);
            let gamma: f64 = field(line, "gamma")?
                .parse()
                .map_err(|_| bad("center rate is not a number"))?;
            centers = Some(CenterBank::from_centers(Tensor::new(&[k, d], take(k * d)?)?, gamma)?);
        }
    }
    if next_param.next().is_some() {
        return Err(bad("fewer parameters than the model has"));
    }
    if cursor != values.len() {
        return Err(bad(format!("{} trailing values", values.len() - cursor)));
    }
    Ok(Checkpoint { model, centers })
}
