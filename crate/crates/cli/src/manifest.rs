//! Run manifests: what a command read, how it was configured, what it wrote
//! and the metrics it reported. `sdda replay` re-executes a manifest and
//! checks that every metric and output comes back bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, with existing paths made absolute.
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Wall time of the run. The only field replay does not compare.
    pub wall_seconds: f64,
    /// SHA-256 of every input file, keyed by absolute path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written, keyed by name inside the output
    /// directory.
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    /// The fully resolved configuration, defaults included.
    pub config: toml::Table,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, toml::to_string(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Collects inputs, outputs and metrics while a command runs.
#[derive(Debug)]
pub struct Recorder {
    pub out_dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    metrics: BTreeMap<String, f64>,
}

impl Recorder {
    pub fn new(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            metrics: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let key = std::path::absolute(path)?.display().to_string();
        self.inputs.insert(key, sha256_file(path)?);
        Ok(())
    }

    /// Path of an output file; call [`Recorder::written`] once it exists.
    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn written(&mut self, name: &str) -> Result<()> {
        let digest = sha256_file(&self.path(name))?;
        self.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.written(name)
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn finish(
        self,
        command: &str,
        argv: &[String],
        seed: Option<u64>,
        config: toml::Table,
        wall_seconds: f64,
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            tool: "sdda".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: absolutize(argv),
            seed,
            wall_seconds,
            inputs: self.inputs,
            outputs: self.outputs,
            metrics: self.metrics,
            config,
        };
        manifest.write(&self.out_dir)?;
        Ok(manifest)
    }
}

/// Rewrites arguments naming existing files or directories as absolute
/// paths so a manifest replays from any working directory. Handles both
/// `--flag value` and `--flag=value`.
pub fn absolutize(argv: &[String]) -> Vec<String> {
    let abs = |s: &str| -> Option<String> {
        let p = Path::new(s);
        (!s.is_empty() && !s.starts_with('-') && p.exists())
            .then(|| std::path::absolute(p).ok().map(|a| a.display().to_string()))
            .flatten()
    };
    argv.iter()
        .map(|a| match a.split_once('=') {
            Some((flag, value)) if flag.starts_with("--") => {
                abs(value).map_or_else(|| a.clone(), |v| format!("{flag}={v}"))
            }
            _ => abs(a).unwrap_or_else(|| a.clone()),
        })
        .collect()
}

/// Every difference between an original manifest and its replay, ignoring
/// wall time and the output directory.
pub fn differences(original: &RunManifest, replay: &RunManifest) -> Vec<String> {
    let mut diffs = Vec::new();
    if original.command != replay.command {
        diffs.push(format!("command {} vs {}", original.command, replay.command));
    }
    if original.inputs != replay.inputs {
        diffs.push("input digests differ".into());
    }
    if original.config != replay.config {
        diffs.push("resolved configuration differs".into());
    }
    for (name, a) in &original.metrics {
        match replay.metrics.get(name) {
            Some(b) if a.to_bits() == b.to_bits() => {}
            Some(b) => diffs.push(format!("metric {name}: {a:?} vs {b:?}")),
            None => diffs.push(format!("metric {name} missing from replay")),
        }
    }
    for name in replay.metrics.keys().filter(|k| !original.metrics.contains_key(*k)) {
        diffs.push(format!("metric {name} only in replay"));
    }
    for (name, a) in &original.outputs {
        match replay.outputs.get(name) {
            Some(b) if a == b => {}
            Some(_) => diffs.push(format!("output {name} differs")),
            None => diffs.push(format!("output {name} missing from replay")),
        }
    }
    diffs
}
