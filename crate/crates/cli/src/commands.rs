use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::Serialize;

use sdda::data::{generate_synthetic, import_csv, read_container, write_container, SynthConfig, TrialSet};
use sdda::metrics::{evaluate, infer_set, EvalReport, ResultTable};
use sdda::models::{build, Arch};
use sdda::preproc::{mean_covariance, preprocess_domain, PreprocConfig, PreprocReport};
use sdda::train::{
    grid_search, read_checkpoint, train_siamese, train_vanilla, write_checkpoint, RunStatus, TrainConfig, LAMBDA1_GRID,
    LAMBDA2_GRID,
};

use crate::cli::*;
use crate::config::{set, Config};
use crate::manifest::{differences, sha256_file, Recorder, RunManifest};

/// Runs one command. `argv` excludes the program name and is recorded in
/// the manifest so the run can be replayed.
pub fn run(argv: &[String]) -> Result<RunManifest> {
    let cli = <Cli as clap::Parser>::try_parse_from(std::iter::once("sdda".to_string()).chain(argv.iter().cloned()))?;
    let started = Instant::now();
    let (name, done) = match cli.command {
        Command::Synth(a) => ("synth", synth(&a)?),
        Command::Preprocess(a) => ("preprocess", preprocess(&a)?),
        Command::Train(a) => ("train", train(&a)?),
        Command::Gridsearch(a) => ("gridsearch", gridsearch(&a)?),
        Command::Eval(a) => ("eval", eval(&a)?),
        Command::ExportEmbeddings(a) => ("export-embeddings", export(&a)?),
        Command::Report(a) => ("report", report(&a)?),
        Command::Replay(a) => return replay(&a),
    };
    let Done { rec, config, failure } = done;
    let manifest = rec.finish(name, argv, config.seed, config.table, started.elapsed().as_secs_f64())?;
    match failure {
        Some(reason) => Err(anyhow!(reason)),
        None => Ok(manifest),
    }
}

/// What a command produced, before the manifest is sealed.
struct Done {
    rec: Recorder,
    config: Resolved,
    /// Set when outputs were written but the run itself failed, for example
    /// a diverged loss. The manifest is still written; the exit code is not 0.
    failure: Option<String>,
}

struct Resolved {
    table: toml::Table,
    seed: Option<u64>,
}

fn resolved(value: &impl Serialize, seed: Option<u64>) -> Result<Resolved> {
    Ok(Resolved {
        table: toml::Table::try_from(value).context("serializing resolved config")?,
        seed,
    })
}

fn apply_preproc(cfg: &mut PreprocConfig, f: &PreprocFlags) {
    cfg.filter &= !f.no_filter;
    cfg.ema &= !f.no_ema;
    cfg.invariants &= !f.no_invariants;
    cfg.normalize &= !f.no_normalize;
    cfg.align &= !f.no_align;
    set(&mut cfg.filter_order, f.filter_order);
    set(&mut cfg.low_hz, f.low_hz);
    set(&mut cfg.high_hz, f.high_hz);
    set(&mut cfg.ema_decay, f.ema_decay);
}

fn apply_train(cfg: &mut TrainConfig, f: &TrainFlags) {
    set(&mut cfg.lambda1, f.lambda1);
    set(&mut cfg.lambda2, f.lambda2);
    if f.learning_rate.is_some() {
        cfg.learning_rate = f.learning_rate;
    }
    set(&mut cfg.batch_size, f.batch_size);
    set(&mut cfg.center_rate, f.center_rate);
    set(&mut cfg.weight_decay, f.weight_decay);
    set(&mut cfg.max_epochs_stage1, f.max_epochs_stage1);
    set(&mut cfg.max_epochs_stage2, f.max_epochs_stage2);
    set(&mut cfg.patience, f.patience);
    set(&mut cfg.validation_fraction, f.validation_fraction);
    set(&mut cfg.seed, f.seed);
    set(&mut cfg.repetitions, f.repetitions);
    set(&mut cfg.bandwidth, f.bandwidth);
    for a in &f.ablate {
        match a {
            Ablation::NoMmd => cfg.use_mmd = false,
            Ablation::NoCenter => cfg.use_center = false,
            Ablation::NoInvariants => cfg.use_preproc_invariants = false,
        }
    }
}

/// Preprocessing and training settings after file and flag overrides. The
/// invariant stages follow the training ablation switch.
#[derive(Serialize)]
struct Pipeline {
    model: String,
    preprocess: bool,
    preproc: PreprocConfig,
    train: TrainConfig,
}

fn pipeline(common: &Common, arch: Arch, pf: &PreprocFlags, tf: &TrainFlags) -> Result<Pipeline> {
    let mut cfg = Config::load(common.config.as_deref())?;
    apply_preproc(&mut cfg.preproc, pf);
    apply_train(&mut cfg.train, tf);
    cfg.preproc.invariants &= cfg.train.use_preproc_invariants;
    cfg.train.validate()?;
    Ok(Pipeline {
        model: arch.name().to_string(),
        preprocess: !pf.no_preprocess,
        preproc: cfg.preproc,
        train: cfg.train,
    })
}

#[derive(Serialize)]
struct PreprocOnly {
    preprocess: bool,
    preproc: PreprocConfig,
}

fn preproc_only(common: &Common, pf: &PreprocFlags) -> Result<PreprocOnly> {
    let mut cfg = Config::load(common.config.as_deref())?;
    apply_preproc(&mut cfg.preproc, pf);
    cfg.preproc.invariants &= cfg.train.use_preproc_invariants;
    Ok(PreprocOnly {
        preprocess: !pf.no_preprocess,
        preproc: cfg.preproc,
    })
}

/// Reads a trial container, or a directory of per-trial CSV files.
fn load(rec: &mut Recorder, path: &Path, fs_hz: Option<f64>) -> Result<TrialSet> {
    if path.is_dir() {
        let fs_hz = fs_hz.ok_or_else(|| anyhow!("CSV input {} needs --fs", path.display()))?;
        let mut files: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        files.sort();
        for f in files.iter().filter(|f| f.is_file()) {
            rec.input(f)?;
        }
        return import_csv(path, fs_hz).with_context(|| format!("importing {}", path.display()));
    }
    rec.input(path)?;
    read_container(path).with_context(|| format!("reading {}", path.display()))
}

fn prepare(set: &TrialSet, run: bool, cfg: &PreprocConfig) -> Result<(TrialSet, PreprocReport)> {
    if !run {
        return Ok((set.clone(), PreprocReport::default()));
    }
    Ok(preprocess_domain(set, cfg)?)
}

/// Frobenius distance between a set's mean covariance and the identity.
fn identity_gap(set: &TrialSet) -> f64 {
    let e = set.channels();
    mean_covariance(set)
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let d = if k / e == k % e { v - 1.0 } else { *v };
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn synth(a: &SynthArgs) -> Result<Done> {
    let mut cfg = Config::load(a.common.config.as_deref())?.synth;
    set(&mut cfg.shift, a.shift);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.classes, a.classes);
    set(&mut cfg.channels, a.channels);
    set(&mut cfg.samples, a.samples);
    set(&mut cfg.trials_per_class, a.trials_per_class);
    let (source, target) = generate_synthetic(&cfg)?;
    let mut rec = Recorder::new(&a.common.out)?;
    write_container(&source, &rec.path("source.trl"))?;
    rec.written("source.trl")?;
    write_container(&target, &rec.path("target.trl"))?;
    rec.written("target.trl")?;
    rec.metric("source_trials", source.len() as f64);
    rec.metric("target_trials", target.len() as f64);
    #[derive(Serialize)]
    struct S<'a> {
        synth: &'a SynthConfig,
    }
    Ok(Done {
        config: resolved(&S { synth: &cfg }, Some(cfg.seed))?,
        rec,
        failure: None,
    })
}

fn preprocess(a: &PreprocessArgs) -> Result<Done> {
    let cfg = preproc_only(&a.common, &a.preproc)?;
    let mut rec = Recorder::new(&a.common.out)?;
    let set = load(&mut rec, &a.input, a.fs)?;
    let (out, report) = prepare(&set, cfg.preprocess, &cfg.preproc)?;
    write_container(&out, &rec.path("preprocessed.trl"))?;
    rec.written("preprocessed.trl")?;
    rec.metric("trials", out.len() as f64);
    rec.metric("zero_channels", report.zero_channels as f64);
    rec.metric("floored_eigenvalues", report.floored_eigenvalues as f64);
    rec.metric("covariance_identity_gap", identity_gap(&out));
    Ok(Done {
        config: resolved(&cfg, None)?,
        rec,
        failure: None,
    })
}

fn record_table(record: &sdda::train::RunRecord) -> Result<String> {
    let mut table = toml::Table::try_from(record)?;
    // Wall time lives in the manifest so this file is reproducible.
    table.remove("wall_seconds");
    Ok(toml::to_string(&table)?)
}

fn train(a: &TrainArgs) -> Result<Done> {
    let arch = Arch::from(a.model);
    let p = pipeline(&a.common, arch, &a.preproc, &a.train)?;
    let mut rec = Recorder::new(&a.common.out)?;
    let source = load(&mut rec, &a.source, None)?;
    ensure!(source.is_labeled(), "source set {} has no labels", a.source.display());
    let (source, _) = prepare(&source, p.preprocess, &p.preproc)?;
    let target = match &a.target {
        Some(path) => Some(prepare(&load(&mut rec, path, None)?, p.preprocess, &p.preproc)?.0),
        None => None,
    };
    let spec = build(arch, source.channels(), source.samples(), source.classes)?;
    let w = p.train.effective_weights();
    let outcome = match &target {
        Some(t) => train_siamese(&source, &t.unlabeled(), &spec, &p.train, None)?,
        None if w.lambda1 == 0.0 && w.lambda2 == 0.0 => train_vanilla(&source, &spec, &p.train, None)?,
        None => bail!("lambda1 or lambda2 is nonzero, so training needs --target"),
    };

    write_checkpoint(&rec.path("model.ckpt"), &outcome.model, outcome.centers.as_ref())?;
    rec.written("model.ckpt")?;
    rec.write("run_record.toml", record_table(&outcome.record)?)?;
    rec.write("epochs.csv", outcome.record.to_csv())?;
    let r = &outcome.record;
    rec.metric("best_val_loss", r.best_val_loss);
    rec.metric("best_epoch", r.best_epoch as f64);
    rec.metric("stage1_epochs", (r.epochs.len() - r.stage2_epochs) as f64);
    rec.metric("stage2_epochs", r.stage2_epochs as f64);
    if let Some(fs) = &r.final_source {
        rec.metric("source_accuracy", fs.accuracy);
        rec.metric("source_kappa", fs.kappa);
    }
    if let Some(t) = target.as_ref().filter(|t| t.is_labeled()) {
        let report = evaluate(&outcome.model, t)?;
        rec.metric("target_accuracy", report.accuracy);
        rec.metric("target_kappa", report.kappa);
    }
    let failure = match &r.status {
        RunStatus::Diverged { stage, epoch, reason } => {
            Some(format!("training diverged in stage {stage:?} at epoch {epoch}: {reason}"))
        }
        RunStatus::Completed => None,
    };
    Ok(Done {
        config: resolved(&p, Some(p.train.seed))?,
        rec,
        failure,
    })
}

fn gridsearch(a: &GridArgs) -> Result<Done> {
    let arch = Arch::from(a.model);
    let p = pipeline(&a.common, arch, &a.preproc, &a.train)?;
    let mut rec = Recorder::new(&a.common.out)?;
    let source = prepare(&load(&mut rec, &a.source, None)?, p.preprocess, &p.preproc)?.0;
    let target = prepare(&load(&mut rec, &a.target, None)?, p.preprocess, &p.preproc)?.0;
    ensure!(target.is_labeled(), "grid search scores cells on a labeled target set");
    let l1 = a.lambda1_grid.clone().unwrap_or_else(|| LAMBDA1_GRID.to_vec());
    let l2 = a.lambda2_grid.clone().unwrap_or_else(|| LAMBDA2_GRID.to_vec());
    let spec = build(arch, source.channels(), source.samples(), source.classes)?;
    let grid = grid_search(&source, &target.unlabeled(), &target, &spec, &p.train, &l1, &l2)?;

    rec.write("grid.csv", grid.to_csv())?;
    let mut cells = String::from("lambda1,lambda2,repetition,accuracy\n");
    for c in &grid.cells {
        for (r, acc) in c.accuracies.iter().enumerate() {
            let _ = writeln!(cells, "{},{},{r},{acc}", c.lambda1, c.lambda2);
        }
        rec.metric(format!("cell[{},{}]", c.lambda1, c.lambda2), c.mean);
    }
    rec.write("cells.csv", cells)?;
    rec.write("selection.txt", format!("{}\n", grid.selection))?;
    if let Some((b1, b2)) = grid.best {
        rec.metric("best_lambda1", b1);
        rec.metric("best_lambda2", b2);
    }
    rec.metric("best_accuracy", grid.best_accuracy);
    #[derive(Serialize)]
    struct G<'a> {
        #[serde(flatten)]
        pipeline: &'a Pipeline,
        lambda1_grid: &'a [f64],
        lambda2_grid: &'a [f64],
    }
    let config = resolved(
        &G {
            pipeline: &p,
            lambda1_grid: &l1,
            lambda2_grid: &l2,
        },
        Some(p.train.seed),
    )?;
    Ok(Done {
        config,
        rec,
        failure: None,
    })
}

fn participant_label(set: &TrialSet, path: &Path) -> String {
    match set.participant {
        Some(p) => format!("P{p:02}"),
        None => path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned()),
    }
}

fn eval(a: &EvalArgs) -> Result<Done> {
    let cfg = preproc_only(&a.common, &a.preproc)?;
    let mut rec = Recorder::new(&a.common.out)?;
    rec.input(&a.checkpoint)?;
    let model = read_checkpoint(&a.checkpoint)?.model;
    let raw = load(&mut rec, &a.data, None)?;
    ensure!(raw.is_labeled(), "{} has no labels to score against", a.data.display());
    let (set, _) = prepare(&raw, cfg.preprocess, &cfg.preproc)?;
    let report: EvalReport = evaluate(&model, &set)?;
    let participant = a.participant.clone().unwrap_or_else(|| participant_label(&raw, &a.data));
    rec.write(
        "metrics.csv",
        format!(
            "method,participant,classes,n,accuracy,kappa,loss\n{},{},{},{},{},{},{}\n",
            a.method,
            participant,
            report.classes,
            report.n,
            report.accuracy,
            report.kappa,
            report.loss.unwrap_or(f64::NAN)
        ),
    )?;
    let mut confusion = String::from("true\\predicted");
    for c in 0..report.classes {
        let _ = write!(confusion, ",{c}");
    }
    confusion.push('\n');
    for (y, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        let _ = writeln!(confusion, "{y},{}", cells.join(","));
    }
    rec.write("confusion.csv", confusion)?;
    rec.metric("accuracy", report.accuracy);
    rec.metric("kappa", report.kappa);
    rec.metric("loss", report.loss.unwrap_or(f64::NAN));
    Ok(Done {
        config: resolved(&cfg, None)?,
        rec,
        failure: None,
    })
}

fn export(a: &ExportArgs) -> Result<Done> {
    let cfg = preproc_only(&a.common, &a.preproc)?;
    let mut rec = Recorder::new(&a.common.out)?;
    rec.input(&a.checkpoint)?;
    let model = read_checkpoint(&a.checkpoint)?.model;
    let mut domains = vec![("source", a.source.clone())];
    if let Some(t) = &a.target {
        domains.push(("target", t.clone()));
    }
    let dim = model.spec.embedding_dim();
    let mut csv = String::from("domain,index,label");
    for k in 0..dim {
        let _ = write!(csv, ",e{k}");
    }
    csv.push('\n');
    let mut rows = 0usize;
    for (domain, path) in &domains {
        let (set, _) = prepare(&load(&mut rec, path, None)?, cfg.preprocess, &cfg.preproc)?;
        let (_, emb) = infer_set(&model, &set)?;
        for (i, row) in emb.data().chunks(dim).enumerate() {
            let label = set.labels().map_or(String::new(), |l| l[i].to_string());
            let _ = write!(csv, "{domain},{i},{label}");
            for v in row {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
            rows += 1;
        }
    }
    rec.write("embeddings.csv", csv)?;
    rec.metric("rows", rows as f64);
    rec.metric("dim", dim as f64);
    Ok(Done {
        config: resolved(&cfg, None)?,
        rec,
        failure: None,
    })
}

fn report(a: &ReportArgs) -> Result<Done> {
    let mut rec = Recorder::new(&a.common.out)?;
    let mut participants: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
    let mut classes = None;
    for path in &a.metrics {
        rec.input(path)?;
        let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        for row in reader.records() {
            let row = row?;
            let field = |name: &str, i: usize| -> Result<&str> {
                row.get(i).ok_or_else(|| anyhow!("{}: row lacks '{name}'", path.display()))
            };
            let (method, participant) = (field("method", 0)?.to_string(), field("participant", 1)?.to_string());
            let c: usize = field("classes", 2)?.parse()?;
            let acc: f64 = field("accuracy", 4)?.parse()?;
            ensure!(classes.is_none_or(|k| k == c), "metrics mix class counts");
            classes = Some(c);
            if !methods.contains(&method) {
                methods.push(method.clone());
            }
            if !participants.contains(&participant) {
                participants.push(participant.clone());
            }
            cells.insert((method, participant), acc);
        }
    }
    let mut table = ResultTable::new(participants.clone(), classes.unwrap_or(2));
    for m in &methods {
        let accs = participants
            .iter()
            .map(|p| {
                cells
                    .get(&(m.clone(), p.clone()))
                    .copied()
                    .ok_or_else(|| anyhow!("no result for method {m} on participant {p}"))
            })
            .collect::<Result<Vec<f64>>>()?;
        rec.metric(format!("average_acc[{m}]"), accs.iter().sum::<f64>() / accs.len() as f64);
        table.push(m.clone(), accs)?;
    }
    rec.write("table.csv", table.to_csv())?;
    rec.write("table.txt", table.to_text())?;
    #[derive(Serialize)]
    struct R {
        methods: Vec<String>,
        participants: Vec<String>,
    }
    Ok(Done {
        config: resolved(&R { methods, participants }, None)?,
        rec,
        failure: None,
    })
}

/// Replaces the value of `--out` in a recorded argument list.
fn redirect(argv: &[String], out: &Path) -> Result<Vec<String>> {
    let out = out.display().to_string();
    let mut next = argv.to_vec();
    for i in 0..next.len() {
        if next[i] == "--out" && i + 1 < next.len() {
            next[i + 1] = out;
            return Ok(next);
        }
        if next[i].starts_with("--out=") {
            next[i] = format!("--out={out}");
            return Ok(next);
        }
    }
    bail!("recorded arguments have no --out")
}

fn replay(a: &ReplayArgs) -> Result<RunManifest> {
    let original = RunManifest::read(&a.manifest)?;
    for (path, digest) in &original.inputs {
        let now = sha256_file(Path::new(path))?;
        ensure!(&now == digest, "input {path} changed since the recorded run");
    }
    let original_out = a.manifest.parent().map(std::path::absolute).transpose()?;
    ensure!(
        original_out != Some(std::path::absolute(&a.out)?),
        "replay must write to a different directory than the original run"
    );
    let argv = redirect(&original.argv, &a.out)?;
    let again = run(&argv)?;
    let diffs = differences(&original, &again);
    ensure!(diffs.is_empty(), "replay differs from the recorded run:\n  {}", diffs.join("\n  "));
    Ok(again)
}
