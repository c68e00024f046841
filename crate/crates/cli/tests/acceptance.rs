//! The acceptance suite. Runs criteria 1 to 9 in order and prints one
//! PASS/FAIL line for each; the process fails if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,5,9 cargo test -p sdda-cli --test acceptance` runs a
//! subset.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

use sdda::autodiff::{grad_check, OpKind, Tape, Tensor};
use sdda::data::{generate_synthetic, SynthConfig, TrialSet};
use sdda::losses::{self, Bandwidth, CenterBank};
use sdda::metrics::{evaluate, kappa};
use sdda::models::{build_convnet, build_eegnet, count_params, Mode, Model};
use sdda::preproc::{apply_alignment, fit_alignment, mean_covariance, preprocess_domain, PreprocConfig};
use sdda::rng::{Rng, SeedStream};
use sdda::train::{train_siamese, train_vanilla, AdamW, TrainConfig};
use sdda_cli::manifest::{RunManifest, MANIFEST_FILE};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn check(n: u32, title: &str, budget: Option<Duration>, f: impl FnOnce() -> Verdict) -> bool {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = started.elapsed();
    let v = result.unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    let within = budget.is_none_or(|b| elapsed <= b);
    let pass = v.pass && within;
    let budget_note = budget.map_or(String::new(), |b| {
        format!(" of {}s budget{}", b.as_secs(), if within { "" } else { ", OVER BUDGET" })
    });
    println!(
        "criterion {n} {title}: {} ({}) [{:.1}s{budget_note}]",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal(rng)).collect()).unwrap()
}

// Criterion 1.

fn parameter_counts() -> Verdict {
    let iia = count_params(&build_convnet(22, 1125, 4).unwrap());
    let conv_rows: Vec<usize> = iia.rows.iter().map(|r| r.params).collect();
    let conv_ok = conv_rows == [1040, 35200, 80, 11044] && iia.total.params == 47364;

    let iib = count_params(&build_convnet(3, 1000, 2).unwrap());
    let spatial_ok = iib.rows[1].params == 4800;

    let eeg_iia = count_params(&build_eegnet(22, 1125, 4).unwrap());
    let eeg_iib = count_params(&build_eegnet(3, 1125, 2).unwrap());
    let eeg_ok = eeg_iia.rows[0].params == 512 && eeg_iia.rows[2].params == 176 && eeg_iib.rows[2].params == 24;
    let separable = &eeg_iia.rows[4];
    verdict(
        conv_ok && spatial_ok && eeg_ok,
        format!(
            "ConvNet {conv_rows:?} total {}; E=3 spatial {}; EEGNet temporal {} depthwise {}/{}; separable computed {} vs printed {} (delta {:+})",
            iia.total.params,
            iib.rows[1].params,
            eeg_iia.rows[0].params,
            eeg_iia.rows[2].params,
            eeg_iib.rows[2].params,
            separable.params,
            separable.paper.unwrap_or(0),
            separable.delta().unwrap_or(0)
        ),
    )
}

// Criterion 2.

fn gradient_suite() -> Verdict {
    let mut worst = (0.0f64, None);
    let mut cases = 0;
    for kind in OpKind::ALL {
        for seed in 0..20u64 {
            let mut rng = Rng::seed_from_u64(7000 + seed);
            let shape = kind.random_shape(&mut rng);
            let err = grad_check(kind, &shape, seed).unwrap();
            cases += 1;
            if err > worst.0 || err.is_nan() {
                worst = (err, Some(kind));
            }
        }
    }
    verdict(
        worst.0 < 1e-4,
        format!(
            "{} ops x 20 shapes = {cases} checks, worst relative error {:.2e} in {}",
            OpKind::ALL.len(),
            worst.0,
            worst.1.map_or("-".to_string(), |k| format!("{k:?}"))
        ),
    )
}

// Criterion 3.

fn identity_gap(m: &[f64], e: usize) -> f64 {
    (0..e * e)
        .map(|k| {
            let d = m[k] - f64::from(u8::from(k / e == k % e));
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn alignment_invariant() -> Verdict {
    let mut rng = Rng::seed_from_u64(3);
    let (mut worst, mut flagged, mut unflagged_deficient) = (0.0f64, 0, 0);
    for _ in 0..100 {
        let e = rng.gen_range(2..12);
        let n = rng.gen_range(1..30);
        let t = rng.gen_range(2..80);
        let mix = random_tensor(&[e, e], &mut rng);
        let mut data = Vec::with_capacity(n * e * t);
        for _ in 0..n {
            let z = random_tensor(&[e, t], &mut rng);
            for a in 0..e {
                for k in 0..t {
                    data.push((0..e).map(|b| mix.data()[a * e + b] * z.data()[b * t + k]).sum::<f64>());
                }
            }
        }
        let set = TrialSet::new(e, t, data, None, 128.0, 2).unwrap();
        let state = fit_alignment(&set).unwrap();
        if state.floored > 0 {
            flagged += 1;
            continue;
        }
        if n * t < e {
            unflagged_deficient += 1;
        }
        let aligned = apply_alignment(&set, &state).unwrap();
        worst = worst.max(identity_gap(&mean_covariance(&aligned), e));
    }
    verdict(
        worst < 1e-6 && unflagged_deficient == 0,
        format!("100 sets, {flagged} flagged as eigen-floored, worst Frobenius gap {worst:.2e}"),
    )
}

// Criterion 4.

fn mmd_oracle(s: &Tensor, t: &Tensor, sigma2: &[f64]) -> f64 {
    let l = s.shape()[1];
    let (s, t): (Vec<&[f64]>, Vec<&[f64]>) = (s.data().chunks(l).collect(), t.data().chunks(l).collect());
    let k = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        sigma2.iter().map(|v| (-d / (2.0 * v)).exp()).sum::<f64>() / sigma2.len() as f64
    };
    let mut sums = [0.0; 3];
    for a in &s {
        for b in &s {
            sums[0] += k(a, b);
        }
        for b in &t {
            sums[2] += k(a, b);
        }
    }
    for a in &t {
        for b in &t {
            sums[1] += k(a, b);
        }
    }
    let (m, n) = (s.len() as f64, t.len() as f64);
    sums[0] / (m * m) + sums[1] / (n * n) - 2.0 * sums[2] / (m * n)
}

fn loss_oracles() -> Verdict {
    let mut rng = Rng::seed_from_u64(4);
    let mut mmd_err = 0.0f64;
    let mut identical = 0.0f64;
    for _ in 0..1000 {
        let b = rng.gen_range(2..=16);
        let l = rng.gen_range(1..=8);
        let s = random_tensor(&[b, l], &mut rng);
        let t = random_tensor(&[b, l], &mut rng);
        let sigma2 = rng.gen_range(0.1..10.0);
        let mut tape = Tape::new();
        let (sv, tv) = (tape.constant(s.clone()), tape.constant(t.clone()));
        let got = losses::mmd_loss(&mut tape, sv, tv, Bandwidth::Fixed(sigma2)).unwrap();
        mmd_err = mmd_err.max((tape.value(got).item() - mmd_oracle(&s, &t, &[sigma2])).abs());
        let same = losses::mmd_loss(&mut tape, sv, sv, Bandwidth::MedianFamily).unwrap();
        identical = identical.max(tape.value(same).item().abs());
    }

    let (mut center_err, mut lo, mut hi) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10_000 {
        let b = rng.gen_range(1..12);
        let l = rng.gen_range(1..10);
        let c = rng.gen_range(1..5);
        let h = random_tensor(&[b, l], &mut rng);
        let centers = random_tensor(&[c, l], &mut rng);
        let y: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let bank = CenterBank::from_centers(centers.clone(), 0.5).unwrap();
        let mut tape = Tape::new();
        let hv = tape.input(h.clone());
        let v = losses::cosine_center_loss(&mut tape, hv, &y, &bank).unwrap();
        let got = tape.value(v).item();
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mean_cos = (0..b)
            .map(|i| {
                let (hi, ci) = (&h.data()[i * l..(i + 1) * l], &centers.data()[y[i] * l..(y[i] + 1) * l]);
                hi.iter().zip(ci).map(|(p, q)| p * q).sum::<f64>() / (norm(hi) * norm(ci))
            })
            .sum::<f64>()
            / b as f64;
        center_err = center_err.max((got - (1.0 - mean_cos)).abs());
        lo = lo.min(got);
        hi = hi.max(got);
    }
    verdict(
        mmd_err < 1e-10 && identical == 0.0 && center_err < 1e-12 && lo >= 0.0 && hi <= 2.0,
        format!(
            "MMD max error {mmd_err:.1e} over 1000 pairs, identical batches {identical:e}; center loss range [{lo:.3}, {hi:.3}] max error {center_err:.1e} over 10000 cases"
        ),
    )
}

// Criterion 5.

fn kappa_formula() -> Verdict {
    let a = kappa(0.6775, 4);
    let b = kappa(0.80, 2);
    // 0.8 has no exact binary form; "exactly" means the printed three
    // decimals and agreement to rounding error.
    let pass = (a - 0.570).abs() <= 0.0005 && format!("{b:.3}") == "0.600" && (b - 0.6).abs() < 1e-15;
    verdict(pass, format!("kappa(0.6775, 4) = {a:.6}, kappa(0.80, 2) = {b:.6}"))
}

// Criterion 6.

/// A single-branch loop written from the protocol description: split each
/// class, shuffle into batches, softmax loss, AdamW, and an eval-mode
/// validation pass per epoch. Returns `[train loss, validation loss]` per
/// epoch.
fn handwritten_vanilla(source: &TrialSet, cfg: &TrainConfig, epochs: usize) -> Vec<f64> {
    let seeds = SeedStream::new(cfg.seed);
    let (mut init, mut split, mut batches, mut dropout) =
        (seeds.rng("init"), seeds.rng("split"), seeds.rng("batches"), seeds.rng("dropout"));
    let spec = build_eegnet(source.channels(), source.samples(), source.classes).unwrap();
    let mut model = Model::new(spec.clone(), &mut init);
    let labels = source.labels().unwrap();

    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in 0..source.classes {
        let mut idx: Vec<usize> = (0..source.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut split);
        let k = ((idx.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    let val_set = source.subset(&val);

    let mut opt = AdamW::new(&model.params, cfg.lr(spec.arch), cfg.betas, cfg.adam_eps, cfg.weight_decay);
    let mut trace = Vec::new();
    for _ in 0..epochs {
        let mut order = train.clone();
        order.shuffle(&mut batches);
        let (mut sum, mut steps) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let mut tape = Tape::new();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let f = model.forward(&mut tape, &source.batch(batch), Mode::Train, &mut dropout).unwrap();
            let loss = losses::softmax_loss(&mut tape, f.logits, &y).unwrap();
            let grads = tape.backward(loss).unwrap();
            model.params.zero_grad();
            grads.accumulate(&tape, &mut model.params);
            opt.step(&mut model.params);
            model.update_running(&f.batch_stats);
            sum += tape.value(loss).item();
            steps += 1;
        }
        trace.push(sum / steps as f64);
        trace.push(evaluate(&model, &val_set).unwrap().loss.unwrap());
    }
    trace
}

fn reduction() -> Verdict {
    const EPOCHS: usize = 50;
    let synth = SynthConfig {
        trials_per_class: 30,
        ..SynthConfig::default()
    };
    let (source, target) = generate_synthetic(&synth).unwrap();
    let off = PreprocConfig {
        invariants: false,
        ..PreprocConfig::default()
    };
    let (s, _) = preprocess_domain(&source, &off).unwrap();
    let (t, _) = preprocess_domain(&target, &off).unwrap();
    let cfg = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        use_preproc_invariants: false,
        use_center: false,
        use_mmd: false,
        max_epochs_stage1: EPOCHS,
        max_epochs_stage2: 1,
        patience: EPOCHS + 1,
        seed: 11,
        ..TrainConfig::default()
    };
    let spec = build_eegnet(s.channels(), s.samples(), s.classes).unwrap();
    let siamese = train_siamese(&s, &t.unlabeled(), &spec, &cfg, None).unwrap();
    let reference = handwritten_vanilla(&s, &cfg, EPOCHS);
    let got: Vec<f64> = siamese.record.loss_trace().into_iter().take(2 * EPOCHS).collect();
    let first_diff = got.iter().zip(&reference).position(|(a, b)| a.to_bits() != b.to_bits());
    verdict(
        got.len() == reference.len() && first_diff.is_none(),
        match first_diff {
            None => format!("{EPOCHS} epochs of train and validation loss bit-identical"),
            Some(i) => format!("diverges at epoch {}: {:e} vs {:e}", i / 2 + 1, got[i], reference[i]),
        },
    )
}

// Criteria 7 and 8 share the synthetic benchmark.

const SEEDS: u64 = 5;
const LAMBDA1: f64 = 0.2;
const LAMBDA2: f64 = 0.1;

fn benchmark_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lambda1: LAMBDA1,
        lambda2: LAMBDA2,
        max_epochs_stage1: 300,
        max_epochs_stage2: 150,
        patience: 80,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Variant {
    Vanilla,
    Sdda,
    NoInvariants,
    NoCenter,
    NoMmd,
}

/// Target accuracy of one variant trained on seed `seed`'s session pair.
fn target_accuracy(variant: Variant, seed: u64) -> f64 {
    let synth = SynthConfig {
        seed: 100 + seed,
        ..SynthConfig::default()
    };
    let (source, target) = generate_synthetic(&synth).unwrap();
    let mut cfg = benchmark_config(seed);
    match variant {
        Variant::Vanilla => {
            cfg.use_preproc_invariants = false;
            cfg.use_center = false;
            cfg.use_mmd = false;
        }
        Variant::Sdda => {}
        Variant::NoInvariants => cfg.use_preproc_invariants = false,
        Variant::NoCenter => cfg.use_center = false,
        Variant::NoMmd => cfg.use_mmd = false,
    }
    let pre = PreprocConfig {
        invariants: cfg.use_preproc_invariants,
        ..PreprocConfig::default()
    };
    let (s, _) = preprocess_domain(&source, &pre).unwrap();
    let (t, _) = preprocess_domain(&target, &pre).unwrap();
    let spec = build_eegnet(s.channels(), s.samples(), s.classes).unwrap();
    let out = if variant == Variant::Vanilla {
        train_vanilla(&s, &spec, &cfg, None)
    } else {
        train_siamese(&s, &t.unlabeled(), &spec, &cfg, None)
    }
    .unwrap();
    evaluate(&out.model, &t).unwrap().accuracy
}

type Results = BTreeMap<Variant, Vec<f64>>;

fn run_variants(results: &mut Results, variants: &[Variant]) {
    for &v in variants {
        let accs: Vec<f64> = (0..SEEDS).map(|seed| target_accuracy(v, seed)).collect();
        results.insert(v, accs);
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn pct(x: &[f64]) -> String {
    x.iter().map(|a| format!("{:.1}", 100.0 * a)).collect::<Vec<_>>().join("/")
}

fn adaptation(results: &mut Results) -> Verdict {
    run_variants(results, &[Variant::Vanilla, Variant::Sdda]);
    let (v, s) = (&results[&Variant::Vanilla], &results[&Variant::Sdda]);
    let gain = 100.0 * (mean(s) - mean(v));
    let wins = s.iter().zip(v).filter(|(a, b)| a >= b).count();
    verdict(
        gain >= 5.0 && wins >= 4,
        format!("SDDA {} vs vanilla {} target %, mean gain {gain:+.2} points, SDDA >= vanilla in {wins}/5 seeds", pct(s), pct(v)),
    )
}

fn ablations(results: &mut Results) -> Verdict {
    if !results.contains_key(&Variant::Sdda) {
        run_variants(results, &[Variant::Sdda]);
    }
    run_variants(results, &[Variant::NoInvariants, Variant::NoCenter, Variant::NoMmd]);
    let full = 100.0 * mean(&results[&Variant::Sdda]);
    let mut pass = true;
    let mut parts = vec![format!("full {full:.2}")];
    for v in [Variant::NoInvariants, Variant::NoCenter, Variant::NoMmd] {
        let m = 100.0 * mean(&results[&v]);
        pass &= full >= m - 1.0;
        parts.push(format!("{v:?} {m:.2}"));
    }
    verdict(pass, format!("mean target % over 5 seeds: {}", parts.join(", ")))
}

// Criterion 9.

fn sdda(args: &[&str]) -> RunManifest {
    let argv: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    sdda_cli::run(&argv).unwrap_or_else(|e| panic!("sdda {args:?}: {e:#}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn determinism() -> Verdict {
    let root = std::env::temp_dir().join(format!("sdda-acceptance-{}", std::process::id()));
    let _ = fs::remove_dir_all(&root);
    let d = |name: &str| -> String { p(&root.join(name)).to_string() };
    let short = ["--max-epochs-stage1", "4", "--max-epochs-stage2", "2", "--patience", "2"];
    let (synth, pre, train, grid, eval, export, report) =
        (d("synth"), d("pre"), d("train"), d("grid"), d("eval"), d("export"), d("report"));
    let src = d("synth/source.trl");
    let tgt = d("synth/target.trl");
    let ckpt = d("train/model.ckpt");
    let metrics_csv = d("eval/metrics.csv");

    let commands: Vec<(&str, &String, Vec<&str>)> = vec![
        ("synth", &synth, vec!["--samples", "256", "--trials-per-class", "10", "--seed", "9"]),
        ("preprocess", &pre, vec!["--input", &src]),
        ("train", &train, [&["--source", &src, "--target", &tgt][..], &short].concat()),
        (
            "gridsearch",
            &grid,
            [
                &["--source", &src, "--target", &tgt, "--lambda1-grid", "0,1", "--lambda2-grid", "0,0.1", "--repetitions", "2"][..],
                &short,
            ]
            .concat(),
        ),
        ("eval", &eval, vec!["--checkpoint", &ckpt, "--data", &tgt]),
        ("export-embeddings", &export, vec!["--checkpoint", &ckpt, "--source", &src, "--target", &tgt]),
        ("report", &report, vec![&metrics_csv]),
    ];
    let mut runs: Vec<(&str, PathBuf)> = Vec::new();
    for (name, out, rest) in &commands {
        let mut args = vec![*name, "--out", out.as_str()];
        args.extend_from_slice(rest);
        sdda(&args);
        runs.push((name, PathBuf::from(out)));
    }

    let mut failures = Vec::new();
    let mut metrics = 0;
    for (name, dir) in &runs {
        let manifest = dir.join(MANIFEST_FILE);
        let original = RunManifest::read(&manifest).unwrap();
        let out = root.join(format!("replay-{name}"));
        match sdda_cli::run(&["replay".into(), "--manifest".into(), p(&manifest).into(), "--out".into(), p(&out).into()]) {
            Ok(replayed) => {
                let same = original.metrics.len() == replayed.metrics.len()
                    && original.metrics.iter().all(|(k, v)| replayed.metrics.get(k).is_some_and(|r| r.to_bits() == v.to_bits()));
                if !same || original.outputs != replayed.outputs {
                    failures.push(format!("{name}: replay differs"));
                }
                metrics += original.metrics.len();
            }
            Err(e) => failures.push(format!("{name}: {e:#}")),
        }
    }
    let _ = fs::remove_dir_all(&root);
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} commands replayed, {metrics} metrics and all output digests bit-identical", runs.len())
        } else {
            failures.join("; ")
        },
    )
}

fn main() -> ExitCode {
    // Support `cargo test -- --list` and similar harness queries.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    sdda_cli::tune_allocator();
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));

    let secs = Duration::from_secs;
    let mut results = Results::new();
    let mut outcomes = Vec::new();
    if wanted(1) {
        outcomes.push(check(1, "parameter counts", Some(secs(1)), parameter_counts));
    }
    if wanted(2) {
        outcomes.push(check(2, "gradient suite", Some(secs(60)), gradient_suite));
    }
    if wanted(3) {
        outcomes.push(check(3, "alignment invariant", Some(secs(60)), alignment_invariant));
    }
    if wanted(4) {
        outcomes.push(check(4, "loss oracles", None, loss_oracles));
    }
    if wanted(5) {
        outcomes.push(check(5, "kappa formula", None, kappa_formula));
    }
    if wanted(6) {
        outcomes.push(check(6, "reduction to vanilla", None, reduction));
    }
    if wanted(7) {
        outcomes.push(check(7, "synthetic cross-session adaptation", Some(secs(30 * 60)), || adaptation(&mut results)));
    }
    if wanted(8) {
        outcomes.push(check(8, "ablation sanity", None, || ablations(&mut results)));
    }
    if wanted(9) {
        outcomes.push(check(9, "determinism", None, determinism));
    }
    let passed = outcomes.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", outcomes.len());
    if passed == outcomes.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
