use sdda::data::{generate_synthetic, SynthConfig, TrialSet};
use sdda::metrics::evaluate;
use sdda::models::{build_eegnet, ModelSpec};
use sdda::preproc::{preprocess_domain, PreprocConfig};
use sdda::train::{grid_search, read_checkpoint, train_siamese, train_vanilla, write_checkpoint, RunStatus, TrainConfig};

fn sessions(cfg: &SynthConfig, pre: &PreprocConfig) -> (TrialSet, TrialSet, ModelSpec) {
    let (s, t) = generate_synthetic(cfg).unwrap();
    let spec = build_eegnet(s.channels(), s.samples(), s.classes).unwrap();
    (preprocess_domain(&s, pre).unwrap().0, preprocess_domain(&t, pre).unwrap().0, spec)
}

fn small() -> SynthConfig {
    SynthConfig {
        samples: 256,
        trials_per_class: 16,
        ..SynthConfig::default()
    }
}

fn short(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        max_epochs_stage1: 6,
        max_epochs_stage2: 3,
        patience: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_reproduces_the_run_record() {
    let (s, t, spec) = sessions(&small(), &PreprocConfig::default());
    let a = train_siamese(&s, &t.unlabeled(), &spec, &short(4), None).unwrap();
    let b = train_siamese(&s, &t.unlabeled(), &spec, &short(4), None).unwrap();
    assert!(a.record.same_run(&b.record));
    assert_eq!(a.model.params, b.model.params);
    let c = train_siamese(&s, &t.unlabeled(), &spec, &short(5), None).unwrap();
    assert_ne!(a.record.loss_trace(), c.record.loss_trace());
}

#[test]
fn zero_weights_follow_the_vanilla_trajectory() {
    let (s, t, spec) = sessions(&small(), &PreprocConfig::default());
    let cfg = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..short(2)
    };
    let siamese = train_siamese(&s, &t.unlabeled(), &spec, &cfg, None).unwrap();
    let vanilla = train_vanilla(&s, &spec, &cfg, None).unwrap();
    let (a, b) = (siamese.record.loss_trace(), vanilla.record.loss_trace());
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (s, t, spec) = sessions(&small(), &PreprocConfig::default());
    let out = train_siamese(&s, &t.unlabeled(), &spec, &short(1), None).unwrap();
    let dir = std::env::temp_dir().join(format!("sdda-training-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    write_checkpoint(&path, &out.model, out.centers.as_ref()).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(evaluate(&back.model, &t).unwrap(), evaluate(&out.model, &t).unwrap());
    assert_eq!(back.centers.map(|c| c.tensor()), out.centers.map(|c| c.tensor()));
}

#[test]
fn grid_argmax_is_at_least_the_origin_cell() {
    let (s, t, spec) = sessions(&small(), &PreprocConfig::default());
    let base = TrainConfig {
        repetitions: 1,
        ..short(3)
    };
    let grid = grid_search(&s, &t.unlabeled(), &t, &spec, &base, &[0.0, 1.0], &[0.0, 0.1]).unwrap();
    assert_eq!(grid.cells.len(), 4);
    let origin = grid.cell(0.0, 0.0).unwrap().mean;
    assert!(grid.best_accuracy >= origin);
}

/// Source-test accuracy comes from the target of an unshifted pair, which is
/// an independent draw of the source session.
#[test]
fn learns_the_unshifted_benchmark_within_200_epochs() {
    let cfg = SynthConfig {
        shift: 0.0,
        seed: 100,
        ..SynthConfig::default()
    };
    let (s, t, spec) = sessions(&cfg, &PreprocConfig::default());
    let train = TrainConfig {
        max_epochs_stage1: 150,
        max_epochs_stage2: 50,
        ..TrainConfig::default()
    };
    let out = train_vanilla(&s, &spec, &train, None).unwrap();
    assert_eq!(out.record.status, RunStatus::Completed);
    let acc = evaluate(&out.model, &t).unwrap().accuracy;
    assert!(out.record.epochs.len() <= 200);
    println!("source-test accuracy {acc:.3} after {} epochs", out.record.epochs.len());
    assert!(acc >= 0.95, "source-test accuracy {acc:.3}");
}

#[test]
fn shift_costs_a_vanilla_model_at_least_ten_points() {
    let vanilla = PreprocConfig {
        invariants: false,
        ..PreprocConfig::default()
    };
    let base = SynthConfig {
        seed: 100,
        ..SynthConfig::default()
    };
    let (s, shifted, spec) = sessions(&base, &vanilla);
    let (_, same, _) = sessions(&SynthConfig { shift: 0.0, ..base }, &vanilla);
    let train = TrainConfig {
        max_epochs_stage1: 300,
        max_epochs_stage2: 150,
        ..TrainConfig::default()
    };
    let out = train_vanilla(&s, &spec, &train, None).unwrap();
    let (a, b) = (evaluate(&out.model, &same).unwrap().accuracy, evaluate(&out.model, &shifted).unwrap().accuracy);
    println!("source-test {a:.3}, target-test {b:.3}");
    assert!(a - b >= 0.10, "drop {:.3}", a - b);
}
