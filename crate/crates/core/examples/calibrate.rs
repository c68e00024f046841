//! Calibration of the synthetic benchmark: trains vanilla and adapted EEGNet
//! models on generated sessions and prints source and target accuracies.
//!
//! `cargo run --release -p sdda --example calibrate -- [shift] [seeds] [epochs] [first seed] [patience]`

use std::time::Instant;

use sdda::data::{generate_synthetic, SynthConfig};
use sdda::metrics::evaluate;
use sdda::models::build_eegnet;
use sdda::preproc::{preprocess_domain, PreprocConfig};
use sdda::train::{train_siamese, TrainConfig};

fn main() -> sdda::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let shift: f64 = args.get(1).map_or(0.5, |s| s.parse().expect("shift"));
    let seeds: u64 = args.get(2).map_or(3, |s| s.parse().expect("seeds"));
    let epochs: usize = args.get(3).map_or(60, |s| s.parse().expect("epochs"));

    let first: u64 = args.get(4).map_or(0, |s| s.parse().expect("first seed"));
    let patience: usize = args.get(5).map_or(epochs / 4, |s| s.parse().expect("patience"));
    let only = std::env::var("CALIBRATE_ONLY").ok();
    // Weights used by the adapted variants; an ablated term stays at zero.
    let weight = |key: &str, default: f64| std::env::var(key).map_or(default, |v| v.parse().expect(key));
    let (w1, w2) = (weight("CALIBRATE_L1", 1.0), weight("CALIBRATE_L2", 0.1));
    for seed in first..first + seeds {
        let synth = SynthConfig {
            shift,
            seed: 100 + seed,
            ..SynthConfig::default()
        };
        let (src, tgt) = generate_synthetic(&synth)?;
        let spec = build_eegnet(src.channels(), src.samples(), src.classes)?;
        let vanilla_pre = PreprocConfig {
            invariants: false,
            ..PreprocConfig::default()
        };
        let full_pre = PreprocConfig::default();
        let base = TrainConfig {
            seed,
            max_epochs_stage1: epochs,
            max_epochs_stage2: epochs / 2,
            patience,
            ..TrainConfig::default()
        };
        let variants = [
            ("vanilla", &vanilla_pre, 0.0, 0.0),
            ("invariants", &full_pre, 0.0, 0.0),
            ("sdda", &full_pre, w1, w2),
            ("no-inv", &vanilla_pre, w1, w2),
            ("no-center", &full_pre, 0.0, w2),
            ("no-mmd", &full_pre, w1, 0.0),
        ];
        for (name, pre, l1, l2) in variants {
            if only.as_deref().is_some_and(|o| !o.split(',').any(|n| n == name)) {
                continue;
            }
            let t0 = Instant::now();
            let (s, _) = preprocess_domain(&src, pre)?;
            let (t, _) = preprocess_domain(&tgt, pre)?;
            let cfg = TrainConfig {
                lambda1: l1,
                lambda2: l2,
                ..base.clone()
            };
            let verbose = std::env::var_os("CALIBRATE_VERBOSE").is_some();
            let out = train_siamese(&s, &t.unlabeled(), &spec, &cfg, verbose.then_some(&t))?;
            if verbose {
                for e in &out.record.epochs {
                    println!(
                        "  {:?} {:>3} loss {:.3} acc {:.2} monitor {:.3}/{:.2} target {:.2}",
                        e.stage,
                        e.epoch,
                        e.train_loss,
                        e.train_acc,
                        e.monitor_loss,
                        e.monitor_acc,
                        e.target_acc.unwrap_or(f64::NAN)
                    );
                }
            }
            let ta = evaluate(&out.model, &t)?.accuracy;
            let sa = out.record.final_source.as_ref().map_or(f64::NAN, |r| r.accuracy);
            println!(
                "seed {seed} {name:<10} source {:.3} target {:.3} epochs {}+{} best {} {:.1}s",
                sa,
                ta,
                out.record.epochs.len() - out.record.stage2_epochs,
                out.record.stage2_epochs,
                out.record.best_epoch,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
