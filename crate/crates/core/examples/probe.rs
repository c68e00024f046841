//! Band-power logistic probe on synthetic sessions: source hold-out accuracy
//! and source-to-target transfer accuracy, per seed.
//!
//! `cargo run --release -p sdda --example probe -- [seeds] [key=value ...]`

use sdda::data::{generate_synthetic, SynthConfig, TrialSet};
use sdda::preproc::{design_fir, preprocess_domain, PreprocConfig, Window};

fn features(set: &TrialSet, band: (f64, f64)) -> Vec<Vec<f64>> {
    let fir = design_fir(64, band.0, band.1, set.fs, Window::Blackman).expect("filter");
    (0..set.len())
        .map(|i| {
            (0..set.channels())
                .flat_map(|c| {
                    let x = set.channel(i, c);
                    let y = fir.apply(x).expect("filter");
                    let band = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).ln();
                    let total = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).ln();
                    [band, total]
                })
                .collect()
        })
        .collect()
}

fn fit(x: &[Vec<f64>], y: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
        .collect();
    let mut w = vec![0.0; d + 1];
    for _ in 0..2000 {
        let mut g = vec![0.0; d + 1];
        for (r, &t) in x.iter().zip(y) {
            let z: f64 = w[d] + (0..d).map(|j| w[j] * (r[j] - mean[j]) / sd[j]).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let e = p - t as f64;
            for j in 0..d {
                g[j] += e * (r[j] - mean[j]) / sd[j] / n;
            }
            g[d] += e / n;
        }
        for j in 0..=d {
            w[j] -= 0.5 * (g[j] + if j < d { 1e-3 * w[j] } else { 0.0 });
        }
    }
    (w, mean, sd)
}

fn accuracy(model: &(Vec<f64>, Vec<f64>, Vec<f64>), x: &[Vec<f64>], y: &[usize]) -> f64 {
    let (w, mean, sd) = model;
    let d = mean.len();
    let ok = x
        .iter()
        .zip(y)
        .filter(|(r, &t)| {
            let z: f64 = w[d] + (0..d).map(|j| w[j] * (r[j] - mean[j]) / sd[j]).sum::<f64>();
            (z > 0.0) as usize == t
        })
        .count();
    ok as f64 / x.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(5, |s| s.parse().expect("seeds"));
    let mut base = SynthConfig::default();
    let mut pre: Option<PreprocConfig> = None;
    for kv in args.iter().skip(2) {
        let (k, v) = kv.split_once('=').expect("key=value");
        let f: f64 = v.parse().expect("number");
        match k {
            "shift" => base.shift = f,
            "erd" => base.erd_depth = f,
            "noise" => base.noise = f,
            "jitter" => base.amplitude_jitter = f,
            "spread" => base.mixing_spread = f,
            "background" => base.background = f,
            "pole" => base.background_pole = f,
            "gain" => base.gain_drift = f,
            "gjit" => base.gain_jitter = f,
            "tpc" => base.trials_per_class = f as usize,
            "pre" => {
                pre = match f as u32 {
                    0 => None,
                    1 => Some(PreprocConfig {
                        invariants: false,
                        ..PreprocConfig::default()
                    }),
                    2 => Some(PreprocConfig::default()),
                    3 => Some(PreprocConfig {
                        ema: false,
                        ..PreprocConfig::default()
                    }),
                    4 => Some(PreprocConfig {
                        normalize: false,
                        ..PreprocConfig::default()
                    }),
                    _ => panic!("pre is 0..=4"),
                }
            }
            _ => panic!("unknown key {k}"),
        }
    }
    let (mut hold, mut transfer) = (0.0, 0.0);
    for seed in 0..seeds {
        let cfg = SynthConfig {
            seed: 100 + seed,
            ..base.clone()
        };
        let (mut s, mut t) = generate_synthetic(&cfg).expect("generate");
        if let Some(p) = &pre {
            s = preprocess_domain(&s, p).expect("preprocess").0;
            t = preprocess_domain(&t, p).expect("preprocess").0;
        }
        let (fs, ft) = (features(&s, cfg.band_hz), features(&t, cfg.band_hz));
        let (ys, yt) = (s.labels().unwrap(), t.labels().unwrap());
        let cut = fs.len() * 4 / 5;
        let m = fit(&fs[..cut], &ys[..cut]);
        let h = accuracy(&m, &fs[cut..], &ys[cut..]);
        let m = fit(&fs, ys);
        let tr = accuracy(&m, &ft, yt);
        println!("seed {} holdout {h:.3} transfer {tr:.3}", 100 + seed);
        hold += h;
        transfer += tr;
    }
    println!("mean holdout {:.3} transfer {:.3}", hold / seeds as f64, transfer / seeds as f64);
}
