//! Independent oracles for the three losses: straightforward loops written
//! from the definitions, compared against the tape implementations.

use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

use sdda::autodiff::{Tape, Tensor};
use sdda::losses::{self, Bandwidth, CenterBank, LossWeights};
use sdda::rng::Rng;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    t.data().chunks(t.shape()[1]).collect()
}

/// Biased MMD² as three double loops over explicit kernel sums.
fn mmd_oracle(s: &Tensor, t: &Tensor, sigma2: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        sigma2.iter().map(|s2| (-d / (2.0 * s2)).exp()).sum::<f64>() / sigma2.len() as f64
    };
    let (s, t) = (rows(s), rows(t));
    let mean = |a: &[&[f64]], b: &[&[f64]]| {
        let mut acc = 0.0;
        for x in a {
            for y in b {
                acc += k(x, y);
            }
        }
        acc / (a.len() * b.len()) as f64
    };
    mean(&s, &s) + mean(&t, &t) - 2.0 * mean(&s, &t)
}

/// Median over all distinct pairs of the stacked rows.
fn median_oracle(s: &Tensor, t: &Tensor) -> f64 {
    let all: Vec<&[f64]> = rows(s).into_iter().chain(rows(t)).collect();
    let mut d = Vec::new();
    for i in 0..all.len() {
        for j in 0..i {
            d.push(all[i].iter().zip(all[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        (d[n / 2 - 1] + d[n / 2]) / 2.0
    }
}

fn mmd(s: &Tensor, t: &Tensor, policy: Bandwidth) -> f64 {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(s.clone()), tape.constant(t.clone()));
    let v = losses::mmd_loss(&mut tape, a, b, policy).unwrap();
    tape.value(v).item()
}

#[test]
fn mmd_matches_brute_force_on_a_thousand_pairs() {
    let mut rng = Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let b = rng.gen_range(2..=16);
        let l = rng.gen_range(1..=8);
        let s = random(&[b, l], &mut rng);
        let mut t = random(&[b, l], &mut rng);
        // Shift some target batches so the discrepancy is not always small.
        let offset = rng.gen_range(0.0..2.0);
        t.data_mut().iter_mut().for_each(|v| *v += offset);
        let (policy, sigma2) = if i % 2 == 0 {
            let m = median_oracle(&s, &t);
            (Bandwidth::MedianFamily, [0.25, 0.5, 1.0, 2.0, 4.0].map(|f| f * m).to_vec())
        } else {
            let s2 = rng.gen_range(0.1..10.0);
            (Bandwidth::Fixed(s2), vec![s2])
        };
        let err = (mmd(&s, &t, policy) - mmd_oracle(&s, &t, &sigma2)).abs();
        worst = worst.max(err);
    }
    assert!(worst < 1e-10, "worst absolute error {worst:e}");
}

#[test]
fn mmd_is_zero_on_identical_batches() {
    let mut rng = Rng::seed_from_u64(8);
    for _ in 0..100 {
        let s = random(&[16, 8], &mut rng);
        assert!(mmd(&s, &s, Bandwidth::MedianFamily).abs() < 1e-12);
        assert!(mmd(&s, &s, Bandwidth::Fixed(0.7)).abs() < 1e-12);
    }
}

#[test]
fn mmd_single_points() {
    let x = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
    let y = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
    let want = 2.0 - 2.0 * (-25.0f64 / 4.0).exp();
    assert!((mmd(&x, &y, Bandwidth::Fixed(2.0)) - want).abs() < 1e-15);
}

fn center_loss(h: &Tensor, labels: &[usize], centers: &Tensor) -> f64 {
    let bank = CenterBank::from_centers(centers.clone(), 0.5).unwrap();
    let mut tape = Tape::new();
    let v = tape.input(h.clone());
    let out = losses::cosine_center_loss(&mut tape, v, labels, &bank).unwrap();
    tape.value(out).item()
}

fn one_minus_mean_cosine(h: &Tensor, labels: &[usize], centers: &Tensor) -> f64 {
    let (h, c) = (rows(h), rows(centers));
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos: f64 = h
        .iter()
        .zip(labels)
        .map(|(r, &y)| r.iter().zip(c[y]).map(|(a, b)| a * b).sum::<f64>() / (norm(r) * norm(c[y])))
        .sum();
    1.0 - cos / h.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn center_loss_is_bounded_and_matches_direct_cosines(
        seed in any::<u64>(),
        b in 1usize..12,
        l in 1usize..10,
        classes in 1usize..5,
        scale in 1e-3f64..1e3,
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let mut h = random(&[b, l], &mut rng);
        h.data_mut().iter_mut().for_each(|v| *v *= scale);
        let centers = random(&[classes, l], &mut rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
        let got = center_loss(&h, &labels, &centers);
        prop_assert!((0.0..=2.0).contains(&got), "{got}");
        let want = one_minus_mean_cosine(&h, &labels, &centers);
        prop_assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn center_loss_is_scale_invariant() {
    let mut rng = Rng::seed_from_u64(9);
    let h = random(&[6, 4], &mut rng);
    let centers = random(&[3, 4], &mut rng);
    let labels = [0, 1, 2, 0, 1, 2];
    let base = center_loss(&h, &labels, &centers);
    let mut scaled = h.clone();
    scaled.data_mut()[..4].iter_mut().for_each(|v| *v *= 17.0);
    assert!((center_loss(&scaled, &labels, &centers) - base).abs() < 1e-12);
}

#[test]
fn softmax_loss_matches_log_sum_exp() {
    let mut rng = Rng::seed_from_u64(10);
    for _ in 0..200 {
        let (b, c) = (rng.gen_range(1..20), rng.gen_range(2..6));
        let z = random(&[b, c], &mut rng);
        let y: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let mut tape = Tape::new();
        let v = tape.input(z.clone());
        let out = losses::softmax_loss(&mut tape, v, &y).unwrap();
        let want: f64 = rows(&z)
            .iter()
            .zip(&y)
            .map(|(r, &t)| r.iter().map(|x| x.exp()).sum::<f64>().ln() - r[t])
            .sum::<f64>()
            / b as f64;
        assert!((tape.value(out).item() - want).abs() < 1e-12);
    }
}

/// Value and input gradient of one configuration of the total loss; the
/// embedding feeds all three terms the way it does in training.
fn total_with_grad(h: &Tensor, t: &Tensor, labels: &[usize], centers: &Tensor, w: LossWeights) -> (f64, Vec<f64>) {
    let bank = CenterBank::from_centers(centers.clone(), 0.5).unwrap();
    let mut tape = Tape::new();
    let hv = tape.input(h.clone());
    let tv = tape.constant(t.clone());
    let l = h.shape()[1];
    let readout = tape.constant(Tensor::new(&[2, l], (0..2 * l).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
    let logits = tape.dense(hv, readout, None).unwrap();
    let ls = losses::softmax_loss(&mut tape, logits, labels).unwrap();
    let lc = losses::cosine_center_loss(&mut tape, hv, labels, &bank).unwrap();
    let ld = losses::mmd_loss(&mut tape, hv, tv, Bandwidth::Fixed(3.0)).unwrap();
    let total = losses::total_loss(&mut tape, ls, Some(lc), Some(ld), w).unwrap();
    let grads = tape.backward(total).unwrap();
    (tape.value(total).item(), grads.get(hv).unwrap().to_vec())
}

#[test]
fn total_gradient_is_the_weighted_sum_and_matches_finite_differences() {
    let mut rng = Rng::seed_from_u64(11);
    let h = random(&[6, 5], &mut rng);
    let t = random(&[6, 5], &mut rng);
    let centers = random(&[2, 5], &mut rng);
    let labels = [0, 1, 1, 0, 1, 0];
    let w = LossWeights::new(2.0, 10.0).unwrap();
    let (_, g) = total_with_grad(&h, &t, &labels, &centers, w);

    // Components isolated through the weights: (0,0) is L_s alone, and the
    // differences with one weight at 1 give the other two.
    let part = |l1, l2| total_with_grad(&h, &t, &labels, &centers, LossWeights::new(l1, l2).unwrap()).1;
    let (gs, gsc, gsd) = (part(0.0, 0.0), part(1.0, 0.0), part(0.0, 1.0));
    for i in 0..g.len() {
        let combined = gs[i] + 2.0 * (gsc[i] - gs[i]) + 10.0 * (gsd[i] - gs[i]);
        assert!((g[i] - combined).abs() < 1e-10, "component {i}");
    }

    let h_step = 1e-5;
    for i in 0..g.len() {
        let mut plus = h.clone();
        plus.data_mut()[i] += h_step;
        let mut minus = h.clone();
        minus.data_mut()[i] -= h_step;
        let fd = (total_with_grad(&plus, &t, &labels, &centers, w).0 - total_with_grad(&minus, &t, &labels, &centers, w).0)
            / (2.0 * h_step);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
        assert!(rel < 1e-4, "component {i}: analytic {} vs fd {fd}", g[i]);
    }
}
