use rand::SeedableRng;
use sdda::autodiff::{grad_check, OpKind};
use sdda::rng::Rng;

#[test]
fn every_kernel_matches_central_differences() {
    for kind in OpKind::ALL {
        let mut worst = 0.0f64;
        for seed in 0..20u64 {
            let mut rng = Rng::seed_from_u64(1000 + seed);
            let shape = kind.random_shape(&mut rng);
            let err = grad_check(kind, &shape, seed).unwrap();
            assert!(err < 1e-4, "{kind:?} shape {shape:?} seed {seed}: {err:e}");
            worst = worst.max(err);
        }
        println!("{kind:?}: worst relative error {worst:.2e}");
    }
}
