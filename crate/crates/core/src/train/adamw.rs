use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;

/// One AdamW update of a single buffer.
///
/// Weight decay is decoupled: `θ <- θ - η λ θ` is applied to the parameters
/// directly, never folded into the gradient. Moments are bias-corrected with
/// the 1-based step count `t`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * weight_decay * params[i];
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// AdamW state for every buffer of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            lr,
            betas,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        for (k, p) in store.iter_mut().enumerate() {
            let grad = p.grad.data().to_vec();
            adamw_step(
                p.value.data_mut(),
                &grad,
                &mut self.m[k],
                &mut self.v[k],
                self.step,
                self.lr,
                self.betas,
                self.eps,
                self.weight_decay,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![1.5, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 1..=5 {
            adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, t, 0.1, (0.9, 0.999), 1e-8, 0.0);
        }
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3, 0.5, -7.0, 250.0] {
            let mut p = vec![0.0];
            let (mut m, mut v) = (vec![0.0], vec![0.0]);
            adamw_step(&mut p, &[g], &mut m, &mut v, 1, 0.01, (0.9, 0.999), 1e-8, 0.0);
            assert!((p[0].abs() - 0.01).abs() < 1e-6, "g = {g}: {}", p[0]);
            assert_eq!(p[0].signum(), -g.signum());
        }
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        // With zero gradient only the decay term acts: θ (1 - η λ).
        let mut p = vec![2.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_step(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, (0.9, 0.999), 1e-8, 0.5);
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert_eq!(m[0], 0.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(θ) = ½‖θ‖², ∇f = θ.
        let mut p = vec![1.0, -2.0, 0.5, 3.0];
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        for t in 1..=2000 {
            let g = p.clone();
            adamw_step(&mut p, &g, &mut m, &mut v, t, 0.01, (0.9, 0.999), 1e-8, 0.0);
        }
        let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "{norm}");
    }
}
