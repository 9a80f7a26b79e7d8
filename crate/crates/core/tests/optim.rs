use dpft_core::grad::{noisy_gradient, Batch};
use dpft_core::optim::{dp_step, lamb_update};
use dpft_core::trainer::argmax;
use dpft_core::{
    GaussianNoise, GradientPacket, LinearHead, OptimizerConfig, OptimizerKind, OptimizerState, PrivatizedGradient,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Wraps raw values as a privatized gradient via the noiseless mechanism.
fn privatized(k: usize, d: usize, w: Vec<f64>, b: Vec<f64>) -> PrivatizedGradient {
    let p = GradientPacket::new(k, d, w, b, 1).unwrap();
    noisy_gradient(&p, 0.0, 1.0, &mut GaussianNoise::from_seed(0)).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Textbook Adam, one parameter vector at a time.
struct ReferenceAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ReferenceAdam {
    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-6);
        self.t += 1;
        for i in 0..w.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = self.m[i] / (1.0 - b1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - b2.powi(self.t));
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[test]
fn adam_matches_reference_recurrence() {
    let (k, d) = (4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut head = LinearHead::new(k, d, random_vec(&mut rng, k * d, 1.0), random_vec(&mut rng, k, 1.0)).unwrap();
    let mut state = OptimizerState::new(OptimizerConfig::with_kind(OptimizerKind::Adam), &head);
    let mut ref_w = head.weights().to_vec();
    let mut ref_b = head.bias().to_vec();
    let mut adam_w = ReferenceAdam {
        m: vec![0.0; k * d],
        v: vec![0.0; k * d],
        t: 0,
    };
    let mut adam_b = ReferenceAdam {
        m: vec![0.0; k],
        v: vec![0.0; k],
        t: 0,
    };
    for step in 0..50 {
        let gw = random_vec(&mut rng, k * d, 2.0);
        let gb = random_vec(&mut rng, k, 2.0);
        let lr = 0.01 * (1.0 + (step % 3) as f64);
        let g = privatized(k, d, gw.clone(), gb.clone());
        let (h, s) = dp_step(&head, &state, &g, lr).unwrap();
        head = h;
        state = s;
        adam_w.step(&mut ref_w, &gw, lr);
        adam_b.step(&mut ref_b, &gb, lr);
        for (a, b) in head.weights().iter().zip(&ref_w).chain(head.bias().iter().zip(&ref_b)) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300), "step {step}: {a} vs {b}");
        }
        assert_eq!(state.step(), step + 1);
    }
}

#[test]
fn lamb_equals_adam_from_zero_weights() {
    let (k, d) = (10, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for bias in [0.0, -10.0] {
        let head = LinearHead::new(k, d, vec![0.0; k * d], vec![bias; k]).unwrap();
        let g = privatized(k, d, random_vec(&mut rng, k * d, 1.0), random_vec(&mut rng, k, 1.0));
        let adam = OptimizerState::new(OptimizerConfig::with_kind(OptimizerKind::Adam), &head);
        let lamb = OptimizerState::new(OptimizerConfig::with_kind(OptimizerKind::Lamb), &head);
        let (ha, _) = dp_step(&head, &adam, &g, 1e-3).unwrap();
        let (hl, _) = dp_step(&head, &lamb, &g, 1e-3).unwrap();
        let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ha.weights()), bits(hl.weights()));
        if bias == 0.0 {
            assert_eq!(bits(ha.bias()), bits(hl.bias()));
        }
    }
}

#[test]
fn lamb_update_norm_is_rate_times_weight_norm() {
    let (k, d) = (3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let head = LinearHead::new(k, d, random_vec(&mut rng, k * d, 1.0), random_vec(&mut rng, k, 1.0)).unwrap();
    let state = OptimizerState::new(OptimizerConfig::with_kind(OptimizerKind::Lamb), &head);
    let g = privatized(k, d, random_vec(&mut rng, k * d, 1.0), random_vec(&mut rng, k, 1.0));
    let rate = 0.05;
    let (out, _) = lamb_update(&head, &state, &g, rate);
    let norm = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let w_norm = head.weights().iter().map(|x| x * x).sum::<f64>().sqrt();
    let b_norm = head.bias().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm(out.weights(), head.weights()) - rate * w_norm).abs() <= 1e-12);
    assert!((norm(out.bias(), head.bias()) - rate * b_norm).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adam_second_moment_stays_nonnegative(seed in any::<u64>(), steps in 1usize..30, scale in 1e-6f64..1e3) {
        let (k, d) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = LinearHead::zeros(k, d);
        let kind = if seed % 2 == 0 { OptimizerKind::Adam } else { OptimizerKind::Lamb };
        let mut state = OptimizerState::new(OptimizerConfig::with_kind(kind), &head);
        for _ in 0..steps {
            let g = privatized(k, d, random_vec(&mut rng, k * d, scale), random_vec(&mut rng, k, scale));
            let (h, s) = dp_step(&head, &state, &g, 1e-2).unwrap();
            head = h;
            state = s;
            let v = state.second_moment();
            prop_assert!(v.weights.iter().chain(&v.bias).all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn first_step_argmax_is_rate_invariant(seed in any::<u64>(), adam in any::<bool>()) {
        let (n, k, d) = (40, 5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = random_vec(&mut rng, n * d, 2.0);
        let labels: Vec<u16> = (0..n).map(|_| rng.gen_range(0..k) as u16).collect();
        let head = LinearHead::new(k, d, vec![0.0; k * d], vec![-10.0; k]).unwrap();
        let batch = Batch::new(&features, &labels, d).unwrap();
        let packet = dpft_core::grad::clipped_gradient_sum(&head, &batch, 1.0).unwrap();
        let g = noisy_gradient(&packet, 0.0, 1.0, &mut GaussianNoise::from_seed(seed)).unwrap();
        let kind = if adam { OptimizerKind::Adam } else { OptimizerKind::Sgd };
        let state = OptimizerState::new(OptimizerConfig::with_kind(kind), &head);
        let probes = random_vec(&mut rng, 50 * d, 3.0);
        let predictions = |rate: f64| {
            let (h, _) = dp_step(&head, &state, &g, rate).unwrap();
            let z = dpft_core::grad::forward_logits(&h, &probes).unwrap();
            z.chunks(k).map(argmax).collect::<Vec<_>>()
        };
        let base = predictions(1e-4);
        for rate in [1e-3, 1e-2, 1e-1] {
            prop_assert_eq!(&predictions(rate), &base);
        }
    }
}
