mod common;

use common::*;
use devsurv::classifier::{
    objective, select_threshold, threshold_grid, train_vectors, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gradient_matches_finite_differences() {
    let worst = gradient_check(1, 10);
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn full_batch_descent_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (xs, ps) = random_vectors(&mut rng, 30, true);
    let lambda = 0.5;
    let mut prev = f64::INFINITY;
    for epochs in 0..40 {
        let cfg = TrainConfig {
            epochs,
            batch_size: 0,
            learning_rate: 0.05,
            lr_decay: 0.0,
            lambda,
            seed: 0,
        };
        let m = train_vectors(&xs, &ps, &cfg, &small_features()).unwrap();
        let l = objective(&m.weights, m.bias, &xs, &ps, lambda);
        assert!(l <= prev + 1e-12, "epoch {epochs}: {l} > {prev}");
        prev = l;
    }
}

#[test]
fn hard_label_training_matches_newton_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (xs, ps) = random_vectors(&mut rng, 20, false);
    let lambda = 1.0;
    let cfg = TrainConfig {
        epochs: 20_000,
        batch_size: 0,
        learning_rate: 0.5,
        lr_decay: 0.0,
        lambda,
        seed: 0,
    };
    let m = train_vectors(&xs, &ps, &cfg, &small_features()).unwrap();
    let oracle = newton_oracle(&xs, &ps, lambda);
    let d = 1usize << DIMS_LOG2;
    for j in 0..d {
        assert!(
            (m.weights[j] - oracle[j]).abs() < 1e-3,
            "w[{j}] {} vs {}",
            m.weights[j],
            oracle[j]
        );
    }
    assert!((m.bias - oracle[d]).abs() < 1e-3);
}

#[test]
fn threshold_matches_exhaustive_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gold: Vec<bool> = (0..300).map(|_| rng.random_bool(0.4)).collect();
    let scores: Vec<f64> = gold
        .iter()
        .map(|&y| (if y { 0.6 } else { 0.4 } + rng.random_range(-0.35..0.35f64)).clamp(0.0, 1.0))
        .collect();
    let f1 = |t: f64| {
        let tp = scores
            .iter()
            .zip(&gold)
            .filter(|(s, y)| **s >= t && **y)
            .count() as f64;
        let pp = scores.iter().filter(|s| **s >= t).count() as f64;
        let pos = gold.iter().filter(|y| **y).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (pp + pos)
        }
    };
    let mut best = (0.0, -1.0);
    for t in threshold_grid() {
        if f1(t) > best.1 + 1e-15 {
            best = (t, f1(t));
        }
    }
    let (t, f) = select_threshold(&scores, &gold).unwrap();
    assert_eq!(t, best.0);
    assert!((f - best.1).abs() < 1e-12);
}
