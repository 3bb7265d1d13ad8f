use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvr_core::eval::{bootstrap_compare, bootstrap_p_value};

/// Two-sided sign-flip permutation test on paired differences.
fn permutation_p(a: &[f64], b: &[f64], trials: usize, rng: &mut ChaCha8Rng) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let obs = d.iter().sum::<f64>().abs();
    let mut hits = 0;
    for _ in 0..trials {
        let s: f64 = d
            .iter()
            .map(|v| if rng.random_bool(0.5) { *v } else { -*v })
            .sum();
        if s.abs() >= obs - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / trials as f64
}

#[test]
fn identical_vectors_are_not_significant() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a: Vec<f64> = (0..50).map(|_| rng.random_range(0..2) as f64).collect();
    let r = bootstrap_compare(&a, &a, 10_000, 0.05, &mut rng).unwrap();
    assert_eq!(r.p_value, 1.0);
    assert!(!r.significant);
}

#[test]
fn disjoint_vectors_are_significant_and_stable() {
    let a = vec![1.0; 50];
    let b = vec![0.0; 50];
    let ps: Vec<f64> = (0..5)
        .map(|s| bootstrap_p_value(&a, &b, 10_000, &mut ChaCha8Rng::seed_from_u64(s)).unwrap())
        .collect();
    assert!(ps.iter().all(|&p| p < 0.05));
    let r = bootstrap_compare(&b, &a, 10_000, 0.05, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(r.significant);
}

#[test]
fn agrees_with_permutation_test_on_clear_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (shift, expect_significant) in [(0.5, true), (0.0, false)] {
        for _ in 0..5 {
            let a: Vec<f64> = (0..80)
                .map(|_| f64::from(rng.random_bool(0.3 + shift) as u8))
                .collect();
            let b: Vec<f64> = (0..80)
                .map(|_| f64::from(rng.random_bool(0.3) as u8))
                .collect();
            let boot = bootstrap_p_value(&a, &b, 5000, &mut rng).unwrap();
            let perm = permutation_p(&a, &b, 5000, &mut rng);
            if expect_significant {
                assert!(boot < 0.01 && perm < 0.01, "boot {boot} perm {perm}");
            } else {
                // One-sided bootstrap p against a two-sided permutation p.
                assert!(
                    (2.0 * boot).min(1.0) - perm < 0.25,
                    "boot {boot} perm {perm}"
                );
            }
        }
    }
}

#[test]
fn p_value_is_stable_across_seeds() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..60)
        .map(|_| f64::from(rng.random_bool(0.55) as u8))
        .collect();
    let b: Vec<f64> = (0..60)
        .map(|_| f64::from(rng.random_bool(0.45) as u8))
        .collect();
    let ps: Vec<f64> = (0..10)
        .map(|s| {
            bootstrap_p_value(&a, &b, 10_000, &mut ChaCha8Rng::seed_from_u64(100 + s)).unwrap()
        })
        .collect();
    let lo = ps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(hi - lo <= 0.02, "{ps:?}");
}

#[test]
fn bad_inputs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(bootstrap_p_value(&[1.0, 0.0], &[1.0], 10, &mut rng).is_err());
    assert!(bootstrap_p_value(&[1.0], &[1.0], 10, &mut rng).is_err());
    assert!(bootstrap_p_value(&[1.0, 0.0], &[1.0, 1.0], 0, &mut rng).is_err());
    assert!(bootstrap_compare(&[1.0, 0.0], &[1.0, 1.0], 10, 1.5, &mut rng).is_err());
}
