use amp_sw::denoiser::{denoise_signal, BayesSwDenoiser, Boundary, WindowDenoiser, DENOISE_CHUNK};
use amp_sw::markov::{FiniteMarkovChain, WindowPrior};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn prior(k: usize) -> WindowPrior {
    FiniteMarkovChain::binary_example()
        .window_marginal(k)
        .unwrap()
}

/// Posterior mean by direct weights, no log-sum-exp.
fn naive_mean(prior: &WindowPrior, tau: f64, v: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, p) in prior.sequences() {
        let d2: f64 = x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        let w = p * (-d2 / (2.0 * tau * tau)).exp();
        num += w * x[prior.k()];
        den += w;
    }
    num / den
}

#[test]
fn derivative_matches_finite_difference() {
    let h = 1e-4;
    for k in 0..=2 {
        let p = prior(k);
        let den = BayesSwDenoiser::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(77 + k as u64);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let tau = rng.random_range(0.3..2.0);
            let v: Vec<f64> = (0..2 * k + 1)
                .map(|_| rng.random_range(-1.0..2.0))
                .collect();
            let at = den.at(tau).unwrap();
            let d = at.center_derivative(&v).unwrap();
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[k] += h;
            vm[k] -= h;
            let fd = (at.evaluate(&vp).unwrap() - at.evaluate(&vm).unwrap()) / (2.0 * h);
            worst = worst.max((d - fd).abs());
        }
        assert!(worst < 1e-5, "k={k}: worst derivative error {worst}");
    }
}

#[test]
fn matches_direct_posterior_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..=2 {
        let p = prior(k);
        let den = BayesSwDenoiser::new(&p);
        for _ in 0..50 {
            let tau = rng.random_range(0.2..3.0);
            let v: Vec<f64> = (0..2 * k + 1)
                .map(|_| rng.random_range(-1.0..2.0))
                .collect();
            let got = den.denoise(tau, &v).unwrap();
            assert!((got - naive_mean(&p, tau, &v)).abs() < 1e-12);
        }
    }
}

#[test]
fn small_tau_recovers_support_sequence() {
    let p = prior(1);
    let den = BayesSwDenoiser::new(&p);
    for (x, _) in p.sequences() {
        let noisy: Vec<f64> = x.iter().map(|a| a + 0.01).collect();
        let est = den.denoise(1e-3, &noisy).unwrap();
        assert!((est - x[1]).abs() < 1e-12, "{x:?} -> {est}");
    }
}

proptest! {
    #[test]
    fn output_in_hull_and_derivative_nonnegative(
        k in 0usize..=2,
        tau in 1e-3f64..1e3,
        seed in any::<u64>(),
    ) {
        let p = prior(k);
        let den = BayesSwDenoiser::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..2 * k + 1).map(|_| rng.random_range(-50.0..50.0)).collect();
        let (est, d) = den.at(tau).unwrap().evaluate_with_derivative(&v).unwrap();
        prop_assert!(est.is_finite() && d.is_finite());
        prop_assert!((0.0..=1.0).contains(&est));
        prop_assert!(d >= 0.0);
    }

    #[test]
    fn lipschitz_bound(
        k in 0usize..=2,
        tau in 0.2f64..3.0,
        seed in any::<u64>(),
    ) {
        let p = prior(k);
        let den = BayesSwDenoiser::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = 2 * k + 1;
        let a: Vec<f64> = (0..w).map(|_| rng.random_range(-2.0..3.0)).collect();
        let b: Vec<f64> = (0..w).map(|_| rng.random_range(-2.0..3.0)).collect();
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        // range of the state space is 1
        let lip = (w as f64).sqrt() / (4.0 * tau * tau);
        let diff = (den.denoise(tau, &a).unwrap() - den.denoise(tau, &b).unwrap()).abs();
        prop_assert!(diff <= lip * dist + 1e-12);
    }

    #[test]
    fn logit_shift_by_pure_offset(k in 0usize..=1, tau in 0.1f64..5.0, shift in -5.0f64..5.0) {
        // shifting every prior atom and the observation by c shifts the mean by c
        let p = prior(k);
        let seqs: Vec<f64> = p.sequences().flat_map(|(x, _)| x.iter().map(|a| a + shift).collect::<Vec<_>>()).collect();
        let shifted = WindowPrior::from_parts(k, seqs, p.probs().to_vec()).unwrap();
        let v: Vec<f64> = (0..2 * k + 1).map(|i| 0.2 * i as f64).collect();
        let vs: Vec<f64> = v.iter().map(|a| a + shift).collect();
        let base = BayesSwDenoiser::new(&p).denoise(tau, &v).unwrap();
        let moved = BayesSwDenoiser::new(&shifted).denoise(tau, &vs).unwrap();
        prop_assert!((moved - base - shift).abs() < 1e-9);
    }
}

#[test]
fn small_signal_per_window_oracle() {
    let p = prior(1);
    let den = BayesSwDenoiser::new(&p);
    let tau = 0.7;
    let s = [0.1, 0.9, -0.2, 1.3, 0.4];
    let out = denoise_signal(&den.at(tau).unwrap(), &s, Boundary::Zero).unwrap();
    assert_eq!(out.estimate[0], 0.0);
    assert_eq!(out.estimate[4], 0.0);
    let mut dsum = 0.0;
    for i in 1..4 {
        assert!((out.estimate[i] - naive_mean(&p, tau, &s[i - 1..=i + 1])).abs() < 1e-12);
        dsum += den.center_derivative(tau, &s[i - 1..=i + 1]).unwrap();
    }
    assert!((out.onsager_sum - dsum).abs() < 1e-12);
}

#[test]
fn chunked_evaluation_matches_windowwise() {
    let p = prior(2);
    let den = BayesSwDenoiser::new(&p);
    let at = den.at(0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s: Vec<f64> = (0..3 * DENOISE_CHUNK + 17)
        .map(|_| rng.random_range(-1.0..2.0))
        .collect();
    let out = denoise_signal(&at, &s, Boundary::Zero).unwrap();
    for i in 2..s.len() - 2 {
        assert_eq!(out.estimate[i], at.evaluate(&s[i - 2..=i + 2]).unwrap());
    }
    let by_window: f64 = (2..s.len() - 2)
        .map(|i| at.center_derivative(&s[i - 2..=i + 2]).unwrap())
        .sum();
    assert!((out.onsager_sum - by_window).abs() < 1e-9 * by_window.abs().max(1.0));
}

#[test]
fn median_boundary_fills_edges_only() {
    let p = prior(1);
    let den = BayesSwDenoiser::new(&p);
    let at = den.at(0.5).unwrap();
    let s = [1.0, 1.1, 0.9, 0.0, 0.1, 1.2];
    let zero = denoise_signal(&at, &s, Boundary::Zero).unwrap();
    let med = denoise_signal(&at, &s, Boundary::Median).unwrap();
    assert_eq!(zero.onsager_sum, med.onsager_sum);
    assert_eq!(zero.estimate[1..5], med.estimate[1..5]);
    // left window (median(1.0, 1.1) = 1.05, 1.0, 1.1)
    let left = at.evaluate(&[1.05, 1.0, 1.1]).unwrap();
    assert_eq!(med.estimate[0], left);
    assert!(med.estimate[0] > 0.5 && med.estimate[5] > 0.5);
}

#[test]
fn rejects_short_signal_and_bad_tau() {
    let den = BayesSwDenoiser::new(&prior(2));
    assert!(denoise_signal(&den.at(1.0).unwrap(), &[0.0; 4], Boundary::Zero).is_err());
    assert!(den.at(0.0).is_err());
    assert!(den.at(f64::NAN).is_err());
}
