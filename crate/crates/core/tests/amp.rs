#![allow(clippy::needless_range_loop)]

use amp_sw::amp::{
    amp_step, generate_instance, middle_mse, pl_loss, run_amp, AmpState, DenseMatrix, NoiseKind,
    PlLoss, ProblemInstance, StepOptions, TauSource,
};
use amp_sw::denoiser::{BayesSwDenoiser, Boundary};
use amp_sw::markov::{FiniteMarkovChain, WindowPrior};
use amp_sw::state_evolution::{run_se, ExpectationEngine, SeParams};
use amp_sw::Error;

fn chain() -> FiniteMarkovChain {
    FiniteMarkovChain::binary_example()
}

/// Plain-loop transcription of the recursion on a tiny problem.
struct Reference<'a> {
    a: &'a DenseMatrix,
    y: &'a [f64],
    prior: &'a WindowPrior,
}

impl Reference<'_> {
    fn eta(&self, v: &[f64], tau2: f64) -> (f64, f64) {
        let c = self.prior.k();
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..self.prior.len() {
            let x = self.prior.sequence(i);
            let d2: f64 = x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            let w = self.prior.probs()[i] * (-d2 / (2.0 * tau2)).exp();
            z += w;
            m1 += w * x[c];
            m2 += w * x[c] * x[c];
        }
        let mean = m1 / z;
        (mean, (m2 / z - mean * mean) / tau2)
    }

    fn run(&self, taus: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let (n, big_n, k) = (self.a.rows(), self.a.cols(), self.prior.k());
        let mut beta = vec![0.0; big_n];
        let mut z = self.y.to_vec();
        let mut out = vec![(beta.clone(), z.clone())];
        for &tau2 in taus {
            let mut s = beta.clone();
            for j in 0..big_n {
                for i in 0..n {
                    s[j] += self.a.get(i, j) * z[i];
                }
            }
            let mut next = vec![0.0; big_n];
            let mut dsum = 0.0;
            for j in k..big_n - k {
                let (m, d) = self.eta(&s[j - k..=j + k], tau2);
                next[j] = m;
                dsum += d;
            }
            let mut znew = vec![0.0; n];
            for i in 0..n {
                let mut ab = 0.0;
                for j in 0..big_n {
                    ab += self.a.get(i, j) * next[j];
                }
                znew[i] = self.y[i] - ab + z[i] * dsum / n as f64;
            }
            beta = next;
            z = znew;
            out.push((beta.clone(), z.clone()));
        }
        out
    }
}

#[test]
fn toy_problem_matches_reference_transcription() {
    let inst = generate_instance(&chain(), 8, 0.5, 0.1, NoiseKind::Gaussian, 31).unwrap();
    assert_eq!(inst.measurements(), 4);
    let prior = chain().window_marginal(1).unwrap();
    let den = BayesSwDenoiser::new(&prior);
    let taus = [1.1, 0.8, 0.6, 0.5];
    let reference = Reference {
        a: &inst.a,
        y: &inst.y,
        prior: &prior,
    }
    .run(&taus);

    let mut state = AmpState::initial(&inst);
    for (t, &tau2) in taus.iter().enumerate() {
        let (rb, rz) = &reference[t];
        for (a, b) in state.beta.iter().zip(rb) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in state.z.iter().zip(rz) {
            assert!((a - b).abs() < 1e-12);
        }
        state = amp_step(&state, &inst, &den, tau2, StepOptions::default()).unwrap();
    }
    let (rb, rz) = &reference[taus.len()];
    for (a, b) in state.beta.iter().zip(rb).chain(state.z.iter().zip(rz)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn instance_construction() {
    let inst = generate_instance(&chain(), 2000, 1.5, 0.0, NoiseKind::Gaussian, 4).unwrap();
    assert_eq!(inst.measurements(), 3000);
    let mean_norm = inst.a.mean_column_norm2();
    assert!((mean_norm - 1.0).abs() < 0.05, "{mean_norm}");
    // noiseless: y = Aβ₀ exactly
    assert_eq!(inst.y, inst.a.matvec(&inst.beta0).unwrap());

    let noisy = generate_instance(&chain(), 2000, 0.5, 0.1, NoiseKind::Gaussian, 4).unwrap();
    assert!(noisy.noise_is_plausible());
    let uniform = generate_instance(&chain(), 2000, 0.5, 0.1, NoiseKind::Uniform, 4).unwrap();
    assert!(uniform.noise_is_plausible());
    let half = (0.3f64).sqrt();
    assert!(uniform.w.iter().all(|w| w.abs() <= half));
    // streams are separate: the matrix does not depend on the noise kind
    assert_eq!(noisy.a.row(7), uniform.a.row(7));
    assert_eq!(noisy.beta0, uniform.beta0);

    let again = generate_instance(&chain(), 2000, 0.5, 0.1, NoiseKind::Gaussian, 4).unwrap();
    assert_eq!(noisy.y, again.y);
}

#[test]
fn degenerate_prior_fills_constant() {
    let inst = generate_instance(&chain(), 50, 0.4, 0.1, NoiseKind::Gaussian, 2).unwrap();
    let den = BayesSwDenoiser::new(&WindowPrior::degenerate(0, &[0.25]).unwrap());
    let s = amp_step(
        &AmpState::initial(&inst),
        &inst,
        &den,
        1.0,
        StepOptions::default(),
    )
    .unwrap();
    assert!(s.beta.iter().all(|&b| b == 0.25));
    assert_eq!(s.onsager_prev, 0.0);
}

#[test]
fn zero_estimator_baseline_and_losses() {
    let inst = generate_instance(&chain(), 10_000, 0.05, 0.1, NoiseKind::Gaussian, 8).unwrap();
    let run = run_amp(
        &inst,
        &BayesSwDenoiser::new(&chain().window_marginal(1).unwrap()),
        0,
        TauSource::Empirical,
        None,
        StepOptions::default(),
    )
    .unwrap();
    assert_eq!(run.iterations.len(), 1);
    let mse0 = run.iterations[0].middle_mse;
    let ones = inst.beta0[1..9_999].iter().sum::<f64>() / 9_998.0;
    assert_eq!(mse0, ones);
    assert!((mse0 - 0.3).abs() < 0.03);

    let b = &inst.beta0;
    assert_eq!(middle_mse(b, b, 2).unwrap(), 0.0);
    assert_eq!(pl_loss(b, b, 2, PlLoss::Absolute).unwrap(), 0.0);
    assert!((pl_loss(b, b, 0, PlLoss::Product).unwrap() - 0.3).abs() < 0.03);
    let zeros = vec![0.0; b.len()];
    assert_eq!(
        middle_mse(&zeros, b, 0).unwrap(),
        b.iter().sum::<f64>() / b.len() as f64
    );
    assert!(middle_mse(&zeros[..4], &b[..4], 2).is_err());
}

#[test]
fn se_trace_mode_requires_trace() {
    let inst = generate_instance(&chain(), 40, 0.5, 0.1, NoiseKind::Gaussian, 1).unwrap();
    let den = BayesSwDenoiser::new(&chain().window_marginal(0).unwrap());
    let err = run_amp(
        &inst,
        &den,
        3,
        TauSource::SeTrace,
        None,
        StepOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::MissingTrace(_)));

    let params = SeParams::new(0, 40, 20, 0.1, 0.3).unwrap();
    let short = run_se(
        &params,
        &chain().window_marginal(0).unwrap(),
        2,
        &ExpectationEngine::monte_carlo(1000, 0),
    )
    .unwrap();
    assert!(!short.converged);
    assert!(run_amp(
        &inst,
        &den,
        3,
        TauSource::SeTrace,
        Some(&short),
        StepOptions::default()
    )
    .is_ok());
    assert!(run_amp(
        &inst,
        &den,
        4,
        TauSource::SeTrace,
        Some(&short),
        StepOptions::default()
    )
    .is_err());
    assert!(amp_step(
        &AmpState::initial(&inst),
        &inst,
        &den,
        0.0,
        StepOptions::default()
    )
    .is_err());
}

#[test]
fn boundary_policies() {
    let inst = generate_instance(&chain(), 400, 0.5, 0.1, NoiseKind::Gaussian, 6).unwrap();
    let den = BayesSwDenoiser::new(&chain().window_marginal(2).unwrap());
    let zero = run_amp(
        &inst,
        &den,
        4,
        TauSource::Empirical,
        None,
        StepOptions::default(),
    )
    .unwrap();
    for s in &zero.states[1..] {
        assert!(s.beta[..2].iter().chain(&s.beta[398..]).all(|&b| b == 0.0));
        assert!(s.beta.iter().all(|&b| (0.0..=1.0).contains(&b)));
    }
    let options = StepOptions {
        boundary: Boundary::Median,
        ..StepOptions::default()
    };
    let med = run_amp(&inst, &den, 4, TauSource::Empirical, None, options).unwrap();
    assert!(med.states[1].beta[..2].iter().any(|&b| b > 0.0));
    // the first step sees identical inputs in the middle
    assert_eq!(zero.states[1].beta[2..398], med.states[1].beta[2..398]);
}

fn residual_deviation(run: &amp_sw::amp::AmpRun, taus: &[f64], t: usize) -> f64 {
    (run.iterations[t].residual_power - taus[t]).abs() / taus[t]
}

#[test]
fn residual_tracks_state_evolution_and_needs_onsager_term() {
    let k = 1;
    let n_sig = 10_000;
    let inst = generate_instance(&chain(), n_sig, 0.3, 0.1, NoiseKind::Gaussian, 12).unwrap();
    let prior = chain().window_marginal(k).unwrap();
    let params = SeParams::new(k, n_sig, inst.measurements(), 0.1, 0.3).unwrap();
    let trace = run_se(
        &params,
        &prior,
        30,
        &ExpectationEngine::monte_carlo(100_000, 0),
    )
    .unwrap();
    let den = BayesSwDenoiser::new(&prior);

    let run = run_amp(
        &inst,
        &den,
        10,
        TauSource::SeTrace,
        Some(&trace),
        StepOptions::default(),
    )
    .unwrap();
    for t in 0..=10 {
        let dev = residual_deviation(&run, &trace.tau2, t);
        assert!(dev < 0.1, "t={t}: relative deviation {dev}");
    }

    let off = StepOptions {
        onsager_correction: false,
        ..StepOptions::default()
    };
    let naive = run_amp(&inst, &den, 5, TauSource::SeTrace, Some(&trace), off).unwrap();
    let good = residual_deviation(&run, &trace.tau2, 5);
    let bad = residual_deviation(&naive, &trace.tau2, 5);
    assert!(bad > 3.0 * good, "without correction {bad}, with {good}");
}

#[test]
fn matrix_binary_round_trip_and_from_parts() {
    let a = DenseMatrix::gaussian(5, 9, 77);
    let mut buf = Vec::new();
    a.write_binary(&mut buf).unwrap();
    let b = DenseMatrix::read_binary(buf.as_slice()).unwrap();
    assert_eq!(a, b);
    let inst = ProblemInstance::from_parts(b, vec![1.0; 9], vec![0.0; 5], 0.0).unwrap();
    assert_eq!(inst.y, a.matvec(&[1.0; 9]).unwrap());
    assert!(ProblemInstance::from_parts(a, vec![1.0; 9], vec![0.0; 4], 0.0).is_err());
}
