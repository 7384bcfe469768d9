mod common;

use proptest::prelude::*;
use sardiff::diffusion::{
    forward_sample, posterior_mean, predict_x0_from_eps, reverse_step, sample, ReverseVariance, SampleOptions,
};
use sardiff::rng::{normal_tensor, stream};
use sardiff::schedule::NoiseSchedule;
use sardiff::Tensor;

use common::{mean_var, GaussianOracle};

fn linear() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

#[test]
fn forward_marginal_monte_carlo() {
    let s = linear();
    let n = 10_000;
    let x0 = 0.7;
    for t in [1usize, 500, 1000] {
        let eps: Tensor<f64> = normal_tensor(&[n, 1], &mut stream(11, t as u64));
        let xt = forward_sample(&Tensor::full(&[n, 1], x0), &vec![t; n], &eps, &s).unwrap();
        let (m, v) = mean_var(xt.data());
        let var = s.one_minus_alpha_bar(t);
        let se_mean = (var / n as f64).sqrt();
        let se_var = var * (2.0 / (n - 1) as f64).sqrt();
        assert!((m - s.alpha_bar(t).sqrt() * x0).abs() < 3.0 * se_mean, "t={t} mean {m}");
        assert!((v - var).abs() < 3.0 * se_var, "t={t} var {v} vs {var}");
    }
}

#[test]
fn reverse_step_recovers_x0_at_first_step() {
    let s = linear();
    let x0: Tensor<f64> = normal_tensor::<f64, _>(&[4, 1, 3, 3], &mut stream(2, 0)).map(|v| v.clamp(-1.0, 1.0));
    let eps = normal_tensor(&[4, 1, 3, 3], &mut stream(2, 1));
    let xt = forward_sample(&x0, &[1; 4], &eps, &s).unwrap();
    let z = Tensor::zeros(x0.shape());
    let x_prev = reverse_step(&xt, 1, &eps, &z, &s, ReverseVariance::Posterior).unwrap();
    let err = x_prev.zip_map(&x0, |a, b| a - b).unwrap().max_abs();
    assert!(err <= 1e-12, "{err}");
    let x32 = reverse_step(&xt.cast::<f32>(), 1, &eps.cast(), &z.cast(), &s, ReverseVariance::Posterior).unwrap();
    let err32 = x32.cast::<f64>().zip_map(&x0, |a, b| a - b).unwrap().max_abs();
    assert!(err32 <= 1e-5, "{err32}");
}

#[test]
fn reverse_step_mean_equals_posterior_mean_with_true_noise() {
    let s = linear();
    for t in [2usize, 10, 400, 1000] {
        let x0: Tensor<f64> = normal_tensor(&[2, 5], &mut stream(3, t as u64));
        let eps = normal_tensor(&[2, 5], &mut stream(4, t as u64));
        let xt = forward_sample(&x0, &[t; 2], &eps, &s).unwrap();
        let step = reverse_step(&xt, t, &eps, &Tensor::zeros(&[2, 5]), &s, ReverseVariance::Beta).unwrap();
        let mu = posterior_mean(&x0, &xt, t, &s).unwrap();
        let err = step.zip_map(&mu, |a, b| a - b).unwrap().max_abs();
        assert!(err < 1e-9, "t={t}: {err}");
    }
}

#[test]
fn analytic_sampler_reproduces_standard_normal() {
    let s = linear();
    let opts = SampleOptions { clamp_output: false, batch_size: 1000, ..Default::default() };
    let out = sample(&GaussianOracle(&s), 10_000, None, &s, 42, &opts).unwrap();
    let (m, v) = mean_var(out.images.data());
    assert!(m.abs() < 0.05, "mean {m}");
    assert!((0.9..=1.1).contains(&v), "variance {v}");
}

#[test]
fn sampling_does_not_depend_on_batch_size() {
    let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
    let run = |b| {
        let opts = SampleOptions { clamp_output: false, batch_size: b, ..Default::default() };
        sample(&GaussianOracle(&s), 7, None, &s, 5, &opts).unwrap().images
    };
    assert_eq!(run(1), run(3));
    assert_eq!(run(7), run(100));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_is_linear_in_x0_and_noise(t in 1usize..=1000, a in -2.0f64..2.0, seed in any::<u64>()) {
        let s = linear();
        let x = normal_tensor::<f64, _>(&[1, 6], &mut stream(seed, 0));
        let y = normal_tensor::<f64, _>(&[1, 6], &mut stream(seed, 1));
        let e1 = normal_tensor::<f64, _>(&[1, 6], &mut stream(seed, 2));
        let e2 = normal_tensor::<f64, _>(&[1, 6], &mut stream(seed, 3));
        let comb = |p: &Tensor<f64>, q: &Tensor<f64>| p.zip_map(q, |u, v| a * u + v).unwrap();
        let lhs = forward_sample(&comb(&x, &y), &[t], &comb(&e1, &e2), &s).unwrap();
        let rhs = comb(&forward_sample(&x, &[t], &e1, &s).unwrap(), &forward_sample(&y, &[t], &e2, &s).unwrap());
        prop_assert!(lhs.zip_map(&rhs, |u, v| u - v).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn x0_prediction_inverts_forward(t in 1usize..=1000, seed in any::<u64>()) {
        let s = linear();
        let x0 = normal_tensor::<f64, _>(&[2, 4], &mut stream(seed, 0));
        let eps = normal_tensor::<f64, _>(&[2, 4], &mut stream(seed, 1));
        let xt = forward_sample(&x0, &[t, t], &eps, &s).unwrap();
        let back = predict_x0_from_eps(&xt, t, &eps, &s).unwrap();
        let tol = 1e-10 / s.alpha_bar(t).sqrt();
        prop_assert!(back.zip_map(&x0, |u, v| u - v).unwrap().max_abs() < tol);
    }

    /// Two one-step marginals compose: variance of x_t given x_{t-1}, composed with
    /// x_{t-1} given x0, equals the closed-form marginal.
    #[test]
    fn marginals_chain(t in 2usize..=1000) {
        let s = linear();
        let composed = s.alpha(t) * s.one_minus_alpha_bar(t - 1) + s.beta(t);
        prop_assert!((composed - s.one_minus_alpha_bar(t)).abs() < 1e-12);
        prop_assert!((s.alpha(t).sqrt() * s.alpha_bar(t - 1).sqrt() - s.alpha_bar(t).sqrt()).abs() < 1e-12);
    }
}
