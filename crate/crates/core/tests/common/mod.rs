//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use sardiff::diffusion::NoisePredictor;
use sardiff::rng::{normal_tensor, stream};
use sardiff::schedule::NoiseSchedule;
use sardiff::train::{loss_and_grads, predictor_loss, NoiseDraw};
use sardiff::unet::{UNet, UNetConfig};
use sardiff::{Result, Tensor};

/// `(hi, lo)` with `hi + lo` the exact product.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn dd_mul(x: (f64, f64), b: f64) -> (f64, f64) {
    let (p, e) = two_prod(x.0, b);
    fast_two_sum(p, e + x.1 * b)
}

fn dd_div(x: (f64, f64), b: f64) -> (f64, f64) {
    let q = x.0 / b;
    let (p, e) = two_prod(q, b);
    let r = (x.0 - p - e + x.1) / b;
    fast_two_sum(q, r)
}

/// Double-double product of `1 - beta_t`, `t = 1..=t_max`, for the linear
/// schedule over `[1e-4, 0.02]` with 1000 steps. There
/// `beta_t = (999 + 199 (t-1)) / 9_990_000`, so every factor is an exact integer ratio.
pub fn linear_alpha_bar_oracle(t_max: usize) -> f64 {
    const DENOM: f64 = 9_990_000.0;
    let mut acc = (1.0, 0.0);
    for k in 0..t_max {
        let numer = DENOM - 999.0 - 199.0 * k as f64;
        acc = dd_div(dd_mul(acc, numer), DENOM);
    }
    acc.0 + acc.1
}

/// Exact noise predictor for standard-normal scalar data: `E[eps | x_t] = sqrt(1 - alpha_bar_t) x_t`.
pub struct GaussianOracle<'a>(pub &'a NoiseSchedule);

impl NoisePredictor<f64> for GaussianOracle<'_> {
    fn sample_shape(&self) -> (usize, usize, usize) {
        (1, 1, 1)
    }

    fn num_classes(&self) -> Option<usize> {
        None
    }

    fn predict_noise(&self, xt: &Tensor<f64>, t: &[usize], _: Option<&[usize]>) -> Result<Tensor<f64>> {
        let mut out = xt.clone();
        for (i, &ti) in t.iter().enumerate() {
            let k = self.0.one_minus_alpha_bar(ti).sqrt();
            out.item_mut(i).iter_mut().for_each(|v| *v *= k);
        }
        Ok(out)
    }
}

pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

pub struct GradCheck {
    /// `(parameter name, flat index, analytic, numeric, relative error)`.
    pub entries: Vec<(String, usize, f64, f64, f64)>,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.4).fold(0.0, f64::max)
    }
}

/// Central finite differences on `count` randomly chosen parameters of a tiny
/// conditional `f64` UNet (16x16, base 8), against the tape gradients of the
/// noise-prediction loss with a fixed noise draw.
pub fn unet_gradient_check(count: usize, seed: u64) -> GradCheck {
    let cfg = UNetConfig { num_classes: Some(3), dropout: 0.0, ..UNetConfig::small(16, 8, &[1, 2], 8) };
    let model = UNet::<f64>::build(&cfg, seed).unwrap();
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let x0 = normal_tensor::<f64, _>(&[2, 1, 16, 16], &mut stream(seed, 1)).map(|v| v.clamp(-1.0, 1.0));
    let draw = NoiseDraw { t: vec![37, 640], eps: normal_tensor(&[2, 1, 16, 16], &mut stream(seed, 2)) };
    let labels = [0usize, 2];
    let analytic = loss_and_grads(&model, &x0, Some(&labels), &draw, &schedule, None).unwrap();
    let mut pick = stream(seed, 3);
    let h = 1e-5;
    let mut entries = Vec::new();
    while entries.len() < count {
        let p = pick.random_range(0..model.params().len());
        let idx = pick.random_range(0..model.params()[p].value.len());
        let a = analytic.grads[p].data()[idx];
        let eval = |delta: f64| {
            let mut m = model.clone();
            let mut value = (*m.params()[p].value).clone();
            value.data_mut()[idx] += delta;
            m.params_mut()[p].value = std::sync::Arc::new(value);
            predictor_loss(&m, &x0, Some(&labels), &draw, &schedule).unwrap()
        };
        let n = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        entries.push((model.params()[p].name.clone(), idx, a, n, rel));
    }
    GradCheck { entries }
}
