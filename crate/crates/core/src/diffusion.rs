//! Forward noising, posterior statistics, and ancestral sampling.
//!
//! Every function here is a pure function of its arguments; randomness enters
//! only through caller-supplied noise tensors or an explicit seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Element, Tensor};

/// Images `[B, C, H, W]` with optional per-image class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<F> {
    pub images: Tensor<F>,
    pub labels: Option<Vec<usize>>,
}

impl<F: Element> ImageBatch<F> {
    pub fn len(&self) -> usize {
        self.images.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Variance of the reverse transition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseVariance {
    /// `sigma_t^2 = beta_tilde_t`, the forward posterior variance.
    #[default]
    Posterior,
    /// `sigma_t^2 = beta_t`.
    Beta,
}

impl ReverseVariance {
    pub fn sigma(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            ReverseVariance::Posterior => schedule.posterior_variance(t).sqrt(),
            ReverseVariance::Beta => schedule.beta(t).sqrt(),
        }
    }
}

fn check_pair<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`, with one
/// timestep per batch element.
pub fn forward_sample<F: Element>(
    x0: &Tensor<F>,
    t: &[usize],
    eps: &Tensor<F>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    check_pair(x0, eps)?;
    let batch = x0.shape().first().copied().unwrap_or(0);
    if t.len() != batch {
        return Err(Error::Shape(format!("{} timesteps for a batch of {batch}", t.len())));
    }
    for &ti in t {
        schedule.check_t(ti)?;
    }
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        let (a, b) = (F::of(schedule.alpha_bar(ti).sqrt()), F::of(schedule.one_minus_alpha_bar(ti).sqrt()));
        for (o, &e) in out.item_mut(i).iter_mut().zip(eps.item(i)) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

/// Coefficients `(c0, ct)` of the posterior mean `c0 * x0 + ct * x_t`.
pub fn posterior_coefficients(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    schedule.check_t(t)?;
    let one_minus = schedule.one_minus_alpha_bar(t);
    let c0 = schedule.alpha_bar(t - 1).sqrt() * schedule.beta(t) / one_minus;
    let ct = schedule.alpha(t).sqrt() * schedule.one_minus_alpha_bar(t - 1) / one_minus;
    Ok((c0, ct))
}

/// Mean of `q(x_{t-1} | x_t, x_0)`.
pub fn posterior_mean<F: Element>(
    x0: &Tensor<F>,
    xt: &Tensor<F>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    check_pair(x0, xt)?;
    let (c0, ct) = posterior_coefficients(schedule, t)?;
    let (c0, ct) = (F::of(c0), F::of(ct));
    x0.zip_map(xt, |a, b| c0 * a + ct * b)
}

/// Inverts the forward marginal given a noise estimate.
pub fn predict_x0_from_eps<F: Element>(
    xt: &Tensor<F>,
    t: usize,
    eps_hat: &Tensor<F>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    check_pair(xt, eps_hat)?;
    schedule.check_t(t)?;
    let (s1, inv) = (F::of(schedule.one_minus_alpha_bar(t).sqrt()), F::of(1.0 / schedule.alpha_bar(t).sqrt()));
    xt.zip_map(eps_hat, |x, e| (x - s1 * e) * inv)
}

/// One ancestral step from `x_t` to `x_{t-1}`.
///
/// `z` must be all zeros at `t = 1`.
pub fn reverse_step<F: Element>(
    xt: &Tensor<F>,
    t: usize,
    eps_hat: &Tensor<F>,
    z: &Tensor<F>,
    schedule: &NoiseSchedule,
    variance: ReverseVariance,
) -> Result<Tensor<F>> {
    check_pair(xt, eps_hat)?;
    check_pair(xt, z)?;
    schedule.check_t(t)?;
    if t == 1 && z.data().iter().any(|&v| v != F::zero()) {
        return Err(Error::InvalidArgument("the final reverse step (t = 1) takes no noise".into()));
    }
    let inv_sqrt_alpha = F::of(1.0 / schedule.alpha(t).sqrt());
    let eps_coef = F::of(schedule.beta(t) / schedule.one_minus_alpha_bar(t).sqrt());
    let sigma = F::of(variance.sigma(schedule, t));
    let mut out = xt.clone();
    for ((o, &e), &zv) in out.data_mut().iter_mut().zip(eps_hat.data()).zip(z.data()) {
        *o = inv_sqrt_alpha * (*o - eps_coef * e) + sigma * zv;
    }
    Ok(out)
}

/// Anything that estimates the noise in `x_t`.
pub trait NoisePredictor<F: Element> {
    /// `(channels, height, width)` of one sample.
    fn sample_shape(&self) -> (usize, usize, usize);

    /// `Some(K)` for class-conditional predictors.
    fn num_classes(&self) -> Option<usize>;

    fn predict_noise(&self, xt: &Tensor<F>, t: &[usize], class_ids: Option<&[usize]>) -> Result<Tensor<F>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub variance: ReverseVariance,
    /// Clamp the final output to `[-1, 1]`.
    pub clamp_output: bool,
    /// Samples denoised together per model call.
    pub batch_size: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { variance: ReverseVariance::Posterior, clamp_output: true, batch_size: 64 }
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
///
/// Sample `i` draws all of its noise from stream `i` of `seed`, so results do
/// not depend on `batch_size`.
pub fn sample<F: Element, M: NoisePredictor<F> + ?Sized>(
    model: &M,
    n: usize,
    class_ids: Option<&[usize]>,
    schedule: &NoiseSchedule,
    seed: u64,
    options: &SampleOptions,
) -> Result<ImageBatch<F>> {
    let (c, h, w) = model.sample_shape();
    match (model.num_classes(), class_ids) {
        (Some(k), Some(ids)) => {
            if ids.len() != n {
                return Err(Error::InvalidArgument(format!("{} class ids for {n} samples", ids.len())));
            }
            if let Some(&bad) = ids.iter().find(|&&id| id >= k) {
                return Err(Error::InvalidClass { id: bad, num_classes: k });
            }
        }
        (Some(_), None) => return Err(Error::InvalidArgument("conditional model needs class ids".into())),
        (None, Some(_)) => return Err(Error::InvalidArgument("unconditional model takes no class ids".into())),
        (None, None) => {}
    }
    let per = c * h * w;
    let mut out = Vec::with_capacity(n * per);
    let chunk = options.batch_size.max(1);
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let b = end - start;
        let mut rngs: Vec<_> = (start..end).map(|i| rng::stream(seed, i as u64)).collect();
        let mut x = Tensor::<F>::zeros(&[b, c, h, w]);
        for (i, r) in rngs.iter_mut().enumerate() {
            rng::fill_normal(x.item_mut(i), r);
        }
        let ids = class_ids.map(|ids| &ids[start..end]);
        for t in (1..=schedule.steps()).rev() {
            let eps_hat = model.predict_noise(&x, &vec![t; b], ids)?;
            let mut z = Tensor::zeros(x.shape());
            if t > 1 {
                for (i, r) in rngs.iter_mut().enumerate() {
                    rng::fill_normal(z.item_mut(i), r);
                }
            }
            x = reverse_step(&x, t, &eps_hat, &z, schedule, options.variance)?;
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("sampling produced non-finite pixels".into()));
        }
        if options.clamp_output {
            x = x.map(|v| v.max(-F::one()).min(F::one()));
        }
        out.extend_from_slice(x.data());
    }
    Ok(ImageBatch {
        images: Tensor::from_vec(&[n, c, h, w], out)?,
        labels: class_ids.map(|ids| ids.to_vec()),
    })
}
