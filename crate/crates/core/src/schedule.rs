//! Fixed variance schedules for the forward and reverse diffusion chains.
//!
//! Timesteps are 1-based everywhere in the public interface: `t = 1..=T`.
//! `alpha_bar(0) == 1` is kept as an explicit sentinel so that the posterior
//! coefficients at `t = 1` need no special casing.
//!
//! All tables are computed once in `f64`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset that keeps the cosine schedule's first steps from vanishing.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper bound on any cosine-schedule beta.
pub const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
    Sigmoid,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Linear, ScheduleKind::Cosine, ScheduleKind::Sigmoid];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Sigmoid => "sigmoid",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "sigmoid" => Ok(ScheduleKind::Sigmoid),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule kind `{other}` (expected linear, cosine or sigmoid)"
            ))),
        }
    }
}

/// Everything needed to rebuild a schedule; persisted alongside checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kind: ScheduleKind::Linear, steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end),
            ScheduleKind::Cosine => NoiseSchedule::cosine(self.steps),
            ScheduleKind::Sigmoid => NoiseSchedule::sigmoid(self.steps, self.beta_start, self.beta_end),
        }
    }
}

/// Precomputed per-timestep tables. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    // Index t-1 holds the value for timestep t.
    beta: Vec<f64>,
    alpha: Vec<f64>,
    // Index t holds the value for timestep t; index 0 is the sentinel 1.
    alpha_bar: Vec<f64>,
    // 1 - alpha_bar, accumulated separately to avoid cancellation at small t.
    one_minus_alpha_bar: Vec<f64>,
    posterior_variance: Vec<f64>,
}

fn validate_range(steps: usize, beta_start: f64, beta_end: f64) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start.is_finite() && beta_end.is_finite()) {
        return Err(Error::InvalidArgument("beta range must be finite".into()));
    }
    if beta_start <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta_start must be positive, got {beta_start}")));
    }
    if beta_end >= 1.0 {
        return Err(Error::InvalidArgument(format!("beta_end must be below 1, got {beta_end}")));
    }
    if beta_start > beta_end {
        return Err(Error::InvalidArgument(format!(
            "beta_start {beta_start} exceeds beta_end {beta_end}"
        )));
    }
    Ok(())
}

/// Fractional position of timestep `t` along `1..=steps`, in `[0, 1]`.
fn ramp(t: usize, steps: usize) -> f64 {
    if steps == 1 {
        0.0
    } else {
        (t - 1) as f64 / (steps - 1) as f64
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        validate_range(steps, beta_start, beta_end)?;
        let beta = (1..=steps)
            .map(|t| {
                let u = ramp(t, steps);
                // Written so that both endpoints are reproduced exactly.
                beta_start * (1.0 - u) + beta_end * u
            })
            .collect();
        Ok(Self::from_betas(ScheduleKind::Linear, beta))
    }

    /// Squared-cosine `alpha_bar` curve with offset [`COSINE_OFFSET`].
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let beta = (1..=steps)
            .map(|t| (1.0 - (f(t) / f0) / (f(t - 1) / f0)).min(COSINE_MAX_BETA))
            .collect();
        Ok(Self::from_betas(ScheduleKind::Cosine, beta))
    }

    /// Betas following a logistic ramp over `[-6, 6]` between the endpoints.
    pub fn sigmoid(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        validate_range(steps, beta_start, beta_end)?;
        let beta = (1..=steps)
            .map(|t| beta_start + (beta_end - beta_start) * logistic(12.0 * ramp(t, steps) - 6.0))
            .collect();
        Ok(Self::from_betas(ScheduleKind::Sigmoid, beta))
    }

    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        let mut one_minus_alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        one_minus_alpha_bar.push(0.0);
        for (a, b) in alpha.iter().zip(&beta) {
            let prev = *alpha_bar.last().expect("sentinel present");
            let prev_c = *one_minus_alpha_bar.last().expect("sentinel present");
            alpha_bar.push(prev * a);
            // 1 - prev * (1 - b) = (1 - prev) + prev * b
            one_minus_alpha_bar.push(prev_c + prev * b);
        }
        let posterior_variance = (1..=beta.len())
            .map(|t| posterior_variance_formula(one_minus_alpha_bar[t - 1], one_minus_alpha_bar[t], beta[t - 1]))
            .collect();
        NoiseSchedule { kind, beta, alpha, alpha_bar, one_minus_alpha_bar, posterior_variance }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    /// Panics unless `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Valid for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `1 - alpha_bar(t)` for `0 <= t <= T`, accumulated without cancellation.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.one_minus_alpha_bar[t]
    }

    /// Variance of the forward-process posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `alpha_bar` for `t = 0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(t, alpha_bar(t))` for `t = 0..=T`.
    pub fn dump_curve(&self) -> Vec<(usize, f64)> {
        self.alpha_bar.iter().copied().enumerate().collect()
    }

    /// Writes the `alpha_bar` curve as CSV with header `t,alpha_bar`.
    ///
    /// Values use the shortest decimal form that round-trips, always with a
    /// decimal point.
    pub fn write_curve_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,alpha_bar")?;
        for (t, v) in self.dump_curve() {
            writeln!(out, "{t},{}", decimal(v))?;
        }
        Ok(())
    }
}

/// `((1 - alpha_bar_prev) / (1 - alpha_bar_t)) * beta_t`, taking the
/// complements `1 - alpha_bar` directly.
pub fn posterior_variance_formula(one_minus_ab_prev: f64, one_minus_ab_t: f64, beta_t: f64) -> f64 {
    one_minus_ab_prev / one_minus_ab_t * beta_t
}

fn decimal(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        s + ".0"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_paper_endpoints() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bar(1), 0.9999);
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::sigmoid(10, -1e-4, 0.02).is_err());
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn sigmoid_degenerate_range_is_constant() {
        let s = NoiseSchedule::sigmoid(3, 0.1, 0.1).unwrap();
        assert!(s.betas().iter().all(|&b| b == 0.1));
    }

    #[test]
    fn single_step_schedules() {
        let s = NoiseSchedule::linear(1, 0.01, 0.01).unwrap();
        assert_eq!(s.beta(1), 0.01);
        assert_eq!(s.dump_curve().len(), 2);
        assert_eq!(NoiseSchedule::sigmoid(1, 0.01, 0.02).unwrap().steps(), 1);
    }

    #[test]
    fn timestep_bounds() {
        let s = NoiseSchedule::cosine(10).unwrap();
        assert!(s.check_t(0).is_err());
        assert!(s.check_t(1).is_ok());
        assert!(s.check_t(10).is_ok());
        assert!(s.check_t(11).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut buf = Vec::new();
        s.write_curve_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,alpha_bar");
        assert_eq!(lines[1], "0,1.0");
        assert_eq!(lines.len(), 1002);
        let last: f64 = lines[1001].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(last, s.alpha_bar(1000));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("Cosine".parse::<ScheduleKind>().unwrap(), ScheduleKind::Cosine);
        assert!("quadratic".parse::<ScheduleKind>().is_err());
    }
}
