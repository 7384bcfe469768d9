//! Sample-quality scores over extracted features: Inception Score, Fréchet
//! distance and kernel (polynomial MMD) distance.

mod classifier;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::data::{flatbin, Dataset};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, tag};
use crate::tensor::Tensor;

pub use classifier::{ClassifierConfig, ClassifierReport, FeatureClassifier};

/// Added to both covariances before the matrix square root.
pub const COVARIANCE_RIDGE: f64 = 1e-6;
pub const DEFAULT_KID_SUBSET: usize = 1000;
pub const DEFAULT_KID_SUBSETS: usize = 10;

/// Images to features and class posteriors.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Side length of the square single-channel input.
    fn image_size(&self) -> usize;
    /// Deterministic evaluation of `images [N, 1, S, S]`.
    fn extract(&self, images: &Tensor<f32>) -> Result<FeatureSet>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// `[n, d]`
    pub features: Tensor<f64>,
    /// `[n, K]`, rows on the simplex.
    pub probs: Tensor<f64>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `<stem>_features.fbt` and `<stem>_probs.fbt` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        flatbin::FlatTensor::F64(self.features.clone()).write(&dir.join(format!("{stem}_features.fbt")))?;
        flatbin::FlatTensor::F64(self.probs.clone()).write(&dir.join(format!("{stem}_probs.fbt")))
    }
}

fn matrix(t: &Tensor<f64>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => {
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("{what} contain non-finite entries")));
            }
            Ok((n, d))
        }
        _ => Err(Error::Shape(format!("{what} must be a matrix, got {:?}", t.shape()))),
    }
}

/// `exp(mean_i KL(p_i || p_mean))` with `0 ln 0 = 0`.
pub fn inception_score(probs: &Tensor<f64>) -> Result<f64> {
    let (n, k) = matrix(probs, "probabilities")?;
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument("inception score needs at least one row".into()));
    }
    for (i, row) in probs.data().chunks(k).enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!("row {i} is not a probability vector (sum {sum})")));
        }
    }
    // Mean taken as an offset from the first row, so identical rows give the row itself.
    let first = &probs.data()[..k];
    let mut marginal = vec![0.0; k];
    for row in probs.data().chunks(k) {
        for ((m, &p), &p0) in marginal.iter_mut().zip(row).zip(first) {
            *m += p - p0;
        }
    }
    for (m, &p0) in marginal.iter_mut().zip(first) {
        *m = p0 + *m / n as f64;
    }
    let kl: f64 = probs
        .data()
        .chunks(k)
        .map(|row| row.iter().zip(&marginal).filter(|(&p, _)| p > 0.0).map(|(&p, &m)| p * (p / m).ln()).sum::<f64>())
        .sum();
    Ok((kl / n as f64).max(0.0).exp())
}

/// Inception score averaged over `splits` contiguous chunks: `(mean, std)`.
pub fn inception_score_splits(probs: &Tensor<f64>, splits: usize) -> Result<(f64, f64)> {
    let (n, _) = matrix(probs, "probabilities")?;
    if splits == 0 || splits > n {
        return Err(Error::InvalidArgument(format!("cannot split {n} rows into {splits} parts")));
    }
    let scores = (0..splits)
        .map(|s| {
            let idx: Vec<usize> = (s * n / splits..(s + 1) * n / splits).collect();
            inception_score(&probs.select(&idx))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_std(&scores))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}

/// Sample mean and unbiased covariance of the rows of `x`.
pub fn mean_and_covariance(x: &Tensor<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = matrix(x, "features")?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("covariance needs at least 2 rows, got {n}")));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

fn symmetric_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of the rows of `real` and `fake`.
pub fn frechet_distance(real: &Tensor<f64>, fake: &Tensor<f64>) -> Result<f64> {
    let (_, d1) = matrix(real, "real features")?;
    let (_, d2) = matrix(fake, "generated features")?;
    if d1 != d2 {
        return Err(Error::Shape(format!("feature dimensions differ: {d1} vs {d2}")));
    }
    let (mu_r, cov_r) = mean_and_covariance(real)?;
    let (mu_f, cov_f) = mean_and_covariance(fake)?;
    let ridge = DMatrix::identity(d1, d1) * COVARIANCE_RIDGE;
    let (cov_r, cov_f) = (cov_r + &ridge, cov_f + &ridge);
    let root_r = symmetric_sqrt(&cov_r);
    let inner = &root_r * &cov_f * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let trace_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mu_r - mu_f).norm_squared() + cov_r.trace() + cov_f.trace() - 2.0 * trace_sqrt)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDistance {
    pub mean: f64,
    /// Spread over subsets.
    pub std: f64,
    pub subset_size: usize,
    pub num_subsets: usize,
}

fn poly_kernel(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / a.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² estimate with `k(x, y) = (x.y / d + 1)^3` on equal-size sets.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let m = x.len() as f64;
    let within = |s: &[&[f64]]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += poly_kernel(s[i], s[j]);
                }
            }
        }
        acc / (m * (m - 1.0))
    };
    let cross: f64 = x.iter().flat_map(|a| y.iter().map(move |b| poly_kernel(a, b))).sum();
    within(x) + within(y) - 2.0 * cross / (m * m)
}

/// Mean of [`mmd2_unbiased`] over `num_subsets` random subsets of size
/// `subset_size` drawn without replacement from each set.
pub fn kernel_distance(
    real: &Tensor<f64>,
    fake: &Tensor<f64>,
    subset_size: usize,
    num_subsets: usize,
    seed: u64,
) -> Result<KernelDistance> {
    let (nr, d1) = matrix(real, "real features")?;
    let (nf, d2) = matrix(fake, "generated features")?;
    if d1 != d2 {
        return Err(Error::Shape(format!("feature dimensions differ: {d1} vs {d2}")));
    }
    if subset_size < 2 || subset_size > nr.min(nf) || num_subsets == 0 {
        return Err(Error::InvalidArgument(format!(
            "subset size {subset_size} must lie in 2..={} with at least one subset",
            nr.min(nf)
        )));
    }
    let r: Vec<&[f64]> = real.data().chunks(d1.max(1)).collect();
    let f: Vec<&[f64]> = fake.data().chunks(d1.max(1)).collect();
    let base = derive_seed(seed, tag("kid"));
    let values: Vec<f64> = (0..num_subsets)
        .map(|s| {
            let mut g = rng::stream(base, s as u64);
            let xs: Vec<&[f64]> = index::sample(&mut g, nr, subset_size).iter().map(|i| r[i]).collect();
            let ys: Vec<&[f64]> = index::sample(&mut g, nf, subset_size).iter().map(|i| f[i]).collect();
            mmd2_unbiased(&xs, &ys)
        })
        .collect();
    let (mean, std) = mean_std(&values);
    Ok(KernelDistance { mean, std, subset_size, num_subsets })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Defaults to `min(n_generated, n_real, 1000)`.
    pub kid_subset_size: Option<usize>,
    pub kid_subsets: usize,
    pub is_splits: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { kid_subset_size: None, kid_subsets: DEFAULT_KID_SUBSETS, is_splits: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "is")]
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub kid: f64,
    pub kid_std: f64,
    pub n_generated: usize,
    pub n_real: usize,
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub is_splits: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [("is", self.is_mean), ("is_std", self.is_std), ("fid", self.fid), ("kid", self.kid), ("kid_std", self.kid_std)] {
            writeln!(s, "{k}={v:?}").expect("string write");
        }
        for (k, v) in [
            ("n_generated", self.n_generated),
            ("n_real", self.n_real),
            ("kid_subset_size", self.kid_subset_size),
            ("kid_subsets", self.kid_subsets),
            ("is_splits", self.is_splits),
        ] {
            writeln!(s, "{k}={v}").expect("string write");
        }
        writeln!(s, "seed={}", self.seed).expect("string write");
        s
    }

    /// Writes `metrics.txt` (key=value) and `metrics.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("metrics.txt"), self.to_text().as_bytes())?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        write_atomic(&dir.join("metrics.json"), json.as_bytes())
    }

    /// Table row in the `IS ↑  FID ↓  KID ↓` layout.
    pub fn table(&self, label: &str) -> String {
        format!(
            "{:<16} {:>10} {:>10} {:>10} {:>8} {:>8}\n{:<16} {:>10.4} {:>10.4} {:>10.4} {:>8} {:>8}\n",
            "", "IS ↑", "FID ↓", "KID ↓", "n_gen", "n_real", label, self.is_mean, self.fid, self.kid, self.n_generated, self.n_real
        )
    }
}

/// Scores `generated` images against the real set through `extractor`.
pub fn evaluate<E: FeatureExtractor + ?Sized>(
    generated: &Tensor<f32>,
    real: &Dataset,
    extractor: &E,
    options: &EvalOptions,
) -> Result<MetricReport> {
    let s = extractor.image_size();
    for (what, shape) in [("generated", generated.shape()), ("real", real.images.shape())] {
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::ConfigConflict(format!("extractor expects [N, 1, {s}, {s}], {what} images are {shape:?}")));
        }
    }
    let gen = extractor.extract(generated)?;
    let real_fs = extractor.extract(&real.images)?;
    let (n_gen, n_real) = (gen.len(), real_fs.len());
    let (is_mean, is_std) = if options.is_splits <= 1 {
        (inception_score(&gen.probs)?, 0.0)
    } else {
        inception_score_splits(&gen.probs, options.is_splits)?
    };
    let fid = frechet_distance(&real_fs.features, &gen.features)?;
    let subset = options.kid_subset_size.unwrap_or(DEFAULT_KID_SUBSET).min(n_gen).min(n_real);
    let kid = kernel_distance(&real_fs.features, &gen.features, subset, options.kid_subsets, options.seed)?;
    Ok(MetricReport {
        is_mean,
        is_std,
        fid,
        kid: kid.mean,
        kid_std: kid.std,
        n_generated: n_gen,
        n_real,
        kid_subset_size: subset,
        kid_subsets: options.kid_subsets,
        is_splits: options.is_splits.max(1),
        seed: options.seed,
    })
}
