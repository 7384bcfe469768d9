//! Acceptance criteria 1-10. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion. `ACCEPTANCE_ONLY=1,4,9` restricts the run.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use sardiff::data::{flatbin, generate_synthetic_dataset, generate_synthetic_splits, tile_scene, SyntheticSpec, TilingSpec};
use sardiff::diffusion::{forward_sample, reverse_step, sample, NoisePredictor, ReverseVariance, SampleOptions};
use sardiff::metrics::{
    frechet_distance, inception_score, kernel_distance, mmd2_unbiased, ClassifierConfig, FeatureClassifier,
    FeatureExtractor,
};
use sardiff::rng::{normal_tensor, stream};
use sardiff::schedule::{NoiseSchedule, ScheduleConfig, ScheduleKind};
use sardiff::train::{fit, predictor_loss, NoiseDraw, TrainConfig, Trainer};
use sardiff::unet::{UNet, UNetConfig};
use sardiff::{Result, Tensor};

use common::{linear_alpha_bar_oracle, mean_var, unet_gradient_check, GaussianOracle};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn linear() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn c1_schedule() -> Outcome {
    let s = linear();
    let oracle = linear_alpha_bar_oracle(1000);
    let err = (s.alpha_bar(1000) - oracle).abs();
    let decreasing = ScheduleKind::ALL.iter().all(|&kind| {
        let s = ScheduleConfig { kind, ..Default::default() }.build().unwrap();
        (1..=s.steps()).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1))
    });
    outcome(
        s.alpha_bar(1) == 0.9999 && err <= 1e-8 && decreasing,
        format!("alpha_bar_1 = {}, |alpha_bar_1000 - oracle| = {err:.2e}, strictly decreasing: {decreasing}", s.alpha_bar(1)),
    )
}

fn c2_forward_marginal() -> Outcome {
    let s = linear();
    let (n, x0) = (10_000, 0.7);
    let mut worst: f64 = 0.0;
    for t in [1usize, 500, 1000] {
        let eps: Tensor<f64> = normal_tensor(&[n, 1], &mut stream(21, t as u64));
        let xt = forward_sample(&Tensor::full(&[n, 1], x0), &vec![t; n], &eps, &s).unwrap();
        let (m, v) = mean_var(xt.data());
        let var = s.one_minus_alpha_bar(t);
        let z_mean = (m - s.alpha_bar(t).sqrt() * x0).abs() / (var / n as f64).sqrt();
        let z_var = (v - var).abs() / (var * (2.0 / (n - 1) as f64).sqrt());
        worst = worst.max(z_mean).max(z_var);
    }
    outcome(worst < 3.0, format!("largest deviation {worst:.2} standard errors"))
}

fn c3_reverse_identity() -> Outcome {
    let s = linear();
    let x0: Tensor<f32> = normal_tensor::<f32, _>(&[8, 1, 8, 8], &mut stream(31, 0)).map(|v| v.clamp(-1.0, 1.0));
    let eps: Tensor<f32> = normal_tensor(&[8, 1, 8, 8], &mut stream(31, 1));
    let xt = forward_sample(&x0, &[1; 8], &eps, &s).unwrap();
    let back = reverse_step(&xt, 1, &eps, &Tensor::zeros(x0.shape()), &s, ReverseVariance::Posterior).unwrap();
    let err = back.zip_map(&x0, |a, b| a - b).unwrap().max_abs() as f64;
    outcome(err <= 1e-5, format!("max abs error {err:.2e} (f32)"))
}

fn c4_analytic_sampler() -> Outcome {
    let s = linear();
    let opts = SampleOptions { clamp_output: false, batch_size: 10_000, ..Default::default() };
    let out = sample(&GaussianOracle(&s), 10_000, None, &s, 41, &opts).unwrap();
    let (m, v) = mean_var(out.images.data());
    outcome(m.abs() < 0.05 && (0.9..=1.1).contains(&v), format!("mean {m:.4}, variance {v:.4} over 10000 draws"))
}

fn c5_gradients() -> Outcome {
    let check = unet_gradient_check(24, 51);
    let worst = check.worst();
    outcome(worst <= 1e-3, format!("{} parameters, worst relative error {worst:.2e}", check.entries.len()))
}

struct Zero;

impl NoisePredictor<f32> for Zero {
    fn sample_shape(&self) -> (usize, usize, usize) {
        (1, 16, 16)
    }
    fn num_classes(&self) -> Option<usize> {
        None
    }
    fn predict_noise(&self, xt: &Tensor<f32>, _: &[usize], _: Option<&[usize]>) -> Result<Tensor<f32>> {
        Ok(Tensor::zeros(xt.shape()))
    }
}

/// Reference run (seed 0) recorded when the threshold was set.
const SMOKE_REFERENCE: &str = include_str!("reference/smoke_run.txt");

fn c6_training_smoke() -> Outcome {
    let data = generate_synthetic_dataset(10, 32, 16, 0).unwrap();
    let schedule = linear();
    let draw = NoiseDraw::sample(data.images.shape(), 1000, &mut stream(61, 0));
    let zero = predictor_loss(&Zero, &data.images, None, &draw, &schedule).unwrap();
    let zero_tol = 3.0 * (2.0 / data.images.len() as f64).sqrt();

    let ucfg = UNetConfig { num_classes: Some(10), dropout: 0.0, ..UNetConfig::small(16, 16, &[1, 2], 8) };
    let model = UNet::build(&ucfg, 0).unwrap();
    let mut trainer = Trainer::new(model, TrainConfig { batch_size: 32, ..Default::default() }).unwrap();
    let mut losses = Vec::with_capacity(200);
    'outer: for epoch in 0.. {
        for chunk in trainer.epoch_order(epoch, data.len()).chunks(32) {
            let (x0, labels) = data.batch(chunk);
            losses.push(trainer.step(&x0, labels.as_deref()).unwrap());
            if losses.len() == 200 {
                break 'outer;
            }
        }
    }
    let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = losses[190..].iter().sum::<f64>() / 10.0;
    let ratio = last / first;
    let reference = SMOKE_REFERENCE.lines().find_map(|l| l.strip_prefix("ratio=")).unwrap_or("?");
    outcome(
        ratio <= 0.5 && (zero - 1.0).abs() <= zero_tol,
        format!(
            "first-10 mean {first:.4}, last-10 mean {last:.4}, ratio {ratio:.3} (reference {reference}); zero predictor {zero:.4} (tolerance {zero_tol:.4})"
        ),
    )
}

fn c7_metric_identities() -> Outcome {
    let rows = |n: usize, d: usize, v: Vec<f64>| Tensor::from_vec(&[n, d], v).unwrap();
    let is_same = inception_score(&rows(4, 3, [0.1, 0.6, 0.3].repeat(4))).unwrap();
    let is_pair = inception_score(&rows(2, 2, vec![1.0, 0.0, 0.0, 1.0])).unwrap();
    let a: Tensor<f64> = normal_tensor(&[64, 6], &mut stream(71, 0));
    let fid_self = frechet_distance(&a, &a).unwrap();
    let h = 0.5f64.sqrt();
    let fid_1d = frechet_distance(&rows(2, 1, vec![-h, h]), &rows(2, 1, vec![1.0 - h, 1.0 + h])).unwrap();
    let (zero, one) = ([0.0], [1.0]);
    let pts: Vec<&[f64]> = vec![&zero, &one];
    let kid_hand = mmd2_unbiased(&pts, &pts);
    let x: Tensor<f64> = normal_tensor(&[500, 8], &mut stream(71, 1));
    let y: Tensor<f64> = normal_tensor(&[500, 8], &mut stream(71, 2));
    let kid = kernel_distance(&x, &y, 100, 50, 7).unwrap();
    let se = kid.std / (kid.num_subsets as f64).sqrt();
    let pass = is_same == 1.0
        && is_pair == 2.0
        && fid_self.abs() <= 1e-6
        && (fid_1d - 1.0).abs() <= 1e-6
        && kid_hand == -3.5
        && kid.mean.abs() <= 3.0 * se;
    outcome(
        pass,
        format!(
            "IS {is_same} / {is_pair}; FID self {fid_self:.1e}, 1-D {fid_1d:.8}; KID hand {kid_hand}, iid {:.2e} (3 SE = {:.2e})",
            kid.mean,
            3.0 * se
        ),
    )
}

fn c8_tiling() -> Outcome {
    let tiles = tile_scene(&Tensor::zeros(&[1784, 1476]), TilingSpec { tile: 128 }).unwrap();
    let shapes_ok = tiles.iter().all(|t| t.shape() == [128, 128]);
    outcome(
        tiles.len() == 143 && 100 * tiles.len() == 14_300 && shapes_ok,
        format!("{} tiles of 128x128; 100 scenes give {}", tiles.len(), 100 * tiles.len()),
    )
}

/// Desk-scale end-to-end setup: 10 classes at 32x32, 100 training and 30
/// held-out images per class, default linear schedule (T = 1000). The small
/// network needs a higher learning rate than the 2e-4 default to converge in
/// the time budget.
const E2E_EPOCHS: usize = 40;
const E2E_LEARNING_RATE: f64 = 2e-3;
/// Generated, noise and scrambled sets all have this size so the sample-size
/// bias of FID is the same for each.
const E2E_N: usize = 100;

fn c9_end_to_end() -> Outcome {
    let (train, test) = generate_synthetic_splits(&SyntheticSpec::new(10, 32, 7), 100, 30).unwrap();
    let ccfg = ClassifierConfig { image_size: 32, num_classes: 10, epochs: 8, ..Default::default() };
    let (clf, creport) = FeatureClassifier::train(&train, Some(&test), &ccfg).unwrap();

    let ucfg = UNetConfig { num_classes: Some(10), dropout: 0.1, ..UNetConfig::small(32, 16, &[1, 2, 2], 8) };
    let tcfg = TrainConfig { epochs: E2E_EPOCHS, learning_rate: E2E_LEARNING_RATE, ..Default::default() };
    let (model, report) = fit(UNet::build(&ucfg, 1).unwrap(), &train, &tcfg, None).unwrap();

    let ids: Vec<usize> = (0..E2E_N).map(|i| i % 10).collect();
    let schedule = tcfg.schedule.build().unwrap();
    let generated = sample(&model, E2E_N, Some(&ids), &schedule, 3, &SampleOptions::default()).unwrap().images;
    let real = clf.extract(&test.images).unwrap();
    let fid = |x: &Tensor<f32>| frechet_distance(&real.features, &clf.extract(x).unwrap().features).unwrap();

    let noise = normal_tensor::<f32, _>(&[E2E_N, 1, 32, 32], &mut stream(5, 0)).map(|v| v.clamp(-1.0, 1.0));
    // Training images with their pixels permuted: same intensities, no class structure.
    let mut scrambled = train.images.select(&(0..E2E_N).collect::<Vec<_>>());
    let mut g = stream(6, 0);
    for i in 0..E2E_N {
        scrambled.item_mut(i).shuffle(&mut g);
    }
    let (f_gen, f_noise, f_scr) = (fid(&generated), fid(&noise), fid(&scrambled));
    let hits = clf.predict(&generated).unwrap().iter().zip(&ids).filter(|(a, b)| a == b).count();
    outcome(
        f_gen < f_noise && f_gen < f_scr,
        format!(
            "FID generated {f_gen:.3}, noise {f_noise:.3}, scrambled {f_scr:.3}; final loss {:.4}; extractor held-out acc {:.3}; generated classified as requested {hits}/{E2E_N}",
            report.mean_losses().last().unwrap(),
            creport.test_accuracy.unwrap()
        ),
    )
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut mismatches = Vec::new();
    let mut check = |name: &str, a: &std::path::Path, b: &std::path::Path| {
        if std::fs::read(a).unwrap() != std::fs::read(b).unwrap() {
            mismatches.push(name.to_string());
        }
    };

    let spec = SyntheticSpec::new(3, 16, 5);
    for run in ["a", "b"] {
        let (train, _) = generate_synthetic_splits(&spec, 8, 2).unwrap();
        train.save(&p.join(run).join("data")).unwrap();
    }
    check("dataset images", &p.join("a/data/images.fbt"), &p.join("b/data/images.fbt"));
    check("dataset labels", &p.join("a/data/labels.fbt"), &p.join("b/data/labels.fbt"));

    let data = generate_synthetic_dataset(3, 8, 16, 5).unwrap();
    let ucfg = UNetConfig { num_classes: Some(3), timesteps: 100, ..UNetConfig::small(16, 8, &[1, 2], 8) };
    let tcfg = TrainConfig { epochs: 2, batch_size: 8, schedule: ScheduleConfig { steps: 100, ..Default::default() }, ..Default::default() };
    let s = tcfg.schedule.build().unwrap();
    let ccfg = ClassifierConfig { image_size: 16, num_classes: 3, epochs: 2, ..Default::default() };
    let mut checksums = Vec::new();
    for run in ["a", "b"] {
        let (model, _) = fit(UNet::build(&ucfg, 1).unwrap(), &data, &tcfg, None).unwrap();
        checksums.push(model.checksum());
        let out = sample(&model, 6, Some(&[0, 1, 2, 0, 1, 2]), &s, 3, &SampleOptions::default()).unwrap();
        flatbin::write_f32(&p.join(run).join("samples.fbt"), &out.images).unwrap();
        let (clf, _) = FeatureClassifier::train(&data, None, &ccfg).unwrap();
        clf.extract(&out.images).unwrap().save(&p.join(run), "generated").unwrap();
    }
    check("samples", &p.join("a/samples.fbt"), &p.join("b/samples.fbt"));
    check("features", &p.join("a/generated_features.fbt"), &p.join("b/generated_features.fbt"));
    check("probabilities", &p.join("a/generated_probs.fbt"), &p.join("b/generated_probs.fbt"));
    if checksums[0] != checksums[1] {
        mismatches.push("trained parameters".into());
    }
    let feats: Tensor<f64> = normal_tensor(&[40, 4], &mut stream(101, 0));
    let kid = || kernel_distance(&feats, &feats.map(|v| v + 0.1), 20, 5, 9).unwrap();
    if kid() != kid() {
        mismatches.push("KID subsets".into());
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "dataset, trained parameters, samples, features and KID subsets identical across reruns".to_string()
        } else {
            format!("differs: {}", mismatches.join(", "))
        },
    )
}

type Criterion = (usize, &'static str, Duration, fn() -> Outcome);

fn main() {
    // libtest-style flags (e.g. --list from tooling) are accepted and ignored.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 10] = [
        (1, "schedule correctness", Duration::from_secs(1), c1_schedule),
        (2, "forward-process marginal", Duration::from_secs(10), c2_forward_marginal),
        (3, "reverse-step identity", Duration::from_secs(1), c3_reverse_identity),
        (4, "analytic sampler oracle", Duration::from_secs(60), c4_analytic_sampler),
        (5, "gradient fidelity", Duration::from_secs(120), c5_gradients),
        (6, "training smoke", Duration::from_secs(600), c6_training_smoke),
        (7, "metric identities", Duration::from_secs(60), c7_metric_identities),
        (8, "tiling arithmetic", Duration::from_secs(1), c8_tiling),
        (9, "end-to-end ordering", Duration::from_secs(3600), c9_end_to_end),
        (10, "determinism", Duration::from_secs(600), c10_determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());

    let mut failed = 0;
    for (n, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run));
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && elapsed <= budget, o.detail),
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {verdict} {name}: {detail} [{:.2}s, budget {}s]",
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
