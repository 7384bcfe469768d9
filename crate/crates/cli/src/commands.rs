use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sardiff::data::{
    dataset_from_tiles, flatbin, generate_synthetic_splits, load_image_folder, load_scene, tile_scene, Dataset,
    FolderOptions, NormalizationParams, SyntheticSpec, TilingSpec, IMAGES_FILE, MANIFEST_FILE, NORM_FILE,
};
use sardiff::diffusion::{sample, ReverseVariance, SampleOptions};
use sardiff::metrics::{evaluate, ClassifierConfig, EvalOptions, FeatureClassifier};
use sardiff::rng::{derive_seed, tag};
use sardiff::schedule::ScheduleConfig;
use sardiff::train::{fit_trainer, pretrain_then_finetune, RunMetadata, Trainer};
use sardiff::unet::{DenoiserModel, UNet};
use sardiff::Tensor;

use crate::config::ExperimentConfig;
use crate::export;
use crate::{
    CliError, EvaluateArgs, ExtractorArgs, FinetuneArgs, PrepareArgs, PretrainArgs, SampleArgs, ScheduleDumpArgs,
    TrainArgs,
};

pub const SAMPLES_FILE: &str = "samples.fbt";
pub const SAMPLE_LABELS_FILE: &str = "labels.fbt";
pub const MONTAGE_FILE: &str = "montage.png";
const SCENE_EXTENSIONS: [&str; 6] = ["fbt", "png", "pgm", "tif", "tiff", "pnm"];

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist or is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} not found", path.display())))
    }
}

/// Accepts a dataset directory, or a `prepare` output root holding `split/`.
fn dataset_dir(path: &Path, split: &str) -> Result<PathBuf, CliError> {
    require_dir(path, "dataset")?;
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    let nested = path.join(split);
    if nested.join(MANIFEST_FILE).is_file() {
        return Ok(nested);
    }
    Err(usage(format!("{} holds no dataset (expected {MANIFEST_FILE} or {split}/{MANIFEST_FILE})", path.display())))
}

fn load_dataset(path: &Path, split: &str) -> Result<Dataset, CliError> {
    Ok(Dataset::load(&dataset_dir(path, split)?)?)
}

fn ensure_fresh_output(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        return Err(usage(format!("output {} is an existing file", path.display())));
    }
    Ok(())
}

pub fn prepare(args: &PrepareArgs) -> Result<(), CliError> {
    ensure_fresh_output(&args.out)?;
    let log_scale = !args.no_log;
    let (train, test) = if args.synthetic {
        if args.classes == 0 || args.per_class == 0 || args.size < 4 {
            return Err(usage("--classes and --per-class must be positive and --size at least 4"));
        }
        let spec = SyntheticSpec::new(args.classes, args.size, args.seed);
        let (train, test) = generate_synthetic_splits(&spec, args.per_class, args.test_per_class)?;
        (train, (args.test_per_class > 0).then_some(test))
    } else if let Some(dir) = &args.scenes {
        require_dir(dir, "scene directory")?;
        (tile_scenes(dir, args.tile, log_scale, args.log_epsilon)?, None)
    } else if let Some(dir) = &args.folder {
        require_dir(dir, "image folder")?;
        let loaded = load_image_folder(dir, &FolderOptions { log_scale, log_epsilon: args.log_epsilon })?;
        (loaded.train, loaded.test)
    } else {
        return Err(usage("choose a source: --synthetic, --scenes <dir> or --folder <dir>"));
    };

    train.save(&args.out.join("train"))?;
    report_dataset("train", &train, &args.out.join("train"));
    if let Some(test) = test {
        test.save(&args.out.join("test"))?;
        report_dataset("test", &test, &args.out.join("test"));
    }
    Ok(())
}

fn report_dataset(name: &str, d: &Dataset, dir: &Path) {
    let s = d.image_size();
    println!("{name}: {} images of {s}x{s}, {} classes -> {}", d.len(), d.num_classes, dir.display());
}

fn tile_scenes(dir: &Path, tile: usize, log_scale: bool, eps: f64) -> Result<Dataset, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(format!("reading {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| SCENE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(usage(format!("no scene files in {}", dir.display())));
    }
    let mut tiles = Vec::new();
    for f in &files {
        let scene = load_scene(f)?;
        let t = tile_scene(&scene, TilingSpec { tile })?;
        log::info!("{}: {} tiles", f.display(), t.len());
        tiles.extend(t);
    }
    Ok(dataset_from_tiles(&tiles, log_scale, eps)?)
}

/// Fills in the architecture fields that follow from the data and schedule.
fn fit_architecture(cfg: &mut ExperimentConfig, data: &Dataset) {
    cfg.unet.image_size = data.image_size();
    cfg.unet.timesteps = cfg.train.schedule.steps;
    cfg.unet.num_classes = cfg.train.conditional.then_some(data.num_classes);
}

fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.train.validate()?;
    cfg.train.schedule.build()?;
    cfg.unet.validate()?;
    Ok(())
}

fn run_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out.clone().ok_or_else(|| usage("missing --out run directory"))?;
    ensure_fresh_output(&out)?;
    Ok(out)
}

/// Trains to completion; on failure the last good parameters are kept in
/// `aborted.ckpt` next to the regular checkpoints.
fn drive(mut trainer: Trainer, data: &Dataset, out: &Path) -> Result<DenoiserModel, CliError> {
    match fit_trainer(&mut trainer, data, Some(out)) {
        Ok(report) => {
            if let Some(p) = &report.final_checkpoint {
                println!("trained {} steps; final checkpoint {}", report.steps, p.display());
            }
            Ok(trainer.into_model())
        }
        Err(e) => {
            let path = out.join("aborted.ckpt");
            let note = serde_json::json!({ "error": e.to_string(), "step": trainer.steps_done() });
            match trainer.model().save_with_extra(&path, note) {
                Ok(()) => log::error!("training failed; state saved to {}", path.display()),
                Err(save) => log::error!("training failed and saving state failed too: {save}"),
            }
            Err(e.into())
        }
    }
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    if let Some(ckpt) = &args.resume {
        require_file(ckpt, "checkpoint")?;
        let mut trainer = Trainer::resume(ckpt)?;
        if let Some(e) = args.flags.epochs {
            trainer.set_epochs(e)?;
        }
        let meta = RunMetadata::from_extra(&UNet::<f32>::load_with_extra(ckpt)?.1, ckpt)?;
        let data_path = args.data.clone().ok_or_else(|| usage("--resume needs --data"))?;
        let data = load_dataset(&data_path, "train")?;
        if meta.norm_params.is_some_and(|p| p != data.norm_params) {
            return Err(usage("dataset normalization differs from the one the run was trained on"));
        }
        let out = args.out.clone().or_else(|| ckpt.parent().map(Path::to_path_buf)).expect("checkpoint has a parent");
        trainer.check_dataset(&data)?;
        drive(trainer, &data, &out)?;
        return Ok(());
    }

    let mut cfg = args.flags.resolve()?;
    cfg.data = args.data.clone().or(cfg.data);
    cfg.out = args.out.clone().or(cfg.out);
    let data_path = cfg.data.clone().ok_or_else(|| usage("missing --data"))?;
    let data = load_dataset(&data_path, "train")?;
    fit_architecture(&mut cfg, &data);
    validate(&cfg)?;
    let out = run_dir(&cfg)?;
    let model = UNet::build(&cfg.unet, derive_seed(cfg.train.seed, tag("init")))?;
    log::info!("model: {} parameters", model.parameter_count());
    let trainer = Trainer::new(model, cfg.train.clone())?;
    trainer.check_dataset(&data)?;
    drive(trainer, &data, &out)?;
    Ok(())
}

pub fn pretrain(args: &PretrainArgs) -> Result<(), CliError> {
    let mut cfg = args.flags.resolve()?;
    cfg.clutter = args.clutter.clone().or(cfg.clutter);
    cfg.out = args.out.clone().or(cfg.out);
    let clutter_path = cfg.clutter.clone().ok_or_else(|| usage("missing --clutter"))?;
    let clutter = load_dataset(&clutter_path, "train")?;
    let targets = match args.targets.as_ref().or(cfg.data.as_ref()) {
        Some(p) => Some(load_dataset(p, "train")?),
        None => None,
    };
    if let Some(t) = &targets {
        if t.image_size() != clutter.image_size() {
            return Err(usage(format!(
                "clutter tiles are {0}x{0} but targets are {1}x{1}",
                clutter.image_size(),
                t.image_size()
            )));
        }
    }
    cfg.train.conditional = false;
    fit_architecture(&mut cfg, &clutter);
    validate(&cfg)?;
    let out = run_dir(&cfg)?;

    match targets {
        Some(targets) => {
            let unet = sardiff::unet::UNetConfig { num_classes: Some(targets.num_classes), ..cfg.unet.clone() };
            let config = sardiff::train::TrainConfig { conditional: true, ..cfg.train.clone() };
            let (_, reports) = pretrain_then_finetune(&clutter, &targets, &unet, &config, Some(&out))?;
            for (phase, r) in [("pretrain", &reports.pretrain), ("finetune", &reports.finetune)] {
                if let Some(p) = &r.final_checkpoint {
                    println!("{phase}: {} steps; final checkpoint {}", r.steps, p.display());
                }
            }
        }
        None => {
            if clutter.is_labeled() {
                log::warn!("clutter dataset carries labels; they are ignored during pretraining");
            }
            let phase = sardiff::train::TrainConfig { epochs: cfg.train.pretrain_epochs, ..cfg.train.clone() };
            let model = UNet::build(&cfg.unet, derive_seed(cfg.train.seed, tag("init")))?;
            drive(Trainer::new(model, phase)?, &clutter, &out)?;
        }
    }
    Ok(())
}

pub fn finetune(args: &FinetuneArgs) -> Result<(), CliError> {
    let mut cfg = args.flags.resolve()?;
    cfg.data = args.data.clone().or(cfg.data);
    cfg.out = args.out.clone().or(cfg.out);
    cfg.pretrained = args.pretrained.clone().or(cfg.pretrained);
    let ckpt = cfg.pretrained.clone().ok_or_else(|| usage("missing --pretrained checkpoint"))?;
    require_file(&ckpt, "pretrained checkpoint")?;
    let data_path = cfg.data.clone().ok_or_else(|| usage("missing --data"))?;
    let data = load_dataset(&data_path, "train")?;
    if !data.is_labeled() {
        return Err(usage("fine-tuning needs a labeled dataset"));
    }
    let (base, extra) = UNet::<f32>::load_with_extra(&ckpt)?;
    if base.is_conditional() {
        return Err(usage(format!("{} is already class-conditional", ckpt.display())));
    }
    if base.config().image_size != data.image_size() {
        return Err(usage(format!(
            "checkpoint expects {0}x{0} images, dataset has {1}x{1}",
            base.config().image_size,
            data.image_size()
        )));
    }
    // The schedule is part of the pretrained model.
    if let Ok(meta) = RunMetadata::from_extra(&extra, &ckpt) {
        if meta.schedule != cfg.train.schedule {
            log::info!("using the pretrained schedule ({} steps, {})", meta.schedule.steps, meta.schedule.kind);
        }
        cfg.train.schedule = meta.schedule;
    }
    cfg.train.conditional = true;
    // Architecture flags do not apply: the network is the pretrained one.
    cfg.unet = sardiff::unet::UNetConfig { num_classes: Some(data.num_classes), ..base.config().clone() };
    validate(&cfg)?;
    let out = run_dir(&cfg)?;
    let model = base.with_class_table(data.num_classes, derive_seed(cfg.train.seed, tag("finetune")))?;
    let trainer = Trainer::new(model, cfg.train.clone())?;
    trainer.check_dataset(&data)?;
    drive(trainer, &data, &out)?;
    Ok(())
}

fn class_ids(args: &SampleArgs, model: &DenoiserModel) -> Result<(usize, Option<Vec<usize>>), CliError> {
    let Some(k) = model.config().num_classes else {
        if !args.class.is_empty() || args.per_class.is_some() {
            return Err(usage("the checkpoint is unconditional; --class and --per-class do not apply"));
        }
        return Ok((args.num, None));
    };
    let chosen: Vec<usize> = if args.class.is_empty() { (0..k).collect() } else { args.class.clone() };
    if let Some(&bad) = chosen.iter().find(|&&c| c >= k) {
        return Err(sardiff::Error::InvalidClass { id: bad, num_classes: k }.into());
    }
    let ids: Vec<usize> = match args.per_class {
        Some(m) => chosen.iter().flat_map(|&c| std::iter::repeat_n(c, m)).collect(),
        None => (0..args.num).map(|i| chosen[i % chosen.len()]).collect(),
    };
    Ok((ids.len(), Some(ids)))
}

pub fn sample_cmd(args: &SampleArgs) -> Result<(), CliError> {
    require_file(&args.checkpoint, "checkpoint")?;
    ensure_fresh_output(&args.out)?;
    let (model, extra) = UNet::<f32>::load_with_extra(&args.checkpoint)?;
    let meta = RunMetadata::from_extra(&extra, &args.checkpoint).ok();
    let (n, ids) = class_ids(args, &model)?;
    if n == 0 {
        println!("nothing to sample");
        return Ok(());
    }
    if args.batch_size == 0 {
        return Err(usage("--batch-size must be positive"));
    }
    let schedule_cfg = match &meta {
        Some(m) => m.schedule,
        None => ScheduleConfig { steps: model.config().timesteps, ..Default::default() },
    };
    let schedule = schedule_cfg.build()?;
    let variance = if args.beta_variance { ReverseVariance::Beta } else { ReverseVariance::Posterior };
    let opts = SampleOptions { variance, batch_size: args.batch_size, ..Default::default() };
    let out = sample(&model, n, ids.as_deref(), &schedule, args.seed, &opts)?;

    fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(format!("creating {}: {e}", args.out.display())))?;
    flatbin::write_f32(&args.out.join(SAMPLES_FILE), &out.images)?;
    if let Some(ids) = &ids {
        flatbin::write_labels(&args.out.join(SAMPLE_LABELS_FILE), ids)?;
    }
    match meta.as_ref().and_then(|m| m.norm_params) {
        Some(p) => p.save(&args.out.join(NORM_FILE))?,
        None => log::warn!("checkpoint carries no normalization parameters; samples cannot be mapped back to dB"),
    }
    if !args.no_png {
        let png = args.out.join("png");
        fs::create_dir_all(&png).map_err(|e| CliError::Runtime(format!("creating {}: {e}", png.display())))?;
        export::write_pngs(&out.images, &png)?;
    }
    export::write_montage(&out.images, ids.as_deref(), args.montage_cols, &args.out.join(MONTAGE_FILE))?;
    println!("wrote {n} samples to {}", args.out.display());
    Ok(())
}

/// Generated images plus the normalization they were produced under.
fn load_generated(dir: &Path) -> Result<(Tensor<f32>, Option<NormalizationParams>), CliError> {
    require_dir(dir, "generated directory")?;
    let file = [SAMPLES_FILE, IMAGES_FILE]
        .iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
        .ok_or_else(|| usage(format!("{} holds neither {SAMPLES_FILE} nor {IMAGES_FILE}", dir.display())))?;
    let images = flatbin::read_f32(&file)?;
    let norm = dir.join(NORM_FILE);
    let params = if norm.is_file() { Some(NormalizationParams::load(&norm)?) } else { None };
    Ok((images, params))
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<(), CliError> {
    if !args.extractor.is_file() {
        return Err(usage(format!(
            "no feature extractor at {}; train one first with `sardiff train-extractor --data <dataset> --out {}`",
            args.extractor.display(),
            args.extractor.display()
        )));
    }
    let (generated, gen_params) = load_generated(&args.generated)?;
    let real = load_dataset(&args.real, "test")?;
    match gen_params {
        Some(p) if p != real.norm_params => {
            return Err(usage(format!(
                "normalization mismatch: generated data uses {}, real data uses {}",
                p.to_text().trim().replace('\n', ", "),
                real.norm_params.to_text().trim().replace('\n', ", ")
            )))
        }
        None => log::warn!("{} has no {NORM_FILE}; normalization consistency not checked", args.generated.display()),
        _ => {}
    }
    let extractor = FeatureClassifier::load(&args.extractor)?;
    let opts = EvalOptions {
        kid_subset_size: args.kid_subset_size,
        kid_subsets: args.kid_subsets,
        is_splits: args.is_splits,
        seed: args.seed,
    };
    let report = evaluate(&generated, &real, &extractor, &opts)?;
    let out = args.out.clone().unwrap_or_else(|| args.generated.clone());
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("creating {}: {e}", out.display())))?;
    report.save(&out)?;
    let label = args.generated.file_name().and_then(|s| s.to_str()).unwrap_or("generated");
    print!("{}", report.table(label));
    Ok(())
}

pub fn train_extractor(args: &ExtractorArgs) -> Result<(), CliError> {
    if args.out.is_dir() {
        return Err(usage(format!("--out {} is a directory; give a file path", args.out.display())));
    }
    let train = load_dataset(&args.data, "train")?;
    if !train.is_labeled() {
        return Err(usage("the extractor is a classifier and needs a labeled dataset"));
    }
    let test = match &args.test_data {
        Some(p) => Some(load_dataset(p, "test")?),
        None if args.data.join("test").join(MANIFEST_FILE).is_file() => Some(load_dataset(&args.data, "test")?),
        None => None,
    };
    let mut cfg = ClassifierConfig {
        image_size: train.image_size(),
        num_classes: train.num_classes,
        seed: args.seed,
        ..Default::default()
    };
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.width {
        cfg.width = v;
    }
    if let Some(v) = args.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    cfg.validate()?;
    let (clf, report) = FeatureClassifier::train(&train, test.as_ref(), &cfg)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
    }
    clf.save(&args.out)?;
    match report.test_accuracy {
        Some(a) => println!("train accuracy {:.4}, held-out accuracy {a:.4}", report.train_accuracy),
        None => println!("train accuracy {:.4}", report.train_accuracy),
    }
    println!("extractor saved to {}", args.out.display());
    Ok(())
}

pub fn schedule_dump(args: &ScheduleDumpArgs) -> Result<(), CliError> {
    let cfg = ScheduleConfig {
        kind: args.kind,
        steps: args.steps,
        beta_start: args.beta_start,
        beta_end: args.beta_end,
    };
    let schedule = cfg.build()?;
    let mut buf = Vec::new();
    schedule.write_curve_csv(&mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;
    match &args.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
            }
            fs::write(path, &buf).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
        }
        None => std::io::stdout().write_all(&buf).map_err(|e| CliError::Runtime(e.to_string()))?,
    }
    Ok(())
}
