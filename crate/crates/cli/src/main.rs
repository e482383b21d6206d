//! Command-line frontend for the toy denoised-smoothing stack.
//!
//! Subcommands cover the full pipeline: dataset generation, model
//! training, single-attack crafting, single-defense evaluation, the full
//! experiment grid, report rendering, directional claim checks, and a
//! qualitative clean-vs-denoised demo. Progress goes to standard error;
//! machine-readable output goes to standard output or files. Exit codes:
//! 0 success, 1 validation error (or failed claims for `check`), 2
//! runtime failure.

use clap::{Args, Parser, Subcommand};
use ddsmooth::defense::{defend_then_predict, DefensePolicy};
use ddsmooth::models::{
    generate_toy_dataset, load_models, save_models, train_toy_models, DatasetConfig, ModelBundle,
    Prediction, ToyDataset, TrainConfig,
};
use ddsmooth::runner::{
    self, check_directional_claims, emit_report, load_config, run_grid, AttackSpec, LevelSpec,
    ReportFormat, ResultsStore, RESULTS_FILE,
};
use ddsmooth::schedule::{self, LevelKind, NoiseLevel, NoiseSchedule};
use ddsmooth::tasks::{self, TaskKind};
use ddsmooth::{rng, Error, Result};
use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ddsmooth",
    version,
    about = "Toy stack for studying diffusion-denoising defenses against adversarial attacks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural toy dataset.
    GenData(GenDataArgs),
    /// Train the toy denoiser, backbone, and task heads.
    Train(TrainArgs),
    /// Craft adversarial images for one attack spec and save them as PNGs.
    Attack(AttackArgs),
    /// Evaluate one defense on previously saved attack images.
    DefendEval(DefendEvalArgs),
    /// Run the full attack x defense x task grid and render reports.
    Grid(GridArgs),
    /// Re-render reports from an existing results store.
    Report(ReportArgs),
    /// Check the directional claims against a results store.
    Check(CheckArgs),
    /// Save clean/denoised image pairs with their predictions.
    Demo(DemoArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory the dataset is written into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DatasetConfig::default().n)]
    n: usize,
    #[arg(long, default_value_t = DatasetConfig::default().resolution)]
    resolution: usize,
    #[arg(long, default_value_t = DatasetConfig::default().num_classes)]
    num_classes: usize,
    #[arg(long, default_value_t = DatasetConfig::default().group_size)]
    group_size: usize,
    #[arg(long, default_value_t = DatasetConfig::default().seed)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Saved dataset directory; the default dataset is generated in memory
    /// when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory the model checkpoint is written into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    denoiser_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_val_accuracy: Option<f64>,
}

#[derive(Args)]
struct AttackArgs {
    /// Model checkpoint directory.
    #[arg(long)]
    models: PathBuf,
    /// Directory clean/adversarial PNG pairs are written into.
    #[arg(long)]
    out: PathBuf,
    /// none, pgd, mifgsm, or sia.
    #[arg(long)]
    method: String,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    p_diffusion: f64,
    /// none, low, high, or range.
    #[arg(long, default_value = "none")]
    noise_level: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// How many validation images to attack.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Task whose loss the attack ascends.
    #[arg(long, default_value = "classification")]
    task: String,
    /// Saved dataset directory; defaults to the standard generated set.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct DefendEvalArgs {
    /// Model checkpoint directory.
    #[arg(long)]
    models: PathBuf,
    /// Directory written by `attack` (PNGs plus manifest.json).
    #[arg(long)]
    images: PathBuf,
    /// none or denoise.
    #[arg(long, default_value = "none")]
    mode: String,
    /// low, high, or range (used by denoise mode).
    #[arg(long, default_value = "high")]
    level: String,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON result here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config uniformly.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_size: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Path to results.jsonl.
    #[arg(long)]
    store: PathBuf,
    /// markdown, latex, or csv.
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Path to results.jsonl.
    #[arg(long)]
    store: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    /// Model checkpoint directory.
    #[arg(long)]
    models: PathBuf,
    /// Directory the image pairs and predictions are written into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Saved dataset directory; defaults to the standard generated set.
    #[arg(long)]
    data: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = check_device() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}

/// Compute-device selection. The stack is pure CPU; `auto` and `cpu` are
/// the accepted values of `DDSMOOTH_DEVICE`.
fn check_device() -> Result<()> {
    match std::env::var("DDSMOOTH_DEVICE") {
        Ok(v) if v == "auto" || v == "cpu" => Ok(()),
        Ok(v) => Err(Error::Config(format!(
            "DDSMOOTH_DEVICE must be 'auto' or 'cpu', got {v:?}"
        ))),
        Err(_) => Ok(()),
    }
}

/// 1 for bad inputs, 2 for failures at run time.
fn classify(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::NonFiniteLoss { .. } | Error::TrainingDiverged { .. } => 2,
        _ => 1,
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Attack(a) => cmd_attack(a),
        Cmd::DefendEval(a) => cmd_defend_eval(a),
        Cmd::Grid(a) => cmd_grid(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Check(a) => cmd_check(a),
        Cmd::Demo(a) => cmd_demo(a),
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let cfg = DatasetConfig {
        n: a.n,
        resolution: a.resolution,
        num_classes: a.num_classes,
        group_size: a.group_size,
        seed: a.seed,
    };
    let data = generate_toy_dataset(&cfg)?;
    data.save_dir(&a.out)?;
    eprintln!(
        "wrote {} samples to {}",
        data.samples.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_or_generate(data: &Option<PathBuf>) -> Result<ToyDataset> {
    match data {
        Some(dir) => ToyDataset::load_dir(dir),
        None => generate_toy_dataset(&DatasetConfig::default()),
    }
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let data = load_or_generate(&a.data)?;
    let mut cfg = TrainConfig::default();
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.denoiser_epochs {
        cfg.denoiser_epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.min_val_accuracy {
        cfg.min_val_accuracy = v;
    }
    let bundle = train_toy_models(&data, &cfg, &mut |line| eprintln!("{line}"))?;
    save_models(&a.out, &bundle)?;
    eprintln!("saved models to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// PNG pairs plus the labels needed to evaluate a defense on them later.
#[derive(Serialize, Deserialize)]
struct Manifest {
    task: String,
    method: String,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    index: usize,
    clean: String,
    adv: String,
    label: usize,
    group: u32,
}

fn parse_level_kind(s: &str) -> Result<LevelKind> {
    match s {
        "none" => Ok(LevelKind::None),
        "low" => Ok(LevelKind::Low),
        "high" => Ok(LevelKind::High),
        "range" => Ok(LevelKind::Range),
        other => Err(Error::Config(format!(
            "unknown noise level {other:?}; expected none, low, high, or range"
        ))),
    }
}

fn cmd_attack(a: AttackArgs) -> Result<ExitCode> {
    let bundle = load_models(&a.models)?;
    let data = load_or_generate(&a.data)?;
    if data.config.resolution != bundle.resolution() {
        return Err(Error::Config(format!(
            "models expect resolution {}, dataset is {}",
            bundle.resolution(),
            data.config.resolution
        )));
    }
    let task = TaskKind::parse(&a.task)?;
    let schedule = NoiseSchedule::default_linear();
    let (_, val_idx) = data.split_indices(runner::EVAL_VAL_FRACTION)?;
    if a.count == 0 || a.count > val_idx.len() {
        return Err(Error::Config(format!(
            "count must lie in [1, {}], got {}",
            val_idx.len(),
            a.count
        )));
    }
    let samples: Vec<_> = val_idx[..a.count]
        .iter()
        .map(|&i| &data.samples[i])
        .collect();
    let clean: Vec<Array3<f64>> = samples.iter().map(|s| s.image.clone()).collect();

    let spec = AttackSpec {
        method: a.method.clone(),
        noise_level: LevelSpec::named(parse_level_kind(&a.noise_level)?),
        p_diffusion: a.p_diffusion,
        budget: a.budget,
        iterations: a.iterations,
        step_size: a.step_size,
        seed: None,
    };
    spec.validate()?;
    let attacked = if spec.is_clean() {
        clean.clone()
    } else {
        let cfg = spec.to_attack_config(&schedule, a.seed)?;
        let targets = samples
            .iter()
            .map(|s| bundle.attack_target(task, s))
            .collect::<Result<Vec<_>>>()?;
        ddsmooth::attacks::run_attack_batch(&bundle, task, &targets, &clean, &schedule, &cfg)?
    };

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let clean_name = format!("clean_{i:03}.png");
        let adv_name = format!("adv_{i:03}.png");
        array_to_png(&clean[i], &a.out.join(&clean_name))?;
        array_to_png(&attacked[i], &a.out.join(&adv_name))?;
        entries.push(ManifestEntry {
            index: i,
            clean: clean_name,
            adv: adv_name,
            label: s.label,
            group: s.retrieval_group,
        });
    }
    let manifest = Manifest {
        task: a.task.clone(),
        method: a.method.clone(),
        entries,
    };
    let manifest_path = a.out.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(Error::Parse)?,
    )
    .map_err(|e| Error::io(&manifest_path, e))?;
    eprintln!("wrote {} image pairs to {}", samples.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_defend_eval(a: DefendEvalArgs) -> Result<ExitCode> {
    let bundle = load_models(&a.models)?;
    let manifest_path = a.images.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(Error::Parse)?;
    if manifest.entries.is_empty() {
        return Err(Error::EmptyInput("manifest has no images"));
    }
    let schedule = NoiseSchedule::default_linear();
    let policy = match a.mode.as_str() {
        "none" => DefensePolicy::none(),
        "denoise" => {
            let level = LevelSpec::named(parse_level_kind(&a.level)?).resolve(&schedule)?;
            let mut p = DefensePolicy::denoise(level, a.seed);
            p.samples = a.samples;
            p
        }
        other => {
            return Err(Error::Config(format!(
                "unknown defense mode {other:?}; expected none or denoise"
            )))
        }
    };
    policy.validate()?;

    let n = manifest.entries.len();
    let mut preds = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut clean_embeds: Vec<Array1<f64>> = Vec::with_capacity(n);
    let mut defended_embeds: Vec<Array1<f64>> = Vec::with_capacity(n);
    let mut clean_flat = Vec::new();
    let mut adv_flat = Vec::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        let clean = png_to_array(&a.images.join(&entry.clean))?;
        let adv = png_to_array(&a.images.join(&entry.adv))?;
        match defend_then_predict(
            &bundle,
            TaskKind::Classification,
            &adv,
            &policy,
            &schedule,
            i as u64,
        )? {
            Prediction::Class(c) => preds.push(c),
            other => return Err(Error::Contract(format!("unexpected prediction {other:?}"))),
        }
        match defend_then_predict(
            &bundle,
            TaskKind::Retrieval,
            &adv,
            &policy,
            &schedule,
            (n + i) as u64,
        )? {
            Prediction::Embed(e) => defended_embeds.push(e),
            other => return Err(Error::Contract(format!("unexpected prediction {other:?}"))),
        }
        clean_embeds.push(bundle.embed_of(&clean)?);
        labels.push(entry.label);
        clean_flat.extend(clean.iter().copied());
        adv_flat.extend(adv.iter().copied());
    }
    let accuracy = tasks::accuracy(&preds, &labels)?;
    let cos = tasks::mean_cosine_similarity(&clean_embeds, &defended_embeds)?;
    let psnr = tasks::psnr(
        &Array1::from_vec(clean_flat).into_dyn(),
        &Array1::from_vec(adv_flat).into_dyn(),
    )?;
    let result = serde_json::json!({
        "n_images": n,
        "defense": { "mode": a.mode, "level": a.level, "samples": a.samples, "seed": a.seed },
        "accuracy": accuracy,
        "cls_cos_sim": cos,
        "psnr": if psnr.is_infinite() { serde_json::Value::Null } else { psnr.into() },
    });
    let text = serde_json::to_string_pretty(&result).map_err(Error::Parse)?;
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e))?,
        None => println!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_grid(a: GridArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seeds = runner::Seeds {
            attack: seed,
            defense: seed,
        };
    }
    if let Some(n) = a.eval_size {
        cfg.eval_size = n;
    }
    let out = match a.out.clone().or_else(|| cfg.output_dir.clone()) {
        Some(p) => p,
        None => {
            return Err(Error::Config(
                "no output directory: pass --out or set output_dir in the config".into(),
            ))
        }
    };
    let outcome = run_grid(&cfg, &out, &mut |line| eprintln!("{line}"))?;
    eprintln!("{}", outcome.summary());

    let store = ResultsStore::load(&out.join(RESULTS_FILE))?;
    if !store.is_empty() {
        for fmt in [
            ReportFormat::Markdown,
            ReportFormat::Latex,
            ReportFormat::Csv,
        ] {
            let text = emit_report(store.records(), fmt)?;
            let path = out.join(fmt.file_name());
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        eprintln!("reports written to {}", out.display());
    }
    if outcome.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn cmd_report(a: ReportArgs) -> Result<ExitCode> {
    let format = ReportFormat::parse(&a.format)?;
    let store = ResultsStore::load(&a.store)?;
    let text = emit_report(store.records(), format)?;
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e))?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(a: CheckArgs) -> Result<ExitCode> {
    let store = ResultsStore::load(&a.store)?;
    let results = check_directional_claims(store.records())?;
    print!("{}", runner::render_claims(&results));
    if runner::all_pass(&results) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn cmd_demo(a: DemoArgs) -> Result<ExitCode> {
    let bundle = load_models(&a.models)?;
    let data = load_or_generate(&a.data)?;
    if data.config.resolution != bundle.resolution() {
        return Err(Error::Config(format!(
            "models expect resolution {}, dataset is {}",
            bundle.resolution(),
            data.config.resolution
        )));
    }
    let schedule = NoiseSchedule::default_linear();
    let (_, val_idx) = data.split_indices(runner::EVAL_VAL_FRACTION)?;
    if a.count == 0 || a.count > val_idx.len() {
        return Err(Error::Config(format!(
            "count must lie in [1, {}], got {}",
            val_idx.len(),
            a.count
        )));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let levels = [
        ("low", NoiseLevel::low_for(&schedule)?),
        ("high", NoiseLevel::high_for(&schedule)?),
    ];
    let mut report = Vec::new();
    for (i, &idx) in val_idx[..a.count].iter().enumerate() {
        let s = &data.samples[idx];
        let clean_name = format!("demo_{i:03}_clean.png");
        array_to_png(&s.image, &a.out.join(&clean_name))?;
        let clean_pred = class_of(&bundle, &s.image)?;
        let mut denoised_info = Vec::new();
        let mut r = rng::stream(a.seed, "demo", i as u64);
        for (name, level) in &levels {
            let t = level.sample_t(&mut r)?;
            let x_t = schedule::noised(&s.image.view().into_dyn(), t, &schedule, &mut r)?
                .into_dimensionality::<ndarray::Ix3>()
                .expect("rank preserved");
            let mut x_hat = bundle.denoiser.denoise(&x_t, t, &schedule)?;
            x_hat.mapv_inplace(|v| v.clamp(0.0, 1.0));
            let den_name = format!("demo_{i:03}_denoised_{name}.png");
            array_to_png(&x_hat, &a.out.join(&den_name))?;
            denoised_info.push(serde_json::json!({
                "level": name,
                "timestep": t,
                "file": den_name,
                "predicted_class": class_of(&bundle, &x_hat)?,
            }));
        }
        report.push(serde_json::json!({
            "index": i,
            "clean": clean_name,
            "label": s.label,
            "clean_predicted_class": clean_pred,
            "denoised": denoised_info,
        }));
    }
    let path = a.out.join("predictions.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&serde_json::Value::Array(report)).map_err(Error::Parse)?,
    )
    .map_err(|e| Error::io(&path, e))?;
    eprintln!("wrote {} demo pairs to {}", a.count, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn class_of(bundle: &ModelBundle, image: &Array3<f64>) -> Result<usize> {
    match bundle.predict(TaskKind::Classification, image)? {
        Prediction::Class(c) => Ok(c),
        other => Err(Error::Contract(format!("unexpected prediction {other:?}"))),
    }
}

/// Saves a `(3, h, w)` image in `[0, 1]` as an 8-bit PNG.
fn array_to_png(x: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = x.dim();
    if c != 3 {
        return Err(Error::Config(format!("expected 3 channels, got {c}")));
    }
    let img = image::RgbImage::from_fn(w as u32, h as u32, |px, py| {
        let at =
            |ch: usize| (x[[ch, py as usize, px as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    img.save(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

/// Loads an 8-bit PNG back into a `(3, h, w)` array in `[0, 1]`.
fn png_to_array(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (px, py, pixel) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, py as usize, px as usize]] = pixel[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}
