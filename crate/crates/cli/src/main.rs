use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradkit::checkpoint::save_tensors;
use gradkit::{GradCheckOptions, Precision, Scalar, Tensor};
use partprompt::ablation::run_ablation;
use partprompt::dataset::{generate_split, read_dataset};
use partprompt::metrics::binarize;
use partprompt::scenegen::SceneSample;
use partprompt::trainer::{
    evaluate_saved, generate_dataset, load_data, param_group, run_gradcheck, run_training, scene_config,
    SavedModel, CONFIG_FILE,
};
use partprompt::{Error, Model, Result, RunConfig, Variant};

#[derive(Parser, Debug)]
#[command(name = "partprompt", version, about = "Train and evaluate part-prompted instrument segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train and eval splits.
    Gen {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant and write checkpoint, logs and eval report.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained model on the eval split; prints the report as JSON.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Run directory or checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump logits and binarized masks for one eval sample and category.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the eval split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Category id or name.
        #[arg(long)]
        category: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full training objective in f64.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        /// Scene side length.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Coordinates checked per parameter tensor (0 = all).
        #[arg(long, default_value_t = 64)]
        max_coords: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Train several variants over several seeds and compare medians.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated variants.
        #[arg(long, value_delimiter = ',', default_value = "A,B,C,D,E,F")]
        variants: Vec<Variant>,
        /// Number of seeds, counting up from --seed (default 0).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Directory for ablation.json; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// JSON run configuration; unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model seed; for `gen`, the data seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    precision: Option<Precision>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(path)) if path.is_file() => RunConfig::load(path)?,
            _ => RunConfig::default(),
        };
        if let Some(steps) = self.steps {
            cfg.steps = steps;
        }
        if let Some(variant) = self.variant {
            cfg.variant = variant;
        }
        if let Some(precision) = self.precision {
            cfg.precision = precision;
        }
        if let Some(data) = &self.data {
            cfg.dataset_dir = Some(data.clone());
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_dir(checkpoint: &Path) -> PathBuf {
    if checkpoint.is_dir() {
        checkpoint.to_path_buf()
    } else {
        checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    }
}

/// The eval split `cfg` points at, checked against the model's category table.
fn eval_split(cfg: &RunConfig, saved: &SavedModel) -> Result<Vec<SceneSample>> {
    let samples = match &cfg.dataset_dir {
        Some(dir) => {
            let ds = read_dataset(&dir.join("eval"))?;
            let dims = (saved.spec.dims.height, saved.spec.dims.width);
            if (ds.manifest.height, ds.manifest.width) != dims {
                return Err(Error::Config(format!(
                    "dataset images are {}x{} but the model expects {}x{}",
                    ds.manifest.height, ds.manifest.width, dims.0, dims.1
                )));
            }
            if ds.manifest.categories != saved.spec.categories {
                return Err(Error::Config(format!(
                    "{} uses a different category table than the model",
                    dir.display()
                )));
            }
            ds.load_all()?
        }
        None => {
            let mut cfg = cfg.clone();
            cfg.dims = saved.spec.dims;
            let scene = scene_config(&cfg)?;
            if scene.categories != saved.spec.categories {
                return Err(Error::Config("configured categories differ from the model's".into()));
            }
            generate_split(&scene, cfg.data.seed, "eval", cfg.data.eval_samples)?
        }
    };
    Ok(samples)
}

fn predict_typed<T: Scalar>(
    model: &Model<T>,
    sample: &SceneSample,
    category: usize,
    out: &Path,
) -> Result<()> {
    let pred = model.predict(&model.embed(sample)?, category, true)?;
    let mut logits: Vec<(&str, &Tensor<T>)> = vec![("whole", &pred.whole)];
    if let Some(parts) = &pred.parts {
        logits.push(("parts", parts));
    }
    let as_tensor = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let data = t.data().iter().map(|&v| if v > T::zero() { T::one() } else { T::zero() }).collect();
        Ok(Tensor::new(t.shape().to_vec(), data)?)
    };
    let masks: Vec<(&str, Tensor<T>)> =
        logits.iter().map(|(n, t)| Ok((*n, as_tensor(t)?))).collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    save_tensors(&out.join("logits.ppt"), &logits)?;
    let refs: Vec<(&str, &Tensor<T>)> = masks.iter().map(|(n, t)| (*n, t)).collect();
    save_tensors(&out.join("masks.ppt"), &refs)?;

    let whole = binarize(&pred.whole, T::zero())?;
    let gt = sample.whole_mask(category);
    emit(&format!(
        "{}: whole mask {} px (ground truth {} px, IoU {})",
        model.table[category].name,
        whole.count(),
        gt.count(),
        partprompt::metrics::class_iou(&whole, &gt)?.map_or("n/a".into(), |v| format!("{v:.4}"))
    ))?;
    emit(&format!("wrote {} and {}", out.join("logits.ppt").display(), out.join("masks.ppt").display()))
}

fn category_index(spec: &[partprompt::scenegen::CategorySpec], key: &str) -> Result<usize> {
    if let Ok(i) = key.parse::<usize>() {
        if i < spec.len() {
            return Ok(i);
        }
    }
    spec.iter()
        .position(|c| c.name == key)
        .ok_or_else(|| Error::Usage(format!("unknown category `{key}`")))
}

/// Writes one line to stdout, reporting a closed pipe as an error instead of panicking.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}")?;
    out.flush()?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { run, out } => {
            let mut cfg = run.resolve(None)?;
            if let Some(seed) = run.seed {
                cfg.data.seed = seed;
            }
            generate_dataset(&cfg, &out)?;
            eprintln!(
                "wrote {} train and {} eval samples to {}",
                cfg.data.train_samples,
                cfg.data.eval_samples,
                out.display()
            );
        }
        Command::Train { run, out } => {
            let cfg = run.resolve(None)?;
            eprintln!("training variant {} for {} steps ({})", cfg.variant, cfg.steps, cfg.precision);
            let summary = run_training(&cfg, Some(&out))?;
            if let (Some(first), Some(last)) = (summary.log.losses.first(), summary.log.losses.last()) {
                eprintln!(
                    "loss {:.4} -> {:.4} in {:.1} s",
                    first.loss, last.loss, summary.log.wall_clock_secs
                );
            }
            emit(&serde_json::to_string_pretty(&summary.report)?)?;
        }
        Command::Eval { run, checkpoint, out } => {
            let saved = SavedModel::locate(&checkpoint)?;
            let cfg = run.resolve(Some(&run_dir(&checkpoint).join(CONFIG_FILE)))?;
            let samples = eval_split(&cfg, &saved)?;
            let report = evaluate_saved(&saved, &samples)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                fs::write(path, &json)?;
            }
            emit(&json)?;
        }
        Command::Predict { run, checkpoint, sample, category, out } => {
            let saved = SavedModel::locate(&checkpoint)?;
            let cfg = run.resolve(Some(&run_dir(&checkpoint).join(CONFIG_FILE)))?;
            let samples = eval_split(&cfg, &saved)?;
            let s = samples
                .get(sample)
                .ok_or_else(|| Error::Usage(format!("sample {sample} out of range (eval split has {})", samples.len())))?;
            let c = category_index(&saved.spec.categories, &category)?;
            match saved.spec.precision {
                Precision::F32 => predict_typed(&saved.load::<f32>()?, s, c, &out)?,
                Precision::F64 => predict_typed(&saved.load::<f64>()?, s, c, &out)?,
            }
        }
        Command::Gradcheck { run, size, max_coords, tolerance } => {
            let cfg = run.resolve(None)?;
            let opts = GradCheckOptions {
                tolerance,
                max_coords: (max_coords > 0).then_some(max_coords),
                ..GradCheckOptions::default()
            };
            let report = run_gradcheck(&cfg, cfg.variant, size, &opts)?;
            for p in &report.params {
                emit(&format!(
                    "{:<36} {:<18} {:>5} checked {:>3} skipped  max rel {:.2e}  {}",
                    p.name,
                    param_group(&p.name),
                    p.checked,
                    p.skipped,
                    p.max_rel_error,
                    if p.passed { "ok" } else { "FAIL" }
                ))?;
            }
            emit(&format!("max relative error {:.3e} (tolerance {tolerance:.0e})", report.max_rel_error()))?;
            if !report.passed() {
                return Err(Error::Usage("gradient check failed".into()));
            }
        }
        Command::Ablate { run, variants, seeds, out } => {
            let cfg = run.resolve(None)?;
            let first = run.seed.unwrap_or(0);
            let seeds: Vec<u64> = (first..first + seeds).collect();
            let data = load_data(&cfg)?;
            let report = run_ablation(&cfg, &data, &variants, &seeds, |v, seed, iou| {
                eprintln!("{v} seed {seed}: challenge_iou {iou:.4}");
            })?;
            emit(report.table().trim_end())?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    fs::write(dir.join("ablation.json"), json)?;
                }
                None => emit(&json)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let gradcheck_failed = matches!(cli.command, Command::Gradcheck { .. });
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) if !gradcheck_failed => ExitCode::from(2),
                Error::Config(_) | Error::Lookup(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
