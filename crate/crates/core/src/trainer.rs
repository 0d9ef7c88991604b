//! Training loop, dataset evaluation and the full-pipeline gradient check.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gradkit::{grad_check, AdamState, GradCheckOptions, GradCheckReport, Precision, Scalar, Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelDims, RunConfig, Variant};
use crate::dataset::{generate_split, read_dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::metrics::{binarize, score, ClassCounts, EvalReport};
use crate::model::Model;
use crate::params::Bound;
use crate::scenegen::{default_category_table, default_vocab, generate_scene, CategorySpec, SceneConfig, SceneSample};

pub const CHECKPOINT_FILE: &str = "checkpoint.ppt";
pub const MODEL_FILE: &str = "model.json";
pub const CONFIG_FILE: &str = "config.json";
pub const TRAINLOG_FILE: &str = "trainlog.json";
pub const REPORT_FILE: &str = "evalreport.json";

/// Everything needed to rebuild a model before loading its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub precision: Precision,
    pub dims: ModelDims,
    pub stub_seed: u64,
    pub vocab: Vec<String>,
    pub categories: Vec<CategorySpec>,
}

impl ModelSpec {
    pub fn build<T: Scalar>(&self, seed: u64) -> Result<Model<T>> {
        Model::new(
            self.variant,
            self.dims,
            self.categories.clone(),
            self.vocab.clone(),
            seed,
            self.stub_seed,
        )
    }
}

/// Hashes of the components that must not change during training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenDigests {
    pub image_encoder: String,
    pub text_encoder: String,
    pub decoder_output_mlp: String,
}

impl FrozenDigests {
    pub fn of<T: Scalar>(model: &Model<T>) -> Self {
        Self {
            image_encoder: model.image_encoder.digest(),
            text_encoder: model.text_encoder.digest(),
            decoder_output_mlp: model.params.digest("decoder.output_mlp"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub step: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: RunConfig,
    pub seed: u64,
    pub losses: Vec<StepLoss>,
    pub evals: Vec<EvalSnapshot>,
    pub wall_clock_secs: f64,
    pub frozen_before: FrozenDigests,
    pub frozen_after: FrozenDigests,
}

/// Train and eval splits with the category table they were drawn from.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: Vec<SceneSample>,
    pub eval: Vec<SceneSample>,
    pub vocab: Vec<String>,
    pub categories: Vec<CategorySpec>,
}

/// Scene settings for the synthetic data described by `cfg`.
pub fn scene_config(cfg: &RunConfig) -> Result<SceneConfig> {
    let vocab = default_vocab();
    let categories = default_category_table(&vocab, cfg.data.categories)?;
    let scene = SceneConfig {
        height: cfg.dims.height,
        width: cfg.dims.width,
        vocab,
        categories,
        max_instruments: cfg.data.max_instruments,
        occlusion_prob: cfg.data.occlusion_prob,
        clutter_level: cfg.data.clutter_level,
    };
    scene.validate()?;
    Ok(scene)
}

/// Reads `dataset_dir/{train,eval}` when set, otherwise generates the
/// synthetic splits in memory.
pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    match &cfg.dataset_dir {
        Some(dir) => {
            let train = read_dataset(&dir.join("train"))?;
            let eval = read_dataset(&dir.join("eval"))?;
            let m = &train.manifest;
            if (m.height, m.width) != (cfg.dims.height, cfg.dims.width) {
                return Err(Error::Config(format!(
                    "dataset images are {}x{} but the model expects {}x{}",
                    m.height, m.width, cfg.dims.height, cfg.dims.width
                )));
            }
            if eval.manifest.categories != m.categories || eval.manifest.vocab != m.vocab {
                return Err(Error::format(dir, "train and eval splits use different category tables"));
            }
            Ok(Data {
                vocab: m.vocab.clone(),
                categories: m.categories.clone(),
                train: train.load_all()?,
                eval: eval.load_all()?,
            })
        }
        None => {
            let scene = scene_config(cfg)?;
            Ok(Data {
                train: generate_split(&scene, cfg.data.seed, "train", cfg.data.train_samples)?,
                eval: generate_split(&scene, cfg.data.seed, "eval", cfg.data.eval_samples)?,
                vocab: scene.vocab,
                categories: scene.categories,
            })
        }
    }
}

/// Writes both splits of the synthetic data described by `cfg` under `dir`.
pub fn generate_dataset(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let scene = scene_config(cfg)?;
    for (split, count) in [("train", cfg.data.train_samples), ("eval", cfg.data.eval_samples)] {
        let samples = generate_split(&scene, cfg.data.seed, split, count)?;
        let manifest = DatasetManifest::new(split, count, &scene, cfg.data.seed);
        crate::dataset::write_dataset(&samples, &manifest, &dir.join(split))?;
    }
    Ok(())
}

/// Scores the whole mask of every category on every sample.
pub fn evaluate_dataset<T: Scalar>(model: &Model<T>, samples: &[SceneSample]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for sample in samples {
        let logits = model.predict_all(&model.embed(sample)?)?;
        let row = logits
            .iter()
            .enumerate()
            .map(|(c, l)| ClassCounts::new(&binarize(l, T::zero())?, &sample.whole_mask(c)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    score(&model.category_names(), &rows)
}

fn batch_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0xba7c_4e5e_ed00_0001)
}

/// Trains `model` in place on `train`; evaluates on `eval` every
/// `cfg.eval_every` steps (when non-zero) and returns the log.
pub fn train_model<T: Scalar>(
    model: &mut Model<T>,
    cfg: &RunConfig,
    train: &[SceneSample],
    eval: &[SceneSample],
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if model.num_categories() < 2 {
        return Err(Error::Config("negative prompting needs at least two categories".into()));
    }
    let start = Instant::now();
    let frozen_before = FrozenDigests::of(model);
    let embeddings = train.iter().map(|s| model.embed(s)).collect::<Result<Vec<_>>>()?;
    let present: Vec<Vec<usize>> = train.iter().map(SceneSample::present_categories).collect();
    if let Some(i) = present.iter().position(Vec::is_empty) {
        return Err(Error::Usage(format!("training sample {i} has no instrument")));
    }

    let trainable: Vec<_> = model.params.trainable().map(|p| &p.tensor).collect();
    let mut adam = AdamState::new(cfg.optimizer, &trainable);
    let mut rng = batch_rng(cfg.seed);
    let mut queue: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let categories = model.num_categories();
    let inv_batch = T::one() / T::from_usize(cfg.batch_size).expect("batch size fits");

    for step in 0..cfg.steps {
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let mut total: Option<Var<'_, T>> = None;
        for _ in 0..cfg.batch_size {
            if queue.is_empty() {
                queue = (0..train.len()).collect();
                queue.shuffle(&mut rng);
                queue.reverse();
            }
            let i = queue.pop().expect("refilled");
            let positive = present[i][rng.random_range(0..present[i].len())];
            let mut negative = rng.random_range(0..categories - 1);
            if negative >= positive {
                negative += 1;
            }
            let f_i = tape.constant(embeddings[i].clone());
            let loss = model.sample_loss(&bound, f_i, &train[i], positive, Some(negative), false)?;
            total = Some(match total {
                Some(t) => t.add(loss)?,
                None => loss,
            });
        }
        let loss = total.expect("batch size is positive").scale(inv_batch);
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                norms: model.params.norms(),
            });
        }
        let grads = tape.backward(loss)?;
        model.params.load_gradients(&bound, &grads)?;
        drop(bound);
        adam.step(&mut model.params.trainable_mut())?;
        losses.push(StepLoss { step, loss: value });
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !eval.is_empty() {
            evals.push(EvalSnapshot {
                step: step + 1,
                report: evaluate_dataset(model, eval)?,
            });
        }
    }
    Ok(TrainLog {
        config: cfg.clone(),
        seed: cfg.seed,
        losses,
        evals,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        frozen_before,
        frozen_after: FrozenDigests::of(model),
    })
}

/// Result of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub log: TrainLog,
    pub report: EvalReport,
    pub spec: ModelSpec,
}

fn model_spec(cfg: &RunConfig, data: &Data) -> ModelSpec {
    ModelSpec {
        variant: cfg.variant,
        precision: cfg.precision,
        dims: cfg.dims,
        stub_seed: cfg.stub_seed,
        vocab: data.vocab.clone(),
        categories: data.categories.clone(),
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn train_typed<T: Scalar>(cfg: &RunConfig, data: &Data, out: Option<&Path>) -> Result<TrainSummary> {
    let spec = model_spec(cfg, data);
    let mut model = spec.build::<T>(cfg.seed)?;
    if let Some(init) = &cfg.init_checkpoint {
        model.params.load(init)?;
    }
    let log = train_model(&mut model, cfg, &data.train, &data.eval)?;
    model.params.round_to_checkpoint();
    let report = evaluate_dataset(&model, &data.eval)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        model.params.save(&dir.join(CHECKPOINT_FILE))?;
        if let Some(extra) = &cfg.checkpoint {
            model.params.save(extra)?;
        }
        write_json(&dir.join(MODEL_FILE), &spec)?;
        write_json(&dir.join(CONFIG_FILE), cfg)?;
        write_json(&dir.join(TRAINLOG_FILE), &log)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
    }
    Ok(TrainSummary { log, report, spec })
}

/// Loads or generates the data, trains at the configured precision,
/// evaluates on the eval split and (with `out`) writes the checkpoint,
/// model spec, config echo, training log and report.
pub fn run_training(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    run_training_on(cfg, &data, out)
}

/// [`run_training`] on already loaded data.
pub fn run_training_on(cfg: &RunConfig, data: &Data, out: Option<&Path>) -> Result<TrainSummary> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, data, out),
        Precision::F64 => train_typed::<f64>(cfg, data, out),
    }
}

/// A trained model directory: spec plus checkpoint.
pub struct SavedModel {
    pub spec: ModelSpec,
    pub checkpoint: PathBuf,
}

impl SavedModel {
    /// `path` is either a run directory or a checkpoint file whose directory
    /// holds `model.json`.
    pub fn locate(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::format(path, "no such file or directory"));
        }
        let (dir, checkpoint) = if path.is_dir() {
            (path.to_path_buf(), path.join(CHECKPOINT_FILE))
        } else {
            let dir = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
            (dir, path.to_path_buf())
        };
        let spec_path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::format(&spec_path, e.to_string()))?;
        let spec = serde_json::from_str(&text).map_err(|e| Error::format(&spec_path, e.to_string()))?;
        Ok(Self { spec, checkpoint })
    }

    pub fn load<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = self.spec.build::<T>(0)?;
        model.params.load(&self.checkpoint)?;
        Ok(model)
    }
}

/// Evaluates a saved model at its own precision.
pub fn evaluate_saved(saved: &SavedModel, samples: &[SceneSample]) -> Result<EvalReport> {
    match saved.spec.precision {
        Precision::F32 => evaluate_dataset(&saved.load::<f32>()?, samples),
        Precision::F64 => evaluate_dataset(&saved.load::<f64>()?, samples),
    }
}

/// Parameter group a parameter name belongs to, for reporting.
pub fn param_group(name: &str) -> &'static str {
    const GROUPS: [(&str, &str); 9] = [
        ("transfer.", "transfer MLP"),
        ("crossmodal.sparse.", "sparse MLP"),
        ("crossmodal.dense.", "dense CNN"),
        ("fusion.global_cnn.", "global CNN"),
        ("relation.", "relation matrix"),
        ("labels.", "label embeddings"),
        ("decoder.", "decoder"),
        ("prompt.no_mask", "no-mask embedding"),
        ("prompt.placeholder", "placeholder token"),
    ];
    GROUPS
        .iter()
        .find(|(prefix, _)| name.starts_with(prefix))
        .map_or("other", |(_, g)| g)
}

/// Finite-difference check of every trainable parameter of `variant` on
/// one `size x size` scene, in f64, through the full training objective
/// (positive and negative category, whole and part losses).
pub fn run_gradcheck(
    cfg: &RunConfig,
    variant: Variant,
    size: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut dims = cfg.dims;
    dims.height = size;
    dims.width = size;
    dims.validate()?;
    let vocab = default_vocab();
    let categories = default_category_table(&vocab, cfg.data.categories)?;
    let scene = SceneConfig {
        height: size,
        width: size,
        vocab: vocab.clone(),
        categories: categories.clone(),
        max_instruments: cfg.data.max_instruments.min(categories.len()),
        occlusion_prob: cfg.data.occlusion_prob,
        clutter_level: cfg.data.clutter_level,
    };
    scene.validate()?;
    let sample = generate_scene(cfg.seed, &scene)?;
    let model = Model::<f64>::new(variant, dims, categories, vocab, cfg.seed, cfg.stub_seed)?;
    let f_i = model.embed(&sample)?;
    let positive = sample.present_categories()[0];
    let negative = (positive + 1) % model.num_categories();

    let trainable: Vec<(String, gradkit::Tensor<f64>)> =
        model.params.trainable().map(|p| (p.name.clone(), p.tensor.clone())).collect();
    let frozen: Vec<(String, gradkit::Tensor<f64>)> = model
        .params
        .iter()
        .filter(|p| !p.trainable)
        .map(|p| (p.name.clone(), p.tensor.clone()))
        .collect();
    grad_check(
        |tape, leaves| {
            let mut vars: Vec<(String, Var<'_, f64>)> =
                trainable.iter().zip(leaves).map(|((n, _), v)| (n.clone(), *v)).collect();
            vars.extend(frozen.iter().map(|(n, t)| (n.clone(), tape.constant(t.clone()))));
            let bound = Bound::from_vars(vars);
            let f = tape.constant(f_i.clone());
            model
                .sample_loss(&bound, f, &sample, positive, Some(negative), true)
                .map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => gradkit::Error::Usage(other.to_string()),
                })
        },
        &trainable,
        opts,
    )
    .map_err(Error::from)
}
