use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::meta::{evaluate, meta_train_epoch, AdaptConfig, AdaptMode, TaskData, TaskEvaluation, TrainState};
use crate::metrics::{cka_profile, CkaProfile};
use crate::model::ParameterSet;
use crate::tasks::{
    build_task, derive_seed, phantom_set, read_raster, write_kmr1, ComplexImage, Contrast, MaskSpec, Raster, Task,
    TaskSpec,
};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.kmck";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";
pub const CKA: &str = "cka.csv";

/// Salts separating the seed streams derived from the run seed.
const TRAIN_IMAGES: u64 = 0;
const TEST_IMAGES: u64 = 1;
const TRAIN_TASKS: u64 = 2;
const TEST_TASKS: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Phantom images per contrast for both splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<(Contrast, Vec<ComplexImage>)>,
    pub test: Vec<(Contrast, Vec<ComplexImage>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub split: String,
    pub contrast: String,
    pub seed: u64,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub height: usize,
    pub width: usize,
    pub contrasts: Vec<String>,
    pub files: Vec<ManifestFile>,
}

fn split_seed(cfg: &RunConfig, split: Split) -> u64 {
    derive_seed(
        cfg.seed,
        if split == Split::Train {
            TRAIN_IMAGES
        } else {
            TEST_IMAGES
        },
    )
}

fn split_count(cfg: &RunConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.train_images,
        Split::Test => cfg.test_images,
    }
}

impl Dataset {
    /// Phantoms with seeds `split_seed + i`; index `i` shares anatomy across
    /// contrasts and the two splits use independent seed streams.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let split = |s: Split| -> Result<Vec<(Contrast, Vec<ComplexImage>)>> {
            cfg.contrasts
                .iter()
                .map(|&c| {
                    Ok((
                        c,
                        phantom_set(
                            c,
                            split_count(cfg, s),
                            cfg.image_size,
                            cfg.image_size,
                            split_seed(cfg, s),
                        )?,
                    ))
                })
                .collect()
        };
        Ok(Dataset {
            train: split(Split::Train)?,
            test: split(Split::Test)?,
        })
    }

    pub fn split(&self, s: Split) -> &[(Contrast, Vec<ComplexImage>)] {
        match s {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    fn manifest(&self, cfg: &RunConfig) -> Manifest {
        let mut files = Vec::new();
        for s in [Split::Train, Split::Test] {
            for (c, imgs) in self.split(s) {
                for i in 0..imgs.len() {
                    let seed = split_seed(cfg, s) + i as u64;
                    files.push(ManifestFile {
                        split: s.tag().into(),
                        contrast: c.to_string(),
                        seed,
                        path: format!("{}/{c}/{seed:020}.kmr1", s.tag()),
                    });
                }
            }
        }
        Manifest {
            format: "KMR1".into(),
            height: cfg.image_size,
            width: cfg.image_size,
            contrasts: cfg.contrasts.iter().map(ToString::to_string).collect(),
            files,
        }
    }

    /// Writes every image as a KMR1 raster plus `manifest.json`.
    pub fn write(&self, cfg: &RunConfig, dir: &Path) -> Result<Manifest> {
        let manifest = self.manifest(cfg);
        let mut images = [Split::Train, Split::Test]
            .into_iter()
            .flat_map(|s| self.split(s).iter().flat_map(|(_, v)| v));
        for f in &manifest.files {
            let path = dir.join(&f.path);
            let parent = path.parent().expect("file path has a parent");
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            write_kmr1(
                &path,
                &Raster::from_image(images.next().expect("one image per manifest entry")),
            )?;
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = dir.join(MANIFEST);
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Loads a dataset written by [`Dataset::write`], checking that it
    /// matches the configuration.
    pub fn read(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "dataset manifest",
            detail: format!("{}: {e}", path.display()),
        })?;
        let mismatch = |key: &str, detail: String| Error::Config {
            key: key.into(),
            message: format!("dataset {} {detail}", dir.display()),
        };
        if manifest.height != cfg.image_size || manifest.width != cfg.image_size {
            return Err(mismatch(
                "image_size",
                format!("holds {}x{} images", manifest.height, manifest.width),
            ));
        }
        let mut out = Dataset {
            train: Vec::new(),
            test: Vec::new(),
        };
        for s in [Split::Train, Split::Test] {
            for &c in &cfg.contrasts {
                let files: Vec<&ManifestFile> = manifest
                    .files
                    .iter()
                    .filter(|f| f.split == s.tag() && f.contrast == c.to_string())
                    .collect();
                let want = split_count(cfg, s);
                if files.len() < want {
                    let key = if s == Split::Train {
                        "train_images"
                    } else {
                        "test_images"
                    };
                    return Err(mismatch(
                        key,
                        format!("has {} {} images of {c}, need {want}", files.len(), s.tag()),
                    ));
                }
                let imgs = files[..want]
                    .iter()
                    .map(|f| read_raster(&dir.join(&f.path)))
                    .collect::<Result<Vec<_>>>()?;
                match s {
                    Split::Train => out.train.push((c, imgs)),
                    Split::Test => out.test.push((c, imgs)),
                }
            }
        }
        Ok(out)
    }
}

/// One task per contrast × mask, contrasts outermost; task `k` is seeded
/// with `derive_seed(stream, k)`.
fn suite(
    cfg: &RunConfig,
    images: &[(Contrast, Vec<ComplexImage>)],
    masks: &[MaskSpec],
    stream: u64,
) -> Result<Vec<Task>> {
    let seed = derive_seed(cfg.seed, stream);
    let mut tasks = Vec::with_capacity(images.len() * masks.len());
    for (contrast, imgs) in images {
        for mask in masks {
            let spec = TaskSpec {
                split_ratio: cfg.split_ratio,
                noise_sigma: cfg.noise_sigma,
                ..TaskSpec::new(*contrast, *mask, derive_seed(seed, tasks.len() as u64))
            };
            tasks.push(build_task(imgs, &spec)?);
        }
    }
    Ok(tasks)
}

/// Training tasks: train images × training masks.
pub fn training_tasks(cfg: &RunConfig, data: &Dataset) -> Result<Vec<Task>> {
    suite(cfg, &data.train, &cfg.train_masks(), TRAIN_TASKS)
}

/// Evaluation tasks for a split. Test tasks use the evaluation masks.
pub fn evaluation_tasks(cfg: &RunConfig, data: &Dataset, split: Split) -> Result<Vec<Task>> {
    match split {
        Split::Train => training_tasks(cfg, data),
        Split::Test => suite(cfg, &data.test, &cfg.eval_masks(), TEST_TASKS),
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Dataset::generate(cfg)?.write(cfg, out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub epochs_run: u64,
    pub final_epoch: u64,
    pub last_meta_loss: Option<f64>,
}

/// Runs meta-training until `cfg.epochs` epochs are complete. Starts from
/// `resume` when given, appending to an existing log in `out`. On a
/// numerical failure the last saved checkpoint is kept and the error is
/// returned.
pub fn train(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    deterministic: bool,
) -> Result<TrainOutcome> {
    let model = cfg.model();
    let tcfg = cfg.train();
    tcfg.validate()?;
    let data = Dataset::read(cfg, data_dir)?;
    let tasks: Vec<TaskData<f32>> = training_tasks(cfg, &data)?.iter().map(TaskData::new).collect();
    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_compatible(
                cfg.strategy,
                &ParameterSet::init(&model, cfg.strategy.modulation(), cfg.seed)?,
            )?;
            ck.state
        }
        None => TrainState::init(&model, &tcfg)?,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ck_path = out.join(CHECKPOINT);
    let log_path = out.join(TRAIN_LOG);
    let append = resume.is_some() && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| Error::io(&log_path, std::io::Error::other(e));
    if !append {
        log.write_record(["epoch", "strategy", "task", "support_loss", "query_loss", "wall_ms"])
            .map_err(csv_err)?;
    }
    let save = |state: &TrainState<f32>| Checkpoint::new(cfg.strategy, cfg.to_text(), state.clone()).save(&ck_path);
    let mut outcome = TrainOutcome::default();
    if resume.is_none() {
        save(&state)?;
    }
    while state.epoch < cfg.epochs as u64 {
        let started = Instant::now();
        let report = meta_train_epoch(&model, &tcfg, &mut state, &tasks)?;
        let wall_ms = if deterministic {
            0
        } else {
            started.elapsed().as_millis()
        };
        for r in &report.records {
            log.write_record([
                r.epoch.to_string(),
                r.strategy.clone(),
                r.task.clone(),
                r.support_loss.to_string(),
                r.query_loss.to_string(),
                wall_ms.to_string(),
            ])
            .map_err(csv_err)?;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        outcome.epochs_run += 1;
        outcome.last_meta_loss = Some(report.meta_loss);
        if cfg.save_interval > 0 && state.epoch % cfg.save_interval as u64 == 0 {
            save(&state)?;
        }
    }
    save(&state)?;
    outcome.final_epoch = state.epoch;
    Ok(outcome)
}

/// Loads a checkpoint and checks it against the configuration.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<ParameterSet<f32>> {
    let ck = Checkpoint::load(path)?;
    let expected = ParameterSet::init(&cfg.model(), cfg.strategy.modulation(), cfg.seed)?;
    ck.check_compatible(cfg.strategy, &expected)?;
    Ok(ck.state.params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub samples: usize,
    pub rows: Vec<MethodSummary>,
    /// Support loss before each adaptation step and after the last.
    pub adapt_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: String,
    pub adapt_mode: String,
    pub adapt_steps: usize,
    pub split: String,
    pub tasks: Vec<TaskSummary>,
}

pub const MODEL_METHOD: &str = "model";
pub const ZERO_FILLED_METHOD: &str = "zero_filled";

/// Evaluates a checkpoint with `adapt` and writes `metrics.csv` and
/// `summary.json` to `out`.
pub fn eval(
    cfg: &RunConfig,
    data_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    adapt: &AdaptConfig,
    split: Split,
) -> Result<Summary> {
    adapt.validate()?;
    let params = load_model(cfg, checkpoint)?;
    let data = Dataset::read(cfg, data_dir)?;
    let tasks = evaluation_tasks(cfg, &data, split)?;
    let evals = evaluate(
        &cfg.model(),
        cfg.strategy.modulation(),
        &params,
        &tasks,
        adapt,
        cfg.loss,
    )?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_metrics(&out.join(METRICS), &evals)?;
    let summary = Summary {
        strategy: cfg.strategy.tag().into(),
        adapt_mode: adapt.mode.tag().into(),
        adapt_steps: if adapt.mode == AdaptMode::OnTheFly {
            0
        } else {
            adapt.steps
        },
        split: split.tag().into(),
        tasks: evals.iter().map(task_summary).collect(),
    };
    let path = out.join(SUMMARY);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

fn task_summary(e: &TaskEvaluation) -> TaskSummary {
    let row = |method: &str, psnr: (f64, f64), ssim: (f64, f64)| MethodSummary {
        method: method.into(),
        psnr_mean: psnr.0,
        psnr_std: psnr.1,
        ssim_mean: ssim.0,
        ssim_std: ssim.1,
    };
    TaskSummary {
        task: e.task.clone(),
        samples: e.records.len(),
        rows: vec![
            row(MODEL_METHOD, e.psnr, e.ssim),
            row(ZERO_FILLED_METHOD, e.baseline_psnr, e.baseline_ssim),
        ],
        adapt_trace: e.trace.clone(),
    }
}

fn write_metrics(path: &Path, evals: &[TaskEvaluation]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["task", "sample", "method", "psnr", "ssim"])
        .map_err(io)?;
    for e in evals {
        for (method, records) in [(MODEL_METHOD, &e.records), (ZERO_FILLED_METHOD, &e.baseline)] {
            for r in records {
                w.write_record([
                    r.task.clone(),
                    r.sample.to_string(),
                    method.into(),
                    r.psnr.to_string(),
                    r.ssim.to_string(),
                ])
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Layer-wise CKA profile of a checkpoint, written to `cka.csv`.
pub fn analyze_cka(
    cfg: &RunConfig,
    data_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    split: Split,
) -> Result<CkaProfile> {
    let params = load_model(cfg, checkpoint)?;
    let data = Dataset::read(cfg, data_dir)?;
    let tasks = evaluation_tasks(cfg, &data, split)?;
    let profile = cka_profile(&cfg.model(), cfg.strategy.modulation(), &params, &tasks, cfg.cka_budget)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(CKA);
    let io = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record(["layer", "mean", "std"]).map_err(io)?;
    for l in &profile.layers {
        w.write_record([l.layer.clone(), l.mean.to_string(), l.std.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(profile)
}

pub fn default_checkpoint(out: &Path) -> PathBuf {
    out.join(CHECKPOINT)
}
