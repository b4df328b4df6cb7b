use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::meta::{AdaptConfig, AdaptMode, InnerMode, Strategy, TrainConfig};
use crate::model::{BaseNetConfig, EncoderConfig, HyperNetConfig, LossKind, ModelConfig};
use crate::tasks::{Contrast, MaskSpec, MaskType};

/// Flat `key = value` run configuration. Lines starting with `#` are
/// comments; every key is optional and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub contrasts: Vec<Contrast>,
    pub train_images: usize,
    pub test_images: usize,
    pub image_size: usize,
    pub train_masks: Vec<MaskType>,
    pub train_accelerations: Vec<f64>,
    pub eval_masks: Vec<MaskType>,
    pub eval_accelerations: Vec<f64>,
    pub center_fraction: f64,
    pub split_ratio: f64,
    pub noise_sigma: f64,
    pub seed: u64,

    pub strategy: Strategy,
    pub outer_lr: f64,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub task_batch: usize,
    pub support_batch: usize,
    pub query_batch: usize,
    pub epochs: usize,
    pub inner_mode: InnerMode,
    pub loss: LossKind,
    pub save_interval: usize,

    pub adapt_mode: AdaptMode,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
    pub cka_budget: usize,

    pub base_channels: Vec<usize>,
    pub base_bottleneck: usize,
    pub kernel_size: usize,
    pub embed_dim: usize,
    pub hyper_bottleneck: usize,
    pub rank: usize,
    pub encoder_channels: Vec<usize>,
    pub aux_weight: f64,
    pub lambda: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let adapt = AdaptConfig::default();
        RunConfig {
            data_dir: PathBuf::from("data"),
            contrasts: vec![Contrast(0), Contrast(1)],
            train_images: 60,
            test_images: 20,
            image_size: 32,
            train_masks: vec![MaskType::Cartesian, MaskType::Gaussian],
            train_accelerations: vec![4.0, 8.0],
            eval_masks: vec![MaskType::Cartesian, MaskType::Gaussian],
            eval_accelerations: vec![6.0],
            center_fraction: 0.08,
            split_ratio: 0.5,
            noise_sigma: 0.0,
            seed: train.seed,
            strategy: train.strategy,
            outer_lr: train.outer_lr,
            inner_lr: train.inner_lr,
            inner_steps: train.inner_steps,
            task_batch: train.task_batch,
            support_batch: train.support_batch,
            query_batch: train.query_batch,
            epochs: train.epochs,
            inner_mode: train.inner_mode,
            loss: train.loss,
            save_interval: 50,
            adapt_mode: AdaptMode::AdaptBase,
            adapt_steps: adapt.steps,
            adapt_lr: adapt.lr,
            cka_budget: 10240,
            base_channels: model.base.channels,
            base_bottleneck: model.base.bottleneck,
            kernel_size: model.base.kernel_size,
            embed_dim: model.hyper.embed_dim,
            hyper_bottleneck: model.hyper.bottleneck,
            rank: model.hyper.rank,
            encoder_channels: model.encoder.channels,
            aux_weight: model.aux_weight,
            lambda: model.lambda,
        }
    }
}

/// Key, description; defaults come from [`RunConfig::default`].
const KEYS: &[(&str, &str)] = &[
    ("data_dir", "dataset directory written by gen-data"),
    ("contrasts", "comma-separated contrast tags (T1, T2, PD, FLAIR, C<n>)"),
    ("train_images", "phantoms per contrast in the train split"),
    ("test_images", "phantoms per contrast in the test split"),
    ("image_size", "phantom height and width"),
    ("train_masks", "training mask types (C, G)"),
    ("train_accelerations", "training acceleration factors"),
    ("eval_masks", "evaluation mask types (C, G)"),
    ("eval_accelerations", "evaluation acceleration factors"),
    ("center_fraction", "fully sampled central fraction of k-space"),
    ("split_ratio", "support fraction of each task"),
    ("noise_sigma", "complex k-space noise std"),
    ("seed", "base seed for data, initialization and batching"),
    ("strategy", "joint | maml | mmaml | km_maml"),
    ("outer_lr", "Adam learning rate of the outer update"),
    ("inner_lr", "inner-loop step size"),
    ("inner_steps", "inner-loop gradient steps"),
    ("task_batch", "tasks per meta-step"),
    ("support_batch", "support samples per task and step"),
    ("query_batch", "query samples per task and step"),
    ("epochs", "meta-steps (one task mini-batch each)"),
    ("inner_mode", "first_order | unrolled"),
    ("loss", "complex | magnitude L1"),
    ("save_interval", "epochs between checkpoints (0: only at the end)"),
    (
        "adapt_mode",
        "adaptation used by `adapt`: on_the_fly | adapt_base | adapt_hypernet",
    ),
    ("adapt_steps", "fine-tuning gradient steps"),
    ("adapt_lr", "fine-tuning step size"),
    ("cka_budget", "activation rows per task and layer for CKA"),
    ("base_channels", "base encoder channels per level"),
    ("base_bottleneck", "base bottleneck channels"),
    ("kernel_size", "base kernel size"),
    ("embed_dim", "context embedding size"),
    ("hyper_bottleneck", "hypernetwork hidden units"),
    ("rank", "modulation rank"),
    ("encoder_channels", "context encoder channels"),
    ("aux_weight", "weight of the autoencoder loss"),
    ("lambda", "data-fidelity weight (inf: hard replacement)"),
];

fn keys() -> impl Iterator<Item = (&'static str, &'static str)> {
    KEYS.iter().copied()
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn list<T>(key: &str, value: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s).map_err(|e| invalid(key, e.to_string())))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(invalid(key, "list must not be empty"));
    }
    Ok(items)
}

fn scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| invalid(key, format!("cannot parse `{value}`: {e}")))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses and validates configuration text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format {
                    what: "config",
                    detail: format!("line {}: expected `key = value`, got `{line}`", lineno + 1),
                });
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(invalid(key, "given more than once"));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "contrasts" => self.contrasts = list(key, v, str::parse)?,
            "train_images" => self.train_images = scalar(key, v)?,
            "test_images" => self.test_images = scalar(key, v)?,
            "image_size" => self.image_size = scalar(key, v)?,
            "train_masks" => self.train_masks = list(key, v, str::parse)?,
            "train_accelerations" => self.train_accelerations = list(key, v, |s| scalar(key, s))?,
            "eval_masks" => self.eval_masks = list(key, v, str::parse)?,
            "eval_accelerations" => self.eval_accelerations = list(key, v, |s| scalar(key, s))?,
            "center_fraction" => self.center_fraction = scalar(key, v)?,
            "split_ratio" => self.split_ratio = scalar(key, v)?,
            "noise_sigma" => self.noise_sigma = scalar(key, v)?,
            "seed" => self.seed = scalar(key, v)?,
            "strategy" => self.strategy = v.parse().map_err(|e: Error| invalid(key, e.to_string()))?,
            "outer_lr" => self.outer_lr = scalar(key, v)?,
            "inner_lr" => self.inner_lr = scalar(key, v)?,
            "inner_steps" => self.inner_steps = scalar(key, v)?,
            "task_batch" => self.task_batch = scalar(key, v)?,
            "support_batch" => self.support_batch = scalar(key, v)?,
            "query_batch" => self.query_batch = scalar(key, v)?,
            "epochs" => self.epochs = scalar(key, v)?,
            "inner_mode" => self.inner_mode = v.parse().map_err(|e: Error| invalid(key, e.to_string()))?,
            "loss" => {
                self.loss = match v {
                    "complex" => LossKind::Complex,
                    "magnitude" => LossKind::Magnitude,
                    _ => return Err(invalid(key, format!("unknown loss `{v}` (complex, magnitude)"))),
                }
            }
            "save_interval" => self.save_interval = scalar(key, v)?,
            "adapt_mode" => self.adapt_mode = v.parse().map_err(|e: Error| invalid(key, e.to_string()))?,
            "adapt_steps" => self.adapt_steps = scalar(key, v)?,
            "adapt_lr" => self.adapt_lr = scalar(key, v)?,
            "cka_budget" => self.cka_budget = scalar(key, v)?,
            "base_channels" => self.base_channels = list(key, v, |s| scalar(key, s))?,
            "base_bottleneck" => self.base_bottleneck = scalar(key, v)?,
            "kernel_size" => self.kernel_size = scalar(key, v)?,
            "embed_dim" => self.embed_dim = scalar(key, v)?,
            "hyper_bottleneck" => self.hyper_bottleneck = scalar(key, v)?,
            "rank" => self.rank = scalar(key, v)?,
            "encoder_channels" => self.encoder_channels = list(key, v, |s| scalar(key, s))?,
            "aux_weight" => self.aux_weight = scalar(key, v)?,
            "lambda" => self.lambda = scalar(key, v)?,
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    /// Current value of every key, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let loss = match self.loss {
            LossKind::Complex => "complex",
            LossKind::Magnitude => "magnitude",
        };
        let letters = |m: &[MaskType]| m.iter().map(|t| t.letter().to_string()).collect::<Vec<_>>().join(",");
        keys()
            .map(|(k, _)| {
                let v = match k {
                    "data_dir" => self.data_dir.display().to_string(),
                    "contrasts" => join(&self.contrasts),
                    "train_images" => self.train_images.to_string(),
                    "test_images" => self.test_images.to_string(),
                    "image_size" => self.image_size.to_string(),
                    "train_masks" => letters(&self.train_masks),
                    "train_accelerations" => join(&self.train_accelerations),
                    "eval_masks" => letters(&self.eval_masks),
                    "eval_accelerations" => join(&self.eval_accelerations),
                    "center_fraction" => self.center_fraction.to_string(),
                    "split_ratio" => self.split_ratio.to_string(),
                    "noise_sigma" => self.noise_sigma.to_string(),
                    "seed" => self.seed.to_string(),
                    "strategy" => self.strategy.tag().into(),
                    "outer_lr" => self.outer_lr.to_string(),
                    "inner_lr" => self.inner_lr.to_string(),
                    "inner_steps" => self.inner_steps.to_string(),
                    "task_batch" => self.task_batch.to_string(),
                    "support_batch" => self.support_batch.to_string(),
                    "query_batch" => self.query_batch.to_string(),
                    "epochs" => self.epochs.to_string(),
                    "inner_mode" => self.inner_mode.tag().into(),
                    "loss" => loss.into(),
                    "save_interval" => self.save_interval.to_string(),
                    "adapt_mode" => self.adapt_mode.tag().into(),
                    "adapt_steps" => self.adapt_steps.to_string(),
                    "adapt_lr" => self.adapt_lr.to_string(),
                    "cka_budget" => self.cka_budget.to_string(),
                    "base_channels" => join(&self.base_channels),
                    "base_bottleneck" => self.base_bottleneck.to_string(),
                    "kernel_size" => self.kernel_size.to_string(),
                    "embed_dim" => self.embed_dim.to_string(),
                    "hyper_bottleneck" => self.hyper_bottleneck.to_string(),
                    "rank" => self.rank.to_string(),
                    "encoder_channels" => join(&self.encoder_channels),
                    "aux_weight" => self.aux_weight.to_string(),
                    "lambda" => self.lambda.to_string(),
                    other => unreachable!("undocumented key {other}"),
                };
                (k, v)
            })
            .collect()
    }

    /// Canonical text; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Key reference with defaults, for `--help`.
    pub fn reference() -> String {
        let defaults = RunConfig::default().entries();
        let mut out = String::from("Config keys (key = default: meaning):\n");
        for ((k, doc), (_, v)) in keys().zip(defaults) {
            out.push_str(&format!("  {k} = {v}: {doc}\n"));
        }
        out
    }

    /// Checks every constraint, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train_images", self.train_images),
            ("test_images", self.test_images),
            ("image_size", self.image_size),
            ("task_batch", self.task_batch),
            ("support_batch", self.support_batch),
            ("query_batch", self.query_batch),
            ("base_bottleneck", self.base_bottleneck),
            ("embed_dim", self.embed_dim),
            ("hyper_bottleneck", self.hyper_bottleneck),
            ("rank", self.rank),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(invalid(key, "must be >= 1"));
            }
        }
        if self.cka_budget < 2 {
            return Err(invalid("cka_budget", "must be >= 2"));
        }
        for (key, v) in [
            ("outer_lr", self.outer_lr),
            ("inner_lr", self.inner_lr),
            ("adapt_lr", self.adapt_lr),
            ("noise_sigma", self.noise_sigma),
            ("aux_weight", self.aux_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lambda > 0.0) {
            return Err(invalid("lambda", format!("must be > 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.center_fraction) {
            return Err(invalid("center_fraction", "must lie in [0, 1]"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(invalid("split_ratio", "must lie in (0, 1)"));
        }
        for (key, accs) in [
            ("train_accelerations", &self.train_accelerations),
            ("eval_accelerations", &self.eval_accelerations),
        ] {
            if accs.iter().any(|&a| !(a >= 1.0 && a.is_finite())) {
                return Err(invalid(key, "accelerations must be finite and >= 1"));
            }
        }
        if self.base_channels.contains(&0) {
            return Err(invalid("base_channels", "channels must be >= 1"));
        }
        if self.encoder_channels.contains(&0) {
            return Err(invalid("encoder_channels", "channels must be >= 1"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(invalid("kernel_size", "must be odd"));
        }
        for (key, n) in [("train_images", self.train_images), ("test_images", self.test_images)] {
            let support = (n as f64 * self.split_ratio).round() as usize;
            if support == 0 || support == n {
                return Err(invalid(
                    key,
                    format!(
                        "{n} images leave an empty support or query set at split_ratio {}",
                        self.split_ratio
                    ),
                ));
            }
        }
        let model = self.model();
        model
            .check_image_size(self.image_size, self.image_size, self.strategy.modulation())
            .map_err(|e| invalid("image_size", e.to_string()))?;
        model.validate().map_err(|e| invalid("base_channels", e.to_string()))?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            base: BaseNetConfig {
                channels: self.base_channels.clone(),
                bottleneck: self.base_bottleneck,
                kernel_size: self.kernel_size,
                ..BaseNetConfig::default()
            },
            hyper: HyperNetConfig {
                embed_dim: self.embed_dim,
                bottleneck: self.hyper_bottleneck,
                rank: self.rank,
            },
            encoder: EncoderConfig {
                channels: self.encoder_channels.clone(),
                kernel_size: self.kernel_size,
            },
            aux_weight: self.aux_weight,
            lambda: self.lambda,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            strategy: self.strategy,
            outer_lr: self.outer_lr,
            inner_lr: self.inner_lr,
            inner_steps: self.inner_steps,
            task_batch: self.task_batch,
            support_batch: self.support_batch,
            query_batch: self.query_batch,
            epochs: self.epochs,
            inner_mode: self.inner_mode,
            seed: self.seed,
            loss: self.loss,
        }
    }

    pub fn adapt(&self) -> AdaptConfig {
        AdaptConfig {
            mode: self.adapt_mode,
            steps: self.adapt_steps,
            lr: self.adapt_lr,
        }
    }

    fn masks(&self, types: &[MaskType], accs: &[f64]) -> Vec<MaskSpec> {
        types
            .iter()
            .flat_map(|&t| accs.iter().map(move |&a| MaskSpec::new(t, a, self.center_fraction)))
            .collect()
    }

    pub fn train_masks(&self) -> Vec<MaskSpec> {
        self.masks(&self.train_masks, &self.train_accelerations)
    }

    pub fn eval_masks(&self) -> Vec<MaskSpec> {
        self.masks(&self.eval_masks, &self.eval_accelerations)
    }
}
