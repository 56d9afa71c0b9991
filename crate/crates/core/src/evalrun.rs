//! Evaluation, the round-based active-learning protocol, and experiment
//! configuration.
//!
//! One round: score unlabeled regions with the previous model (random in
//! round 1), query the oracle up to the click budget, reinitialize the model,
//! train stage 1 on the region labels, build pseudo labels from that stage-1
//! model, continue with stage 2, and evaluate on the held-out split.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::acquisition::{
    estimate_class_distribution, score_regions, select_batch, write_scores_csv, AcquisitionScore,
    ClassDistribution, Sampler, ScoringInput,
};
use crate::dataio::{
    load_dataset_dir, mask_id, synthetic_samples, write_mean_results, write_results, JsonLines, Mask, Sample,
    SyntheticSpec, UNDEF,
};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, featurize, predict_map, FeatureMap, ModelDims, ModelParams, FEATURE_DIM};
use crate::oracle::{LabelMode, LabeledPool, Oracle};
use crate::pseudolabel::{build_pseudo_dataset, PseudoOptions, PseudoSource};
use crate::superpixel::{grid_partition, region_adjacency, slic_partition, AdjacencyGraph, Partition, SlicParams};
use crate::training::{train_stage1, train_stage2, AdamWConfig, LossWeights, TrainConfig, TrainSet};
use crate::{derive_seed, mix64};

// ---------------------------------------------------------------------------
// mIoU
// ---------------------------------------------------------------------------

/// Intersection and union counts per semantic class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(class_count: usize) -> Self {
        Self {
            intersection: vec![0; class_count],
            union: vec![0; class_count],
        }
    }

    /// Accumulate one prediction. Pixels whose ground truth is UNDEF are
    /// ignored; a predicted UNDEF counts as a miss for the true class.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch(format!("prediction {} vs ground truth {} pixels", pred.len(), gt.len())));
        }
        let c = self.intersection.len();
        for (&p, &g) in pred.iter().zip(gt) {
            if g == UNDEF {
                continue;
            }
            let g = g as usize;
            if p as usize == g {
                self.intersection[g] += 1;
                self.union[g] += 1;
            } else {
                self.union[g] += 1;
                if (p as usize) < c {
                    self.union[p as usize] += 1;
                }
            }
        }
        Ok(())
    }

    /// Per-class IoU (NaN for classes absent from both) and their mean.
    pub fn finish(&self) -> Result<(f64, Vec<f64>)> {
        let ious: Vec<f64> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| if u == 0 { f64::NAN } else { i as f64 / u as f64 })
            .collect();
        let valid: Vec<f64> = ious.iter().copied().filter(|v| !v.is_nan()).collect();
        if valid.is_empty() {
            return Err(Error::NoEvaluableClass);
        }
        Ok((valid.iter().sum::<f64>() / valid.len() as f64, ious))
    }
}

pub fn miou(pred: &Mask, gt: &Mask) -> Result<(f64, Vec<f64>)> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut counts = IouCounts::new(gt.class_count());
    counts.add(pred.data(), gt.data())?;
    counts.finish()
}

/// Predicted mask ids for every pixel.
pub fn predict_mask(features: &FeatureMap, params: &ModelParams, class_count: usize) -> Result<Vec<u8>> {
    let probs = predict_map(features, params)?;
    Ok(argmax_rows(&probs).into_iter().map(|k| mask_id(k, class_count)).collect())
}

/// Dataset-level mIoU of `params` over the given feature maps and masks.
pub fn evaluate(features: &[FeatureMap], masks: &[Mask], params: &ModelParams, class_count: usize) -> Result<(f64, Vec<f64>)> {
    let mut counts = IouCounts::new(class_count);
    for (f, m) in features.iter().zip(masks) {
        counts.add(&predict_mask(f, params, class_count)?, m.data())?;
    }
    counts.finish()
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Partitioner {
    Slic,
    Grid,
}

impl FromStr for Partitioner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slic" => Ok(Partitioner::Slic),
            "grid" => Ok(Partitioner::Grid),
            other => Err(Error::Config(format!("unknown partitioner `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        spec: SyntheticSpec,
        train_count: usize,
        val_count: usize,
        /// Train images use seeds `data_seed..`, validation images
        /// `data_seed + VAL_SEED_OFFSET..`.
        data_seed: u64,
    },
    Dirs {
        train: PathBuf,
        val: PathBuf,
    },
}

pub const VAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub budget: usize,
    pub mode: LabelMode,
    pub sampler: Sampler,
    pub nu: f64,
    pub weights: LossWeights,
    pub temperature: f64,
    pub region_size: usize,
    pub partitioner: Partitioner,
    pub slic_compactness: f64,
    pub slic_iterations: usize,
    pub hidden: usize,
    pub embed: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub stage1_regions: usize,
    pub stage1_pixels: usize,
    pub stage2_batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub pseudo: PseudoOptions,
    /// Pixels drawn to estimate the class distribution; 0 uses all pixels.
    pub distribution_pixels: usize,
    pub dump_scores: bool,
    pub data: DataSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            budget: 600,
            mode: LabelMode::MultiClass,
            sampler: Sampler::PixBal,
            nu: 6.0,
            weights: LossWeights::default(),
            temperature: 0.1,
            region_size: 16,
            partitioner: Partitioner::Slic,
            slic_compactness: 10.0,
            slic_iterations: 10,
            hidden: 32,
            embed: 16,
            stage1_lr: 2e-3,
            stage2_lr: 4e-3,
            stage1_iterations: 300,
            stage2_iterations: 300,
            stage1_regions: 16,
            stage1_pixels: 64,
            stage2_batch: 1024,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            seeds: vec![0],
            pseudo: PseudoOptions::default(),
            distribution_pixels: 0,
            dump_scores: false,
            data: DataSource::Synthetic {
                spec: default_synthetic_spec(),
                train_count: 50,
                val_count: 20,
                data_seed: 0,
            },
        }
    }
}

pub fn default_synthetic_spec() -> SyntheticSpec {
    SyntheticSpec {
        width: 128,
        height: 128,
        class_count: 6,
        site_count: 150,
        noise_std: 0.10,
        class_frequency_skew: 2.5,
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl ExperimentConfig {
    fn synthetic_mut(&mut self, key: &str) -> Result<(&mut SyntheticSpec, &mut usize, &mut usize, &mut u64)> {
        if let DataSource::Dirs { .. } = self.data {
            return Err(Error::Config(format!("`{key}` conflicts with train_dir/val_dir")));
        }
        match &mut self.data {
            DataSource::Synthetic {
                spec,
                train_count,
                val_count,
                data_seed,
            } => Ok((spec, train_count, val_count, data_seed)),
            DataSource::Dirs { .. } => unreachable!(),
        }
    }

    /// Set one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "rounds" => self.rounds = parse(key, v)?,
            "budget" => self.budget = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "sampler" => self.sampler = v.parse()?,
            "nu" => self.nu = parse(key, v)?,
            "lambda_ce" => self.weights.ce = parse(key, v)?,
            "lambda_mp" => self.weights.mp = parse(key, v)?,
            "lambda_pp" => self.weights.pp = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "region_size" => self.region_size = parse(key, v)?,
            "partitioner" => self.partitioner = v.parse()?,
            "slic_compactness" => self.slic_compactness = parse(key, v)?,
            "slic_iterations" => self.slic_iterations = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "embed" => self.embed = parse(key, v)?,
            "stage1_lr" => self.stage1_lr = parse(key, v)?,
            "stage2_lr" => self.stage2_lr = parse(key, v)?,
            "stage1_iterations" => self.stage1_iterations = parse(key, v)?,
            "stage2_iterations" => self.stage2_iterations = parse(key, v)?,
            "stage1_regions" => self.stage1_regions = parse(key, v)?,
            "stage1_pixels" => self.stage1_pixels = parse(key, v)?,
            "stage2_batch" => self.stage2_batch = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "seed" => self.seeds = vec![parse(key, v)?],
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<u64>>>()?
            }
            "localization" => self.pseudo.localization = parse_bool(key, v)?,
            "expansion" => self.pseudo.expansion = parse_bool(key, v)?,
            "distribution_pixels" => self.distribution_pixels = parse(key, v)?,
            "dump_scores" => self.dump_scores = parse_bool(key, v)?,
            "train_dir" | "val_dir" => {
                let (mut train, mut val) = match &self.data {
                    DataSource::Dirs { train, val } => (train.clone(), val.clone()),
                    DataSource::Synthetic { .. } => (PathBuf::new(), PathBuf::new()),
                };
                if key.trim() == "train_dir" {
                    train = PathBuf::from(v);
                } else {
                    val = PathBuf::from(v);
                }
                self.data = DataSource::Dirs { train, val };
            }
            "synthetic_width" => self.synthetic_mut(key)?.0.width = parse(key, v)?,
            "synthetic_height" => self.synthetic_mut(key)?.0.height = parse(key, v)?,
            "synthetic_classes" => self.synthetic_mut(key)?.0.class_count = parse(key, v)?,
            "synthetic_sites" => self.synthetic_mut(key)?.0.site_count = parse(key, v)?,
            "synthetic_noise" => self.synthetic_mut(key)?.0.noise_std = parse(key, v)?,
            "synthetic_skew" => self.synthetic_mut(key)?.0.class_frequency_skew = parse(key, v)?,
            "train_count" => *self.synthetic_mut(key)?.1 = parse(key, v)?,
            "val_count" => *self.synthetic_mut(key)?.2 = parse(key, v)?,
            "data_seed" => *self.synthetic_mut(key)?.3 = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parse flat `key = value` text on top of the defaults. `#` starts a
    /// comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Canonical text form; `from_text(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("rounds", self.rounds.to_string());
        kv("budget", self.budget.to_string());
        kv("mode", self.mode.to_string());
        kv("sampler", self.sampler.to_string());
        kv("nu", self.nu.to_string());
        kv("lambda_ce", self.weights.ce.to_string());
        kv("lambda_mp", self.weights.mp.to_string());
        kv("lambda_pp", self.weights.pp.to_string());
        kv("temperature", self.temperature.to_string());
        kv("region_size", self.region_size.to_string());
        kv(
            "partitioner",
            match self.partitioner {
                Partitioner::Slic => "slic",
                Partitioner::Grid => "grid",
            }
            .into(),
        );
        kv("slic_compactness", self.slic_compactness.to_string());
        kv("slic_iterations", self.slic_iterations.to_string());
        kv("hidden", self.hidden.to_string());
        kv("embed", self.embed.to_string());
        kv("stage1_lr", self.stage1_lr.to_string());
        kv("stage2_lr", self.stage2_lr.to_string());
        kv("stage1_iterations", self.stage1_iterations.to_string());
        kv("stage2_iterations", self.stage2_iterations.to_string());
        kv("stage1_regions", self.stage1_regions.to_string());
        kv("stage1_pixels", self.stage1_pixels.to_string());
        kv("stage2_batch", self.stage2_batch.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("seeds", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        kv("localization", self.pseudo.localization.to_string());
        kv("expansion", self.pseudo.expansion.to_string());
        kv("distribution_pixels", self.distribution_pixels.to_string());
        kv("dump_scores", self.dump_scores.to_string());
        match &self.data {
            DataSource::Synthetic {
                spec,
                train_count,
                val_count,
                data_seed,
            } => {
                kv("synthetic_width", spec.width.to_string());
                kv("synthetic_height", spec.height.to_string());
                kv("synthetic_classes", spec.class_count.to_string());
                kv("synthetic_sites", spec.site_count.to_string());
                kv("synthetic_noise", spec.noise_std.to_string());
                kv("synthetic_skew", spec.class_frequency_skew.to_string());
                kv("train_count", train_count.to_string());
                kv("val_count", val_count.to_string());
                kv("data_seed", data_seed.to_string());
            }
            DataSource::Dirs { train, val } => {
                kv("train_dir", train.display().to_string());
                kv("val_dir", val.display().to_string());
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        if self.budget == 0 {
            return bad("budget must be >= 1");
        }
        for (name, lr) in [("stage1_lr", self.stage1_lr), ("stage2_lr", self.stage2_lr)] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.nu >= 0.0) {
            return bad("nu must be >= 0");
        }
        if !(self.weights.ce >= 0.0 && self.weights.mp >= 0.0 && self.weights.pp >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if self.hidden == 0 || self.embed == 0 {
            return bad("hidden and embed must be >= 1");
        }
        if self.stage1_regions == 0 || self.stage1_pixels == 0 || self.stage2_batch == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("AdamW needs beta1, beta2 in [0, 1) and eps > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.region_size < 2 {
            return bad("region_size must be >= 2");
        }
        if self.partitioner == Partitioner::Slic && self.slic_iterations == 0 {
            return bad("slic_iterations must be >= 1");
        }
        match &self.data {
            DataSource::Synthetic {
                spec,
                train_count,
                val_count,
                ..
            } => {
                spec.validate()?;
                if *train_count == 0 || *val_count == 0 {
                    return bad("train_count and val_count must be >= 1");
                }
            }
            DataSource::Dirs { train, val } => {
                if train.as_os_str().is_empty() || val.as_os_str().is_empty() {
                    return bad("both train_dir and val_dir are required");
                }
            }
        }
        Ok(())
    }

    fn optimizer(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    fn stage1_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.stage1_iterations,
            regions_per_batch: self.stage1_regions,
            pixels_per_region: self.stage1_pixels,
            optimizer: self.optimizer(self.stage1_lr),
            weights: self.weights,
            seed,
        }
    }

    fn stage2_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.stage2_iterations,
            regions_per_batch: self.stage2_batch,
            pixels_per_region: 1,
            optimizer: self.optimizer(self.stage2_lr),
            weights: LossWeights {
                ce: 1.0,
                mp: 0.0,
                pp: 0.0,
            },
            seed,
        }
    }
}

// ---------------------------------------------------------------------------
// workspace and rounds
// ---------------------------------------------------------------------------

/// Loaded data with everything precomputed that does not change across
/// rounds.
pub struct Workspace {
    pub class_count: usize,
    pub train_names: Vec<String>,
    pub train_masks: Vec<Mask>,
    pub train_features: Vec<FeatureMap>,
    pub partitions: Vec<Partition>,
    pub adjacency: Vec<AdjacencyGraph>,
    pub val_masks: Vec<Mask>,
    pub val_features: Vec<FeatureMap>,
}

impl Workspace {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let (train, val) = match &config.data {
            DataSource::Synthetic {
                spec,
                train_count,
                val_count,
                data_seed,
            } => (
                synthetic_samples(spec, *data_seed, *train_count)?,
                synthetic_samples(spec, data_seed + VAL_SEED_OFFSET, *val_count)?,
            ),
            DataSource::Dirs { train, val } => (load_dataset_dir(train)?, load_dataset_dir(val)?),
        };
        Self::from_samples(train, val, config)
    }

    pub fn from_samples(train: Vec<Sample>, val: Vec<Sample>, config: &ExperimentConfig) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("train and val splits must be non-empty".into()));
        }
        let class_count = train[0].mask.class_count();
        if train.iter().chain(&val).any(|s| s.mask.class_count() != class_count) {
            return Err(Error::Config("train and val class counts differ".into()));
        }
        let slic = SlicParams {
            target_size: config.region_size,
            compactness: config.slic_compactness,
            iterations: config.slic_iterations,
        };
        let partitions = train
            .iter()
            .map(|s| match config.partitioner {
                Partitioner::Slic => slic_partition(&s.image, &slic),
                Partitioner::Grid => Ok(grid_partition(&s.image, config.region_size)),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_count,
            train_names: train.iter().map(|s| s.name.clone()).collect(),
            adjacency: partitions.iter().map(region_adjacency).collect(),
            partitions,
            train_features: train.iter().map(|s| featurize(&s.image)).collect(),
            train_masks: train.into_iter().map(|s| s.mask).collect(),
            val_features: val.iter().map(|s| featurize(&s.image)).collect(),
            val_masks: val.into_iter().map(|s| s.mask).collect(),
        })
    }

    pub fn region_count(&self) -> usize {
        self.partitions.iter().map(Partition::region_count).sum()
    }

    fn dims(&self, config: &ExperimentConfig) -> ModelDims {
        ModelDims {
            features: FEATURE_DIM,
            hidden: config.hidden,
            embed: config.embed,
            classes: self.class_count + 1,
        }
    }
}

/// Protocol state carried from round to round.
#[derive(Clone, Debug)]
pub struct RunState {
    pub seed: u64,
    pub round: usize,
    pub pool: LabeledPool,
    pub params: Option<ModelParams>,
    pub cum_clicks: usize,
}

impl RunState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            round: 0,
            pool: LabeledPool::new(),
            params: None,
            cum_clicks: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub cum_clicks: usize,
    pub clicks: usize,
    pub overshoot: usize,
    pub regions_labeled: usize,
    pub miou: f64,
    pub per_class_iou: Vec<f64>,
    pub stage1_loss: Option<f64>,
    pub stage2_loss: Option<f64>,
    pub localized_pixels: usize,
    pub expanded_pixels: usize,
}

/// Stable content hash of a parameter set, used as a provenance id.
pub fn model_fingerprint(params: &ModelParams) -> u64 {
    params
        .to_bytes()
        .chunks(8)
        .fold(0u64, |acc, c| {
            let mut b = [0u8; 8];
            b[..c.len()].copy_from_slice(c);
            mix64(acc ^ u64::from_le_bytes(b))
        })
}

const TAG_RANDOM: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_STAGE1: u64 = 3;
const TAG_STAGE2: u64 = 4;
const TAG_DIST: u64 = 5;

fn estimate_distribution(maps: &[Array2<f64>], sample: usize, seed: u64) -> Result<ClassDistribution> {
    let total: usize = maps.iter().map(|m| m.nrows()).sum();
    if sample == 0 || sample >= total {
        let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
        return estimate_class_distribution(&views);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, total, sample).into_vec();
    picks.sort_unstable();
    let mut rows = Array2::zeros((sample, maps[0].ncols()));
    let (mut image, mut offset) = (0, 0);
    for (dst, p) in rows.outer_iter_mut().zip(picks) {
        while p >= offset + maps[image].nrows() {
            offset += maps[image].nrows();
            image += 1;
        }
        let mut dst = dst;
        dst.assign(&maps[image].row(p - offset));
    }
    estimate_class_distribution(&[rows.view()])
}

/// Execute one round; returns the report and the acquisition scores used.
pub fn run_round(
    ws: &Workspace,
    state: &mut RunState,
    config: &ExperimentConfig,
    log: &mut Vec<Value>,
) -> Result<(RoundReport, Vec<AcquisitionScore>)> {
    state.round += 1;
    let round = state.round;
    let seed = state.seed;

    // (1) scoring
    let random_seed = derive_seed(seed, &[TAG_RANDOM]);
    let (sampler, probs) = match &state.params {
        None => (Sampler::Random, None),
        Some(p) => {
            let maps = ws
                .train_features
                .iter()
                .map(|f| predict_map(f, p))
                .collect::<Result<Vec<_>>>()?;
            (config.sampler, Some(maps))
        }
    };
    let distribution = match &probs {
        Some(maps) if matches!(sampler, Sampler::ClassBal | Sampler::PixBal) => {
            let d = estimate_distribution(maps, config.distribution_pixels, derive_seed(seed, &[TAG_DIST, round as u64]))?;
            log.push(json!({
                "event": "class_distribution",
                "round": round,
                "pixels": if config.distribution_pixels == 0 { "all".to_string() } else { config.distribution_pixels.to_string() },
                "estimate": d.probs(),
            }));
            Some(d)
        }
        _ => None,
    };
    let scores = score_regions(
        sampler,
        &ScoringInput {
            partitions: &ws.partitions,
            probs: probs.as_deref(),
            distribution: distribution.as_ref(),
            class_count: ws.class_count,
            nu: config.nu,
            round,
            seed: random_seed,
        },
        &state.pool,
    )?;
    drop(probs);

    // (2) selection
    let mut oracle = Oracle::new(&ws.train_masks, &ws.partitions, config.mode);
    let selection = select_batch(&scores, &state.pool, config.budget, &mut oracle)?;
    for (r, label) in &selection.labels {
        state.pool.insert(*r, label.clone(), round)?;
    }
    state.cum_clicks += oracle.clicks();
    log.push(json!({
        "event": "selection",
        "round": round,
        "sampler": sampler.to_string(),
        "regions": selection.labels.len(),
        "clicks": selection.clicks,
        "overshoot": selection.overshoot,
        "cum_clicks": state.cum_clicks,
        "pool_clicks": state.pool.clicks(),
    }));

    // (3) reinitialize, (4) stage 1
    let init = ModelParams::init(ws.dims(config), config.temperature, derive_seed(seed, &[TAG_INIT, round as u64]))?;
    let data = TrainSet {
        features: &ws.train_features,
        partitions: &ws.partitions,
        class_count: ws.class_count,
    };
    let stage1 = train_stage1(&state.pool, data, init, &config.stage1_config(derive_seed(seed, &[TAG_STAGE1, round as u64])))?;
    let stage1_id = model_fingerprint(&stage1.params);
    let stage1_loss = stage1.last_loss().map(|l| l.total);
    log.push(json!({
        "event": "stage1",
        "round": round,
        "model_id": format!("{stage1_id:016x}"),
        "iterations": stage1.history.len(),
        "final_loss": stage1.last_loss(),
    }));

    // (5) pseudo labels from this stage-1 model, (6) stage 2
    let (params, stage2_loss, localized, expanded) = if config.pseudo.localization {
        let pseudo = build_pseudo_dataset(
            &state.pool,
            &ws.partitions,
            &ws.adjacency,
            &ws.train_features,
            &stage1.params,
            ws.class_count,
            config.pseudo,
        )?;
        let localized = pseudo.count(PseudoSource::Localized);
        let expanded = pseudo.count(PseudoSource::Expanded);
        log.push(json!({
            "event": "pseudo_labels",
            "round": round,
            "source_model_id": format!("{stage1_id:016x}"),
            "single": pseudo.count(PseudoSource::Single),
            "localized": localized,
            "expanded": expanded,
        }));
        let stage2 = train_stage2(
            stage1.params,
            &pseudo.pixels(),
            &ws.train_features,
            &config.stage2_config(derive_seed(seed, &[TAG_STAGE2, round as u64])),
        )?;
        let loss = stage2.last_loss().map(|l| l.total);
        log.push(json!({
            "event": "stage2",
            "round": round,
            "model_id": format!("{:016x}", model_fingerprint(&stage2.params)),
            "iterations": stage2.history.len(),
            "final_loss": loss,
        }));
        (stage2.params, loss, localized, expanded)
    } else {
        (stage1.params, None, 0, 0)
    };

    // (7) evaluation
    let (miou, per_class_iou) = evaluate(&ws.val_features, &ws.val_masks, &params, ws.class_count)?;
    state.params = Some(params);
    let report = RoundReport {
        round,
        cum_clicks: state.cum_clicks,
        clicks: selection.clicks,
        overshoot: selection.overshoot,
        regions_labeled: selection.labels.len(),
        miou,
        per_class_iou,
        stage1_loss,
        stage2_loss,
        localized_pixels: localized,
        expanded_pixels: expanded,
    };
    log.push(json!({ "event": "round", "report": &report }));
    Ok((report, scores))
}

/// Output file names inside an experiment directory.
pub fn results_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("results_seed{seed}.csv"))
}

pub fn checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("model_seed{seed}.bin"))
}

pub fn pool_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("pool_seed{seed}.jsonl"))
}

pub fn log_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("log_seed{seed}.jsonl"))
}

pub const MEAN_RESULTS_FILE: &str = "results_mean.csv";

/// All rounds for one seed.
pub fn run_seed(
    ws: &Workspace,
    config: &ExperimentConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<(Vec<RoundReport>, RunState)> {
    let mut state = RunState::new(seed);
    let mut log = vec![json!({
        "event": "start",
        "seed": seed,
        "train_images": ws.partitions.len(),
        "regions": ws.region_count(),
        "class_count": ws.class_count,
    })];
    let mut reports = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let (report, scores) = run_round(ws, &mut state, config, &mut log)?;
        if let (Some(out), true) = (out, config.dump_scores) {
            write_scores_csv(&out.join(format!("scores_seed{seed}_round{}.csv", report.round)), &scores)?;
        }
        reports.push(report);
    }
    if let Some(out) = out {
        write_results(&reports, &results_path(out, seed))?;
        state.pool.write_jsonl(&pool_path(out, seed))?;
        if let Some(p) = &state.params {
            p.save(&checkpoint_path(out, seed))?;
        }
        let mut sink = JsonLines::create(&log_path(out, seed))?;
        for event in &log {
            sink.write(event)?;
        }
        sink.flush()?;
    }
    Ok((reports, state))
}

/// Every configured seed; with an output directory, writes per-seed files
/// and the mean CSV.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<Vec<RoundReport>>> {
    config.validate()?;
    let ws = Workspace::load(config)?;
    run_experiment_on(&ws, config, out)
}

pub fn run_experiment_on(ws: &Workspace, config: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<Vec<RoundReport>>> {
    config.validate()?;
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        fs::write(out.join("config.txt"), config.to_text())?;
    }
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        runs.push(run_seed(ws, config, seed, out)?.0);
    }
    if let Some(out) = out {
        write_mean_results(&runs, &out.join(MEAN_RESULTS_FILE))?;
    }
    Ok(runs)
}

/// Mean over seeds of one round's mIoU.
pub fn mean_miou_at(runs: &[Vec<RoundReport>], round_index: usize) -> f64 {
    runs.iter().map(|r| r[round_index].miou).sum::<f64>() / runs.len() as f64
}

/// Mean over seeds of the mIoU averaged across rounds.
pub fn mean_round_average(runs: &[Vec<RoundReport>]) -> f64 {
    runs.iter()
        .map(|r| r.iter().map(|x| x.miou).sum::<f64>() / r.len() as f64)
        .sum::<f64>()
        / runs.len() as f64
}

// ---------------------------------------------------------------------------
// component ablation
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Every component.
    Full,
    NoExpansion,
    /// Stage 1 only.
    NoPseudoLabels,
    /// Stage 1 without the prototypical-pixel loss.
    MergedPositiveOnly,
    /// Stage 1 without the merged-positive loss.
    PrototypicalOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoExpansion,
        Variant::NoPseudoLabels,
        Variant::MergedPositiveOnly,
        Variant::PrototypicalOnly,
    ];

    pub fn row(self) -> char {
        match self {
            Variant::Full => 'a',
            Variant::NoExpansion => 'b',
            Variant::NoPseudoLabels => 'c',
            Variant::MergedPositiveOnly => 'd',
            Variant::PrototypicalOnly => 'e',
        }
    }

    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoExpansion => c.pseudo.expansion = false,
            Variant::NoPseudoLabels => {
                c.pseudo = PseudoOptions {
                    localization: false,
                    expansion: false,
                }
            }
            Variant::MergedPositiveOnly => {
                c.pseudo = PseudoOptions {
                    localization: false,
                    expansion: false,
                };
                c.weights.pp = 0.0;
            }
            Variant::PrototypicalOnly => {
                c.pseudo = PseudoOptions {
                    localization: false,
                    expansion: false,
                };
                c.weights.mp = 0.0;
            }
        }
        c
    }
}

/// Run every ablation row; writes `ablation.csv` (per-round seed means and
/// the round average) plus each row's experiment files under `row_<x>/`.
pub fn run_ablation(
    ws: &Workspace,
    base: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<(Variant, Vec<Vec<RoundReport>>)>> {
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let cfg = v.apply(base);
        let dir = out.map(|o| o.join(format!("row_{}", v.row())));
        let runs = run_experiment_on(ws, &cfg, dir.as_deref())?;
        rows.push((v, runs));
    }
    if let Some(out) = out {
        fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[(Variant, Vec<Vec<RoundReport>>)]) -> String {
    let rounds = rows.first().map_or(0, |(_, r)| r[0].len());
    let mut s = String::from("row");
    for t in 1..=rounds {
        let _ = write!(s, ",round{t}");
    }
    s.push_str(",avg\n");
    for (v, runs) in rows {
        let _ = write!(s, "{}", v.row());
        for t in 0..rounds {
            let _ = write!(s, ",{:.6}", mean_miou_at(runs, t));
        }
        let _ = writeln!(s, ",{:.6}", mean_round_average(runs));
    }
    s
}
