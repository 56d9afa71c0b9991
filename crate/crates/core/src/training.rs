//! Stage-1 partial-label losses, their exact gradients, AdamW, and the two
//! training loops.
//!
//! Stage 1 combines
//!
//! * cross-entropy over single-class regions,
//! * the merged-positive loss `-log Σ_{c∈Y} P(c|x)` over multi-class regions,
//! * the prototypical-pixel loss: cross-entropy at the most confident pixel
//!   of every candidate class,
//!
//! as `λ_CE·L_CE + λ_MP·L_MP + L_PP`. Every term is a per-pixel
//! `-log Σ_{c∈S} p_c` for some class set `S`, whose logit gradient is
//! `p - q_S` with `q_S` the probabilities renormalized on `S`. Prototype
//! selection is held fixed while differentiating.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataio::model_index;
use crate::error::{Error, Result};
use crate::model::{backward, forward, FeatureMap, ModelGrads, ModelParams};
use crate::oracle::LabeledPool;
use crate::superpixel::Partition;

/// A labeled region inside a batch: a contiguous block of rows plus its
/// candidate classes (model indices, sorted).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSample {
    pub rows: Range<usize>,
    pub classes: Vec<usize>,
}

impl RegionSample {
    pub fn is_single(&self) -> bool {
        self.classes.len() == 1
    }
}

/// Gathered pixel features and the regions they belong to.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Array2<f64>,
    pub regions: Vec<RegionSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossWeights {
    pub ce: f64,
    pub mp: f64,
    /// 1 in the standard objective; 0 disables the prototypical-pixel term.
    pub pp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 16.0,
            mp: 8.0,
            pp: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_mp: f64,
    pub l_pp: f64,
    pub total: f64,
    pub lambda_ce: f64,
    pub lambda_mp: f64,
    pub lambda_pp: f64,
}

impl LossBreakdown {
    pub fn compose(l_ce: f64, l_mp: f64, l_pp: f64, w: LossWeights) -> Self {
        Self {
            l_ce,
            l_mp,
            l_pp,
            total: w.ce * l_ce + w.mp * l_mp + w.pp * l_pp,
            lambda_ce: w.ce,
            lambda_mp: w.mp,
            lambda_pp: w.pp,
        }
    }
}

fn mean_or_zero(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean over single-class regions of the mean pixel `-log P(c|x)`.
pub fn loss_ce(regions: &[RegionSample], probs: ArrayView2<f64>) -> f64 {
    mean_or_zero(regions.iter().filter(|r| r.is_single()).map(|r| {
        let c = r.classes[0];
        mean_or_zero(r.rows.clone().map(|i| -probs[[i, c]].ln()))
    }))
}

/// Mean over the given regions of the mean pixel `-log Σ_{c∈Y} P(c|x)`.
pub fn loss_mp(regions: &[RegionSample], probs: ArrayView2<f64>) -> f64 {
    mean_or_zero(regions.iter().map(|r| {
        mean_or_zero(r.rows.clone().map(|i| -r.classes.iter().map(|&c| probs[[i, c]]).sum::<f64>().ln()))
    }))
}

/// For each candidate class, the row (relative to `probs`) with the highest
/// probability of that class; ties to the lowest row.
pub fn prototypical_pixels(classes: &[usize], probs: ArrayView2<f64>) -> Vec<(usize, usize)> {
    classes
        .iter()
        .map(|&c| {
            let col = probs.column(c);
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            (c, best)
        })
        .collect()
}

/// Prototypes (class, absolute batch row) for every region.
pub fn batch_prototypes(regions: &[RegionSample], probs: ArrayView2<f64>) -> Vec<Vec<(usize, usize)>> {
    regions
        .iter()
        .map(|r| {
            prototypical_pixels(&r.classes, probs.slice(ndarray::s![r.rows.clone(), ..]))
                .into_iter()
                .map(|(c, local)| (c, r.rows.start + local))
                .collect()
        })
        .collect()
}

/// Mean over regions of `(1/|Y|) Σ_c -log P(c|x*_c)` for given prototypes.
pub fn loss_pp_at(prototypes: &[Vec<(usize, usize)>], probs: ArrayView2<f64>) -> f64 {
    mean_or_zero(
        prototypes
            .iter()
            .map(|protos| mean_or_zero(protos.iter().map(|&(c, row)| -probs[[row, c]].ln()))),
    )
}

/// Prototypical-pixel loss over the given regions.
pub fn loss_pp(regions: &[RegionSample], probs: ArrayView2<f64>) -> f64 {
    loss_pp_at(&batch_prototypes(regions, probs), probs)
}

fn split_regions(regions: &[RegionSample]) -> (Vec<RegionSample>, Vec<RegionSample>) {
    regions.iter().cloned().partition(RegionSample::is_single)
}

/// `-log Σ_{c∈S} p_c` from logits, stable.
fn neg_log_mass(logits: ndarray::ArrayView1<f64>, lse_all: f64, set: &[usize]) -> f64 {
    let max = set.iter().map(|&c| logits[c]).fold(f64::NEG_INFINITY, f64::max);
    let lse_set = max + set.iter().map(|&c| (logits[c] - max).exp()).sum::<f64>().ln();
    lse_all - lse_set
}

/// Add `weight * (p - q_S)` to a logit-gradient row.
fn accumulate_term(dlogits: &mut ndarray::ArrayViewMut1<f64>, probs: ndarray::ArrayView1<f64>, set: &[usize], weight: f64) {
    let mass: f64 = set.iter().map(|&c| probs[c]).sum();
    for (g, &p) in dlogits.iter_mut().zip(probs.iter()) {
        *g += weight * p;
    }
    for &c in set {
        dlogits[c] -= weight * probs[c] / mass;
    }
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    for (v, name) in [(b.l_ce, "l_ce"), (b.l_mp, "l_mp"), (b.l_pp, "l_pp"), (b.total, "total")] {
        if !v.is_finite() {
            return Err(Error::NumericalDivergence(name));
        }
    }
    Ok(())
}

/// Loss terms with the prototypes supplied (used for gradient checking).
pub fn total_loss_with_prototypes(
    params: &ModelParams,
    batch: &Batch,
    weights: LossWeights,
    prototypes: &[Vec<(usize, usize)>],
) -> Result<LossBreakdown> {
    let fwd = forward(batch.features.view(), params)?;
    let logits = &fwd.cosine / params.temperature;
    let lse: Vec<f64> = logits
        .outer_iter()
        .map(|row| {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
        })
        .collect();
    let region_mean = |r: &RegionSample| {
        mean_or_zero(r.rows.clone().map(|i| neg_log_mass(logits.row(i), lse[i], &r.classes)))
    };
    let l_ce = mean_or_zero(batch.regions.iter().filter(|r| r.is_single()).map(region_mean));
    let l_mp = mean_or_zero(batch.regions.iter().filter(|r| !r.is_single()).map(region_mean));
    let l_pp = mean_or_zero(
        batch
            .regions
            .iter()
            .zip(prototypes)
            .filter(|(r, _)| !r.is_single())
            .map(|(_, protos)| mean_or_zero(protos.iter().map(|&(c, i)| neg_log_mass(logits.row(i), lse[i], &[c])))),
    );
    let b = LossBreakdown::compose(l_ce, l_mp, l_pp, weights);
    check_finite(&b)?;
    Ok(b)
}

/// Total stage-1 loss and its exact gradient.
pub fn total_loss_and_grad(
    params: &ModelParams,
    batch: &Batch,
    weights: LossWeights,
) -> Result<(LossBreakdown, ModelGrads)> {
    let fwd = forward(batch.features.view(), params)?;
    let probs = fwd.probs.view();
    let logits = &fwd.cosine / params.temperature;
    let lse: Vec<f64> = logits
        .outer_iter()
        .map(|row| {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
        })
        .collect();

    let (singles, multis) = split_regions(&batch.regions);
    let mut dlogits = Array2::<f64>::zeros(fwd.probs.raw_dim());

    let region_terms = |group: &[RegionSample], lambda: f64, dlogits: &mut Array2<f64>| -> f64 {
        if group.is_empty() {
            return 0.0;
        }
        let per_region = 1.0 / group.len() as f64;
        let mut total = 0.0;
        for r in group {
            let n = r.rows.len() as f64;
            let mut sum = 0.0;
            for i in r.rows.clone() {
                sum += neg_log_mass(logits.row(i), lse[i], &r.classes);
                if lambda != 0.0 {
                    accumulate_term(&mut dlogits.row_mut(i), probs.row(i), &r.classes, lambda * per_region / n);
                }
            }
            total += sum / n;
        }
        total * per_region
    };
    let l_ce = region_terms(&singles, weights.ce, &mut dlogits);
    let l_mp = region_terms(&multis, weights.mp, &mut dlogits);

    let mut l_pp = 0.0;
    if !multis.is_empty() {
        let per_region = 1.0 / multis.len() as f64;
        for protos in batch_prototypes(&multis, probs) {
            let per_class = 1.0 / protos.len() as f64;
            for (c, i) in protos {
                l_pp += per_region * per_class * neg_log_mass(logits.row(i), lse[i], &[c]);
                if weights.pp != 0.0 {
                    accumulate_term(&mut dlogits.row_mut(i), probs.row(i), &[c], weights.pp * per_region * per_class);
                }
            }
        }
    }

    let breakdown = LossBreakdown::compose(l_ce, l_mp, l_pp, weights);
    check_finite(&breakdown)?;
    let grads = backward(batch.features.view(), &fwd, params, &dlogits);
    Ok((breakdown, grads))
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Moment accumulators mirroring the parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One decoupled-weight-decay Adam update of a flat tensor. `step` is the
/// 1-based step number used for bias correction.
pub fn adamw_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], step: u64, cfg: &AdamWConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
    }
}

pub fn adamw_step(params: &mut ModelParams, grads: &ModelGrads, state: &mut OptimizerState) {
    state.step += 1;
    let step = state.step;
    let cfg = state.config;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        adamw_update(p, g, m, v, step, &cfg);
    }
}

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

/// Per-image features and partitions of the training set.
#[derive(Clone, Copy)]
pub struct TrainSet<'a> {
    pub features: &'a [FeatureMap],
    pub partitions: &'a [Partition],
    /// Semantic classes, excluding the undefined class.
    pub class_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub regions_per_batch: usize,
    pub pixels_per_region: usize,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            regions_per_batch: 32,
            pixels_per_region: 64,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Loss of every step, in order.
    pub history: Vec<LossBreakdown>,
}

impl TrainOutcome {
    pub fn last_loss(&self) -> Option<LossBreakdown> {
        self.history.last().copied()
    }
}

/// Draw `k` of `n` indices without replacement, or all of them when `n <= k`.
fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        index::sample(rng, n, k).into_vec()
    }
}

/// Sample a stage-1 minibatch of labeled regions from the pool.
pub fn sample_region_batch(
    pool: &LabeledPool,
    data: TrainSet<'_>,
    regions_per_batch: usize,
    pixels_per_region: usize,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let entries: Vec<_> = pool.iter().collect();
    let chosen = sample_indices(rng, entries.len(), regions_per_batch);
    let mut rows: Vec<(usize, usize)> = Vec::new();
    let mut regions = Vec::with_capacity(chosen.len());
    for i in chosen {
        let (r, entry) = entries[i];
        let pixels = data.partitions[r.image as usize].pixels(r.region);
        let start = rows.len();
        for j in sample_indices(rng, pixels.len(), pixels_per_region) {
            rows.push((r.image as usize, pixels[j] as usize));
        }
        let classes = entry
            .label
            .classes()
            .iter()
            .map(|&id| model_index(id, data.class_count))
            .collect();
        regions.push(RegionSample {
            rows: start..rows.len(),
            classes,
        });
    }
    Batch {
        features: gather_rows(data.features, &rows),
        regions,
    }
}

fn gather_rows(features: &[FeatureMap], rows: &[(usize, usize)]) -> Array2<f64> {
    let dim = features.first().map_or(0, |f| f.data.ncols());
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut dst, &(image, pixel)) in out.outer_iter_mut().zip(rows) {
        dst.assign(&features[image].data.row(pixel));
    }
    out
}

/// Stage 1: minibatch AdamW on the partial-label objective.
pub fn train_stage1(
    pool: &LabeledPool,
    data: TrainSet<'_>,
    init: ModelParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut params = init;
    let mut history = Vec::with_capacity(config.iterations);
    if config.iterations == 0 || pool.is_empty() {
        return Ok(TrainOutcome { params, history });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(config.optimizer, &params);
    for _ in 0..config.iterations {
        let batch = sample_region_batch(pool, data, config.regions_per_batch, config.pixels_per_region, &mut rng);
        let (loss, grads) = total_loss_and_grad(&params, &batch, config.weights)?;
        adamw_step(&mut params, &grads, &mut state);
        history.push(loss);
    }
    Ok(TrainOutcome { params, history })
}

/// One pseudo-labeled pixel: (image, pixel index, model class index).
pub type PseudoPixel = (u32, u32, usize);

/// Stage 2: pixel-wise cross-entropy on pseudo labels, continuing from the
/// stage-1 parameters. Each step draws `regions_per_batch *
/// pixels_per_region` pixels uniformly with replacement.
pub fn train_stage2(
    params: ModelParams,
    pseudo: &[PseudoPixel],
    features: &[FeatureMap],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut params = params;
    let mut history = Vec::with_capacity(config.iterations);
    if config.iterations == 0 || pseudo.is_empty() {
        return Ok(TrainOutcome { params, history });
    }
    let weights = LossWeights {
        ce: 1.0,
        mp: 0.0,
        pp: 0.0,
    };
    let batch_size = (config.regions_per_batch * config.pixels_per_region).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(config.optimizer, &params);
    for _ in 0..config.iterations {
        let picks: Vec<PseudoPixel> = (0..batch_size)
            .map(|_| pseudo[rng.random_range(0..pseudo.len())])
            .collect();
        let rows: Vec<(usize, usize)> = picks.iter().map(|&(i, p, _)| (i as usize, p as usize)).collect();
        let regions = picks
            .iter()
            .enumerate()
            .map(|(k, &(_, _, c))| RegionSample {
                rows: k..k + 1,
                classes: vec![c],
            })
            .collect();
        let batch = Batch {
            features: gather_rows(features, &rows),
            regions,
        };
        let (loss, grads) = total_loss_and_grad(&params, &batch, weights)?;
        adamw_step(&mut params, &grads, &mut state);
        history.push(loss);
    }
    Ok(TrainOutcome { params, history })
}

/// Mean per-pixel loss of `batch` under `params` without updating anything.
pub fn evaluate_batch(params: &ModelParams, batch: &Batch, weights: LossWeights) -> Result<LossBreakdown> {
    let fwd = forward(batch.features.view(), params)?;
    let protos = batch_prototypes(&batch.regions, fwd.probs.view());
    total_loss_with_prototypes(params, batch, weights, &protos)
}
