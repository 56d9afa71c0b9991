//! Region scoring and click-budgeted batch selection.
//!
//! Uncertainty scorers build on the best-versus-second-best ratio
//! `u = P(c_sb|x) / P(c_b|x)`. PixBal discounts every pixel by the estimated
//! dataset frequency of its own top class, `u / (1 + ν·P(c_b))²`, so rare
//! classes inside otherwise common regions still pull the region up.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::dataio::{mask_id, UNDEF};
use crate::error::{Error, Result};
use crate::oracle::{LabeledPool, MultiClassLabel, Oracle, RegionRef};
use crate::superpixel::Partition;
use crate::{derive_seed, mix64};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Random,
    Margin,
    Bvsb,
    ClassBal,
    PixBal,
}

impl FromStr for Sampler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Sampler::Random),
            "margin" => Ok(Sampler::Margin),
            "bvsb" => Ok(Sampler::Bvsb),
            "classbal" => Ok(Sampler::ClassBal),
            "pixbal" => Ok(Sampler::PixBal),
            other => Err(Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampler::Random => "random",
            Sampler::Margin => "margin",
            Sampler::Bvsb => "bvsb",
            Sampler::ClassBal => "classbal",
            Sampler::PixBal => "pixbal",
        })
    }
}

/// Estimated label distribution over all model classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }
}

/// Indices of the best and second-best class; ties to the lower index.
pub fn top2(p: ArrayView1<f64>) -> (usize, usize) {
    let (mut b, mut sb) = (0, usize::MAX);
    for i in 1..p.len() {
        if p[i] > p[b] {
            sb = b;
            b = i;
        } else if sb == usize::MAX || p[i] > p[sb] {
            sb = i;
        }
    }
    (b, sb)
}

/// Best-versus-second-best ratio `P(c_sb) / P(c_b)`.
pub fn bvsb(p: ArrayView1<f64>) -> f64 {
    assert!(p.len() >= 2, "bvsb needs at least two classes");
    let (b, sb) = top2(p);
    if p[b] > 0.0 {
        p[sb] / p[b]
    } else {
        1.0
    }
}

/// Mean predictive probability over the rows of every given map.
pub fn estimate_class_distribution(maps: &[ArrayView2<f64>]) -> Result<ClassDistribution> {
    let rows: usize = maps.iter().map(|m| m.nrows()).sum();
    let Some(first) = maps.iter().find(|m| m.nrows() > 0) else {
        return Err(Error::EmptySample);
    };
    let mut sum = vec![0.0; first.ncols()];
    for m in maps {
        for row in m.outer_iter() {
            for (s, &v) in sum.iter_mut().zip(row.iter()) {
                *s += v;
            }
        }
    }
    Ok(ClassDistribution(sum.into_iter().map(|s| s / rows as f64).collect()))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean BvSB over the region's pixels.
pub fn score_bvsb(region: ArrayView2<f64>) -> f64 {
    mean(region.outer_iter().map(bvsb))
}

pub fn score_pixbal(region: ArrayView2<f64>, dist: &ClassDistribution, nu: f64) -> f64 {
    mean(region.outer_iter().map(|p| {
        let (b, _) = top2(p);
        bvsb(p) / (1.0 + nu * dist.get(b)).powi(2)
    }))
}

/// Mean BvSB divided by the penalty of the region's most frequent predicted
/// class.
pub fn score_classbal(region: ArrayView2<f64>, dist: &ClassDistribution, nu: f64) -> f64 {
    let mode = mode_class(region);
    score_bvsb(region) / (1.0 + nu * dist.get(mode)).powi(2)
}

/// Mean of `1 - (P(c_b) - P(c_sb))`.
pub fn score_margin(region: ArrayView2<f64>) -> f64 {
    mean(region.outer_iter().map(|p| {
        let (b, sb) = top2(p);
        1.0 - (p[b] - p[sb])
    }))
}

/// Uniform score in `[0, 1)` from a hash of (seed, round, region).
pub fn score_random(region: RegionRef, round: usize, seed: u64) -> f64 {
    let h = mix64(derive_seed(seed, &[0x5241_4E44, round as u64, region.image as u64, region.region as u64]));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Most frequent per-pixel argmax class; ties to the lowest class.
pub fn mode_class(region: ArrayView2<f64>) -> usize {
    let mut counts = vec![0usize; region.ncols()];
    for p in region.outer_iter() {
        counts[top2(p).0] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AcquisitionScore {
    pub region: RegionRef,
    pub score: f64,
    /// Mask id of the predicted dominant class; `None` without a model.
    pub predicted: Option<u8>,
}

/// Everything needed to score regions of the training set.
pub struct ScoringInput<'a> {
    pub partitions: &'a [Partition],
    /// Per-image probability maps of the previous model, if any.
    pub probs: Option<&'a [Array2<f64>]>,
    /// Required by ClassBal and PixBal.
    pub distribution: Option<&'a ClassDistribution>,
    pub class_count: usize,
    pub nu: f64,
    pub round: usize,
    pub seed: u64,
}

/// Score every region not yet in the pool, in region-ref order.
pub fn score_regions(sampler: Sampler, input: &ScoringInput<'_>, pool: &LabeledPool) -> Result<Vec<AcquisitionScore>> {
    if sampler != Sampler::Random && input.probs.is_none() {
        return Err(Error::Config(format!("sampler `{sampler}` needs model probabilities")));
    }
    let needs_dist = matches!(sampler, Sampler::ClassBal | Sampler::PixBal);
    let dist = match (needs_dist, input.distribution) {
        (true, None) => return Err(Error::Config(format!("sampler `{sampler}` needs a class distribution"))),
        (_, d) => d,
    };
    let mut out = Vec::new();
    for (i, partition) in input.partitions.iter().enumerate() {
        let map = input.probs.map(|p| &p[i]);
        for region in 0..partition.region_count() {
            let r = RegionRef::new(i, region);
            if pool.contains(&r) {
                continue;
            }
            let rows = map.map(|m| m.select(ndarray::Axis(0), &region_rows(partition, region as u32)));
            let view = rows.as_ref().map(|m| m.view());
            let score = match sampler {
                Sampler::Random => score_random(r, input.round, input.seed),
                Sampler::Margin => score_margin(view.unwrap()),
                Sampler::Bvsb => score_bvsb(view.unwrap()),
                Sampler::ClassBal => score_classbal(view.unwrap(), dist.unwrap(), input.nu),
                Sampler::PixBal => score_pixbal(view.unwrap(), dist.unwrap(), input.nu),
            };
            let predicted = view.map(|v| mask_id(mode_class(v), input.class_count));
            out.push(AcquisitionScore {
                region: r,
                score,
                predicted,
            });
        }
    }
    Ok(out)
}

fn region_rows(partition: &Partition, region: u32) -> Vec<usize> {
    partition.pixels(region).iter().map(|&p| p as usize).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub labels: Vec<(RegionRef, MultiClassLabel)>,
    pub clicks: usize,
    /// Clicks spent beyond the budget by the crossing region.
    pub overshoot: usize,
}

/// Query regions in descending score order until the clicks spent reach the
/// budget. Regions already pooled or predicted as the undefined class are
/// skipped.
pub fn select_batch(
    scores: &[AcquisitionScore],
    pool: &LabeledPool,
    budget_clicks: usize,
    oracle: &mut Oracle<'_>,
) -> Result<Selection> {
    if budget_clicks == 0 {
        return Err(Error::Config("budget must be at least one click".into()));
    }
    let mut order: Vec<&AcquisitionScore> = scores
        .iter()
        .filter(|s| s.predicted != Some(UNDEF) && !pool.contains(&s.region))
        .collect();
    if order.is_empty() {
        return Err(Error::PoolExhausted);
    }
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.region.cmp(&b.region)));
    let start = oracle.clicks();
    let mut labels = Vec::new();
    for s in order {
        if oracle.clicks() - start >= budget_clicks {
            break;
        }
        if labels.iter().any(|(r, _)| *r == s.region) {
            continue;
        }
        labels.push((s.region, oracle.label(s.region)));
    }
    let clicks = oracle.clicks() - start;
    Ok(Selection {
        labels,
        clicks,
        overshoot: clicks.saturating_sub(budget_clicks),
    })
}

/// Audit dump: `image,region,score,predicted` (predicted empty without a
/// model, UNDEF as 255).
pub fn write_scores_csv(path: &Path, scores: &[AcquisitionScore]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "image,region,score,predicted")?;
    for s in scores {
        let predicted = s.predicted.map_or(String::new(), |p| p.to_string());
        writeln!(out, "{},{},{:.9},{}", s.region.image, s.region.region, s.score, predicted)?;
    }
    out.flush()?;
    Ok(())
}
