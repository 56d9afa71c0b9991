//! Pixel-wise pseudo labels from region labels.
//!
//! Inside every labeled region the embedding at each candidate class's
//! prototypical pixel acts as a nearest-prototype classifier (localization).
//! Each prototype's median cosine over the pixels it claims becomes its
//! threshold, and pixels of adjacent unlabeled regions whose cosine to a
//! prototype strictly exceeds that threshold inherit the best such class
//! (expansion).

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::Serialize;

use crate::dataio::{mask_id, model_index, write_pgm8, UNDEF};
use crate::error::Result;
use crate::model::{embed_map, predict_map, FeatureMap, ModelParams};
use crate::oracle::{LabeledPool, RegionRef};
use crate::superpixel::{AdjacencyGraph, Partition};
use crate::training::{prototypical_pixels, PseudoPixel};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoSource {
    Single,
    Localized,
    Expanded,
}

impl PseudoSource {
    fn tag(self) -> u8 {
        match self {
            PseudoSource::Single => 1,
            PseudoSource::Localized => 2,
            PseudoSource::Expanded => 3,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    /// Model class index (the undefined class is `class_count`).
    pub class: usize,
    pub source: PseudoSource,
    /// Labeled region (same image) the label came from.
    pub origin: u32,
    /// Cosine to the winning prototype.
    pub score: f64,
}

/// Optional pseudo label for every pixel of every training image.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub images: Vec<Vec<Option<PseudoLabel>>>,
}

impl PseudoLabelMap {
    pub fn count(&self, source: PseudoSource) -> usize {
        self.images
            .iter()
            .flatten()
            .filter(|l| l.is_some_and(|l| l.source == source))
            .count()
    }

    pub fn labeled_count(&self) -> usize {
        self.images.iter().flatten().filter(|l| l.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled_count() == 0
    }

    /// Flat training list in (image, pixel) order.
    pub fn pixels(&self) -> Vec<PseudoPixel> {
        let mut out = Vec::new();
        for (i, labels) in self.images.iter().enumerate() {
            for (p, l) in labels.iter().enumerate() {
                if let Some(l) = l {
                    out.push((i as u32, p as u32, l.class));
                }
            }
        }
        out
    }

    /// Write one image's labels as PGM (255 = unlabeled, the undefined class
    /// as 254) plus a companion PGM of source tags (0 none, 1 single,
    /// 2 localized, 3 expanded).
    pub fn write_pgm(
        &self,
        image: usize,
        width: usize,
        height: usize,
        class_count: usize,
        classes_path: &Path,
        tags_path: &Path,
    ) -> Result<()> {
        let labels = &self.images[image];
        let classes: Vec<u8> = labels
            .iter()
            .map(|l| match l {
                None => 255,
                Some(l) => match mask_id(l.class, class_count) {
                    UNDEF => 254,
                    id => id,
                },
            })
            .collect();
        let tags: Vec<u8> = labels.iter().map(|l| l.map_or(0, |l| l.source.tag())).collect();
        write_pgm8(classes_path, width, height, &classes)?;
        write_pgm8(tags_path, width, height, &tags)
    }
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt().max(NORM_FLOOR);
    let nb = b.dot(&b).sqrt().max(NORM_FLOOR);
    a.dot(&b) / (na * nb)
}

/// Prototypes of one labeled region.
#[derive(Clone, Debug)]
pub struct RegionPrototypes {
    /// Candidate classes (model indices), sorted.
    pub classes: Vec<usize>,
    /// Image pixel index of each class's prototypical pixel.
    pub pixels: Vec<u32>,
    /// Embedding at each prototypical pixel.
    pub vectors: Vec<Array1<f64>>,
}

/// Prototypical pixel and its embedding for every candidate class.
pub fn region_prototypes(
    pixels: &[u32],
    classes: &[usize],
    probs: &Array2<f64>,
    embeddings: &Array2<f64>,
) -> RegionPrototypes {
    let idx: Vec<usize> = pixels.iter().map(|&p| p as usize).collect();
    let local = probs.select(Axis(0), &idx);
    let chosen = prototypical_pixels(classes, local.view());
    let pixels: Vec<u32> = chosen.iter().map(|&(_, row)| pixels[row]).collect();
    let vectors = pixels.iter().map(|&p| embeddings.row(p as usize).to_owned()).collect();
    RegionPrototypes {
        classes: classes.to_vec(),
        pixels,
        vectors,
    }
}

/// Position in `protos.classes` and cosine of the best prototype among
/// `allowed` (all when `None`); ties to the lower class.
fn best_prototype(f: ArrayView1<f64>, protos: &RegionPrototypes, allowed: Option<&[f64]>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in protos.vectors.iter().enumerate() {
        let cos = cosine(f, v.view());
        if allowed.is_some_and(|alpha| !(cos > alpha[k])) {
            continue;
        }
        if best.is_none_or(|(_, b)| cos > b) {
            best = Some((k, cos));
        }
    }
    best
}

/// Nearest-prototype class (position in `protos.classes`) and cosine for
/// each pixel of the region.
pub fn localize(pixels: &[u32], protos: &RegionPrototypes, embeddings: &Array2<f64>) -> Vec<(usize, f64)> {
    pixels
        .iter()
        .map(|&p| best_prototype(embeddings.row(p as usize), protos, None).expect("non-empty class set"))
        .collect()
}

/// Median of a non-empty slice; even sizes average the two middle values.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Per-class threshold: median cosine of the pixels localized to the class,
/// `+inf` when no pixel was.
pub fn thresholds(protos: &RegionPrototypes, localized: &[(usize, f64)]) -> Vec<f64> {
    (0..protos.classes.len())
        .map(|k| {
            let mut cos: Vec<f64> = localized.iter().filter(|(c, _)| *c == k).map(|&(_, s)| s).collect();
            median(&mut cos).unwrap_or(f64::INFINITY)
        })
        .collect()
}

/// Expansion proposal (position in `protos.classes`, cosine) for each target
/// pixel, or `None` when no prototype clears its threshold.
pub fn expand(
    targets: &[u32],
    protos: &RegionPrototypes,
    alphas: &[f64],
    embeddings: &Array2<f64>,
) -> Vec<Option<(usize, f64)>> {
    targets
        .iter()
        .map(|&p| best_prototype(embeddings.row(p as usize), protos, Some(alphas)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PseudoOptions {
    pub localization: bool,
    pub expansion: bool,
}

impl Default for PseudoOptions {
    fn default() -> Self {
        Self {
            localization: true,
            expansion: true,
        }
    }
}

/// Pseudo labels of one image from its embeddings and probabilities.
pub fn pseudo_labels_for_image(
    image: u32,
    pool: &LabeledPool,
    partition: &Partition,
    adjacency: &AdjacencyGraph,
    embeddings: &Array2<f64>,
    probs: &Array2<f64>,
    class_count: usize,
    options: PseudoOptions,
) -> Vec<Option<PseudoLabel>> {
    let mut labels: Vec<Option<PseudoLabel>> = vec![None; partition.width() * partition.height()];
    let labeled: Vec<_> = pool.iter().filter(|(r, _)| r.image == image).collect();
    for (r, entry) in &labeled {
        let pixels = partition.pixels(r.region);
        let classes: Vec<usize> = entry.label.classes().iter().map(|&id| model_index(id, class_count)).collect();
        let single = classes.len() == 1;
        if !single && !options.localization {
            continue;
        }
        let protos = region_prototypes(pixels, &classes, probs, embeddings);
        let localized = localize(pixels, &protos, embeddings);
        let source = if single {
            PseudoSource::Single
        } else {
            PseudoSource::Localized
        };
        for (&p, &(k, score)) in pixels.iter().zip(&localized) {
            labels[p as usize] = Some(PseudoLabel {
                class: classes[k],
                source,
                origin: r.region,
                score,
            });
        }
        if !options.expansion {
            continue;
        }
        let alphas = thresholds(&protos, &localized);
        for &nb in adjacency.neighbors(r.region) {
            if pool.contains(&RegionRef { image, region: nb }) {
                continue;
            }
            let targets = partition.pixels(nb);
            for (&p, proposal) in targets.iter().zip(expand(targets, &protos, &alphas, embeddings)) {
                let Some((k, score)) = proposal else { continue };
                // sources are visited in ascending region id, so strict `>`
                // keeps the lowest id on equal scores
                let slot = &mut labels[p as usize];
                if slot.is_none_or(|cur| score > cur.score) {
                    *slot = Some(PseudoLabel {
                        class: classes[k],
                        source: PseudoSource::Expanded,
                        origin: r.region,
                        score,
                    });
                }
            }
        }
    }
    labels
}

/// Pseudo labels for every training image from the current model.
///
/// Only images holding labeled regions are embedded; the others get empty
/// label vectors.
pub fn build_pseudo_dataset(
    pool: &LabeledPool,
    partitions: &[Partition],
    adjacency: &[AdjacencyGraph],
    features: &[FeatureMap],
    params: &ModelParams,
    class_count: usize,
    options: PseudoOptions,
) -> Result<PseudoLabelMap> {
    let mut images = Vec::with_capacity(partitions.len());
    for (i, partition) in partitions.iter().enumerate() {
        let has_labels = pool.iter().any(|(r, _)| r.image as usize == i);
        if !has_labels {
            images.push(vec![None; partition.width() * partition.height()]);
            continue;
        }
        let embeddings = embed_map(&features[i], params)?;
        let probs = predict_map(&features[i], params)?;
        images.push(pseudo_labels_for_image(
            i as u32,
            pool,
            partition,
            &adjacency[i],
            &embeddings,
            &probs,
            class_count,
            options,
        ));
    }
    Ok(PseudoLabelMap { images })
}
