//! Per-pixel features, the trainable embedding and the cosine classifier.
//!
//! Probabilities are `softmax_c(cos(f(x), w_c) / τ)` over `C + 1` classes,
//! the last one being the undefined class.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::Image;
use crate::error::{Error, Result};

/// RGB, normalized x/y, 5×5 window mean and standard deviation per channel.
pub const FEATURE_DIM: usize = 11;
const WINDOW_RADIUS: i64 = 2;
const NORM_FLOOR: f64 = 1e-12;

/// Row-per-pixel feature matrix (`pixels × FEATURE_DIM`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Rows for the given pixel indices, in order.
    pub fn gather(&self, pixels: &[usize]) -> Array2<f64> {
        self.data.select(Axis(0), pixels)
    }
}

pub fn featurize(image: &Image) -> FeatureMap {
    let (w, h) = (image.width(), image.height());
    let mut data = Array2::zeros((w * h, FEATURE_DIM));
    let sx = if w > 1 { 1.0 / (w - 1) as f64 } else { 0.0 };
    let sy = if h > 1 { 1.0 / (h - 1) as f64 } else { 0.0 };
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let count = ((2 * WINDOW_RADIUS + 1) * (2 * WINDOW_RADIUS + 1)) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut row = data.row_mut(y * w + x);
            let center = image.rgb(x, y);
            row[0] = center[0];
            row[1] = center[1];
            row[2] = center[2];
            row[3] = x as f64 * sx;
            row[4] = y as f64 * sy;
            // shifted moments around the center value keep constant windows exact
            let mut sum = [0.0; 3];
            let mut sq = [0.0; 3];
            for dy in -WINDOW_RADIUS..=WINDOW_RADIUS {
                for dx in -WINDOW_RADIUS..=WINDOW_RADIUS {
                    let v = image.rgb(clamp(x as i64 + dx, w), clamp(y as i64 + dy, h));
                    for c in 0..3 {
                        let d = v[c] - center[c];
                        sum[c] += d;
                        sq[c] += d * d;
                    }
                }
            }
            for c in 0..3 {
                let mean_d = sum[c] / count;
                row[5 + c] = center[c] + mean_d;
                row[8 + c] = (sq[c] / count - mean_d * mean_d).max(0.0).sqrt();
            }
        }
    }
    FeatureMap {
        width: w,
        height: h,
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub features: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Including the undefined class.
    pub classes: usize,
}

/// Two-layer tanh embedding plus a cosine classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `features × hidden`
    pub hidden_w: Array2<f64>,
    pub hidden_b: Array1<f64>,
    /// `hidden × embed`
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
    /// `classes × embed`, one weight vector per row
    pub classifier: Array2<f64>,
    pub temperature: f64,
}

impl ModelParams {
    /// Uniform `±1/sqrt(fan_in)` affine layers and unit-norm random
    /// classifier directions.
    pub fn init(dims: ModelDims, temperature: f64, seed: u64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        if dims.features == 0 || dims.hidden == 0 || dims.embed == 0 || dims.classes < 2 {
            return Err(Error::Config(format!("invalid model dimensions {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: (usize, usize), fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
        };
        let hidden_w = uniform((dims.features, dims.hidden), dims.features);
        let hidden_b = uniform((1, dims.hidden), dims.features).remove_axis(Axis(0));
        let out_w = uniform((dims.hidden, dims.embed), dims.hidden);
        let out_b = uniform((1, dims.embed), dims.hidden).remove_axis(Axis(0));
        let mut classifier = Array2::from_shape_simple_fn((dims.classes, dims.embed), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        for mut row in classifier.outer_iter_mut() {
            let n = row.dot(&row).sqrt().max(NORM_FLOOR);
            row /= n;
        }
        Ok(Self {
            hidden_w,
            hidden_b,
            out_w,
            out_b,
            classifier,
            temperature,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            features: self.hidden_w.nrows(),
            hidden: self.hidden_w.ncols(),
            embed: self.out_w.ncols(),
            classes: self.classifier.nrows(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.classifier.nrows()
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.hidden_w.as_slice().expect("standard layout"),
            self.hidden_b.as_slice().expect("standard layout"),
            self.out_w.as_slice().expect("standard layout"),
            self.out_b.as_slice().expect("standard layout"),
            self.classifier.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.hidden_w.as_slice_mut().expect("standard layout"),
            self.hidden_b.as_slice_mut().expect("standard layout"),
            self.out_w.as_slice_mut().expect("standard layout"),
            self.out_b.as_slice_mut().expect("standard layout"),
            self.classifier.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Checkpoint layout, all little-endian f64:
    /// `F, H, d, C', tau`, then hidden_w (F×H row-major), hidden_b (H),
    /// out_w (H×d), out_b (d), classifier (C'×d).
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dims();
        let header = [
            d.features as f64,
            d.hidden as f64,
            d.embed as f64,
            d.classes as f64,
            self.temperature,
        ];
        header
            .iter()
            .chain(self.tensors().into_iter().flatten())
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Config(format!("bad checkpoint: {reason}"));
        if bytes.len() % 8 != 0 || bytes.len() < 40 {
            return Err(bad("length"));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let dim = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(bad("dimension header"))
            }
        };
        let (f, h, e, c) = (dim(values[0])?, dim(values[1])?, dim(values[2])?, dim(values[3])?);
        let temperature = values[4];
        let expected = 5 + f * h + h + h * e + e + c * e;
        if values.len() != expected {
            return Err(bad("payload size does not match header"));
        }
        let mut rest = &values[5..];
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let params = Self {
            hidden_w: Array2::from_shape_vec((f, h), take(f * h)).expect("shape"),
            hidden_b: Array1::from(take(h)),
            out_w: Array2::from_shape_vec((h, e), take(h * e)).expect("shape"),
            out_b: Array1::from(take(e)),
            classifier: Array2::from_shape_vec((c, e), take(c * e)).expect("shape"),
            temperature,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.classifier.outer_iter().any(|w| w.iter().all(|&v| v == 0.0)) {
            return Err(Error::DegenerateDirection("classifier weight"));
        }
        Ok(())
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct Forward {
    /// post-tanh hidden activations
    pub hidden: Array2<f64>,
    pub embedding: Array2<f64>,
    pub embedding_norm: Array1<f64>,
    pub classifier_norm: Array1<f64>,
    pub cosine: Array2<f64>,
    pub probs: Array2<f64>,
}

fn check_features(features: &ArrayView2<f64>, params: &ModelParams) -> Result<()> {
    if features.ncols() != params.hidden_w.nrows() {
        return Err(Error::Config(format!(
            "feature dimension {} does not match model input {}",
            features.ncols(),
            params.hidden_w.nrows()
        )));
    }
    Ok(())
}

fn hidden_layer(features: &ArrayView2<f64>, params: &ModelParams) -> Array2<f64> {
    let mut hidden = features.dot(&params.hidden_w) + &params.hidden_b;
    hidden.mapv_inplace(f64::tanh);
    hidden
}

/// `out_affine(tanh(hidden_affine(x)))` for every row of `features`.
pub fn embed(features: ArrayView2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    check_features(&features, params)?;
    Ok(hidden_layer(&features, params).dot(&params.out_w) + &params.out_b)
}

fn row_norms(m: &Array2<f64>) -> Array1<f64> {
    m.outer_iter().map(|r| r.dot(&r).sqrt()).collect()
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Cosine similarity of every embedding row with every classifier row.
pub fn cosine_scores(embeddings: ArrayView2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    let (cos, _, _) = cosine_parts(&embeddings.to_owned(), params)?;
    Ok(cos)
}

fn cosine_parts(
    embeddings: &Array2<f64>,
    params: &ModelParams,
) -> Result<(Array2<f64>, Array1<f64>, Array1<f64>)> {
    if embeddings.ncols() != params.classifier.ncols() {
        return Err(Error::Config("embedding dimension does not match classifier".into()));
    }
    let en = row_norms(embeddings);
    if en.iter().any(|&n| n == 0.0) {
        return Err(Error::DegenerateDirection("embedding"));
    }
    let wn = row_norms(&params.classifier);
    if wn.iter().any(|&n| n == 0.0) {
        return Err(Error::DegenerateDirection("classifier weight"));
    }
    let mut cos = embeddings.dot(&params.classifier.t());
    Zip::from(cos.rows_mut()).and(&en).for_each(|mut row, &n| {
        row /= n.max(NORM_FLOOR);
    });
    for (mut col, &n) in cos.columns_mut().into_iter().zip(wn.iter()) {
        col /= n.max(NORM_FLOOR);
    }
    Ok((cos, en, wn))
}

/// `softmax(cos(f, w_c) / τ)` per embedding row.
pub fn predict_probs(embeddings: ArrayView2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    let (cos, _, _) = cosine_parts(&embeddings.to_owned(), params)?;
    let mut logits = cos / params.temperature;
    softmax_rows(&mut logits);
    Ok(logits)
}

/// Full forward pass retaining intermediates.
pub fn forward(features: ArrayView2<f64>, params: &ModelParams) -> Result<Forward> {
    check_features(&features, params)?;
    let hidden = hidden_layer(&features, params);
    let embedding = hidden.dot(&params.out_w) + &params.out_b;
    let (cosine, embedding_norm, classifier_norm) = cosine_parts(&embedding, params)?;
    let mut probs = &cosine / params.temperature;
    softmax_rows(&mut probs);
    Ok(Forward {
        hidden,
        embedding,
        embedding_norm,
        classifier_norm,
        cosine,
        probs,
    })
}

/// Gradient of a scalar loss with respect to every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub hidden_w: Array2<f64>,
    pub hidden_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
    pub classifier: Array2<f64>,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            hidden_w: Array2::zeros(params.hidden_w.raw_dim()),
            hidden_b: Array1::zeros(params.hidden_b.raw_dim()),
            out_w: Array2::zeros(params.out_w.raw_dim()),
            out_b: Array1::zeros(params.out_b.raw_dim()),
            classifier: Array2::zeros(params.classifier.raw_dim()),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.hidden_w.as_slice().expect("standard layout"),
            self.hidden_b.as_slice().expect("standard layout"),
            self.out_w.as_slice().expect("standard layout"),
            self.out_b.as_slice().expect("standard layout"),
            self.classifier.as_slice().expect("standard layout"),
        ]
    }
}

/// Backpropagate `d loss / d logits` (logits = cos / τ) through the
/// classifier and embedding.
pub fn backward(
    features: ArrayView2<f64>,
    fwd: &Forward,
    params: &ModelParams,
    dlogits: &Array2<f64>,
) -> ModelGrads {
    // d/d cos
    let dcos = dlogits / params.temperature;
    let en = fwd.embedding_norm.mapv(|n| n.max(NORM_FLOOR));
    let wn = fwd.classifier_norm.mapv(|n| n.max(NORM_FLOOR));
    let f_hat = &fwd.embedding / &en.view().insert_axis(Axis(1));
    let w_hat = &params.classifier / &wn.view().insert_axis(Axis(1));
    // Σ_c dcos·cos per row (pixel) and per column (class)
    let weighted = &dcos * &fwd.cosine;
    let row_sum = weighted.sum_axis(Axis(1));
    let col_sum = weighted.sum_axis(Axis(0));

    // dL/df = (dcos · ŵ − (Σ dcos·cos) f̂) / |f|
    let mut demb = dcos.dot(&w_hat) - &(&f_hat * &row_sum.view().insert_axis(Axis(1)));
    demb /= &en.view().insert_axis(Axis(1));

    // dL/dw_c = (Σ_x dcos f̂ − (Σ_x dcos·cos) ŵ_c) / |w_c|
    let mut dclass = dcos.t().dot(&f_hat) - &(&w_hat * &col_sum.view().insert_axis(Axis(1)));
    dclass /= &wn.view().insert_axis(Axis(1));

    let out_w = fwd.hidden.t().dot(&demb);
    let out_b = demb.sum_axis(Axis(0));
    let mut dpre = demb.dot(&params.out_w.t());
    Zip::from(&mut dpre).and(&fwd.hidden).for_each(|g, &a| *g *= 1.0 - a * a);
    let hidden_w = features.t().dot(&dpre);
    let hidden_b = dpre.sum_axis(Axis(0));
    ModelGrads {
        hidden_w: hidden_w.as_standard_layout().into_owned(),
        hidden_b,
        out_w: out_w.as_standard_layout().into_owned(),
        out_b,
        classifier: dclass.as_standard_layout().into_owned(),
    }
}

/// Probabilities for every pixel of a feature map, processed in row chunks.
pub fn predict_map(features: &FeatureMap, params: &ModelParams) -> Result<Array2<f64>> {
    let n = features.pixel_count();
    let mut out = Array2::zeros((n, params.class_count()));
    const CHUNK: usize = 4096;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let emb = embed(features.data.slice(s![start..end, ..]), params)?;
        out.slice_mut(s![start..end, ..]).assign(&predict_probs(emb.view(), params)?);
        start = end;
    }
    Ok(out)
}

/// Embeddings for every pixel of a feature map.
pub fn embed_map(features: &FeatureMap, params: &ModelParams) -> Result<Array2<f64>> {
    embed(features.data.view(), params)
}

/// Row-wise argmax, ties to the lowest index.
pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
