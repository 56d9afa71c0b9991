//! Image/mask containers, netpbm I/O, the synthetic Voronoi benchmark and
//! result writers.
//!
//! Images are stored as binary PPM (P6, 8-bit) and mapped linearly to
//! `[0, 1]`; masks are binary PGM (P5, 8-bit) with [`UNDEF`] = 255. A dataset
//! directory carries a `manifest.txt` with a `classes=<C>` line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evalrun::RoundReport;

/// Reserved mask id for pixels outside the semantic classes.
pub const UNDEF: u8 = 255;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Map a mask id to a model class index. UNDEF becomes the extra class `C`.
#[inline]
pub fn model_index(id: u8, class_count: usize) -> usize {
    if id == UNDEF {
        class_count
    } else {
        id as usize
    }
}

/// Inverse of [`model_index`].
#[inline]
pub fn mask_id(index: usize, class_count: usize) -> u8 {
    if index >= class_count {
        UNDEF
    } else {
        index as u8
    }
}

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} channel values for {}x{}, got {}",
                width * height * 3,
                width,
                height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("channel value {v} outside [0,1]")));
        }
        Ok(Self { width, height, data })
    }

    /// Uniform image filled with one color.
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }
}

/// Row-major class-id mask. Ids are `< class_count` or [`UNDEF`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    class_count: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, class_count: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask data has {} entries for {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if class_count == 0 || class_count >= UNDEF as usize {
            return Err(Error::InvalidMask(format!("class count {class_count} out of range")));
        }
        if let Some(&id) = data.iter().find(|&&id| id != UNDEF && id as usize >= class_count) {
            return Err(Error::InvalidMask(format!(
                "class id {id} not below class count {class_count}"
            )));
        }
        Ok(Self {
            width,
            height,
            class_count,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn at(&self, pixel: usize) -> u8 {
        self.data[pixel]
    }
}

/// A loaded image/mask pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub mask: Mask,
}

/// Parameters of the seeded Voronoi benchmark generator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub class_count: usize,
    pub site_count: usize,
    pub noise_std: f64,
    /// Zipf exponent of class frequencies; 0 gives uniform classes.
    pub class_frequency_skew: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("synthetic image must be non-empty".into()));
        }
        if self.class_count < 2 || self.class_count >= UNDEF as usize {
            return Err(Error::Config(format!(
                "class_count {} must be in [2, 254]",
                self.class_count
            )));
        }
        if self.site_count < self.class_count {
            return Err(Error::Config(format!(
                "site_count {} below class_count {}",
                self.site_count, self.class_count
            )));
        }
        if !(self.noise_std >= 0.0) || !(self.class_frequency_skew >= 0.0) {
            return Err(Error::Config("noise_std and class_frequency_skew must be >= 0".into()));
        }
        Ok(())
    }
}

/// Base color of class `k` out of `class_count`: evenly spaced hues with
/// alternating value.
pub fn class_color(k: usize, class_count: usize) -> [f64; 3] {
    let hue = k as f64 / class_count as f64;
    let sat = 0.65;
    let val = if k % 2 == 0 { 0.85 } else { 0.6 };
    hsv_to_rgb(hue, sat, val)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[inline]
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Seeded Voronoi scene: every pixel takes the class of its nearest site and
/// the color of that class plus clipped Gaussian noise. Colors are quantized
/// to 8 bits so a PPM round trip is exact.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Image, Mask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &[0x5137]));
    let weights: Vec<f64> = (0..spec.class_count)
        .map(|k| (k as f64 + 1.0).powf(-spec.class_frequency_skew))
        .collect();
    let class_dist = WeightedIndex::new(&weights).expect("positive class weights");

    let sites: Vec<(f64, f64, u8)> = (0..spec.site_count)
        .map(|_| {
            let x = rng.random::<f64>() * spec.width as f64;
            let y = rng.random::<f64>() * spec.height as f64;
            let class = class_dist.sample(&mut rng) as u8;
            (x, y, class)
        })
        .collect();

    let n = spec.width * spec.height;
    let mut labels = Vec::with_capacity(n);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u8);
            for &(sx, sy, class) in &sites {
                let d = (sx - px).powi(2) + (sy - py).powi(2);
                if d < best.0 {
                    best = (d, class);
                }
            }
            labels.push(best.1);
        }
    }

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let palette: Vec<[f64; 3]> = (0..spec.class_count).map(|k| class_color(k, spec.class_count)).collect();
    let mut data = Vec::with_capacity(3 * n);
    for &class in &labels {
        for c in palette[class as usize] {
            data.push(quantize(c + noise.sample(&mut rng)));
        }
    }
    let image = Image::new(spec.width, spec.height, data)?;
    let mask = Mask::new(spec.width, spec.height, spec.class_count, labels)?;
    Ok((image, mask))
}

// ---------------------------------------------------------------------------
// netpbm
// ---------------------------------------------------------------------------

struct Netpbm<'a> {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    body: &'a [u8],
}

fn parse_netpbm<'a>(path: &Path, bytes: &'a [u8]) -> Result<Netpbm<'a>> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::format(path, "missing netpbm magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "bad header number"))?;
    }
    // exactly one whitespace byte separates header and raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "missing raster separator"));
    }
    pos += 1;
    Ok(Netpbm {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        body: &bytes[pos..],
    })
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let pbm = parse_netpbm(path, &bytes)?;
    if &pbm.magic != b"P6" || pbm.maxval != 255 {
        return Err(Error::format(path, "expected 8-bit binary PPM (P6, maxval 255)"));
    }
    let n = pbm.width * pbm.height * 3;
    if pbm.body.len() < n {
        return Err(Error::format(path, "truncated raster"));
    }
    let data = pbm.body[..n].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(pbm.width, pbm.height, data)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Raw 8-bit PGM raster.
pub fn read_pgm8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let pbm = parse_netpbm(path, &bytes)?;
    if &pbm.magic != b"P5" || pbm.maxval != 255 {
        return Err(Error::format(path, "expected 8-bit binary PGM (P5, maxval 255)"));
    }
    let n = pbm.width * pbm.height;
    if pbm.body.len() < n {
        return Err(Error::format(path, "truncated raster"));
    }
    Ok((pbm.width, pbm.height, pbm.body[..n].to_vec()))
}

pub fn write_pgm8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    debug_assert_eq!(data.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    fs::write(path, out)?;
    Ok(())
}

/// 16-bit PGM, big-endian samples as netpbm requires.
pub fn write_pgm16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    debug_assert_eq!(data.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path)?;
    let pbm = parse_netpbm(path, &bytes)?;
    if &pbm.magic != b"P5" || pbm.maxval != 65535 {
        return Err(Error::format(path, "expected 16-bit binary PGM"));
    }
    let n = pbm.width * pbm.height;
    if pbm.body.len() < 2 * n {
        return Err(Error::format(path, "truncated raster"));
    }
    let data = pbm.body[..2 * n]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((pbm.width, pbm.height, data))
}

pub fn read_mask(path: &Path, class_count: usize) -> Result<Mask> {
    let (w, h, data) = read_pgm8(path)?;
    Mask::new(w, h, class_count, data)
        .map_err(|e| Error::InvalidMask(format!("{}: {e}", path.display())))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_pgm8(path, mask.width, mask.height, &mask.data)
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

pub fn read_manifest(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .find_map(|l| l.strip_prefix("classes="))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::format(path, "no `classes=<C>` line"))
}

pub fn write_manifest(dir: &Path, class_count: usize) -> Result<()> {
    fs::write(dir.join(MANIFEST_FILE), format!("classes={class_count}\n"))?;
    Ok(())
}

fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Load PPM/PGM pairs matched by file stem, in lexicographic order.
///
/// The class count comes from `manifest.txt` in `mask_dir` or its parent.
pub fn load_dataset(image_dir: &Path, mask_dir: &Path) -> Result<Vec<Sample>> {
    let images = files_with_extension(image_dir, "ppm")?;
    let masks = files_with_extension(mask_dir, "pgm")?;
    if images.is_empty() && masks.is_empty() {
        return Ok(Vec::new());
    }
    for (stem, path) in &masks {
        if images.binary_search_by(|(s, _)| s.cmp(stem)).is_err() {
            return Err(Error::UnpairedFile(path.clone()));
        }
    }
    let manifest = [mask_dir.join(MANIFEST_FILE), mask_dir.join("..").join(MANIFEST_FILE)]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Error::format(mask_dir, "no manifest.txt next to masks"))?;
    let class_count = read_manifest(&manifest)?;

    let mut samples = Vec::with_capacity(images.len());
    for (stem, image_path) in images {
        let mask_path = masks
            .binary_search_by(|(s, _)| s.cmp(&stem))
            .map(|i| masks[i].1.clone())
            .map_err(|_| Error::UnpairedFile(image_path.clone()))?;
        let image = read_ppm(&image_path)?;
        let mask = read_mask(&mask_path, class_count)?;
        if image.width != mask.width || image.height != mask.height {
            return Err(Error::ShapeMismatch(format!(
                "{stem}: image {}x{} vs mask {}x{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        samples.push(Sample {
            name: stem,
            image,
            mask,
        });
    }
    Ok(samples)
}

/// Load `<root>/images` + `<root>/masks` with `<root>/manifest.txt`.
pub fn load_dataset_dir(root: &Path) -> Result<Vec<Sample>> {
    load_dataset(&root.join("images"), &root.join("masks"))
}

/// Write samples in the layout read by [`load_dataset_dir`].
pub fn write_dataset_dir(root: &Path, samples: &[Sample]) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    let class_count = samples.first().map_or(0, |s| s.mask.class_count);
    write_manifest(root, class_count)?;
    for s in samples {
        write_ppm(&images.join(format!("{}.ppm", s.name)), &s.image)?;
        write_mask(&masks.join(format!("{}.pgm", s.name)), &s.mask)?;
    }
    Ok(())
}

/// Generate `count` synthetic samples with seeds `first_seed..first_seed+count`.
pub fn synthetic_samples(spec: &SyntheticSpec, first_seed: u64, count: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let seed = first_seed + i as u64;
            let (image, mask) = generate_synthetic(spec, seed)?;
            Ok(Sample {
                name: format!("syn_{seed:06}"),
                image,
                mask,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// results
// ---------------------------------------------------------------------------

fn fmt6(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn results_header(class_count: usize) -> String {
    let mut header = String::from("round,cum_clicks,miou");
    for c in 0..class_count {
        header.push_str(&format!(",iou_{c}"));
    }
    header
}

/// Render per-round reports as CSV text (fixed 6-decimal formatting).
pub fn results_csv(reports: &[RoundReport]) -> String {
    let class_count = reports.first().map_or(0, |r| r.per_class_iou.len());
    let mut out = results_header(class_count);
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{},{},{}", r.round, r.cum_clicks, fmt6(r.miou)));
        for &iou in &r.per_class_iou {
            out.push(',');
            out.push_str(&fmt6(iou));
        }
        out.push('\n');
    }
    out
}

pub fn write_results(reports: &[RoundReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Config("no round reports to write".into()));
    }
    fs::write(path, results_csv(reports))?;
    Ok(())
}

/// Arithmetic mean over seeds, round by round. Per-class means skip NaN.
pub fn mean_results_csv(runs: &[Vec<RoundReport>]) -> String {
    let rounds = runs.iter().map(Vec::len).min().unwrap_or(0);
    let class_count = runs
        .first()
        .and_then(|r| r.first())
        .map_or(0, |r| r.per_class_iou.len());
    let mut out = results_header(class_count);
    out.push('\n');
    for t in 0..rounds {
        let n = runs.len() as f64;
        let clicks = runs.iter().map(|r| r[t].cum_clicks as f64).sum::<f64>() / n;
        let miou = runs.iter().map(|r| r[t].miou).sum::<f64>() / n;
        out.push_str(&format!("{},{},{}", runs[0][t].round, fmt6(clicks), fmt6(miou)));
        for c in 0..class_count {
            let vals: Vec<f64> = runs
                .iter()
                .map(|r| r[t].per_class_iou[c])
                .filter(|v| !v.is_nan())
                .collect();
            let mean = if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            out.push(',');
            out.push_str(&fmt6(mean));
        }
        out.push('\n');
    }
    out
}

pub fn write_mean_results(runs: &[Vec<RoundReport>], path: &Path) -> Result<()> {
    if runs.is_empty() || runs.iter().any(Vec::is_empty) {
        return Err(Error::Config("no round reports to average".into()));
    }
    fs::write(path, mean_results_csv(runs))?;
    Ok(())
}

/// Line-delimited JSON event sink.
pub struct JsonLines<W: Write> {
    out: W,
}

impl JsonLines<BufWriter<fs::File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(BufWriter::new(fs::File::create(path)?)))
    }
}

impl<W: Write> JsonLines<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write<T: Serialize + ?Sized>(&mut self, event: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, event)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
