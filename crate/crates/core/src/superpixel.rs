//! Non-overlapping region partitions (grid and SLIC) and their 4-adjacency
//! graph.

use std::collections::VecDeque;
use std::path::Path;

use serde::Serialize;

use crate::dataio::{write_pgm16, Image, JsonLines};
use crate::error::{Error, Result};

/// Pixel-to-region assignment covering the whole image.
///
/// Region ids are contiguous in `[0, region_count)`, every region is
/// non-empty and 4-connected, and `pixels_of` is the exact inverse of
/// `region_of` (pixel lists in ascending order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    width: usize,
    height: usize,
    region_of: Vec<u32>,
    pixels_of: Vec<Vec<u32>>,
}

impl Partition {
    /// Build from arbitrary labels, renumbering them by first appearance in
    /// row-major order. Connectivity is not checked here.
    pub fn from_labels(width: usize, height: usize, labels: &[u32]) -> Self {
        assert_eq!(labels.len(), width * height, "label map size");
        let mut remap = std::collections::HashMap::new();
        let mut region_of = Vec::with_capacity(labels.len());
        let mut pixels_of: Vec<Vec<u32>> = Vec::new();
        for (p, &l) in labels.iter().enumerate() {
            let next = remap.len() as u32;
            let id = *remap.entry(l).or_insert(next);
            if id as usize == pixels_of.len() {
                pixels_of.push(Vec::new());
            }
            pixels_of[id as usize].push(p as u32);
            region_of.push(id);
        }
        Self {
            width,
            height,
            region_of,
            pixels_of,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn region_count(&self) -> usize {
        self.pixels_of.len()
    }

    pub fn region_of(&self) -> &[u32] {
        &self.region_of
    }

    #[inline]
    pub fn region_at(&self, pixel: usize) -> u32 {
        self.region_of[pixel]
    }

    pub fn pixels(&self, region: u32) -> &[u32] {
        &self.pixels_of[region as usize]
    }

    pub fn areas(&self) -> Vec<usize> {
        self.pixels_of.iter().map(Vec::len).collect()
    }

    /// Check cover, inverse consistency and 4-connectivity of every region.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.region_of.len() != n {
            return Err(Error::ShapeMismatch("region map does not cover image".into()));
        }
        let total: usize = self.pixels_of.iter().map(Vec::len).sum();
        if total != n {
            return Err(Error::ShapeMismatch(format!("region areas sum to {total}, expected {n}")));
        }
        for (r, pixels) in self.pixels_of.iter().enumerate() {
            if pixels.is_empty() {
                return Err(Error::ShapeMismatch(format!("region {r} is empty")));
            }
            if pixels.iter().any(|&p| self.region_of[p as usize] as usize != r) {
                return Err(Error::ShapeMismatch(format!("region {r} pixel list disagrees")));
            }
            let reached = flood_fill(self.width, self.height, pixels[0] as usize, |q| {
                self.region_of[q] as usize == r
            });
            if reached.len() != pixels.len() {
                return Err(Error::ShapeMismatch(format!("region {r} is not 4-connected")));
            }
        }
        Ok(())
    }

    /// Dump region ids as a 16-bit PGM.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        if self.region_count() > u16::MAX as usize + 1 {
            return Err(Error::Config("too many regions for a 16-bit dump".into()));
        }
        let data: Vec<u16> = self.region_of.iter().map(|&r| r as u16).collect();
        write_pgm16(path, self.width, self.height, &data)
    }
}

#[inline]
fn neighbors4(width: usize, height: usize, p: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % width, p / width);
    let left = (x > 0).then(|| p - 1);
    let right = (x + 1 < width).then(|| p + 1);
    let up = (y > 0).then(|| p - width);
    let down = (y + 1 < height).then(|| p + width);
    [left, right, up, down].into_iter().flatten()
}

/// Pixels 4-reachable from `start` through pixels satisfying `inside`.
fn flood_fill(width: usize, height: usize, start: usize, inside: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut seen = vec![false; width * height];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut out = Vec::new();
    while let Some(p) = queue.pop_front() {
        out.push(p);
        for q in neighbors4(width, height, p) {
            if !seen[q] && inside(q) {
                seen[q] = true;
                queue.push_back(q);
            }
        }
    }
    out
}

/// Axis-aligned `cell`×`cell` tiles, truncated at the right/bottom edges,
/// numbered in row-major tile order.
pub fn grid_partition(image: &Image, cell: usize) -> Partition {
    let cell = cell.max(1);
    let (w, h) = (image.width(), image.height());
    let tiles_x = w.div_ceil(cell);
    let labels: Vec<u32> = (0..w * h)
        .map(|p| ((p / w / cell) * tiles_x + (p % w) / cell) as u32)
        .collect();
    // tile order already matches first appearance in row-major scan
    Partition::from_labels(w, h, &labels)
}

/// SLIC parameters. `target_size` is the grid step, so the expected region
/// area is `target_size²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicParams {
    pub target_size: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            target_size: 16,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

/// RGB channels are compared on a 0–100 scale so `compactness` keeps its
/// conventional magnitude.
const COLOR_SCALE: f64 = 100.0;

const UNASSIGNED: u32 = u32::MAX;

/// SLIC over-segmentation followed by connectivity enforcement.
///
/// Cluster distance is `color + compactness * spatial / target_size`.
/// Non-largest components of a cluster are merged into the neighbouring
/// region sharing the longest boundary (ties to the lower cluster id).
pub fn slic_partition(image: &Image, params: &SlicParams) -> Result<Partition> {
    if params.target_size < 2 || params.iterations == 0 {
        return Err(Error::Config("SLIC needs target_size >= 2 and iterations >= 1".into()));
    }
    let (w, h) = (image.width(), image.height());
    let step = params.target_size;
    if w < step || h < step {
        return Ok(Partition::from_labels(w, h, &vec![0; w * h]));
    }

    let color = |x: usize, y: usize| image.rgb(x, y).map(|c| c * COLOR_SCALE);
    let gradient = |x: usize, y: usize| {
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let (a, b, c, d) = (color(xr, y), color(xl, y), color(x, yd), color(x, yu));
        (0..3).map(|k| (a[k] - b[k]).powi(2) + (c[k] - d[k]).powi(2)).sum::<f64>()
    };

    let nx = ((w as f64 / step as f64).round() as usize).max(1);
    let ny = ((h as f64 / step as f64).round() as usize).max(1);
    let (sx, sy) = (w as f64 / nx as f64, h as f64 / ny as f64);

    // centers: [x, y, r, g, b]
    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let gx = (((i as f64 + 0.5) * sx) as usize).min(w - 1);
            let gy = (((j as f64 + 0.5) * sy) as usize).min(h - 1);
            let mut best = (gradient(gx, gy), gx, gy);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (x, y) = (gx as i64 + dx, gy as i64 + dy);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let g = gradient(x as usize, y as usize);
                    if g < best.0 {
                        best = (g, x as usize, y as usize);
                    }
                }
            }
            let c = color(best.1, best.2);
            centers.push([best.1 as f64, best.2 as f64, c[0], c[1], c[2]]);
        }
    }

    let spatial_weight = params.compactness / step as f64;
    let mut labels = vec![UNASSIGNED; w * h];
    let mut dist = vec![f64::INFINITY; w * h];
    for _ in 0..params.iterations {
        labels.fill(UNASSIGNED);
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let x0 = (c[0] - step as f64).floor().max(0.0) as usize;
            let x1 = ((c[0] + step as f64).ceil() as usize).min(w - 1);
            let y0 = (c[1] - step as f64).floor().max(0.0) as usize;
            let y1 = ((c[1] + step as f64).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let px = color(x, y);
                    let dc = ((px[0] - c[2]).powi(2) + (px[1] - c[3]).powi(2) + (px[2] - c[4]).powi(2)).sqrt();
                    let ds = ((x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2)).sqrt();
                    let d = dc + spatial_weight * ds;
                    let p = y * w + x;
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            if l == UNASSIGNED {
                continue;
            }
            let (x, y) = (p % w, p / w);
            let px = color(x, y);
            let s = &mut sums[l as usize];
            s[0] += x as f64;
            s[1] += y as f64;
            s[2] += px[0];
            s[3] += px[1];
            s[4] += px[2];
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                for k in 0..5 {
                    c[k] = s[k] / s[5];
                }
            }
        }
    }

    let labels = enforce_connectivity(w, h, &labels);
    Ok(Partition::from_labels(w, h, &labels))
}

/// Keep the largest 4-connected component of every label and merge each
/// remaining component into the adjacent final label with the longest
/// shared boundary (ties to the lower label).
fn enforce_connectivity(w: usize, h: usize, labels: &[u32]) -> Vec<u32> {
    let n = w * h;
    let mut component = vec![u32::MAX; n];
    let mut components: Vec<(u32, Vec<usize>)> = Vec::new();
    for start in 0..n {
        if component[start] != u32::MAX {
            continue;
        }
        let label = labels[start];
        let id = components.len() as u32;
        let pixels = flood_fill(w, h, start, |q| labels[q] == label);
        for &p in &pixels {
            component[p] = id;
        }
        components.push((label, pixels));
    }

    // largest component per label (first found wins ties)
    let mut keep: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for (i, (label, pixels)) in components.iter().enumerate() {
        if *label == UNASSIGNED {
            continue;
        }
        let entry = keep.entry(*label).or_insert(i);
        if components[*entry].1.len() < pixels.len() {
            *entry = i;
        }
    }

    let mut out = vec![UNASSIGNED; n];
    let mut done = vec![false; components.len()];
    for &i in keep.values() {
        done[i] = true;
        for &p in &components[i].1 {
            out[p] = components[i].0;
        }
    }

    let mut pending: Vec<usize> = (0..components.len()).filter(|&i| !done[i]).collect();
    while !pending.is_empty() {
        let mut still = Vec::new();
        for &i in &pending {
            let mut counts: std::collections::BTreeMap<u32, usize> = Default::default();
            for &p in &components[i].1 {
                for q in neighbors4(w, h, p) {
                    let l = out[q];
                    if component[q] != i as u32 && l != UNASSIGNED {
                        *counts.entry(l).or_default() += 1;
                    }
                }
            }
            // BTreeMap iterates ascending, so `>` keeps the lowest label on ties
            let mut best: Option<(u32, usize)> = None;
            for (&l, &c) in &counts {
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((l, c));
                }
            }
            match best {
                Some((l, _)) => {
                    for &p in &components[i].1 {
                        out[p] = l;
                    }
                }
                None => still.push(i),
            }
        }
        if still.len() == pending.len() {
            // isolated unassigned island with no final neighbour: becomes its own region
            for &i in &still {
                let fresh = u32::MAX - 1 - i as u32;
                for &p in &components[i].1 {
                    out[p] = fresh;
                }
            }
            break;
        }
        pending = still;
    }
    out
}

/// Sorted, symmetric, irreflexive region neighbour lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyGraph {
    neighbors: Vec<Vec<u32>>,
}

#[derive(Serialize)]
struct AdjacencyLine<'a> {
    region: u32,
    neighbors: &'a [u32],
}

impl AdjacencyGraph {
    pub fn neighbors(&self, region: u32) -> &[u32] {
        &self.neighbors[region as usize]
    }

    pub fn region_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = JsonLines::create(path)?;
        for (r, n) in self.neighbors.iter().enumerate() {
            out.write(&AdjacencyLine {
                region: r as u32,
                neighbors: n,
            })?;
        }
        out.flush()
    }
}

/// Regions `a != b` are adjacent iff some pixel of `a` is 4-adjacent to some
/// pixel of `b`.
pub fn region_adjacency(partition: &Partition) -> AdjacencyGraph {
    let (w, h) = (partition.width, partition.height);
    let mut neighbors = vec![Vec::new(); partition.region_count()];
    let ids = &partition.region_of;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let a = ids[p];
            for q in [(x + 1 < w).then(|| p + 1), (y + 1 < h).then(|| p + w)].into_iter().flatten() {
                let b = ids[q];
                if a != b {
                    neighbors[a as usize].push(b);
                    neighbors[b as usize].push(a);
                }
            }
        }
    }
    for n in &mut neighbors {
        n.sort_unstable();
        n.dedup();
    }
    AdjacencyGraph { neighbors }
}
