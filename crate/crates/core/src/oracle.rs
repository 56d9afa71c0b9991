//! Simulated annotator: answers region queries from ground-truth masks with
//! either the dominant class (one click) or the set of classes present
//! (one click per class), and keeps the pool of labeled regions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::{JsonLines, Mask};
use crate::error::{Error, Result};
use crate::superpixel::Partition;

/// Half-width of the square kernel used to dilate region boundaries (5×5).
pub const BOUNDARY_DILATION_RADIUS: i64 = 2;

/// A region of one training image.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionRef {
    pub image: u32,
    pub region: u32,
}

impl RegionRef {
    pub fn new(image: usize, region: usize) -> Self {
        Self {
            image: image as u32,
            region: region as u32,
        }
    }
}

/// Non-empty sorted set of mask ids (may contain UNDEF).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct MultiClassLabel(Vec<u8>);

impl MultiClassLabel {
    pub fn new(mut ids: Vec<u8>) -> Option<Self> {
        ids.sort_unstable();
        ids.dedup();
        (!ids.is_empty()).then_some(Self(ids))
    }

    pub fn single(id: u8) -> Self {
        Self(vec![id])
    }

    pub fn classes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_single(&self) -> bool {
        self.0.len() == 1
    }

    pub fn contains(&self, id: u8) -> bool {
        self.0.binary_search(&id).is_ok()
    }
}

impl TryFrom<Vec<u8>> for MultiClassLabel {
    type Error = &'static str;
    fn try_from(ids: Vec<u8>) -> std::result::Result<Self, Self::Error> {
        Self::new(ids).ok_or("empty class set")
    }
}

impl From<MultiClassLabel> for Vec<u8> {
    fn from(l: MultiClassLabel) -> Self {
        l.0
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Dominant,
    #[serde(rename = "multiclass")]
    MultiClass,
}

impl FromStr for LabelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dominant" | "dom" => Ok(LabelMode::Dominant),
            "multiclass" | "multi" | "mul" => Ok(LabelMode::MultiClass),
            other => Err(Error::Config(format!("unknown labeling mode `{other}`"))),
        }
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Dominant => "dominant",
            LabelMode::MultiClass => "multiclass",
        })
    }
}

/// Majority class of the given pixels; ties go to the lowest id, which puts
/// UNDEF (255) last.
pub fn dominant_label(pixels: &[u32], mask: &Mask) -> u8 {
    assert!(!pixels.is_empty(), "dominant_label on empty region");
    let mut counts = [0usize; 256];
    for &p in pixels {
        counts[mask.at(p as usize) as usize] += 1;
    }
    let mut best = 0usize;
    for id in 1..256 {
        if counts[id] > counts[best] {
            best = id;
        }
    }
    best as u8
}

/// Classes present in the region after discarding a dilated boundary band.
///
/// Boundary pixels are region pixels 4-adjacent to another region or to the
/// image border. They are dilated with a 5×5 square kernel; classes seen only
/// in the dilated band are dropped. If nothing survives, the dominant class
/// is returned alone.
pub fn multiclass_label(region: u32, mask: &Mask, partition: &Partition) -> MultiClassLabel {
    let pixels = partition.pixels(region);
    let (w, h) = (partition.width(), partition.height());
    let xs = pixels.iter().map(|&p| p as usize % w);
    let ys = pixels.iter().map(|&p| p as usize / w);
    let (x0, x1) = (xs.clone().min().unwrap(), xs.max().unwrap());
    let (y0, y1) = (ys.clone().min().unwrap(), ys.max().unwrap());
    let bw = x1 - x0 + 1;
    let local = |x: usize, y: usize| (y - y0) * bw + (x - x0);

    let mut boundary = vec![false; bw * (y1 - y0 + 1)];
    for &p in pixels {
        let (x, y) = (p as usize % w, p as usize / w);
        let on_edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
        let touches_other = on_edge
            || [p as usize - 1, p as usize + 1, p as usize - w, p as usize + w]
                .into_iter()
                .any(|q| partition.region_at(q) != region);
        boundary[local(x, y)] = touches_other;
    }

    let r = BOUNDARY_DILATION_RADIUS;
    let mut present = [false; 256];
    for &p in pixels {
        let (x, y) = (p as usize % w, p as usize / w);
        let mut near_boundary = false;
        'search: for dy in -r..=r {
            for dx in -r..=r {
                let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                if qx < x0 as i64 || qy < y0 as i64 || qx > x1 as i64 || qy > y1 as i64 {
                    continue;
                }
                if boundary[local(qx as usize, qy as usize)] {
                    near_boundary = true;
                    break 'search;
                }
            }
        }
        if !near_boundary {
            present[mask.at(p as usize) as usize] = true;
        }
    }
    let ids: Vec<u8> = (0..256).filter(|&i| present[i]).map(|i| i as u8).collect();
    MultiClassLabel::new(ids).unwrap_or_else(|| MultiClassLabel::single(dominant_label(pixels, mask)))
}

/// Ground-truth replaying annotator with a running click counter.
pub struct Oracle<'a> {
    masks: &'a [Mask],
    partitions: &'a [Partition],
    mode: LabelMode,
    clicks: usize,
}

impl<'a> Oracle<'a> {
    pub fn new(masks: &'a [Mask], partitions: &'a [Partition], mode: LabelMode) -> Self {
        assert_eq!(masks.len(), partitions.len());
        Self {
            masks,
            partitions,
            mode,
            clicks: 0,
        }
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    /// Total clicks answered so far.
    pub fn clicks(&self) -> usize {
        self.clicks
    }

    /// Answer one query and charge its clicks (1 for dominant, |Y| otherwise).
    pub fn label(&mut self, r: RegionRef) -> MultiClassLabel {
        let mask = &self.masks[r.image as usize];
        let partition = &self.partitions[r.image as usize];
        let label = match self.mode {
            LabelMode::Dominant => MultiClassLabel::single(dominant_label(partition.pixels(r.region), mask)),
            LabelMode::MultiClass => multiclass_label(r.region, mask, partition),
        };
        self.clicks += label.len();
        label
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolEntry {
    pub label: MultiClassLabel,
    pub round: usize,
}

/// Labeled regions accumulated over rounds; a region is never labeled twice.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabeledPool {
    entries: BTreeMap<RegionRef, PoolEntry>,
}

#[derive(Serialize, Deserialize)]
struct PoolLine {
    image: u32,
    region: u32,
    classes: MultiClassLabel,
    round: usize,
}

impl LabeledPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, r: RegionRef, label: MultiClassLabel, round: usize) -> Result<()> {
        if self.entries.contains_key(&r) {
            return Err(Error::AlreadyLabeled(r));
        }
        self.entries.insert(r, PoolEntry { label, round });
        Ok(())
    }

    pub fn contains(&self, r: &RegionRef) -> bool {
        self.entries.contains_key(r)
    }

    pub fn get(&self, r: &RegionRef) -> Option<&PoolEntry> {
        self.entries.get(r)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in (image, region) order.
    pub fn iter(&self) -> impl Iterator<Item = (&RegionRef, &PoolEntry)> {
        self.entries.iter()
    }

    pub fn single_class(&self) -> impl Iterator<Item = (&RegionRef, &PoolEntry)> {
        self.iter().filter(|(_, e)| e.label.is_single())
    }

    pub fn multi_class(&self) -> impl Iterator<Item = (&RegionRef, &PoolEntry)> {
        self.iter().filter(|(_, e)| !e.label.is_single())
    }

    /// Σ|Y| over all entries, i.e. the clicks the pool cost.
    pub fn clicks(&self) -> usize {
        self.entries.values().map(|e| e.label.len()).sum()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = JsonLines::create(path)?;
        for (r, e) in &self.entries {
            out.write(&PoolLine {
                image: r.image,
                region: r.region,
                classes: e.label.clone(),
                round: e.round,
            })?;
        }
        out.flush()
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut pool = Self::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let l: PoolLine = serde_json::from_str(line)?;
            pool.insert(RegionRef { image: l.image, region: l.region }, l.classes, l.round)?;
        }
        Ok(pool)
    }
}

/// Label `regions` in order. Returns the new entries and the clicks spent.
pub fn query_batch(
    regions: &[RegionRef],
    oracle: &mut Oracle<'_>,
    pool: &LabeledPool,
) -> Result<(Vec<(RegionRef, MultiClassLabel)>, usize)> {
    let mut seen = std::collections::HashSet::new();
    for r in regions {
        if pool.contains(r) || !seen.insert(*r) {
            return Err(Error::AlreadyLabeled(*r));
        }
    }
    let before = oracle.clicks();
    let labeled = regions.iter().map(|&r| (r, oracle.label(r))).collect();
    Ok((labeled, oracle.clicks() - before))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Image, UNDEF};
    use crate::superpixel::grid_partition;

    fn mask_from_counts(counts: &[(u8, usize)]) -> (Mask, Vec<u32>) {
        let data: Vec<u8> = counts.iter().flat_map(|&(id, n)| std::iter::repeat_n(id, n)).collect();
        let n = data.len();
        (Mask::new(n, 1, 6, data).unwrap(), (0..n as u32).collect())
    }

    #[test]
    fn dominant_majority() {
        let (m, px) = mask_from_counts(&[(3, 6), (1, 4)]);
        assert_eq!(dominant_label(&px, &m), 3);
    }

    #[test]
    fn dominant_tie_lowest() {
        let (m, px) = mask_from_counts(&[(4, 5), (2, 5)]);
        assert_eq!(dominant_label(&px, &m), 2);
    }

    #[test]
    fn dominant_can_be_undef() {
        let (m, px) = mask_from_counts(&[(UNDEF, 6), (0, 4)]);
        assert_eq!(dominant_label(&px, &m), UNDEF);
        let (m, px) = mask_from_counts(&[(UNDEF, 5), (5, 5)]);
        assert_eq!(dominant_label(&px, &m), 5);
    }

    /// One region in the middle of an image whose other pixels form a frame
    /// region, so the border ring of the inner region is its boundary.
    fn framed(size: usize, inner: usize, fill: impl Fn(usize, usize) -> u8) -> (Mask, Partition, u32) {
        let off = (size - inner) / 2;
        let labels: Vec<u32> = (0..size * size)
            .map(|p| {
                let (x, y) = (p % size, p / size);
                let inside = (off..off + inner).contains(&x) && (off..off + inner).contains(&y);
                u32::from(inside)
            })
            .collect();
        let part = Partition::from_labels(size, size, &labels);
        let data = (0..size * size).map(|p| fill(p % size, p / size)).collect();
        let inner_id = part.region_at(off * size + off);
        (Mask::new(size, size, 4, data).unwrap(), part, inner_id)
    }

    #[test]
    fn thin_edge_strip_is_ignored() {
        // 9x9 region at (3..12); a 1-pixel strip of class 1 along its left edge
        let (m, part, r) = framed(15, 9, |x, _| if x == 3 { 1 } else { 0 });
        assert_eq!(multiclass_label(r, &m, &part).classes(), &[0]);
    }

    #[test]
    fn deep_halves_are_both_reported() {
        // 12x12 region, left half class 2, right half class 3
        let (m, part, r) = framed(16, 12, |x, _| if x < 8 { 2 } else { 3 });
        assert_eq!(multiclass_label(r, &m, &part).classes(), &[2, 3]);
    }

    #[test]
    fn thin_region_falls_back_to_dominant() {
        let (m, part, r) = framed(12, 4, |x, _| if x < 5 { 1 } else { 2 });
        // every pixel of a 4x4 region is within 2 of its boundary
        let label = multiclass_label(r, &m, &part);
        assert_eq!(label.classes(), &[dominant_label(part.pixels(r), &m)]);
    }

    #[test]
    fn uniform_region_costs_one_click_in_both_modes() {
        let (m, part, r) = framed(16, 12, |_, _| 2);
        let masks = [m];
        let parts = [part];
        for mode in [LabelMode::Dominant, LabelMode::MultiClass] {
            let mut oracle = Oracle::new(&masks, &parts, mode);
            let label = oracle.label(RegionRef::new(0, r as usize));
            assert_eq!(label.classes(), &[2]);
            assert_eq!(oracle.clicks(), 1);
        }
    }

    fn striped_masks() -> (Vec<Mask>, Vec<Partition>) {
        // three 12x12 tiles holding one, two and three deep classes
        let w = 36;
        let h = 12;
        let data: Vec<u8> = (0..w * h)
            .map(|p| {
                let (x, y) = (p % w, p / w);
                match x / 12 {
                    0 => 0,
                    1 => if y < 6 { 0 } else { 1 },
                    _ => (x % 12 / 4) as u8,
                }
            })
            .collect();
        let mask = Mask::new(w, h, 3, data).unwrap();
        let part = grid_partition(&Image::filled(w, h, [0.0; 3]), 12);
        (vec![mask], vec![part])
    }

    #[test]
    fn query_batch_click_accounting() {
        let (masks, parts) = striped_masks();
        let regions: Vec<RegionRef> = (0..3).map(|r| RegionRef::new(0, r)).collect();
        let pool = LabeledPool::new();

        let mut dom = Oracle::new(&masks, &parts, LabelMode::Dominant);
        let (_, clicks) = query_batch(&regions, &mut dom, &pool).unwrap();
        assert_eq!(clicks, 3);

        let mut mul = Oracle::new(&masks, &parts, LabelMode::MultiClass);
        let (labels, clicks) = query_batch(&regions, &mut mul, &pool).unwrap();
        let sizes: Vec<usize> = labels.iter().map(|(_, l)| l.len()).collect();
        // the undilated core of tile 3 spans local columns 3..=8, touching
        // all three stripes
        assert_eq!(sizes, vec![1, 2, 3]);
        assert_eq!(clicks, 6);

        let (none, clicks) = query_batch(&[], &mut mul, &pool).unwrap();
        assert!(none.is_empty());
        assert_eq!(clicks, 0);
    }

    #[test]
    fn query_batch_rejects_duplicates() {
        let (masks, parts) = striped_masks();
        let mut pool = LabeledPool::new();
        pool.insert(RegionRef::new(0, 1), MultiClassLabel::single(0), 1).unwrap();
        let mut oracle = Oracle::new(&masks, &parts, LabelMode::Dominant);
        let err = query_batch(&[RegionRef::new(0, 1)], &mut oracle, &pool).unwrap_err();
        assert!(matches!(err, Error::AlreadyLabeled(_)));
        let err = query_batch(&[RegionRef::new(0, 0), RegionRef::new(0, 0)], &mut oracle, &LabeledPool::new());
        assert!(err.is_err());
        assert!(pool.insert(RegionRef::new(0, 1), MultiClassLabel::single(2), 2).is_err());
    }

    #[test]
    fn pool_split_and_jsonl_round_trip() {
        let mut pool = LabeledPool::new();
        pool.insert(RegionRef::new(0, 3), MultiClassLabel::new(vec![2, 0]).unwrap(), 1).unwrap();
        pool.insert(RegionRef::new(1, 0), MultiClassLabel::single(UNDEF), 2).unwrap();
        assert_eq!(pool.single_class().count(), 1);
        assert_eq!(pool.multi_class().count(), 1);
        assert_eq!(pool.clicks(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        pool.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"image":0,"region":3,"classes":[0,2],"round":1}"#);
        assert_eq!(LabeledPool::read_jsonl(&path).unwrap(), pool);
    }

    #[test]
    fn empty_label_set_rejected() {
        assert!(MultiClassLabel::new(vec![]).is_none());
        assert!(serde_json::from_str::<MultiClassLabel>("[]").is_err());
    }
}
