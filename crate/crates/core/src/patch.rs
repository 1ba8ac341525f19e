//! Overlapping patch extraction, similarity search, collaborative grouping and
//! overlap-averaging aggregation.

use std::collections::HashSet;

use nalgebra::DVector;

use crate::error::{HbeError, Result};
use crate::image::{ImageGrid, MaskImage};
use crate::model::Patch;

/// Weight of a pixel that is unknown in at least one of the compared patches.
pub const DEFAULT_UNKNOWN_WEIGHT: f64 = 0.01;

/// Top-left corner of a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchIndex {
    pub top: usize,
    pub left: usize,
}

impl PatchIndex {
    pub const fn new(top: usize, left: usize) -> Self {
        Self { top, left }
    }

    pub fn fits(&self, width: usize, height: usize, side: usize) -> bool {
        self.top + side <= height && self.left + side <= width
    }
}

/// A set of mutually similar patches restored with one shared model.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGroup {
    pub anchor: PatchIndex,
    /// Sorted by ascending distance; the anchor comes first.
    pub members: Vec<PatchIndex>,
    pub distances: Vec<f64>,
}

impl PatchGroup {
    pub fn singleton(anchor: PatchIndex) -> Self {
        Self {
            anchor,
            members: vec![anchor],
            distances: vec![0.0],
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub patch_side: usize,
    pub window_side: usize,
    /// Candidates within `epsilon` times the nearest-neighbour distance are admitted.
    pub epsilon: f64,
    /// Stride of the anchor grid.
    pub step: usize,
    pub min_group: usize,
    pub unknown_weight: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            patch_side: 8,
            window_side: 25,
            epsilon: 1.5,
            step: 1,
            min_group: 2,
            unknown_weight: DEFAULT_UNKNOWN_WEIGHT,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 {
            return Err(HbeError::Argument("patch_side must be positive".into()));
        }
        if self.window_side < self.patch_side {
            return Err(HbeError::Argument(format!(
                "window_side {} smaller than patch_side {}",
                self.window_side, self.patch_side
            )));
        }
        if !(self.epsilon >= 1.0) {
            return Err(HbeError::Argument(format!("epsilon must be >= 1, got {}", self.epsilon)));
        }
        if self.step == 0 {
            return Err(HbeError::Argument("step must be >= 1".into()));
        }
        if !(self.unknown_weight > 0.0 && self.unknown_weight <= 1.0) {
            return Err(HbeError::Argument(format!(
                "unknown_weight must lie in (0, 1], got {}",
                self.unknown_weight
            )));
        }
        Ok(())
    }
}

fn bounds_error(idx: PatchIndex, side: usize, image: &ImageGrid) -> HbeError {
    HbeError::Argument(format!(
        "patch {side}x{side} at (top {}, left {}) does not fit a {}x{} image",
        idx.top,
        idx.left,
        image.width(),
        image.height()
    ))
}

/// Row-major vectorization of the `side × side` window at `idx`.
pub fn extract_patch(image: &ImageGrid, idx: PatchIndex, side: usize) -> Result<Patch> {
    Ok(Patch {
        values: extract_values(image, idx, side)?,
    })
}

/// Like [`extract_patch`] but without the finiteness requirement (masked
/// observations may be NaN).
pub fn extract_values(image: &ImageGrid, idx: PatchIndex, side: usize) -> Result<DVector<f64>> {
    if side == 0 || !idx.fits(image.width(), image.height(), side) {
        return Err(bounds_error(idx, side, image));
    }
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        let row = image.row(idx.top + r);
        out.extend_from_slice(&row[idx.left..idx.left + side]);
    }
    Ok(DVector::from_vec(out))
}

/// Weighted mean squared difference; pixels known in both patches weigh 1,
/// all others `unknown_weight`.
pub fn patch_distance(a: &Patch, b: &Patch, mask_a: &[f64], mask_b: &[f64], unknown_weight: f64) -> Result<f64> {
    let n = a.len();
    if b.len() != n || mask_a.len() != n || mask_b.len() != n {
        return Err(HbeError::Argument("patch_distance length mismatch".into()));
    }
    if !(unknown_weight > 0.0 && unknown_weight <= 1.0) {
        return Err(HbeError::Argument(format!(
            "unknown_weight must lie in (0, 1], got {unknown_weight}"
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..n {
        let w = if mask_a[j] == 1.0 && mask_b[j] == 1.0 {
            1.0
        } else {
            unknown_weight
        };
        let d = a.values[j] - b.values[j];
        num += d * d * w;
        den += w;
    }
    Ok(num / den)
}

/// Same formula as [`patch_distance`], read directly from the images.
fn window_distance(oracle: &ImageGrid, masks: &MaskImage, a: PatchIndex, b: PatchIndex, side: usize, unknown_weight: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..side {
        let oa = &oracle.row(a.top + r)[a.left..a.left + side];
        let ob = &oracle.row(b.top + r)[b.left..b.left + side];
        let ma = &masks.row(a.top + r)[a.left..a.left + side];
        let mb = &masks.row(b.top + r)[b.left..b.left + side];
        for j in 0..side {
            let w = if ma[j] == 1.0 && mb[j] == 1.0 {
                1.0
            } else {
                unknown_weight
            };
            let d = oa[j] - ob[j];
            num += d * d * w;
            den += w;
        }
    }
    num / den
}

/// Similar patches to `anchor` in the oracle image.
///
/// Candidates are the patches whose top-left corner lies within
/// `window_side / 2` of the anchor's in both directions (equivalently, whose
/// centres fall in the search window centred on the anchor's). The threshold is
/// `epsilon` times the distance to the nearest non-anchor candidate; ties in the
/// ordering are broken by raster index.
pub fn find_similar(oracle: &ImageGrid, masks: &MaskImage, anchor: PatchIndex, cfg: &SearchConfig) -> Result<PatchGroup> {
    cfg.validate()?;
    oracle.ensure_same_shape(masks, "find_similar oracle/mask")?;
    let side = cfg.patch_side;
    let (w, h) = (oracle.width(), oracle.height());
    if !anchor.fits(w, h, side) {
        return Err(bounds_error(anchor, side, oracle));
    }
    let radius = cfg.window_side / 2;
    let top_range = anchor.top.saturating_sub(radius)..=(anchor.top + radius).min(h - side);
    let left_range = anchor.left.saturating_sub(radius)..=(anchor.left + radius).min(w - side);

    let mut candidates: Vec<(f64, PatchIndex)> = Vec::new();
    for top in top_range {
        for left in left_range.clone() {
            let idx = PatchIndex { top, left };
            if idx == anchor {
                continue;
            }
            let d = window_distance(oracle, masks, anchor, idx, side, cfg.unknown_weight);
            candidates.push((d, idx));
        }
    }
    // raster order is the enumeration order, so a stable sort keeps the
    // lowest raster index first among equal distances
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut group = PatchGroup::singleton(anchor);
    if let Some(&(nearest, _)) = candidates.first() {
        let threshold = cfg.epsilon * nearest;
        for (d, idx) in candidates {
            if d > threshold {
                break;
            }
            group.members.push(idx);
            group.distances.push(d);
        }
    }
    let cap = cfg.window_side * cfg.window_side;
    group.members.truncate(cap);
    group.distances.truncate(cap);
    Ok(group)
}

/// Anchor positions with stride `step`, clamped so the last row and column of
/// patches reach the image border.
pub fn anchor_grid(width: usize, height: usize, side: usize, step: usize) -> Result<Vec<PatchIndex>> {
    if side == 0 || side > width || side > height {
        return Err(HbeError::Argument(format!(
            "patch side {side} does not fit a {width}x{height} image"
        )));
    }
    if step == 0 {
        return Err(HbeError::Argument("step must be >= 1".into()));
    }
    let axis = |len: usize| {
        let last = len - side;
        let mut v: Vec<usize> = (0..=last).step_by(step).collect();
        if *v.last().unwrap() != last {
            v.push(last);
        }
        v
    };
    let rows = axis(height);
    let cols = axis(width);
    Ok(rows
        .iter()
        .flat_map(|&top| cols.iter().map(move |&left| PatchIndex { top, left }))
        .collect())
}

/// Greedy raster sweep: a group whose anchor already belongs to an earlier
/// kept group is dropped (that anchor is restored by the earlier group).
pub fn group_collaborative(groups: Vec<PatchGroup>) -> Vec<PatchGroup> {
    let mut covered: HashSet<PatchIndex> = HashSet::new();
    let mut kept = Vec::new();
    for group in groups {
        if covered.contains(&group.anchor) {
            continue;
        }
        covered.extend(group.members.iter().copied());
        kept.push(group);
    }
    kept
}

/// Per-pixel uniform average of all patch estimates.
pub fn aggregate(patches: &[(PatchIndex, Patch)], width: usize, height: usize, side: usize) -> Result<ImageGrid> {
    let mut acc = Accumulator::new(width, height, side)?;
    for (idx, patch) in patches {
        acc.add(*idx, patch.values.as_slice())?;
    }
    acc.finish()
}

/// Streaming form of [`aggregate`]. Sums are accumulated in insertion order.
#[derive(Debug, Clone)]
pub struct Accumulator {
    width: usize,
    height: usize,
    side: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl Accumulator {
    pub fn new(width: usize, height: usize, side: usize) -> Result<Self> {
        if width == 0 || height == 0 || side == 0 {
            return Err(HbeError::Argument("aggregate needs positive dimensions".into()));
        }
        Ok(Self {
            width,
            height,
            side,
            sum: vec![0.0; width * height],
            count: vec![0; width * height],
        })
    }

    pub fn add(&mut self, idx: PatchIndex, values: &[f64]) -> Result<()> {
        let side = self.side;
        if values.len() != side * side {
            return Err(HbeError::Argument(format!(
                "patch has {} values, expected {}",
                values.len(),
                side * side
            )));
        }
        if !idx.fits(self.width, self.height, side) {
            return Err(HbeError::Argument(format!(
                "patch at (top {}, left {}) outside {}x{} image",
                idx.top, idx.left, self.width, self.height
            )));
        }
        for r in 0..side {
            let base = (idx.top + r) * self.width + idx.left;
            for c in 0..side {
                self.sum[base + c] += values[r * side + c];
                self.count[base + c] += 1;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ImageGrid> {
        if let Some(p) = self.count.iter().position(|&c| c == 0) {
            return Err(HbeError::State(format!(
                "pixel (row {}, col {}) is not covered by any patch",
                p / self.width,
                p % self.width
            )));
        }
        let data = self
            .sum
            .iter()
            .zip(&self.count)
            .map(|(s, &c)| s / c as f64)
            .collect();
        ImageGrid::new(self.width, self.height, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extract_row_major() {
        let img = ImageGrid::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = extract_patch(&img, PatchIndex::new(0, 0), 2).unwrap();
        assert_eq!(p.values.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(extract_patch(&img, PatchIndex::new(1, 0), 2).is_err());
    }

    #[test]
    fn extract_constant() {
        let img = ImageGrid::filled(9, 7, 7.0);
        for idx in anchor_grid(9, 7, 3, 1).unwrap() {
            let p = extract_patch(&img, idx, 3).unwrap();
            assert!(p.values.iter().all(|&v| v == 7.0));
            assert_eq!(p.len(), 9);
        }
    }

    #[test]
    fn distance_examples() {
        let a = Patch::from_slice(&[0.0, 0.0]).unwrap();
        let b = Patch::from_slice(&[2.0, 0.0]).unwrap();
        let ones = [1.0, 1.0];
        assert_eq!(patch_distance(&a, &a, &ones, &ones, 0.01).unwrap(), 0.0);
        assert_eq!(patch_distance(&a, &b, &ones, &ones, 0.01).unwrap(), 2.0);
        let d = patch_distance(&a, &b, &[0.0, 1.0], &ones, 0.01).unwrap();
        assert!((d - 0.04 / 1.01).abs() < 1e-15);
    }

    #[test]
    fn anchor_grid_covers_border() {
        let g = anchor_grid(10, 9, 4, 4).unwrap();
        let rows: Vec<usize> = g.iter().map(|p| p.top).collect();
        assert!(rows.contains(&5));
        assert!(g.contains(&PatchIndex::new(5, 6)));
        assert!(anchor_grid(3, 3, 4, 1).is_err());
    }

    #[test]
    fn collaborative_pairwise() {
        let a = PatchIndex::new(0, 0);
        let b = PatchIndex::new(0, 1);
        let groups = vec![
            PatchGroup { anchor: a, members: vec![a, b], distances: vec![0.0, 1.0] },
            PatchGroup { anchor: b, members: vec![b, a], distances: vec![0.0, 1.0] },
        ];
        let kept = group_collaborative(groups);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].anchor, a);

        let singles: Vec<_> = (0..4).map(|i| PatchGroup::singleton(PatchIndex::new(i, 0))).collect();
        assert_eq!(group_collaborative(singles.clone()), singles);
    }

    #[test]
    fn aggregate_examples() {
        let p = Patch::from_slice(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let img = aggregate(&[(PatchIndex::new(0, 0), p)], 2, 2, 2).unwrap();
        assert_eq!(img.data(), &[1.0, 2.0, 3.0, 4.0]);

        let two = Patch::from_slice(&[2.0; 4]).unwrap();
        let four = Patch::from_slice(&[4.0; 4]).unwrap();
        let img = aggregate(&[(PatchIndex::new(0, 0), two), (PatchIndex::new(0, 1), four)], 3, 2, 2).unwrap();
        assert_eq!(img.data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn aggregate_reports_uncovered_pixel() {
        let p = Patch::from_slice(&[1.0; 4]).unwrap();
        match aggregate(&[(PatchIndex::new(0, 0), p)], 3, 2, 2) {
            Err(HbeError::State(msg)) => assert!(msg.contains("row 0, col 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_oracle_admits_everything() {
        let img = ImageGrid::filled(12, 12, 3.0);
        let masks = ImageGrid::filled(12, 12, 1.0);
        let cfg = SearchConfig { patch_side: 3, window_side: 5, ..Default::default() };
        let g = find_similar(&img, &masks, PatchIndex::new(5, 5), &cfg).unwrap();
        assert_eq!(g.len(), 25);
        assert_eq!(g.members[0], PatchIndex::new(5, 5));
        assert!(g.distances.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn exact_duplicate_only() {
        // distinct ramp everywhere except one copy of the anchor patch
        let mut img = ImageGrid::from_fn(16, 16, |r, c| ((r * 16 + c) as f64).powi(2));
        let anchor = PatchIndex::new(2, 2);
        let dup = PatchIndex::new(9, 8);
        for r in 0..3 {
            for c in 0..3 {
                let v = img.get(anchor.top + r, anchor.left + c);
                img.set(dup.top + r, dup.left + c, v);
            }
        }
        let masks = ImageGrid::filled(16, 16, 1.0);
        let cfg = SearchConfig { patch_side: 3, window_side: 15, ..Default::default() };
        let g = find_similar(&img, &masks, anchor, &cfg).unwrap();
        assert_eq!(g.members, vec![anchor, dup]);
    }
}
