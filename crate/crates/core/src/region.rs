//! Exact set algebra over axis-aligned integer boxes in up to three
//! dimensions, plus a region-to-value map used for writer and coherence
//! tracking.
//!
//! All point sets are unions of half-open boxes `[min, max)` on an unsigned
//! integer lattice. Regions are kept in a canonical dissection so that equal
//! point sets compare equal structurally.

use std::collections::BTreeSet;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Lattice coordinate type. Buffer index spaces are unsigned 64-bit.
pub type Coord = u64;

/// Maximum supported dimensionality.
pub const MAX_DIMS: usize = 3;

/// Half-open axis-aligned integer box `[min, max)` in 1 to 3 dimensions.
///
/// Unused trailing dimensions are pinned to `[0, 1)` so every box is stored
/// with three coordinate pairs. The empty box has a single canonical
/// representation per dimensionality (`min == max == [0, 0, 0]`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridBox {
    min: [Coord; MAX_DIMS],
    max: [Coord; MAX_DIMS],
    dims: u8,
}

impl GridBox {
    /// Builds a box from `dims`-length bounds. Trailing dimensions are filled
    /// with `[0, 1)`. Panics if `min[d] > max[d]` for any axis.
    pub fn new(dims: usize, min: &[Coord], max: &[Coord]) -> Self {
        assert!((1..=MAX_DIMS).contains(&dims), "dims must be 1..=3");
        assert_eq!(min.len(), dims);
        assert_eq!(max.len(), dims);
        let mut lo = [0; MAX_DIMS];
        let mut hi = [1; MAX_DIMS];
        for d in 0..dims {
            assert!(min[d] <= max[d], "box min must not exceed max");
            lo[d] = min[d];
            hi[d] = max[d];
        }
        Self { min: lo, max: hi, dims: dims as u8 }.canonicalized()
    }

    /// 1-D interval `[lo, hi)`.
    pub fn d1(lo: Coord, hi: Coord) -> Self {
        Self::new(1, &[lo], &[hi])
    }

    /// 2-D box.
    pub fn d2(lo: [Coord; 2], hi: [Coord; 2]) -> Self {
        Self::new(2, &lo, &hi)
    }

    /// 3-D box.
    pub fn d3(lo: [Coord; 3], hi: [Coord; 3]) -> Self {
        Self::new(3, &lo, &hi)
    }

    /// The canonical empty box of the given dimensionality.
    pub fn empty(dims: usize) -> Self {
        assert!((1..=MAX_DIMS).contains(&dims));
        Self { min: [0; MAX_DIMS], max: [0; MAX_DIMS], dims: dims as u8 }
    }

    fn canonicalized(self) -> Self {
        if (0..MAX_DIMS).any(|d| self.min[d] == self.max[d]) {
            Self::empty(self.dims as usize)
        } else {
            self
        }
    }

    pub fn dims(&self) -> usize {
        self.dims as usize
    }

    pub fn lower(self) -> [Coord; MAX_DIMS] {
        self.min
    }

    pub fn upper(self) -> [Coord; MAX_DIMS] {
        self.max
    }

    pub fn is_empty(&self) -> bool {
        (0..MAX_DIMS).any(|d| self.min[d] == self.max[d])
    }

    /// Extent along one axis.
    pub fn extent(&self, axis: usize) -> Coord {
        self.max[axis] - self.min[axis]
    }

    /// Number of lattice points covered.
    pub fn volume(&self) -> u64 {
        (0..MAX_DIMS).map(|d| self.extent(d)).product()
    }

    pub fn contains_point(&self, p: [Coord; MAX_DIMS]) -> bool {
        (0..MAX_DIMS).all(|d| self.min[d] <= p[d] && p[d] < self.max[d])
    }

    /// True when `other` is a subset of `self`. The empty box is contained in
    /// everything.
    pub fn contains_box(&self, other: &GridBox) -> bool {
        other.is_empty()
            || (0..MAX_DIMS).all(|d| self.min[d] <= other.min[d] && other.max[d] <= self.max[d])
    }

    /// Point-set intersection; the canonical empty box when disjoint.
    pub fn intersect(&self, other: &GridBox) -> GridBox {
        debug_assert_eq!(self.dims, other.dims);
        let mut min = [0; MAX_DIMS];
        let mut max = [0; MAX_DIMS];
        for d in 0..MAX_DIMS {
            min[d] = self.min[d].max(other.min[d]);
            max[d] = self.max[d].min(other.max[d]);
            if min[d] >= max[d] {
                return GridBox::empty(self.dims as usize);
            }
        }
        GridBox { min, max, dims: self.dims }
    }

    pub fn overlaps(&self, other: &GridBox) -> bool {
        !self.is_empty()
            && !other.is_empty()
            && (0..MAX_DIMS).all(|d| self.min[d] < other.max[d] && other.min[d] < self.max[d])
    }

    /// Smallest box containing both operands (empty operands are ignored).
    pub fn hull(&self, other: &GridBox) -> GridBox {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        let mut min = [0; MAX_DIMS];
        let mut max = [1; MAX_DIMS];
        for d in 0..MAX_DIMS {
            min[d] = self.min[d].min(other.min[d]);
            max[d] = self.max[d].max(other.max[d]);
        }
        GridBox { min, max, dims: self.dims.max(other.dims) }
    }

    /// Grows the box by `border` on both sides of every used axis, clamped to
    /// `clamp`. Used by the neighborhood range mapper.
    pub fn inflate_clamped(&self, border: &[Coord], clamp: &GridBox) -> GridBox {
        if self.is_empty() {
            return GridBox::empty(self.dims as usize);
        }
        let mut min = self.min;
        let mut max = self.max;
        for d in 0..self.dims as usize {
            let b = border.get(d).copied().unwrap_or(0);
            min[d] = min[d].saturating_sub(b).max(clamp.min[d]);
            max[d] = (max[d] + b).min(clamp.max[d]);
        }
        GridBox { min, max, dims: self.dims }.canonicalized()
    }

    /// Row-major linear offset of point `p` within this box.
    pub fn linear_index(&self, p: [Coord; MAX_DIMS]) -> usize {
        debug_assert!(self.contains_point(p));
        let e1 = self.extent(1);
        let e2 = self.extent(2);
        (((p[0] - self.min[0]) * e1 + (p[1] - self.min[1])) * e2 + (p[2] - self.min[2])) as usize
    }

    /// Iterates all covered lattice points in row-major order.
    pub fn iter_points(&self) -> impl Iterator<Item = [Coord; MAX_DIMS]> + '_ {
        let b = *self;
        (b.min[0]..b.max[0]).flat_map(move |x| {
            (b.min[1]..b.max[1])
                .flat_map(move |y| (b.min[2]..b.max[2]).map(move |z| [x, y, z]))
        })
    }
}

impl fmt::Debug for GridBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return write!(f, "[empty{}d]", self.dims);
        }
        let d = self.dims as usize;
        write!(f, "[{:?},{:?})", &self.min[..d], &self.max[..d])
    }
}

#[derive(Serialize, Deserialize)]
struct BoxRepr {
    min: Vec<Coord>,
    max: Vec<Coord>,
}

impl Serialize for GridBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let d = self.dims as usize;
        BoxRepr { min: self.min[..d].to_vec(), max: self.max[..d].to_vec() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for GridBox {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let repr = BoxRepr::deserialize(de)?;
        if repr.min.len() != repr.max.len() || !(1..=MAX_DIMS).contains(&repr.min.len()) {
            return Err(D::Error::custom("box min/max must both have 1 to 3 coordinates"));
        }
        for d in 0..repr.min.len() {
            if repr.min[d] > repr.max[d] {
                return Err(D::Error::custom("box min must not exceed max"));
            }
        }
        Ok(GridBox::new(repr.min.len(), &repr.min, &repr.max))
    }
}

/// A finite union of disjoint boxes in canonical dissection.
///
/// Normalization dissects the input boxes on the grid of all distinct
/// coordinates per axis and then re-merges adjacent cells axis by axis
/// (highest axis first), so equal point sets always produce identical,
/// sorted box lists.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Region {
    dims: u8,
    boxes: Vec<GridBox>,
}

impl Region {
    pub fn empty(dims: usize) -> Self {
        assert!((1..=MAX_DIMS).contains(&dims));
        Self { dims: dims as u8, boxes: Vec::new() }
    }

    pub fn from_box(b: GridBox) -> Self {
        let dims = b.dims();
        if b.is_empty() {
            Self::empty(dims)
        } else {
            Self { dims: dims as u8, boxes: vec![b] }
        }
    }

    /// Builds a region as the union of arbitrary (possibly overlapping) boxes.
    pub fn from_boxes(dims: usize, boxes: impl IntoIterator<Item = GridBox>) -> Self {
        let boxes: Vec<GridBox> = boxes.into_iter().filter(|b| !b.is_empty()).collect();
        match boxes.len() {
            0 => Self::empty(dims),
            1 => Self::from_box(boxes[0]),
            _ => Self { dims: dims as u8, boxes: normalize(&boxes) },
        }
    }

    pub fn dims(&self) -> usize {
        self.dims as usize
    }

    pub fn boxes(&self) -> &[GridBox] {
        &self.boxes
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Total number of lattice points.
    pub fn num_elements(&self) -> u64 {
        self.boxes.iter().map(GridBox::volume).sum()
    }

    pub fn contains_point(&self, p: [Coord; MAX_DIMS]) -> bool {
        self.boxes.iter().any(|b| b.contains_point(p))
    }

    /// Smallest box containing the region; the canonical empty box when empty.
    pub fn bounding_box(&self) -> GridBox {
        self.boxes
            .iter()
            .fold(GridBox::empty(self.dims as usize), |acc, b| acc.hull(b))
    }

    /// Fast overlap test (no normalization).
    pub fn intersects(&self, other: &Region) -> bool {
        self.boxes.iter().any(|a| other.boxes.iter().any(|b| a.overlaps(b)))
    }

    pub fn intersects_box(&self, b: &GridBox) -> bool {
        self.boxes.iter().any(|a| a.overlaps(b))
    }

    pub fn contains_region(&self, other: &Region) -> bool {
        other.difference(self).is_empty()
    }

    pub fn contains_box(&self, b: &GridBox) -> bool {
        self.contains_region(&Region::from_box(*b))
    }

    pub fn union(&self, other: &Region) -> Region {
        debug_assert_eq!(self.dims, other.dims);
        if self.is_empty() {
            return other.clone();
        }
        if other.is_empty() {
            return self.clone();
        }
        self.binary_op(other, |in_a, in_b| in_a || in_b)
    }

    pub fn difference(&self, other: &Region) -> Region {
        debug_assert_eq!(self.dims, other.dims);
        if self.is_empty() || other.is_empty() || !self.intersects(other) {
            return self.clone();
        }
        self.binary_op(other, |in_a, in_b| in_a && !in_b)
    }

    pub fn intersection(&self, other: &Region) -> Region {
        debug_assert_eq!(self.dims, other.dims);
        if self.is_empty() || other.is_empty() || !self.intersects(other) {
            return Region::empty(self.dims as usize);
        }
        self.binary_op(other, |in_a, in_b| in_a && in_b)
    }

    pub fn intersection_box(&self, b: &GridBox) -> Region {
        Region::from_boxes(self.dims(), self.boxes.iter().map(|a| a.intersect(b)))
    }

    /// Evaluates a set operation on the joint dissection grid of both
    /// operands, then re-merges canonically.
    fn binary_op(&self, other: &Region, keep: impl Fn(bool, bool) -> bool) -> Region {
        let all: Vec<GridBox> = self.boxes.iter().chain(&other.boxes).copied().collect();
        let cuts = collect_cuts(&all);
        let a_cells = dissect_all(&self.boxes, &cuts);
        let b_cells = dissect_all(&other.boxes, &cuts);
        let cells: Vec<GridBox> = a_cells
            .union(&b_cells)
            .filter(|c| keep(a_cells.contains(*c), b_cells.contains(*c)))
            .copied()
            .collect();
        Region { dims: self.dims, boxes: merge_cells(cells) }
    }
}

impl fmt::Debug for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(&self.boxes).finish()
    }
}

impl Serialize for Region {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.boxes.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Region {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let boxes = Vec::<GridBox>::deserialize(de)?;
        let dims = boxes.iter().map(|b| b.dims()).max().unwrap_or(1);
        if boxes.iter().any(|b| b.dims() != dims) {
            return Err(D::Error::custom("mixed box dimensionality in region"));
        }
        Ok(Region::from_boxes(dims, boxes))
    }
}

/// Distinct min/max coordinates per axis over a box set.
fn collect_cuts(boxes: &[GridBox]) -> [Vec<Coord>; MAX_DIMS] {
    let mut cuts: [Vec<Coord>; MAX_DIMS] = Default::default();
    for b in boxes {
        for d in 0..MAX_DIMS {
            cuts[d].push(b.min[d]);
            cuts[d].push(b.max[d]);
        }
    }
    for c in &mut cuts {
        c.sort_unstable();
        c.dedup();
    }
    cuts
}

/// Splits one box at every grid cut strictly inside it.
fn dissect_box(b: &GridBox, cuts: &[Vec<Coord>; MAX_DIMS], out: &mut BTreeSet<GridBox>) {
    let mut edges: [Vec<Coord>; MAX_DIMS] = Default::default();
    for d in 0..MAX_DIMS {
        edges[d].push(b.min[d]);
        for &c in &cuts[d] {
            if c > b.min[d] && c < b.max[d] {
                edges[d].push(c);
            }
        }
        edges[d].push(b.max[d]);
    }
    for i in 0..edges[0].len() - 1 {
        for j in 0..edges[1].len() - 1 {
            for k in 0..edges[2].len() - 1 {
                out.insert(GridBox {
                    min: [edges[0][i], edges[1][j], edges[2][k]],
                    max: [edges[0][i + 1], edges[1][j + 1], edges[2][k + 1]],
                    dims: b.dims,
                });
            }
        }
    }
}

fn dissect_all(boxes: &[GridBox], cuts: &[Vec<Coord>; MAX_DIMS]) -> BTreeSet<GridBox> {
    let mut out = BTreeSet::new();
    for b in boxes {
        dissect_box(b, cuts, &mut out);
    }
    out
}

/// Merges grid cells into maximal boxes, sweeping axis 2, then 1, then 0.
/// Starting from a full grid dissection this yields a decomposition that
/// depends only on the covered point set.
fn merge_cells(cells: Vec<GridBox>) -> Vec<GridBox> {
    let mut boxes = cells;
    for axis in (0..MAX_DIMS).rev() {
        boxes.sort_unstable_by_key(|b| {
            let mut key = [(0, 0); MAX_DIMS];
            let mut slot = 0;
            for d in 0..MAX_DIMS {
                if d != axis {
                    key[slot] = (b.min[d], b.max[d]);
                    slot += 1;
                }
            }
            key[MAX_DIMS - 1] = (b.min[axis], b.max[axis]);
            key
        });
        let mut merged: Vec<GridBox> = Vec::with_capacity(boxes.len());
        for b in boxes {
            if let Some(last) = merged.last_mut() {
                let same_profile = (0..MAX_DIMS)
                    .filter(|&d| d != axis)
                    .all(|d| last.min[d] == b.min[d] && last.max[d] == b.max[d]);
                if same_profile && last.max[axis] == b.min[axis] {
                    last.max[axis] = b.max[axis];
                    continue;
                }
            }
            merged.push(b);
        }
        boxes = merged;
    }
    boxes.sort_unstable();
    boxes
}

/// Full canonical normalization of an arbitrary box list (union semantics).
fn normalize(boxes: &[GridBox]) -> Vec<GridBox> {
    let cuts = collect_cuts(boxes);
    let cells = dissect_all(boxes, &cuts);
    merge_cells(cells.into_iter().collect())
}

#[derive(Debug, thiserror::Error)]
pub enum RegionError {
    #[error("region {region:?} lies outside the map extent {extent:?}")]
    OutsideExtent { region: Region, extent: GridBox },
}

/// Maps every point of a fixed extent to a value, stored as a disjoint box
/// cover. Updates overwrite exactly the given region; adjacent same-valued
/// entries are re-merged so entry count tracks update history, not extent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMap<V> {
    extent: GridBox,
    entries: Vec<(GridBox, V)>,
}

impl<V: Clone + Eq> RegionMap<V> {
    /// New map with `initial` covering the whole extent.
    pub fn new(extent: GridBox, initial: V) -> Self {
        assert!(!extent.is_empty(), "region map extent must be non-empty");
        Self { extent, entries: vec![(extent, initial)] }
    }

    pub fn extent(&self) -> &GridBox {
        &self.extent
    }

    pub fn entries(&self) -> &[(GridBox, V)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_within(&self, region: &Region) -> Result<(), RegionError> {
        let extent = Region::from_box(self.extent);
        if extent.contains_region(region) {
            Ok(())
        } else {
            Err(RegionError::OutsideExtent { region: region.clone(), extent: self.extent })
        }
    }

    /// Overwrites exactly `region` with `value`.
    pub fn update(&mut self, region: &Region, value: V) -> Result<(), RegionError> {
        self.check_within(region)?;
        if region.is_empty() {
            return Ok(());
        }
        let mut next: Vec<(GridBox, V)> = Vec::with_capacity(self.entries.len() + 1);
        for (b, v) in self.entries.drain(..) {
            if !region.intersects_box(&b) {
                next.push((b, v));
                continue;
            }
            let keep = Region::from_box(b).difference(region);
            for kb in keep.boxes() {
                next.push((*kb, v.clone()));
            }
        }
        for rb in region.boxes() {
            next.push((*rb, value.clone()));
        }
        self.entries = compact(next, self.extent.dims());
        Ok(())
    }

    /// Partition of `region` by value. Entries are returned in ascending
    /// order of their first box.
    pub fn query(&self, region: &Region) -> Result<Vec<(Region, V)>, RegionError> {
        self.check_within(region)?;
        if region.is_empty() {
            return Ok(Vec::new());
        }
        let dims = self.extent.dims();
        let mut groups: Vec<(V, Vec<GridBox>)> = Vec::new();
        for (b, v) in &self.entries {
            if !region.intersects_box(b) {
                continue;
            }
            match groups.iter_mut().find(|(gv, _)| gv == v) {
                Some((_, bs)) => bs.push(*b),
                None => groups.push((v.clone(), vec![*b])),
            }
        }
        let mut out: Vec<(Region, V)> = groups
            .into_iter()
            .filter_map(|(v, bs)| {
                let part = region.intersection(&Region::from_boxes(dims, bs));
                if part.is_empty() {
                    None
                } else {
                    Some((part, v))
                }
            })
            .collect();
        out.sort_by(|a, b| a.0.boxes().cmp(b.0.boxes()));
        Ok(out)
    }

    /// The region currently mapped to values matching `pred`.
    pub fn region_where(&self, pred: impl Fn(&V) -> bool) -> Region {
        Region::from_boxes(
            self.extent.dims(),
            self.entries.iter().filter(|(_, v)| pred(v)).map(|(b, _)| *b),
        )
    }

    /// Rewrites every stored value. Adjacent boxes whose values become equal
    /// are re-merged (used by horizon subsumption).
    pub fn replace_values(&mut self, f: impl Fn(&V) -> V) {
        let dims = self.extent.dims();
        let entries = std::mem::take(&mut self.entries);
        let mapped = entries.into_iter().map(|(b, v)| (b, f(&v))).collect();
        self.entries = compact(mapped, dims);
    }
}

/// Re-merges adjacent same-value boxes and sorts entries.
fn compact<V: Clone + Eq>(entries: Vec<(GridBox, V)>, dims: usize) -> Vec<(GridBox, V)> {
    let mut groups: Vec<(V, Vec<GridBox>)> = Vec::new();
    for (b, v) in entries {
        if b.is_empty() {
            continue;
        }
        match groups.iter_mut().find(|(gv, _)| *gv == v) {
            Some((_, bs)) => bs.push(b),
            None => groups.push((v, vec![b])),
        }
    }
    let mut out: Vec<(GridBox, V)> = Vec::new();
    for (v, bs) in groups {
        for b in Region::from_boxes(dims, bs).boxes() {
            out.push((*b, v.clone()));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[cfg(test)]
pub(crate) mod bitmap {
    //! Brute-force per-element oracle for region semantics on small spaces.

    use super::*;

    /// Dense bitmap over `[0, extent)` used as the independent reference for
    /// all region operations.
    pub struct BitGrid {
        pub extent: [Coord; MAX_DIMS],
        pub bits: Vec<bool>,
    }

    impl BitGrid {
        pub fn new(extent: [Coord; MAX_DIMS]) -> Self {
            let n = (extent[0] * extent[1] * extent[2]) as usize;
            Self { extent, bits: vec![false; n] }
        }

        fn idx(&self, p: [Coord; MAX_DIMS]) -> usize {
            ((p[0] * self.extent[1] + p[1]) * self.extent[2] + p[2]) as usize
        }

        pub fn set_box(&mut self, b: &GridBox, val: bool) {
            for p in b.iter_points() {
                let i = self.idx(p);
                self.bits[i] = val;
            }
        }

        pub fn from_region(extent: [Coord; MAX_DIMS], r: &Region) -> Self {
            let mut g = Self::new(extent);
            for b in r.boxes() {
                g.set_box(b, true);
            }
            g
        }

        pub fn points(&self) -> impl Iterator<Item = [Coord; MAX_DIMS]> + '_ {
            let e = self.extent;
            (0..e[0]).flat_map(move |x| {
                (0..e[1]).flat_map(move |y| (0..e[2]).map(move |z| [x, y, z]))
            })
        }

        pub fn matches(&self, r: &Region) -> bool {
            self.points().all(|p| self.bits[self.idx(p)] == r.contains_point(p))
        }

        pub fn count(&self) -> usize {
            self.bits.iter().filter(|b| **b).count()
        }

        /// Tightest bounding box of the set bits, as (min, max) triples.
        pub fn bounds(&self) -> Option<([Coord; MAX_DIMS], [Coord; MAX_DIMS])> {
            let mut lo = [Coord::MAX; MAX_DIMS];
            let mut hi = [0; MAX_DIMS];
            let mut any = false;
            for p in self.points() {
                if self.bits[self.idx(p)] {
                    any = true;
                    for d in 0..MAX_DIMS {
                        lo[d] = lo[d].min(p[d]);
                        hi[d] = hi[d].max(p[d] + 1);
                    }
                }
            }
            any.then_some((lo, hi))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::bitmap::BitGrid;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn interval_overlap() {
        let a = GridBox::d1(0, 8);
        assert_eq!(a.intersect(&GridBox::d1(4, 12)), GridBox::d1(4, 8));
    }

    #[test]
    fn touching_boxes_are_disjoint() {
        let a = GridBox::d1(0, 8);
        let b = GridBox::d1(8, 12);
        assert!(a.intersect(&b).is_empty());
        assert!(!a.overlaps(&b));
    }

    #[test]
    fn adjacent_boxes_merge() {
        let r = Region::from_boxes(1, [GridBox::d1(0, 4), GridBox::d1(4, 8)]);
        assert_eq!(r.boxes(), &[GridBox::d1(0, 8)]);
    }

    #[test]
    fn self_difference_is_empty() {
        let r = Region::from_box(GridBox::d1(0, 8));
        assert!(r.difference(&r).is_empty());
    }

    #[test]
    fn bounding_box_examples() {
        let r = Region::from_boxes(1, [GridBox::d1(0, 2), GridBox::d1(6, 8)]);
        assert_eq!(r.bounding_box(), GridBox::d1(0, 8));
        let single = Region::from_box(GridBox::d1(3, 5));
        assert_eq!(single.bounding_box(), GridBox::d1(3, 5));
        assert!(Region::empty(2).bounding_box().is_empty());
    }

    #[test]
    fn empty_box_is_canonical() {
        let a = GridBox::new(2, &[3, 3], &[3, 9]);
        let b = GridBox::new(2, &[7, 0], &[7, 0]);
        assert_eq!(a, b);
        assert_eq!(a, GridBox::empty(2));
    }

    #[test]
    fn region_map_basic() {
        let mut m = RegionMap::new(GridBox::d1(0, 12), 'x');
        m.update(&Region::from_box(GridBox::d1(0, 8)), 'a').unwrap();
        let q = m.query(&Region::from_box(GridBox::d1(2, 4))).unwrap();
        assert_eq!(q, vec![(Region::from_box(GridBox::d1(2, 4)), 'a')]);

        m.update(&Region::from_box(GridBox::d1(4, 12)), 'b').unwrap();
        let q = m.query(&Region::from_box(GridBox::d1(0, 12))).unwrap();
        assert_eq!(
            q,
            vec![
                (Region::from_box(GridBox::d1(0, 4)), 'a'),
                (Region::from_box(GridBox::d1(4, 12)), 'b'),
            ]
        );
    }

    #[test]
    fn region_map_empty_query() {
        let m = RegionMap::new(GridBox::d1(0, 8), 0u32);
        assert!(m.query(&Region::empty(1)).unwrap().is_empty());
    }

    #[test]
    fn region_map_rejects_outside_extent() {
        let mut m = RegionMap::new(GridBox::d1(0, 8), 0u32);
        assert!(m.update(&Region::from_box(GridBox::d1(4, 10)), 1).is_err());
    }

    #[test]
    fn region_map_entry_count_is_extent_independent() {
        let updates = [(0u64, 5u64), (3, 9), (7, 12), (1, 2), (10, 14)];
        let mut counts = Vec::new();
        for extent in [16u64, 16384] {
            let mut m = RegionMap::new(GridBox::d1(0, extent), 0u32);
            for (i, (lo, hi)) in updates.iter().enumerate() {
                m.update(&Region::from_box(GridBox::d1(*lo, *hi)), i as u32 + 1).unwrap();
            }
            counts.push(m.len());
        }
        assert_eq!(counts[0], counts[1]);
        assert!(counts[0] <= 2 * updates.len() + 1);
    }

    fn arb_box(dims: usize, space: Coord) -> impl Strategy<Value = GridBox> {
        let coord = 0..=space;
        proptest::collection::vec((coord.clone(), coord), dims).prop_map(move |pairs| {
            let min: Vec<Coord> = pairs.iter().map(|(a, b)| *a.min(b)).collect();
            let max: Vec<Coord> = pairs.iter().map(|(a, b)| *a.max(b)).collect();
            GridBox::new(dims, &min, &max)
        })
    }

    fn arb_region(dims: usize, space: Coord) -> impl Strategy<Value = Region> {
        proptest::collection::vec(arb_box(dims, space), 0..5)
            .prop_map(move |bs| Region::from_boxes(dims, bs))
    }

    fn space_extent(dims: usize, space: Coord) -> [Coord; MAX_DIMS] {
        let mut e = [1; MAX_DIMS];
        for d in 0..dims {
            e[d] = space + 1;
        }
        e
    }

    proptest! {
        #[test]
        fn box_intersect_matches_bitmap(a in arb_box(3, 12), b in arb_box(3, 12)) {
            let got = a.intersect(&b);
            let mut grid = BitGrid::new(space_extent(3, 12));
            for p in a.iter_points() {
                if b.contains_point(p) {
                    grid.set_box(&GridBox::d3(p, [p[0]+1, p[1]+1, p[2]+1]), true);
                }
            }
            prop_assert!(grid.matches(&Region::from_box(got)));
        }

        #[test]
        fn set_ops_match_bitmap(
            dims in 2usize..=3,
            a in arb_region(3, 10),
            b in arb_region(3, 10),
        ) {
            // dims toggles exercise nothing extra for the bitmap; keep 3-D boxes.
            let _ = dims;
            let ext = space_extent(3, 10);
            let ga = BitGrid::from_region(ext, &a);

            let mut gu = BitGrid::new(ext);
            let mut gd = BitGrid::new(ext);
            let mut gi = BitGrid::new(ext);
            for p in ga.points() {
                let (ia, ib) = (a.contains_point(p), b.contains_point(p));
                let unit = GridBox::d3(p, [p[0]+1, p[1]+1, p[2]+1]);
                if ia || ib { gu.set_box(&unit, true); }
                if ia && !ib { gd.set_box(&unit, true); }
                if ia && ib { gi.set_box(&unit, true); }
            }
            prop_assert!(gu.matches(&a.union(&b)));
            prop_assert!(gd.matches(&a.difference(&b)));
            prop_assert!(gi.matches(&a.intersection(&b)));
        }

        #[test]
        fn normalization_is_canonical(r in arb_region(3, 10), splits in arb_box(3, 10)) {
            // Re-dissect every box of r at the coordinates of an unrelated box;
            // the re-normalized region must be structurally identical.
            let mut pieces = Vec::new();
            for b in r.boxes() {
                let cuts = collect_cuts(&[*b, splits]);
                let mut set = std::collections::BTreeSet::new();
                dissect_box(b, &cuts, &mut set);
                pieces.extend(set);
            }
            let rebuilt = Region::from_boxes(3, pieces);
            prop_assert_eq!(rebuilt, r);
        }

        #[test]
        fn bounding_box_matches_bitmap(r in arb_region(3, 10)) {
            let grid = BitGrid::from_region(space_extent(3, 10), &r);
            let bb = r.bounding_box();
            match grid.bounds() {
                None => prop_assert!(bb.is_empty()),
                Some((lo, hi)) => {
                    prop_assert_eq!(bb.lower(), lo);
                    prop_assert_eq!(bb.upper(), hi);
                }
            }
        }

        #[test]
        fn region_map_matches_bitmap(
            updates in proptest::collection::vec((arb_box(2, 12), 1u32..6), 1..6),
            probe in arb_box(2, 12),
        ) {
            let extent = GridBox::d2([0, 0], [13, 13]);
            let mut m = RegionMap::new(extent, 0u32);
            // Per-point shadow of the map.
            let mut shadow = std::collections::HashMap::new();
            for p in extent.iter_points() {
                shadow.insert(p, 0u32);
            }
            for (b, v) in &updates {
                m.update(&Region::from_box(*b), *v).unwrap();
                for p in b.iter_points() {
                    shadow.insert(p, *v);
                }
            }
            // Full coverage, exactly once.
            for p in extent.iter_points() {
                let hits: Vec<u32> = m.entries().iter()
                    .filter(|(b, _)| b.contains_point(p))
                    .map(|(_, v)| *v)
                    .collect();
                prop_assert_eq!(hits.len(), 1);
                prop_assert_eq!(hits[0], shadow[&p]);
            }
            // Query partitions the probe by value.
            let probe_r = Region::from_box(probe);
            for (part, v) in m.query(&probe_r).unwrap() {
                for p in extent.iter_points() {
                    if part.contains_point(p) {
                        prop_assert_eq!(shadow[&p], v);
                        prop_assert!(probe.contains_point(p));
                    }
                }
            }
        }
    }
}
