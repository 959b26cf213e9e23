//! Hierarchical dyadic partition of the unit cube.
//!
//! A [`Cell`] is an integer address `(depth, coords)`; its footprint is the
//! half-open box `∏ [c_i 2^-l, (c_i + 1) 2^-l)`, except that the face at
//! coordinate 1 belongs to the last cell so every point of `[0,1]^d` has
//! exactly one owner per depth. A [`Region`] is a set of cells at mixed depths
//! with pairwise disjoint footprints.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deepest level a cell may live at; coordinates must fit in `u64`.
pub const MAX_DEPTH: u8 = 62;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    depth: u8,
    coords: Vec<u64>,
}

impl Cell {
    pub fn new(depth: u8, coords: Vec<u64>) -> Result<Self> {
        if depth > MAX_DEPTH {
            return Err(Error::DepthCap(MAX_DEPTH));
        }
        if coords.is_empty() {
            return Err(Error::InvalidConfig("cell needs at least one coordinate".into()));
        }
        let side = 1u64 << depth;
        if coords.iter().any(|&c| c >= side) {
            return Err(Error::InvalidConfig(format!(
                "coords {coords:?} out of range for depth {depth}"
            )));
        }
        Ok(Cell { depth, coords })
    }

    /// The single depth-0 cell covering `[0,1]^d`.
    pub fn root(dim: usize) -> Self {
        Cell { depth: 0, coords: vec![0; dim] }
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn coords(&self) -> &[u64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn side(&self) -> f64 {
        side_length(self.depth)
    }

    pub fn volume(&self) -> f64 {
        self.side().powi(self.dim() as i32)
    }

    pub fn center(&self) -> Vec<f64> {
        let s = self.side();
        self.coords.iter().map(|&c| (c as f64 + 0.5) * s).collect()
    }

    pub fn bounds(&self) -> BoxNd {
        let s = self.side();
        BoxNd {
            lo: self.coords.iter().map(|&c| c as f64 * s).collect(),
            hi: self.coords.iter().map(|&c| (c as f64 + 1.0) * s).collect(),
        }
    }

    /// The cell enlarged by one side length in every direction (side `3·2^-l`).
    /// Not clipped to the unit cube.
    pub fn inflated_box(&self) -> BoxNd {
        let s = self.side();
        BoxNd {
            lo: self.coords.iter().map(|&c| c as f64 * s - s).collect(),
            hi: self.coords.iter().map(|&c| (c as f64 + 1.0) * s + s).collect(),
        }
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        cell_of_point(x, self.depth).as_ref() == Some(self)
    }

    pub fn children(&self) -> Vec<Cell> {
        assert!(self.depth < MAX_DEPTH, "cannot split past depth {MAX_DEPTH}");
        let d = self.dim();
        (0..1u64 << d)
            .map(|mask| Cell {
                depth: self.depth + 1,
                coords: (0..d).map(|i| 2 * self.coords[i] + ((mask >> i) & 1)).collect(),
            })
            .collect()
    }

    pub fn parent(&self) -> Option<Cell> {
        (self.depth > 0).then(|| Cell {
            depth: self.depth - 1,
            coords: self.coords.iter().map(|&c| c >> 1).collect(),
        })
    }

    /// Ancestor (or self) at a shallower depth.
    pub fn ancestor_at(&self, depth: u8) -> Option<Cell> {
        (depth <= self.depth).then(|| {
            let shift = self.depth - depth;
            Cell { depth, coords: self.coords.iter().map(|&c| c >> shift).collect() }
        })
    }

    /// True when `other`'s footprint lies inside this cell's (including equality).
    pub fn contains_cell(&self, other: &Cell) -> bool {
        other.dim() == self.dim() && other.ancestor_at(self.depth).as_ref() == Some(self)
    }

    /// All cells of `G_target` inside this cell, in lexicographic order.
    pub fn subcells_at_depth(&self, target: u8) -> Result<Vec<Cell>> {
        if target < self.depth {
            return Err(Error::InvalidConfig(format!(
                "target depth {target} above cell depth {}",
                self.depth
            )));
        }
        if target > MAX_DEPTH {
            return Err(Error::DepthCap(MAX_DEPTH));
        }
        let shift = u32::from(target - self.depth);
        let d = self.dim();
        let total_bits = shift as usize * d;
        if total_bits > 32 {
            return Err(Error::InvalidConfig(format!(
                "2^{total_bits} subcells requested; refusing to enumerate"
            )));
        }
        let per_axis = 1u64 << shift;
        let count = 1u64 << total_bits;
        let mut out = Vec::with_capacity(count as usize);
        let mut offset = vec![0u64; d];
        for _ in 0..count {
            out.push(Cell {
                depth: target,
                coords: (0..d).map(|i| (self.coords[i] << shift) + offset[i]).collect(),
            });
            // odometer, last axis fastest
            for i in (0..d).rev() {
                offset[i] += 1;
                if offset[i] < per_axis {
                    break;
                }
                offset[i] = 0;
            }
        }
        Ok(out)
    }
}

pub fn side_length(depth: u8) -> f64 {
    (-(depth as f64)).exp2()
}

/// Diameter `r_l = √d · 2^-l` of any cell of `G_l`.
pub fn diameter(depth: u8, dim: usize) -> f64 {
    (dim as f64).sqrt() * side_length(depth)
}

/// Every cell of `G_depth`, lexicographically ordered.
pub fn grid_cells(depth: u8, dim: usize) -> Result<Vec<Cell>> {
    Cell::root(dim).subcells_at_depth(depth)
}

/// The cell of `G_depth` owning `x`, or `None` when `x ∉ [0,1]^d`.
pub fn cell_of_point(x: &[f64], depth: u8) -> Option<Cell> {
    let side = 1u64 << depth;
    let scale = side as f64;
    let mut coords = Vec::with_capacity(x.len());
    for &xi in x {
        if !(0.0..=1.0).contains(&xi) {
            return None;
        }
        let c = ((xi * scale).floor() as u64).min(side - 1);
        coords.push(c);
    }
    Some(Cell { depth, coords })
}

/// Axis-aligned closed box in ℝ^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxNd {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxNd {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a).max(0.0)).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    pub fn intersect(&self, other: &BoxNd) -> Option<BoxNd> {
        let lo: Vec<f64> = self.lo.iter().zip(&other.lo).map(|(a, b)| a.max(*b)).collect();
        let hi: Vec<f64> = self.hi.iter().zip(&other.hi).map(|(a, b)| a.min(*b)).collect();
        lo.iter().zip(&hi).all(|(a, b)| a < b).then_some(BoxNd { lo, hi })
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        out
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(&self.lo).zip(&self.hi) {
            *o = a + (b - a) * rng.random::<f64>();
        }
    }
}

/// One point uniform on the inflated cell.
pub fn sample_uniform_inflated<R: Rng + ?Sized>(cell: &Cell, rng: &mut R) -> Vec<f64> {
    cell.inflated_box().sample_uniform(rng)
}

/// How a region relates to a cell's footprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    Full,
    Partial,
    Empty,
}

/// A set of dyadic cells with pairwise disjoint footprints.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(into = "RegionRepr", try_from = "RegionRepr")]
pub struct Region {
    dim: usize,
    cells: HashSet<Cell>,
    /// Strict ancestors of stored cells, with the number of stored descendants.
    ancestors: HashMap<Cell, u64>,
    depths: BTreeMap<u8, u64>,
}

impl PartialEq for Region {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.cells == other.cells
    }
}

impl Region {
    pub fn new(dim: usize) -> Self {
        Region { dim, ..Default::default() }
    }

    pub fn from_cells(dim: usize, cells: impl IntoIterator<Item = Cell>) -> Result<Self> {
        let mut r = Region::new(dim);
        for c in cells {
            r.insert(c)?;
        }
        Ok(r)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn max_depth(&self) -> Option<u8> {
        self.depths.keys().next_back().copied()
    }

    pub fn contains_cell_exact(&self, cell: &Cell) -> bool {
        self.cells.contains(cell)
    }

    /// Total Lebesgue volume of the footprint.
    pub fn volume(&self) -> f64 {
        self.depths
            .iter()
            .map(|(&l, &n)| n as f64 * side_length(l).powi(self.dim as i32))
            .fold(0.0, |a, v| a + v)
    }

    /// Cells in `(depth, coords)` order.
    pub fn sorted_cells(&self) -> Vec<Cell> {
        let mut v: Vec<Cell> = self.cells.iter().cloned().collect();
        v.sort();
        v
    }

    pub fn iter(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter()
    }

    fn covering_cell(&self, cell: &Cell) -> Option<Cell> {
        let mut cur = Some(cell.clone());
        while let Some(c) = cur {
            if self.cells.contains(&c) {
                return Some(c);
            }
            cur = c.parent();
        }
        None
    }

    pub fn coverage(&self, cell: &Cell) -> Coverage {
        if self.covering_cell(cell).is_some() {
            Coverage::Full
        } else if self.ancestors.contains_key(cell) {
            Coverage::Partial
        } else {
            Coverage::Empty
        }
    }

    /// Inserts a cell, rejecting any footprint overlap.
    pub fn insert(&mut self, cell: Cell) -> Result<()> {
        if cell.dim() != self.dim {
            return Err(Error::InvalidConfig(format!(
                "cell of dimension {} inserted into {}-dimensional region",
                cell.dim(),
                self.dim
            )));
        }
        if let Some(c) = self.covering_cell(&cell) {
            return Err(Error::Overlap(format!("{cell:?} lies inside {c:?}")));
        }
        if self.ancestors.contains_key(&cell) {
            return Err(Error::Overlap(format!("{cell:?} contains a stored cell")));
        }
        let mut cur = cell.parent();
        while let Some(p) = cur {
            cur = p.parent();
            *self.ancestors.entry(p).or_insert(0) += 1;
        }
        *self.depths.entry(cell.depth).or_insert(0) += 1;
        self.cells.insert(cell);
        Ok(())
    }

    /// Point membership in `O(#depths · d)`.
    pub fn contains_point(&self, x: &[f64]) -> bool {
        if x.len() != self.dim {
            return false;
        }
        self.depths
            .keys()
            .any(|&l| cell_of_point(x, l).is_some_and(|c| self.cells.contains(&c)))
    }

    pub fn intersects(&self, other: &Region) -> bool {
        let (small, big) = if self.len() <= other.len() { (self, other) } else { (other, self) };
        small.cells.iter().any(|c| big.coverage(c) != Coverage::Empty)
    }

    /// Footprint difference `self \ other`, re-expressed as disjoint dyadic cells.
    pub fn difference(&self, other: &Region) -> Region {
        let mut out = Region::new(self.dim);
        let mut stack: Vec<Cell> = self.sorted_cells();
        while let Some(c) = stack.pop() {
            match other.coverage(&c) {
                Coverage::Full => {}
                Coverage::Empty => {
                    out.insert(c).expect("difference pieces are disjoint");
                }
                Coverage::Partial => stack.extend(c.children()),
            }
        }
        out
    }

    /// Footprint union; cells of `other` already covered are dropped and
    /// partially covered ones refined.
    pub fn union(&self, other: &Region) -> Region {
        let mut out = self.clone();
        for c in other.difference(self).cells {
            out.insert(c).expect("difference is disjoint from self");
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct RegionRepr {
    dim: usize,
    cells: Vec<(u8, Vec<u64>)>,
}

impl From<Region> for RegionRepr {
    fn from(r: Region) -> Self {
        RegionRepr {
            dim: r.dim,
            cells: r.sorted_cells().into_iter().map(|c| (c.depth, c.coords)).collect(),
        }
    }
}

impl TryFrom<RegionRepr> for Region {
    type Error = Error;

    fn try_from(r: RegionRepr) -> Result<Self> {
        let cells = r
            .cells
            .into_iter()
            .map(|(l, coords)| Cell::new(l, coords))
            .collect::<Result<Vec<_>>>()?;
        Region::from_cells(r.dim, cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell(l: u8, c: &[u64]) -> Cell {
        Cell::new(l, c.to_vec()).unwrap()
    }

    #[test]
    fn centers() {
        assert_eq!(cell(1, &[0, 0]).center(), vec![0.25, 0.25]);
        assert_eq!(cell(0, &[0]).center(), vec![0.5]);
        assert_eq!(cell(3, &[5]).center(), vec![0.6875]);
    }

    #[test]
    fn diameters() {
        assert_eq!(diameter(1, 4), 1.0);
        assert_eq!(diameter(0, 1), 1.0);
        assert!((diameter(3, 2) - 0.176_776_695_296_636_9).abs() < 1e-12);
    }

    #[test]
    fn children_partition_parent() {
        let kids = cell(0, &[0]).children();
        assert_eq!(kids, vec![cell(1, &[0]), cell(1, &[1])]);
        let p = cell(2, &[1, 3]);
        let kids = p.children();
        assert_eq!(kids.len(), 4);
        let vol: f64 = kids.iter().map(Cell::volume).sum();
        assert!((vol - p.volume()).abs() < 1e-15);
        for k in &kids {
            assert!(p.contains_cell(k));
            assert_eq!(k.parent().as_ref(), Some(&p));
        }
        let r = Region::from_cells(2, kids.clone()).unwrap();
        assert_eq!(r.len(), 4);
    }

    #[test]
    fn inflated_box_geometry() {
        let b = cell(1, &[0]).inflated_box();
        assert_eq!(b.lo, vec![-0.5]);
        assert_eq!(b.hi, vec![1.0]);
        let c = cell(3, &[2, 7]);
        let b = c.inflated_box();
        assert!((b.volume() - 9.0 * 2f64.powi(-6)).abs() < 1e-15);
        let fp = c.bounds();
        assert!(b.contains(&fp.lo) && b.contains(&fp.hi));
    }

    #[test]
    fn inflated_sampling_stays_inside_and_replays() {
        let c = cell(2, &[1, 3]);
        let b = c.inflated_box();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let x = sample_uniform_inflated(&c, &mut r1);
            assert!(b.contains(&x));
            assert_eq!(x, sample_uniform_inflated(&c, &mut r2));
        }
    }

    #[test]
    fn inflated_sampling_mean() {
        let c = cell(2, &[1]);
        let b = c.inflated_box();
        let side = b.hi[0] - b.lo[0];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mean: f64 =
            (0..n).map(|_| sample_uniform_inflated(&c, &mut rng)[0]).sum::<f64>() / n as f64;
        let tol = 3.0 * side / (12.0 * n as f64).sqrt();
        assert!((mean - b.center()[0]).abs() < tol, "mean {mean}");
    }

    #[test]
    fn subcells() {
        let c = cell(1, &[0]);
        assert_eq!(c.subcells_at_depth(1).unwrap(), vec![c.clone()]);
        let s = c.subcells_at_depth(3).unwrap();
        assert_eq!(s.iter().map(|c| c.coords()[0]).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let c2 = cell(2, &[1, 2]);
        let s2 = c2.subcells_at_depth(5).unwrap();
        assert_eq!(s2.len(), 1 << 6);
        assert!(s2.iter().all(|k| c2.contains_cell(k)));
        assert!(c.subcells_at_depth(0).is_err());
    }

    #[test]
    fn partition_property_dense_grid() {
        for d in 1..=3usize {
            for l in [0u8, 1, 3, 6, 10] {
                let pts_per_axis: usize = match d {
                    1 => 2000,
                    2 => 60,
                    _ => 14,
                };
                let mut idx = vec![0usize; d];
                loop {
                    let x: Vec<f64> =
                        idx.iter().map(|&i| i as f64 / (pts_per_axis - 1) as f64).collect();
                    let owner = cell_of_point(&x, l).unwrap();
                    assert!(owner.bounds().contains(&x));
                    let c = owner.center();
                    let dist = c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!(dist <= diameter(l, d) / 2.0 + 1e-12);
                    // neighbours sharing a face do not claim the point (half-open rule)
                    for axis in 0..d {
                        for delta in [-1i64, 1] {
                            let v = owner.coords()[axis] as i64 + delta;
                            if v < 0 || v >= 1 << l {
                                continue;
                            }
                            let mut nb = owner.coords().to_vec();
                            nb[axis] = v as u64;
                            assert!(!cell(l, &nb).contains_point(&x));
                        }
                    }
                    let mut k = 0;
                    while k < d {
                        idx[k] += 1;
                        if idx[k] < pts_per_axis {
                            break;
                        }
                        idx[k] = 0;
                        k += 1;
                    }
                    if k == d {
                        break;
                    }
                }
            }
        }
    }

    #[test]
    fn top_face_belongs_to_last_cell() {
        assert_eq!(cell_of_point(&[1.0], 3), Some(cell(3, &[7])));
        assert_eq!(cell_of_point(&[1.0, 0.0], 2), Some(cell(2, &[3, 0])));
        assert_eq!(cell_of_point(&[1.0 + 1e-9], 2), None);
        assert_eq!(cell_of_point(&[0.5], 1), Some(cell(1, &[1])));
    }

    #[test]
    fn region_rejects_overlap() {
        let mut r = Region::new(1);
        r.insert(cell(2, &[1])).unwrap();
        assert!(matches!(r.insert(cell(2, &[1])), Err(Error::Overlap(_))));
        assert!(matches!(r.insert(cell(3, &[2])), Err(Error::Overlap(_))));
        assert!(matches!(r.insert(cell(1, &[0])), Err(Error::Overlap(_))));
        r.insert(cell(1, &[1])).unwrap();
        r.insert(cell(3, &[1])).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.contains_point(&[0.3]));
        assert!(r.contains_point(&[1.0]));
        assert!(!r.contains_point(&[0.1]));
        assert!((r.volume() - (0.25 + 0.5 + 0.125)).abs() < 1e-15);
    }

    #[test]
    fn coverage_and_difference() {
        let a = Region::from_cells(1, [cell(1, &[0])]).unwrap();
        let b = Region::from_cells(1, [cell(3, &[1]), cell(2, &[3])]).unwrap();
        assert_eq!(a.coverage(&cell(2, &[1])), Coverage::Full);
        assert_eq!(a.coverage(&cell(0, &[0])), Coverage::Partial);
        assert_eq!(a.coverage(&cell(1, &[1])), Coverage::Empty);
        let diff = a.difference(&b);
        // [0, 0.5) minus [0.125, 0.25)
        let mut cells = diff.sorted_cells();
        cells.sort();
        assert_eq!(cells, vec![cell(2, &[1]), cell(3, &[0])]);
        assert!((diff.volume() - 0.375).abs() < 1e-15);
        let u = a.union(&b);
        assert!((u.volume() - 0.75).abs() < 1e-15);
        assert!(a.intersects(&b));
        assert!(!diff.intersects(&b));
    }

    #[test]
    fn region_json_round_trip_sorted() {
        let r = Region::from_cells(2, [cell(2, &[3, 1]), cell(1, &[0, 0]), cell(2, &[2, 1])])
            .unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"dim":2,"cells":[[1,[0,0]],[2,[2,1]],[2,[3,1]]]}"#);
        let back: Region = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
        let bad = r#"{"dim":1,"cells":[[1,[0]],[2,[1]]]}"#;
        assert!(serde_json::from_str::<Region>(bad).is_err());
    }
}
