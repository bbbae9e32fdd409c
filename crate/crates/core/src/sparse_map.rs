//! Coordinate-format sparse embedding maps.
//!
//! A map is a grid of `grid_h × grid_w` cells of which only a few are
//! active, each active cell holding a `dim`-vector. Tile locations at full
//! resolution are divided by a downsampling factor to obtain cells; tiles
//! that land on the same cell are merged by a [`CollisionRule`].

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::prng;
use crate::tensor::{Scalar, Tensor};

/// How embeddings that share a cell are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollisionRule {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, PartialEq)]
pub struct SparseMap<T> {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    coords: Vec<(usize, usize)>,
    values: Vec<T>,
    coalesced: bool,
}

impl<T: std::fmt::Debug> std::fmt::Debug for SparseMap<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseMap")
            .field("grid", &(self.grid_h, self.grid_w))
            .field("dim", &self.dim)
            .field("active", &self.coords.len())
            .field("coalesced", &self.coalesced)
            .finish()
    }
}

/// Where each source entry ended up after a coalescing step. Used to route
/// gradients back from merged cells to the entries that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellAssignment {
    /// Output cell index for every source entry.
    pub cell: Vec<usize>,
    /// Number of source entries merged into each output cell.
    pub counts: Vec<usize>,
    pub rule: CollisionRule,
}

impl CellAssignment {
    /// Gradient of each source entry given the gradient of the merged map.
    pub fn pull_back<T: Scalar>(&self, dim: usize, grad_cells: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.cell.len() * dim);
        for &c in &self.cell {
            let g = &grad_cells[c * dim..(c + 1) * dim];
            match self.rule {
                CollisionRule::Sum => out.extend_from_slice(g),
                CollisionRule::Mean => {
                    let n = T::lit(self.counts[c] as f64);
                    out.extend(g.iter().map(|&v| v / n));
                }
            }
        }
        out
    }
}

impl<T: Scalar> SparseMap<T> {
    /// Builds an uncoalesced map from raw entries.
    pub fn from_entries(grid_h: usize, grid_w: usize, dim: usize, coords: Vec<(usize, usize)>, values: Vec<T>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "grid {grid_h}x{grid_w} and dim {dim} must be positive"
            )));
        }
        if values.len() != coords.len() * dim {
            return Err(Error::shape(format!(
                "{} cells of dim {dim} need {} values, got {}",
                coords.len(),
                coords.len() * dim,
                values.len()
            )));
        }
        if let Some(&(r, c)) = coords.iter().find(|&&(r, c)| r >= grid_h || c >= grid_w) {
            return Err(Error::invalid(format!(
                "cell ({r}, {c}) outside grid {grid_h}x{grid_w}"
            )));
        }
        Ok(SparseMap {
            grid_h,
            grid_w,
            dim,
            coords,
            values,
            coalesced: false,
        })
    }

    pub(crate) fn from_sorted_unchecked(grid_h: usize, grid_w: usize, dim: usize, coords: Vec<(usize, usize)>, values: Vec<T>) -> Self {
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        debug_assert_eq!(values.len(), coords.len() * dim);
        SparseMap {
            grid_h,
            grid_w,
            dim,
            coords,
            values,
            coalesced: true,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of active cells.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn embedding(&self, i: usize) -> &[T] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_coalesced(&self) -> bool {
        self.coalesced
    }

    /// Index of the active cell at `(row, col)` in a coalesced map.
    pub fn find(&self, row: usize, col: usize) -> Option<usize> {
        debug_assert!(self.coalesced);
        self.coords.binary_search(&(row, col)).ok()
    }

    /// Same active set and grid, new values.
    pub fn with_values(&self, dim: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != self.coords.len() * dim {
            return Err(Error::shape("value count does not match active set"));
        }
        Ok(SparseMap {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            dim,
            coords: self.coords.clone(),
            values,
            coalesced: self.coalesced,
        })
    }

    pub fn same_active_set(&self, other: &SparseMap<T>) -> bool {
        self.grid() == other.grid() && self.coords == other.coords
    }

    /// Dense `[1, dim, grid_h, grid_w]` tensor with zeros at inactive cells.
    pub fn to_dense(&self) -> Tensor<T> {
        let (h, w) = (self.grid_h, self.grid_w);
        let mut t = Tensor::zeros(&[1, self.dim, h, w]);
        let d = t.data_mut();
        for (i, &(r, c)) in self.coords.iter().enumerate() {
            for (k, &v) in self.embedding(i).iter().enumerate() {
                let at = (k * h + r) * w + c;
                d[at] = d[at] + v;
            }
        }
        t
    }

    /// Merges duplicate coordinates by elementwise sum and sorts cells.
    pub fn coalesce(&self) -> SparseMap<T> {
        self.coalesce_with(CollisionRule::Sum).0
    }

    /// Coalesces under `rule`, also returning where each entry went.
    ///
    /// Entries sharing a cell are accumulated in a canonical order (by
    /// coordinate, then by embedding value) so the result is bit-identical
    /// under any permutation of the input entries.
    pub fn coalesce_with(&self, rule: CollisionRule) -> (SparseMap<T>, CellAssignment) {
        let dim = self.dim;
        let mut order: Vec<usize> = (0..self.coords.len()).collect();
        order.sort_by(|&a, &b| {
            self.coords[a]
                .cmp(&self.coords[b])
                .then_with(|| cmp_embeddings(self.embedding(a), self.embedding(b)))
        });
        let mut coords = Vec::new();
        let mut values: Vec<T> = Vec::new();
        let mut counts = Vec::new();
        let mut cell = vec![0usize; self.coords.len()];
        for &i in &order {
            let c = self.coords[i];
            if coords.last() != Some(&c) {
                coords.push(c);
                values.extend_from_slice(self.embedding(i));
                counts.push(1);
            } else {
                let base = values.len() - dim;
                for (acc, &v) in values[base..].iter_mut().zip(self.embedding(i)) {
                    *acc = *acc + v;
                }
                *counts.last_mut().unwrap() += 1;
            }
            cell[i] = coords.len() - 1;
        }
        if rule == CollisionRule::Mean {
            for (k, &n) in counts.iter().enumerate() {
                if n > 1 {
                    let n = T::lit(n as f64);
                    values[k * dim..(k + 1) * dim].iter_mut().for_each(|v| *v = *v / n);
                }
            }
        }
        let map = SparseMap::from_sorted_unchecked(self.grid_h, self.grid_w, dim, coords, values);
        (map, CellAssignment { cell, counts, rule })
    }

    /// Checks every structural invariant of the map.
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.coords.len() * self.dim {
            return Err(Error::shape("values/coords length mismatch"));
        }
        if self.coords.iter().any(|&(r, c)| r >= self.grid_h || c >= self.grid_w) {
            return Err(Error::invalid("active cell outside grid"));
        }
        if self.coalesced && !self.coords.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("coalesced map is not strictly sorted"));
        }
        Ok(())
    }
}

fn cmp_embeddings<T: Scalar>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.as_f64().total_cmp(&y.as_f64());
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}

/// Grid extent after downsampling: `ceil(full / downsampling)`.
pub fn downsampled_extent(full: usize, downsampling: usize) -> usize {
    full.div_ceil(downsampling)
}

/// Places each embedding at its downsampled location and coalesces.
///
/// `embeddings` is `[b, D]`; `locations` are full-resolution `(row, col)`.
pub fn build_map<T: Scalar>(
    locations: &[(usize, usize)],
    embeddings: &Tensor<T>,
    downsampling: usize,
    full_h: usize,
    full_w: usize,
) -> Result<SparseMap<T>> {
    Ok(build_map_with(locations, embeddings, downsampling, full_h, full_w, CollisionRule::Sum)?.0)
}

pub fn build_map_with<T: Scalar>(
    locations: &[(usize, usize)],
    embeddings: &Tensor<T>,
    downsampling: usize,
    full_h: usize,
    full_w: usize,
    rule: CollisionRule,
) -> Result<(SparseMap<T>, CellAssignment)> {
    if downsampling < 1 {
        return Err(Error::invalid("downsampling factor must be at least 1"));
    }
    if embeddings.ndim() != 2 || embeddings.dim(0) != locations.len() {
        return Err(Error::shape(format!(
            "{} locations but embeddings of shape {:?}",
            locations.len(),
            embeddings.shape()
        )));
    }
    if locations.is_empty() {
        return Err(Error::invalid("cannot build a map from zero locations"));
    }
    if let Some(&(r, c)) = locations.iter().find(|&&(r, c)| r >= full_h || c >= full_w) {
        return Err(Error::invalid(format!(
            "location ({r}, {c}) outside {full_h}x{full_w}"
        )));
    }
    let coords = locations
        .iter()
        .map(|&(r, c)| (r / downsampling, c / downsampling))
        .collect();
    let raw = SparseMap::from_entries(
        downsampled_extent(full_h, downsampling),
        downsampled_extent(full_w, downsampling),
        embeddings.dim(1),
        coords,
        embeddings.data().to_vec(),
    )?;
    Ok(raw.coalesce_with(rule))
}

/// A concrete spatial augmentation of a sparse map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rot90_quarter_turns: u8,
    pub jitter_radius: usize,
    pub prng_seed: u64,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec::default()
    }

    pub fn is_identity(&self) -> bool {
        !self.flip_h && !self.flip_v && self.rot90_quarter_turns.is_multiple_of(4) && self.jitter_radius == 0
    }

    pub fn validate(&self, grid_h: usize, grid_w: usize) -> Result<()> {
        if self.rot90_quarter_turns > 3 {
            return Err(Error::invalid(format!(
                "rot90_quarter_turns must be in 0..=3, got {}",
                self.rot90_quarter_turns
            )));
        }
        if self.jitter_radius > 0 && 2 * self.jitter_radius >= grid_h.min(grid_w) {
            return Err(Error::invalid(format!(
                "jitter radius {} too large for grid {grid_h}x{grid_w}",
                self.jitter_radius
            )));
        }
        Ok(())
    }
}

/// Flips, rotates and jitters cell coordinates, then re-coalesces by sum.
/// Embedding vectors are carried unchanged.
pub fn augment<T: Scalar>(map: &SparseMap<T>, spec: &AugmentSpec) -> Result<SparseMap<T>> {
    Ok(augment_with_assignment(map, spec)?.0)
}

pub fn augment_with_assignment<T: Scalar>(map: &SparseMap<T>, spec: &AugmentSpec) -> Result<(SparseMap<T>, CellAssignment)> {
    if !map.is_coalesced() {
        return Err(Error::invalid("augment requires a coalesced map"));
    }
    let (mut h, mut w) = map.grid();
    spec.validate(h, w)?;
    let mut coords = map.coords().to_vec();
    if spec.flip_h {
        coords.iter_mut().for_each(|p| p.1 = w - 1 - p.1);
    }
    if spec.flip_v {
        coords.iter_mut().for_each(|p| p.0 = h - 1 - p.0);
    }
    for _ in 0..spec.rot90_quarter_turns {
        coords.iter_mut().for_each(|p| *p = (p.1, h - 1 - p.0));
        std::mem::swap(&mut h, &mut w);
    }
    if spec.jitter_radius > 0 {
        let mut rng = prng(spec.prng_seed);
        let r = spec.jitter_radius as i64;
        for p in coords.iter_mut() {
            let dr = rng.random_range(-r..=r);
            let dc = rng.random_range(-r..=r);
            p.0 = (p.0 as i64 + dr).clamp(0, h as i64 - 1) as usize;
            p.1 = (p.1 as i64 + dc).clamp(0, w as i64 - 1) as usize;
        }
    }
    let moved = SparseMap::from_entries(h, w, map.dim(), coords, map.values().to_vec())?;
    Ok(moved.coalesce_with(CollisionRule::Sum))
}

/// `b` i.i.d. uniform full-resolution locations.
pub fn sample_locations<R: Rng + ?Sized>(full_h: usize, full_w: usize, b: usize, rng: &mut R) -> Vec<(usize, usize)> {
    (0..b)
        .map(|_| (rng.random_range(0..full_h), rng.random_range(0..full_w)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn emb(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::from_vec(&[rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn floor_division_places_cell() {
        let m = build_map(&[(1000, 512)], &emb(&[&[1.0]]), 128, 4096, 4096).unwrap();
        assert_eq!(m.coords(), &[(7, 4)]);
        assert_eq!(m.grid(), (32, 32));
    }

    #[test]
    fn collisions_sum_embeddings() {
        let m = build_map(&[(64, 64), (70, 70)], &emb(&[&[1.0, 2.0], &[10.0, 20.0]]), 128, 256, 256).unwrap();
        assert_eq!(m.coords(), &[(0, 0)]);
        assert_eq!(m.values(), &[11.0, 22.0]);
    }

    #[test]
    fn mean_rule_averages() {
        let (m, a) = build_map_with(
            &[(64, 64), (70, 70), (200, 10)],
            &emb(&[&[1.0], &[3.0], &[5.0]]),
            128,
            256,
            256,
            CollisionRule::Mean,
        )
        .unwrap();
        assert_eq!(m.values(), &[2.0, 5.0]);
        assert_eq!(a.pull_back(1, &[1.0, 1.0]), vec![0.5, 0.5, 1.0]);
    }

    #[test]
    fn unit_downsampling_is_identity() {
        let locs = [(3, 1), (0, 2), (2, 2)];
        let m = build_map(&locs, &emb(&[&[1.0], &[2.0], &[3.0]]), 1, 4, 4).unwrap();
        assert_eq!(m.coords(), &[(0, 2), (2, 2), (3, 1)]);
        assert_eq!(m.values(), &[2.0, 3.0, 1.0]);
    }

    #[test]
    fn build_errors() {
        let e = emb(&[&[1.0]]);
        assert!(build_map(&[(0, 0), (1, 1)], &e, 1, 4, 4).is_err());
        assert!(build_map(&[(4, 0)], &e, 1, 4, 4).is_err());
        assert!(build_map(&[(0, 0)], &e, 0, 4, 4).is_err());
    }

    #[test]
    fn coalesce_is_permutation_invariant_bitwise() {
        let mut rng = prng(9);
        let n = 40;
        let mut entries: Vec<((usize, usize), [f32; 3])> = (0..n)
            .map(|_| {
                let c = (rng.random_range(0..3), rng.random_range(0..3));
                (c, [rng.random::<f32>() * 1e3, rng.random::<f32>() * 1e-3, rng.random::<f32>() - 0.5])
            })
            .collect();
        let build = |es: &[((usize, usize), [f32; 3])]| {
            SparseMap::from_entries(3, 3, 3, es.iter().map(|e| e.0).collect(), es.iter().flat_map(|e| e.1).collect())
                .unwrap()
                .coalesce()
        };
        let reference = build(&entries);
        for _ in 0..12 {
            entries.shuffle(&mut rng);
            let m = build(&entries);
            assert_eq!(m.coords(), reference.coords());
            let a: Vec<u32> = m.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = reference.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rot90_coordinate_formula() {
        let m = SparseMap::from_entries(250, 250, 1, vec![(10, 20)], vec![1.0f64]).unwrap().coalesce();
        let spec = AugmentSpec {
            rot90_quarter_turns: 1,
            ..AugmentSpec::identity()
        };
        assert_eq!(augment(&m, &spec).unwrap().coords(), &[(20, 239)]);
    }

    #[test]
    fn rot90_swaps_extents() {
        let m = SparseMap::from_entries(4, 7, 1, vec![(3, 6)], vec![1.0f64]).unwrap().coalesce();
        let spec = AugmentSpec {
            rot90_quarter_turns: 1,
            ..AugmentSpec::identity()
        };
        let r = augment(&m, &spec).unwrap();
        assert_eq!(r.grid(), (7, 4));
        assert_eq!(r.coords(), &[(6, 0)]);
    }

    #[test]
    fn jitter_stays_in_bounds_and_is_seeded() {
        let mut rng = prng(2);
        let coords: Vec<_> = (0..30).map(|_| (rng.random_range(0..10), rng.random_range(0..12))).collect();
        let m = SparseMap::from_entries(10, 12, 1, coords, vec![1.0f32; 30]).unwrap().coalesce();
        let spec = AugmentSpec {
            jitter_radius: 2,
            prng_seed: 77,
            ..AugmentSpec::identity()
        };
        let a = augment(&m, &spec).unwrap();
        a.validate().unwrap();
        assert_eq!(a, augment(&m, &spec).unwrap());
        let total: f32 = a.values().iter().sum();
        assert_eq!(total, m.values().iter().sum::<f32>());
        let too_big = AugmentSpec { jitter_radius: 5, ..spec };
        assert!(augment(&m, &too_big).is_err());
    }

    #[test]
    fn augment_requires_coalesced() {
        let m = SparseMap::from_entries(2, 2, 1, vec![(0, 0)], vec![1.0f32]).unwrap();
        assert!(augment(&m, &AugmentSpec::identity()).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        assert_eq!(sample_locations(1, 1, 1, &mut prng(0)), vec![(0, 0)]);
        let a = sample_locations(1000, 1000, 50, &mut prng(4));
        let b = sample_locations(1000, 1000, 50, &mut prng(4));
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_mean_is_centered() {
        let locs = sample_locations(1000, 1000, 100_000, &mut prng(123));
        let n = locs.len() as f64;
        let mr = locs.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let mc = locs.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        assert!((mr - 499.5).abs() < 10.0, "{mr}");
        assert!((mc - 499.5).abs() < 10.0, "{mc}");
    }
}
