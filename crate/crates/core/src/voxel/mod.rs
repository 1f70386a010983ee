//! Sparse voxel tensors over a fixed region of interest.

mod bev;
mod conv;
mod knn;

pub use bev::{z_collapse_to_bev, BevPlan};
pub use conv::{sparse_conv3d, ConvMode, SparseConvPlan};
pub use knn::{knn_voxels, layer_k};

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::math;

/// Integer voxel index `(ix, iy, iz)`.
pub type Coord = [i32; 3];

/// Axis-aligned crop box and voxel edge length, all in meters. Intervals
/// are half-open: a point on an upper bound is outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub voxel_size: f64,
}

impl RoiSpec {
    /// Driving-corridor crop used at full scale (grid 180 x 32 x 20).
    pub fn paper() -> Self {
        RoiSpec { x_range: (0.0, 72.0), y_range: (-6.4, 6.4), z_range: (-2.0, 6.0), voxel_size: 0.4 }
    }

    /// Shortened corridor for desk-scale runs (grid 48 x 32 x 20).
    pub fn desk() -> Self {
        RoiSpec { x_range: (0.0, 19.2), y_range: (-6.4, 6.4), z_range: (-2.0, 6.0), voxel_size: 0.4 }
    }

    fn extent(lo: f64, hi: f64, vs: f64, axis: &str) -> Result<usize> {
        let cells = (hi - lo) / vs;
        let n = math::round(cells);
        if !(hi > lo) || (cells - n).abs() > 1e-9 || n < 1.0 {
            return Err(Error::Config(alloc::format!(
                "{axis} range [{lo}, {hi}) is not a whole number of {vs} m voxels"
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<[usize; 3]> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        let vs = self.voxel_size;
        Ok([
            Self::extent(self.x_range.0, self.x_range.1, vs, "x")?,
            Self::extent(self.y_range.0, self.y_range.1, vs, "y")?,
            Self::extent(self.z_range.0, self.z_range.1, vs, "z")?,
        ])
    }

    /// Grid extents `[nx, ny, nz]`. Panics on an invalid ROI; use
    /// [`RoiSpec::validate`] for untrusted input.
    pub fn grid(&self) -> [usize; 3] {
        self.validate().expect("valid RoiSpec")
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        x >= self.x_range.0
            && x < self.x_range.1
            && y >= self.y_range.0
            && y < self.y_range.1
            && z >= self.z_range.0
            && z < self.z_range.1
    }

    /// Voxel index of a point, `None` outside the ROI.
    pub fn voxel_of(&self, x: f64, y: f64, z: f64) -> Option<Coord> {
        if !self.contains(x, y, z) {
            return None;
        }
        let g = self.grid();
        let vs = self.voxel_size;
        let ix = math::floor((x - self.x_range.0) / vs) as i64;
        let iy = math::floor((y - self.y_range.0) / vs) as i64;
        let iz = math::floor((z - self.z_range.0) / vs) as i64;
        if ix < 0 || iy < 0 || iz < 0 || ix >= g[0] as i64 || iy >= g[1] as i64 || iz >= g[2] as i64 {
            return None;
        }
        Some([ix as i32, iy as i32, iz as i32])
    }

    /// Center of voxel `c` in meters.
    pub fn voxel_center(&self, c: Coord) -> [f64; 3] {
        let vs = self.voxel_size;
        [
            self.x_range.0 + (c[0] as f64 + 0.5) * vs,
            self.y_range.0 + (c[1] as f64 + 0.5) * vs,
            self.z_range.0 + (c[2] as f64 + 0.5) * vs,
        ]
    }
}

/// Sorted, deduplicated voxel coordinates inside a grid.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CoordSet {
    coords: Vec<Coord>,
    grid: [usize; 3],
}

impl CoordSet {
    /// Sorts and deduplicates; rejects coordinates outside `grid`.
    pub fn new(mut coords: Vec<Coord>, grid: [usize; 3]) -> Result<Self> {
        coords.sort_unstable();
        coords.dedup();
        if let Some(c) = coords.iter().find(|c| !in_grid(**c, grid)) {
            return Err(Error::Config(alloc::format!("coordinate {c:?} outside grid {grid:?}")));
        }
        Ok(CoordSet { coords, grid })
    }

    pub fn empty(grid: [usize; 3]) -> Self {
        CoordSet { coords: Vec::new(), grid }
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Row of `c`, by binary search.
    pub fn lookup(&self, c: Coord) -> Option<usize> {
        self.coords.binary_search(&c).ok()
    }
}

pub(crate) fn in_grid(c: Coord, grid: [usize; 3]) -> bool {
    c.iter().zip(grid).all(|(&v, g)| v >= 0 && (v as usize) < g)
}

/// Voxel coordinates with one feature row of uniform width per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelTensor {
    pub set: CoordSet,
    /// `[len, channels]`
    pub feats: Tensor,
}

impl SparseVoxelTensor {
    pub fn new(set: CoordSet, feats: Tensor) -> Result<Self> {
        let s = feats.shape();
        if s.len() != 2 || s[0] != set.len() {
            return Err(Error::shape("sparse_voxel_tensor", &[s, &[set.len()]], "one feature row per coordinate"));
        }
        Ok(SparseVoxelTensor { set, feats })
    }

    pub fn empty(grid: [usize; 3], channels: usize) -> Self {
        SparseVoxelTensor {
            set: CoordSet::empty(grid),
            feats: Tensor::new(alloc::vec![0, channels], Vec::new()).expect("empty"),
        }
    }

    pub fn channels(&self) -> usize {
        self.feats.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.channels();
        &self.feats.data()[i * c..(i + 1) * c]
    }
}

fn cmp_point(a: &[f64; 4], b: &[f64; 4]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Drop points outside the ROI and mean-pool the four raw channels of the
/// points sharing a voxel. The result does not depend on point order.
pub fn voxelize(points: &[[f64; 4]], roi: &RoiSpec) -> SparseVoxelTensor {
    let grid = roi.grid();
    let mut keyed: Vec<(Coord, [f64; 4])> = points
        .iter()
        .filter_map(|p| roi.voxel_of(p[0], p[1], p[2]).map(|c| (c, *p)))
        .collect();
    // Canonical order so the pooled sums are bit-identical under shuffling.
    keyed.sort_unstable_by(|a, b| a.0.cmp(&b.0).then_with(|| cmp_point(&a.1, &b.1)));
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    let mut i = 0;
    while i < keyed.len() {
        let c = keyed[i].0;
        let mut acc = [0.0; 4];
        let mut n = 0usize;
        while i < keyed.len() && keyed[i].0 == c {
            for (a, v) in acc.iter_mut().zip(keyed[i].1) {
                *a += v;
            }
            n += 1;
            i += 1;
        }
        coords.push(c);
        feats.extend(acc.iter().map(|a| a / n as f64));
    }
    let n = coords.len();
    SparseVoxelTensor {
        set: CoordSet { coords, grid },
        feats: Tensor::from_parts(alloc::vec![n, 4], feats),
    }
}
