//! Voxel grids with axis-aligned world geometry.
//!
//! Sample positions are voxel centers: voxel `(i, j, k)` sits at
//! `origin + (i, j, k) * spacing` in world millimetres. Data is stored
//! x-fastest, so the linear index of `(i, j, k)` is `i + nx * (j + ny * k)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Dimensions, spacing and origin shared by every field on the same grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if dims[a] < 2 {
                return Err(Error::Grid(format!("dims[{a}] = {} must be >= 2", dims[a])));
            }
            if !(spacing[a] > 0.0 && spacing[a].is_finite()) {
                return Err(Error::Grid(format!(
                    "spacing[{a}] = {} must be positive",
                    spacing[a]
                )));
            }
            if !origin[a].is_finite() {
                return Err(Error::Grid(format!("origin[{a}] is not finite")));
            }
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit-spaced grid at the origin.
    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Result<Self> {
        Self::new(dims, [spacing; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    /// World position of a (possibly fractional) voxel coordinate.
    #[inline]
    pub fn voxel_to_world(&self, v: [f64; 3]) -> Point3 {
        [
            self.origin[0] + v[0] * self.spacing[0],
            self.origin[1] + v[1] * self.spacing[1],
            self.origin[2] + v[2] * self.spacing[2],
        ]
    }

    #[inline]
    pub fn index_to_world(&self, ijk: [usize; 3]) -> Point3 {
        self.voxel_to_world([ijk[0] as f64, ijk[1] as f64, ijk[2] as f64])
    }

    #[inline]
    pub fn world_to_voxel(&self, p: Point3) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Nearest voxel index per axis; may lie outside the grid.
    pub fn nearest_voxel(&self, p: Point3) -> [i64; 3] {
        let v = self.world_to_voxel(p);
        [
            v[0].round() as i64,
            v[1].round() as i64,
            v[2].round() as i64,
        ]
    }

    /// World-space bounds of the voxel centers, `(lo, hi)` per axis.
    pub fn bounds(&self) -> (Point3, Point3) {
        let hi = self.index_to_world([self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1]);
        (self.origin, hi)
    }

    pub fn contains_world(&self, p: Point3) -> bool {
        let (lo, hi) = self.bounds();
        (0..3).all(|a| p[a] >= lo[a] - 1e-9 && p[a] <= hi[a] + 1e-9)
    }

    pub fn voxel_diagonal(&self) -> f64 {
        self.spacing.iter().map(|s| s * s).sum::<f64>().sqrt()
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Returns an error naming the first differing field.
    pub fn ensure_matches(&self, other: &Grid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::GridMismatch { field: "dims" });
        }
        if self.spacing != other.spacing {
            return Err(Error::GridMismatch { field: "spacing" });
        }
        if self.origin != other.origin {
            return Err(Error::GridMismatch { field: "origin" });
        }
        Ok(())
    }
}

/// A dense scalar field (CT intensities, distances, noise).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Grid(format!(
                "data length {} != voxel count {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: f32) -> Self {
        Self {
            data: vec![value; grid.len()],
            grid,
        }
    }

    /// Evaluates `f` at every voxel center.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(Point3) -> f32) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(grid.index_to_world([i, j, k])));
                }
            }
        }
        Self { grid, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Trilinear interpolation at a world point inside the voxel-center hull.
    pub fn trilinear_sample(&self, p: Point3) -> Result<f64> {
        let g = &self.grid;
        let v = g.world_to_voxel(p);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let max = (g.dims[a] - 1) as f64;
            let tol = 1e-9 / g.spacing[a];
            if !(v[a] >= -tol && v[a] <= max + tol) {
                let (lo, hi) = g.bounds();
                return Err(Error::OutOfBounds {
                    axis: a,
                    coord: p[a],
                    lo: lo[a],
                    hi: hi[a],
                });
            }
            let c = v[a].clamp(0.0, max);
            // The upper cell is used for the last voxel so base + 1 stays valid.
            let b = (c.floor() as usize).min(g.dims[a] - 2);
            base[a] = b;
            frac[a] = c - b as f64;
        }
        let mut acc = 0.0f64;
        for dk in 0..2 {
            let wk = if dk == 0 { 1.0 - frac[2] } else { frac[2] };
            for dj in 0..2 {
                let wj = if dj == 0 { 1.0 - frac[1] } else { frac[1] };
                for di in 0..2 {
                    let wi = if di == 0 { 1.0 - frac[0] } else { frac[0] };
                    let w = wi * wj * wk;
                    if w != 0.0 {
                        acc += w * self.get(base[0] + di, base[1] + dj, base[2] + dk) as f64;
                    }
                }
            }
        }
        Ok(acc)
    }
}

/// Organ membership, one flag per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub grid: Grid,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Grid(format!(
                "mask length {} != voxel count {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        Self {
            data: vec![false; grid.len()],
            grid,
        }
    }

    /// Nonzero voxels become foreground.
    pub fn from_volume(vol: &Volume) -> Self {
        Self {
            grid: vol.grid,
            data: vol.data.iter().map(|&v| v != 0.0).collect(),
        }
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.grid.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn inverted(&self) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    /// Foreground voxels with at least one background 6-neighbour.
    /// Neighbours outside the grid count as background.
    pub fn is_boundary(&self, i: usize, j: usize, k: usize) -> bool {
        if !self.get(i, j, k) {
            return false;
        }
        let d = self.grid.dims;
        let c = [i, j, k];
        for a in 0..3 {
            for s in [-1i64, 1] {
                let n = c[a] as i64 + s;
                if n < 0 || n >= d[a] as i64 {
                    return true;
                }
                let mut q = c;
                q[a] = n as usize;
                if !self.get(q[0], q[1], q[2]) {
                    return true;
                }
            }
        }
        false
    }

    /// Keeps only the largest 6-connected foreground component.
    pub fn largest_component(&self) -> Self {
        let g = self.grid;
        let mut label = vec![0u32; g.len()];
        let mut best = (0usize, 0u32);
        let mut next = 0u32;
        let mut stack = Vec::new();
        for start in 0..g.len() {
            if !self.data[start] || label[start] != 0 {
                continue;
            }
            next += 1;
            label[start] = next;
            stack.push(start);
            let mut size = 0usize;
            while let Some(idx) = stack.pop() {
                size += 1;
                let c = g.coords(idx);
                for a in 0..3 {
                    for s in [-1i64, 1] {
                        let n = c[a] as i64 + s;
                        if n < 0 || n >= g.dims[a] as i64 {
                            continue;
                        }
                        let mut q = c;
                        q[a] = n as usize;
                        let qi = g.index(q[0], q[1], q[2]);
                        if self.data[qi] && label[qi] == 0 {
                            label[qi] = next;
                            stack.push(qi);
                        }
                    }
                }
            }
            if size > best.0 {
                best = (size, next);
            }
        }
        Self {
            grid: g,
            data: label.iter().map(|&l| l != 0 && l == best.1).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trilinear_hits_voxel_centers() {
        let g = Grid::new([4, 5, 6], [1.0, 2.0, 0.5], [-3.0, 1.0, 2.0]).unwrap();
        let vol = Volume::from_fn(g, |p| (p[0] * 3.0 + p[1] * p[1] - p[2]) as f32);
        for k in 0..6 {
            for j in 0..5 {
                for i in 0..4 {
                    let p = g.index_to_world([i, j, k]);
                    let s = vol.trilinear_sample(p).unwrap();
                    assert_eq!(s, vol.get(i, j, k) as f64);
                }
            }
        }
    }

    #[test]
    fn trilinear_constant_and_midpoint() {
        let g = Grid::isotropic([5, 5, 5], 1.5).unwrap();
        let c = Volume::filled(g, 7.25);
        assert_eq!(c.trilinear_sample([2.2, 0.3, 5.9]).unwrap(), 7.25);

        let ramp = Volume::from_fn(g, |p| p[0] as f32);
        let mid = ramp.trilinear_sample([0.75, 3.0, 3.0]).unwrap();
        assert!((mid - 0.75).abs() < 1e-12);
    }

    #[test]
    fn trilinear_reproduces_affine_fields() {
        let g = Grid::new([6, 7, 8], [0.7, 1.3, 2.1], [4.0, -2.0, 0.5]).unwrap();
        let f = |p: Point3| 0.25 * p[0] - 0.5 * p[1] + 0.125 * p[2] + 1.0;
        let vol = Volume::from_fn(g, |p| f(p) as f32);
        let (lo, hi) = g.bounds();
        for t in 0..50 {
            let s = t as f64 / 49.0;
            let p = [
                lo[0] + s * (hi[0] - lo[0]),
                lo[1] + (1.0 - s) * (hi[1] - lo[1]),
                lo[2] + (s * 7.0).fract() * (hi[2] - lo[2]),
            ];
            let got = vol.trilinear_sample(p).unwrap();
            // Data is stored as f32, so compare against the f32-rounded field.
            assert!((got - f(p)).abs() < 1e-5, "{got} vs {}", f(p));
        }
    }

    #[test]
    fn trilinear_out_of_bounds_names_axis() {
        let g = Grid::isotropic([4, 4, 4], 1.0).unwrap();
        let vol = Volume::filled(g, 0.0);
        match vol.trilinear_sample([1.0, 3.5, 1.0]) {
            Err(Error::OutOfBounds { axis, .. }) => assert_eq!(axis, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn world_voxel_round_trip() {
        let g = Grid::new([9, 9, 9], [1.5, 0.75, 3.0], [-10.5, 2.25, 7.0]).unwrap();
        for idx in [0usize, 17, 300, 728] {
            let ijk = g.coords(idx);
            let w = g.index_to_world(ijk);
            let v = g.world_to_voxel(w);
            for a in 0..3 {
                assert!((v[a] - ijk[a] as f64).abs() < 1e-12);
            }
            assert_eq!(g.voxel_to_world(v), w);
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new([1, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(Grid::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        let g = Grid::isotropic([2, 2, 2], 1.0).unwrap();
        assert!(Volume::new(g, vec![0.0; 7]).is_err());
    }

    #[test]
    fn largest_component_keeps_bigger_blob() {
        let g = Grid::isotropic([10, 10, 10], 1.0).unwrap();
        let mut m = BinaryMask::empty(g);
        for k in 1..4 {
            for j in 1..4 {
                for i in 1..4 {
                    m.set(i, j, k, true);
                }
            }
        }
        m.set(8, 8, 8, true);
        let lc = m.largest_component();
        assert_eq!(lc.count(), 27);
        assert!(!lc.get(8, 8, 8));
    }
}
