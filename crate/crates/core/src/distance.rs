//! Exact signed Euclidean distance transforms.
//!
//! Distances are measured between voxel centers of opposite classes, in world
//! millimetres with anisotropic spacing honoured. Foreground voxels receive the
//! negated distance to the nearest background voxel; background voxels the
//! positive distance to the nearest foreground voxel.

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, Volume};

/// Largest grid accepted by [`brute_force_sdt`].
pub const BRUTE_FORCE_MAX_VOXELS: usize = 64 * 64 * 64;

fn check_mask(mask: &BinaryMask) -> Result<()> {
    let fg = mask.count();
    if fg == 0 {
        return Err(Error::DegenerateMask("no foreground voxels"));
    }
    if fg == mask.data.len() {
        return Err(Error::DegenerateMask("no background voxels"));
    }
    Ok(())
}

/// 1-D lower envelope of parabolas on squared distances.
///
/// `f` holds squared distances (or infinity) sampled at positions `q * step`;
/// `out` receives `min_q (step * (p - q))^2 + f[q]`.
fn lower_envelope(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let s2 = step * step;
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let r = v[k as usize];
            let qf = q as f64;
            let rf = r as f64;
            let s = ((f[q] + s2 * qf * qf) - (f[r] + s2 * rf * rf)) / (2.0 * s2 * (qf - rf));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while z[j + 1] < pf {
            j += 1;
        }
        let r = v[j];
        let d = step * (pf - r as f64);
        *o = d * d + f[r];
    }
}

/// Squared Euclidean distance from every voxel to the nearest site.
fn squared_edt(grid: &Grid, is_site: impl Fn(usize) -> bool) -> Vec<f64> {
    let [nx, ny, nz] = grid.dims;
    let mut d: Vec<f64> = (0..grid.len())
        .map(|i| if is_site(i) { 0.0 } else { f64::INFINITY })
        .collect();
    let nmax = nx.max(ny).max(nz);
    let mut line = vec![0.0; nmax];
    let mut out = vec![0.0; nmax];
    let mut v = vec![0usize; nmax];
    let mut z = vec![0.0; nmax + 1];

    for (axis, len, stride) in [(0, nx, 1), (1, ny, nx), (2, nz, nx * ny)] {
        let step = grid.spacing[axis];
        for start in 0..grid.len() {
            // Only visit the first element of each line along `axis`.
            if (start / stride) % len != 0 {
                continue;
            }
            for t in 0..len {
                line[t] = d[start + t * stride];
            }
            lower_envelope(&line[..len], step, &mut out[..len], &mut v, &mut z);
            for t in 0..len {
                d[start + t * stride] = out[t];
            }
        }
    }
    d
}

/// Signed distance field of a mask, negative inside.
pub fn signed_distance_transform(mask: &BinaryMask) -> Result<Volume> {
    check_mask(mask)?;
    let to_fg = squared_edt(&mask.grid, |i| mask.data[i]);
    let to_bg = squared_edt(&mask.grid, |i| !mask.data[i]);
    let data = mask
        .data
        .iter()
        .enumerate()
        .map(|(i, &inside)| {
            if inside {
                -(to_bg[i].sqrt()) as f32
            } else {
                to_fg[i].sqrt() as f32
            }
        })
        .collect();
    Volume::new(mask.grid, data)
}

/// Exhaustive O(n²) reference for [`signed_distance_transform`].
pub fn brute_force_sdt(mask: &BinaryMask) -> Result<Volume> {
    let g = &mask.grid;
    if g.len() > BRUTE_FORCE_MAX_VOXELS {
        return Err(Error::Grid(format!(
            "brute force SDT limited to {BRUTE_FORCE_MAX_VOXELS} voxels, got {}",
            g.len()
        )));
    }
    check_mask(mask)?;
    let pos: Vec<[f64; 3]> = (0..g.len()).map(|i| g.index_to_world(g.coords(i))).collect();
    let fg: Vec<[f64; 3]> = (0..g.len()).filter(|&i| mask.data[i]).map(|i| pos[i]).collect();
    let bg: Vec<[f64; 3]> = (0..g.len()).filter(|&i| !mask.data[i]).map(|i| pos[i]).collect();
    let data = (0..g.len())
        .map(|i| {
            let p = pos[i];
            let others = if mask.data[i] { &bg } else { &fg };
            let best = others
                .iter()
                .map(|q| {
                    let dx = p[0] - q[0];
                    let dy = p[1] - q[1];
                    let dz = p[2] - q[2];
                    dx * dx + dy * dy + dz * dz
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            if mask.data[i] {
                -best as f32
            } else {
                best as f32
            }
        })
        .collect();
    Volume::new(*g, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(grid: Grid, f: impl Fn([usize; 3]) -> bool) -> BinaryMask {
        let data = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        BinaryMask::new(grid, data).unwrap()
    }

    #[test]
    fn single_voxel_center() {
        let g = Grid::isotropic([5, 5, 5], 1.0).unwrap();
        let m = mask_from(g, |c| c == [2, 2, 2]);
        let sdf = signed_distance_transform(&m).unwrap();
        assert_eq!(sdf.get(2, 2, 2), -1.0);
        assert_eq!(sdf.get(3, 2, 2), 1.0);
        assert!((sdf.get(3, 3, 3) as f64 - 3f64.sqrt()).abs() < 1e-6);
        // Radial symmetry about the single voxel.
        assert_eq!(sdf.get(0, 2, 2), sdf.get(2, 4, 2));
        assert_eq!(sdf.get(0, 0, 4), sdf.get(4, 4, 0));
    }

    #[test]
    fn two_voxel_slab() {
        let g = Grid::isotropic([6, 6, 6], 1.0).unwrap();
        let m = mask_from(g, |c| c[2] == 2 || c[2] == 3);
        let sdf = signed_distance_transform(&m).unwrap();
        assert_eq!(sdf.get(1, 4, 2), -1.0);
        assert_eq!(sdf.get(1, 4, 3), -1.0);
        assert_eq!(sdf.get(1, 4, 0), 2.0);
    }

    #[test]
    fn half_space_is_linear_ramp() {
        let g = Grid::new([10, 4, 4], [1.5, 1.0, 1.0], [0.0; 3]).unwrap();
        let m = mask_from(g, |c| c[0] < 4);
        let sdf = signed_distance_transform(&m).unwrap();
        for i in 0..10 {
            let expect = if i < 4 {
                -((4 - i) as f64) * 1.5
            } else {
                (i as f64 - 3.0) * 1.5
            };
            assert!((sdf.get(i, 1, 2) as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn anisotropic_neighbour_distance() {
        let g = Grid::new([5, 5, 5], [1.0, 1.0, 3.0], [0.0; 3]).unwrap();
        let m = mask_from(g, |c| c == [2, 2, 2]);
        let sdf = brute_force_sdt(&m).unwrap();
        assert_eq!(sdf.get(2, 2, 3), 3.0);
        assert_eq!(signed_distance_transform(&m).unwrap().get(2, 2, 3), 3.0);
    }

    #[test]
    fn degenerate_masks_rejected() {
        let g = Grid::isotropic([3, 3, 3], 1.0).unwrap();
        assert!(matches!(
            signed_distance_transform(&BinaryMask::empty(g)),
            Err(Error::DegenerateMask(_))
        ));
        assert!(signed_distance_transform(&BinaryMask::empty(g).inverted()).is_err());
    }

    #[test]
    fn brute_force_size_guard() {
        let g = Grid::isotropic([65, 64, 64], 1.0).unwrap();
        assert!(brute_force_sdt(&BinaryMask::empty(g)).is_err());
    }

    #[test]
    fn inverting_mask_flips_sign() {
        let g = Grid::isotropic([9, 8, 7], 1.0).unwrap();
        let m = mask_from(g, |c| (c[0] + 2 * c[1] + c[2]) % 5 == 0 || c[0] < 3);
        let a = signed_distance_transform(&m).unwrap();
        let b = signed_distance_transform(&m.inverted()).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(*x, -*y);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn matches_brute_force(
            bits in proptest::collection::vec(0u8..4, 7 * 6 * 8),
            sx in 0.5f64..2.0, sy in 0.5f64..2.0, sz in 0.5f64..3.0,
        ) {
            let g = Grid::new([7, 6, 8], [sx, sy, sz], [0.0; 3]).unwrap();
            let data: Vec<bool> = bits.iter().map(|&b| b == 0).collect();
            let m = BinaryMask::new(g, data).unwrap();
            prop_assume!(m.count() > 0 && m.count() < g.len());
            let fast = signed_distance_transform(&m).unwrap();
            let slow = brute_force_sdt(&m).unwrap();
            for (a, b) in fast.data.iter().zip(&slow.data) {
                prop_assert!((a - b).abs() < 1e-4);
            }
            // Same-class neighbours are 1-Lipschitz; opposite-class
            // neighbours can differ by up to twice their separation.
            for idx in 0..g.len() {
                let c = g.coords(idx);
                for a in 0..3 {
                    if c[a] + 1 < g.dims[a] {
                        let mut q = c;
                        q[a] += 1;
                        let qi = g.index(q[0], q[1], q[2]);
                        let d = (fast.data[idx] - fast.data[qi]).abs() as f64;
                        let bound = if m.data[idx] == m.data[qi] { 1.0 } else { 2.0 };
                        prop_assert!(d <= bound * g.spacing[a] + 1e-5);
                    }
                }
            }
        }
    }
}
