use std::collections::HashMap;

use super::mc_table::{table, EDGE_CORNERS};
use super::TriMesh;
use crate::error::{Error, Result};
use crate::grid::Volume;

/// Extracts the `level` iso-surface with vertices in world millimetres.
///
/// Voxels with value `< level` are inside. Vertices are placed by linear
/// interpolation along cell edges and welded by grid-edge identity.
pub fn marching_cubes(field: &Volume, level: f64) -> Result<TriMesh> {
    let g = field.grid;
    let (lo, hi) = field.min_max();
    if !((lo as f64) < level && (hi as f64) >= level) {
        return Err(Error::SurfaceNotPresent { level });
    }
    let [nx, ny, nz] = g.dims;
    let tbl = table();
    let mut vertex_of_edge: HashMap<u64, u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();

    let value = |i: usize, j: usize, k: usize| field.data[g.index(i, j, k)] as f64;

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut case = 0u8;
                let mut vals = [0.0f64; 8];
                for c in 0..8u8 {
                    let v = value(
                        i + (c & 1) as usize,
                        j + ((c >> 1) & 1) as usize,
                        k + ((c >> 2) & 1) as usize,
                    );
                    vals[c as usize] = v;
                    if v < level {
                        case |= 1 << c;
                    }
                }
                let tris = &tbl[case as usize];
                if tris.is_empty() {
                    continue;
                }
                for t in tris {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in t.iter().enumerate() {
                        let (c0, axis) = EDGE_CORNERS[e as usize];
                        let base = [
                            i + (c0 & 1) as usize,
                            j + ((c0 >> 1) & 1) as usize,
                            k + ((c0 >> 2) & 1) as usize,
                        ];
                        let key = g.index(base[0], base[1], base[2]) as u64 * 3 + axis as u64;
                        ids[slot] = *vertex_of_edge.entry(key).or_insert_with(|| {
                            let c1 = c0 | (1 << axis);
                            let (v0, v1) = (vals[c0 as usize], vals[c1 as usize]);
                            let t = ((level - v0) / (v1 - v0)).clamp(0.0, 1.0);
                            let mut vox = [base[0] as f64, base[1] as f64, base[2] as f64];
                            vox[axis as usize] += t;
                            vertices.push(g.voxel_to_world(vox));
                            (vertices.len() - 1) as u32
                        });
                    }
                    triangles.push(ids);
                }
            }
        }
    }
    Ok(TriMesh {
        vertices,
        triangles,
    })
}
