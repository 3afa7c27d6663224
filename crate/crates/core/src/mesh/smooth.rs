use super::TriMesh;
use crate::grid::Point3;

fn umbrella_step(pos: &[Point3], neighbors: &[Vec<u32>], factor: f64, out: &mut Vec<Point3>) {
    out.clear();
    out.extend(pos.iter().zip(neighbors).map(|(p, nb)| {
        if nb.is_empty() {
            return *p;
        }
        let mut mean = [0.0; 3];
        for &n in nb {
            let q = pos[n as usize];
            for a in 0..3 {
                mean[a] += q[a];
            }
        }
        let inv = 1.0 / nb.len() as f64;
        [
            p[0] + factor * (mean[0] * inv - p[0]),
            p[1] + factor * (mean[1] * inv - p[1]),
            p[2] + factor * (mean[2] * inv - p[2]),
        ]
    }));
}

/// Taubin lambda|mu smoothing with uniform umbrella weights.
pub fn taubin_smooth(mesh: &TriMesh, iterations: usize, lambda: f64, mu: f64) -> TriMesh {
    if !(lambda > 0.0 && lambda < -mu) {
        log::warn!("taubin_smooth: expected 0 < lambda < -mu, got lambda={lambda} mu={mu}");
    }
    let neighbors = mesh.vertex_neighbors();
    let mut pos = mesh.vertices.clone();
    let mut tmp = Vec::with_capacity(pos.len());
    for _ in 0..iterations {
        umbrella_step(&pos, &neighbors, lambda, &mut tmp);
        umbrella_step(&tmp, &neighbors, mu, &mut pos);
    }
    TriMesh {
        vertices: pos,
        triangles: mesh.triangles.clone(),
    }
}

/// Plain umbrella Laplacian smoothing (shrinks closed surfaces).
pub fn laplacian_smooth(mesh: &TriMesh, iterations: usize, lambda: f64) -> TriMesh {
    let neighbors = mesh.vertex_neighbors();
    let mut pos = mesh.vertices.clone();
    let mut tmp = Vec::with_capacity(pos.len());
    for _ in 0..iterations {
        umbrella_step(&pos, &neighbors, lambda, &mut tmp);
        std::mem::swap(&mut pos, &mut tmp);
    }
    TriMesh {
        vertices: pos,
        triangles: mesh.triangles.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::marching_cubes;
    use crate::mesh::testing::sphere_sdf;

    fn flat_grid_with_spike(n: usize, spike: f64) -> (TriMesh, usize) {
        let mut v = Vec::new();
        for j in 0..n {
            for i in 0..n {
                v.push([i as f64, j as f64, 0.0]);
            }
        }
        let mut t = Vec::new();
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = (j * n + i) as u32;
                let b = a + 1;
                let c = a + n as u32;
                let d = c + 1;
                // Alternating diagonals: vertex valence alternates 4 and 8.
                if (i + j) % 2 == 1 {
                    t.push([a, b, c]);
                    t.push([b, d, c]);
                } else {
                    t.push([a, b, d]);
                    t.push([a, d, c]);
                }
            }
        }
        // Odd parity: a valence-4 vertex.
        let centre = (n / 2) * n + n / 2 + 1;
        v[centre][2] = spike;
        (TriMesh::new(v, t).unwrap(), centre)
    }

    #[test]
    fn zero_iterations_is_identity() {
        let m = marching_cubes(&sphere_sdf(20, 1.0, 6.0), 0.0).unwrap();
        assert_eq!(taubin_smooth(&m, 0, 0.5, -0.53), m);
    }

    #[test]
    fn spike_is_flattened() {
        // The residual depends on the spike's valence: about 0.87mm at
        // valence 4 here, 1.03mm on a regular valence-6 grid.
        let (m, c) = flat_grid_with_spike(11, 5.0);
        assert_eq!(m.vertex_neighbors()[c].len(), 4);
        let s = taubin_smooth(&m, 10, 0.5, -0.53);
        assert!(s.vertices[c][2].abs() < 1.0, "{}", s.vertices[c][2]);
        assert_eq!(s.triangles, m.triangles);
    }

    #[test]
    fn taubin_preserves_volume_where_laplacian_shrinks() {
        let m = marching_cubes(&sphere_sdf(48, 1.0, 15.0), 0.0).unwrap();
        let v0 = m.signed_volume();
        let taubin = taubin_smooth(&m, 100, 0.5, -0.53).signed_volume();
        let lap = laplacian_smooth(&m, 100, 0.5).signed_volume();
        assert!(((taubin - v0) / v0).abs() < 0.05, "taubin {taubin} vs {v0}");
        assert!((v0 - lap) / v0 > 0.20, "laplacian {lap} vs {v0}");
    }
}
