//! Triangle meshes and the surface clean-up chain.
//!
//! Triangles are wound counter-clockwise seen from outside, so face normals
//! point toward positive signed distance.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Point3, Volume};

mod components;
mod decimate;
mod marching_cubes;
mod mc_table;
mod ply;
mod smooth;

pub use components::largest_component;
pub use decimate::{decimate_qem, Decimation};
pub use marching_cubes::marching_cubes;
pub use ply::{export_ply, read_ply, write_ply, PlyMesh, CLASS_PALETTE};
pub use smooth::{laplacian_smooth, taubin_smooth};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

#[inline]
pub(crate) fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn dist(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

/// Unnormalized face normal (twice the area vector).
#[inline]
pub(crate) fn face_normal(a: Point3, b: Point3, c: Point3) -> Point3 {
    cross(sub(b, a), sub(c, a))
}

#[inline]
fn edge_key(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(Error::Mesh(format!("triangle {t} references a missing vertex")));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::Mesh(format!("triangle {t} is degenerate")));
            }
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Number of triangles incident to each undirected edge.
    pub fn edge_incidence(&self) -> HashMap<(u32, u32), u32> {
        let mut m = HashMap::with_capacity(self.triangles.len() * 2);
        for t in &self.triangles {
            for e in 0..3 {
                *m.entry(edge_key(t[e], t[(e + 1) % 3])).or_insert(0) += 1;
            }
        }
        m
    }

    /// Undirected edges in ascending order.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut e: Vec<_> = self.edge_incidence().into_keys().collect();
        e.sort_unstable();
        e
    }

    pub fn num_edges(&self) -> usize {
        self.edge_incidence().len()
    }

    /// Every undirected edge borders exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_incidence().values().all(|&c| c == 2)
    }

    /// Each directed edge appears once and its reverse appears once.
    pub fn is_consistently_oriented(&self) -> bool {
        let mut directed = HashMap::with_capacity(self.triangles.len() * 3);
        for t in &self.triangles {
            for e in 0..3 {
                *directed.entry((t[e], t[(e + 1) % 3])).or_insert(0u32) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &c)| c == 1 && directed.get(&(b, a)) == Some(&1))
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.num_edges() as i64 + self.triangles.len() as i64
    }

    /// Enclosed volume by the divergence theorem (positive for outward normals).
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                0.5 * norm(face_normal(a, b, c))
            })
            .sum()
    }

    /// Sorted unique neighbours of each vertex.
    pub fn vertex_neighbors(&self) -> Vec<Vec<u32>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                nb[a as usize].push(b);
                nb[b as usize].push(a);
            }
        }
        for list in &mut nb {
            list.sort_unstable();
            list.dedup();
        }
        nb
    }

    pub fn has_degenerate_triangles(&self) -> bool {
        self.triangles
            .iter()
            .any(|t| t[0] == t[1] || t[1] == t[2] || t[0] == t[2])
    }

    pub fn has_unreferenced_vertices(&self) -> bool {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v as usize] = true;
            }
        }
        used.iter().any(|u| !u)
    }

    /// Drops vertices no triangle uses, preserving relative order.
    pub fn compacted(&self) -> TriMesh {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        for t in &self.triangles {
            for &v in t {
                if remap[v as usize] == u32::MAX {
                    remap[v as usize] = 0;
                }
            }
        }
        for (i, r) in remap.iter_mut().enumerate() {
            if *r != u32::MAX {
                *r = vertices.len() as u32;
                vertices.push(self.vertices[i]);
            }
        }
        let triangles = self
            .triangles
            .iter()
            .map(|t| t.map(|v| remap[v as usize]))
            .collect();
        TriMesh {
            vertices,
            triangles,
        }
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.vertices.len().max(1) as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for a in 0..3 {
                c[a] += v[a];
            }
        }
        c.map(|x| x / n)
    }

    /// Checks the closed-manifold invariants, naming the first failure.
    pub fn check_closed_manifold(&self, stage: &str) -> Result<()> {
        if self.has_degenerate_triangles() {
            return Err(Error::Mesh(format!("{stage}: degenerate triangle")));
        }
        if !self.is_watertight() {
            return Err(Error::Mesh(format!("{stage}: mesh is not watertight")));
        }
        if !self.is_consistently_oriented() {
            return Err(Error::Mesh(format!("{stage}: inconsistent orientation")));
        }
        Ok(())
    }
}

/// Shortest distance from `p` to triangle `abc`.
pub fn point_triangle_distance(p: Point3, a: Point3, b: Point3, c: Point3) -> f64 {
    // Closest-point regions after Ericson, Real-Time Collision Detection 5.1.5.
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return dist(p, a);
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return dist(p, b);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return dist(p, [a[0] + v * ab[0], a[1] + v * ab[1], a[2] + v * ab[2]]);
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return dist(p, c);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return dist(p, [a[0] + w * ac[0], a[1] + w * ac[1], a[2] + w * ac[2]]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        let bc = sub(c, b);
        return dist(p, [b[0] + w * bc[0], b[1] + w * bc[1], b[2] + w * bc[2]]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    let q = [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ];
    dist(p, q)
}

/// Distance from a point to the closest triangle of `mesh` (brute force).
pub fn point_mesh_distance(p: Point3, mesh: &TriMesh) -> f64 {
    mesh.triangles
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            point_triangle_distance(p, a, b, c)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Parameters of the extraction and clean-up chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanupConfig {
    pub level: f64,
    pub taubin_iterations: usize,
    pub final_taubin_iterations: usize,
    pub lambda: f64,
    pub mu: f64,
    pub target_triangles: usize,
}

impl Default for CleanupConfig {
    fn default() -> Self {
        Self {
            level: 0.0,
            taubin_iterations: 100,
            final_taubin_iterations: 10,
            lambda: 0.5,
            mu: -0.53,
            target_triangles: 1000,
        }
    }
}

/// Marching cubes, largest component, Taubin, QEM decimation, Taubin.
pub fn extract_clean_mesh(sdf: &Volume, cfg: &CleanupConfig) -> Result<TriMesh> {
    let raw = marching_cubes(sdf, cfg.level)?;
    let main = largest_component(&raw)?;
    main.check_closed_manifold("largest_component")?;
    let smoothed = taubin_smooth(&main, cfg.taubin_iterations, cfg.lambda, cfg.mu);
    let dec = decimate_qem(&smoothed, cfg.target_triangles)?;
    if !dec.reached_target {
        log::warn!(
            "decimation stopped at {} triangles (target {})",
            dec.mesh.num_triangles(),
            cfg.target_triangles
        );
    }
    dec.mesh.check_closed_manifold("decimate_qem")?;
    Ok(taubin_smooth(
        &dec.mesh,
        cfg.final_taubin_iterations,
        cfg.lambda,
        cfg.mu,
    ))
}
