//! Greedy quadric-error-metric edge collapse.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{dot, face_normal, norm, TriMesh};
use crate::error::{Error, Result};
use crate::grid::Point3;

/// Symmetric 4x4 quadric stored as its upper triangle
/// `[a2, ab, ac, ad, b2, bc, bd, c2, cd, d2]`.
#[derive(Debug, Clone, Copy, Default)]
struct Quadric([f64; 10]);

impl Quadric {
    fn from_plane(n: Point3, d: f64) -> Self {
        let [a, b, c] = n;
        Quadric([
            a * a,
            a * b,
            a * c,
            a * d,
            b * b,
            b * c,
            b * d,
            c * c,
            c * d,
            d * d,
        ])
    }

    fn add(&self, o: &Quadric) -> Quadric {
        let mut q = self.0;
        for (x, y) in q.iter_mut().zip(o.0.iter()) {
            *x += y;
        }
        Quadric(q)
    }

    fn error(&self, p: Point3) -> f64 {
        let q = &self.0;
        let [x, y, z] = p;
        let e = q[0] * x * x
            + 2.0 * q[1] * x * y
            + 2.0 * q[2] * x * z
            + 2.0 * q[3] * x
            + q[4] * y * y
            + 2.0 * q[5] * y * z
            + 2.0 * q[6] * y
            + q[7] * z * z
            + 2.0 * q[8] * z
            + q[9];
        e.max(0.0)
    }

    /// Minimizer of the quadric, or `None` when the 3x3 block is singular.
    fn minimizer(&self) -> Option<Point3> {
        let q = &self.0;
        let m = [[q[0], q[1], q[2]], [q[1], q[4], q[5]], [q[2], q[5], q[7]]];
        let rhs = [-q[3], -q[6], -q[8]];
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det.abs() < 1e-12 {
            return None;
        }
        let solve_col = |col: usize| {
            let mut a = m;
            for r in 0..3 {
                a[r][col] = rhs[r];
            }
            (a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]))
                / det
        };
        Some([solve_col(0), solve_col(1), solve_col(2)])
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    cost: f64,
    u: u32,
    v: u32,
    stamp_u: u32,
    stamp_v: u32,
    target: Point3,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // Reversed so that BinaryHeap pops the cheapest collapse first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.u.cmp(&self.u))
            .then_with(|| other.v.cmp(&self.v))
    }
}

/// Result of [`decimate_qem`].
#[derive(Debug, Clone)]
pub struct Decimation {
    pub mesh: TriMesh,
    /// False when no further collapse was legal before reaching the target.
    pub reached_target: bool,
}

struct State {
    pos: Vec<Point3>,
    tris: Vec<[u32; 3]>,
    tri_alive: Vec<bool>,
    vert_alive: Vec<bool>,
    incident: Vec<Vec<u32>>,
    quadric: Vec<Quadric>,
    stamp: Vec<u32>,
    live_tris: usize,
}

impl State {
    fn neighbors(&self, v: u32) -> Vec<u32> {
        let mut nb = Vec::with_capacity(8);
        for &t in &self.incident[v as usize] {
            for &w in &self.tris[t as usize] {
                if w != v {
                    nb.push(w);
                }
            }
        }
        nb.sort_unstable();
        nb.dedup();
        nb
    }

    fn candidate(&self, u: u32, v: u32) -> Candidate {
        let (u, v) = (u.min(v), u.max(v));
        let q = self.quadric[u as usize].add(&self.quadric[v as usize]);
        let pu = self.pos[u as usize];
        let pv = self.pos[v as usize];
        let (target, cost) = match q.minimizer() {
            Some(p) => (p, q.error(p)),
            None => {
                let mid = [
                    0.5 * (pu[0] + pv[0]),
                    0.5 * (pu[1] + pv[1]),
                    0.5 * (pu[2] + pv[2]),
                ];
                [pu, pv, mid]
                    .into_iter()
                    .map(|p| (p, q.error(p)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
            }
        };
        Candidate {
            cost,
            u,
            v,
            stamp_u: self.stamp[u as usize],
            stamp_v: self.stamp[v as usize],
            target,
        }
    }

    /// Link condition plus normal-flip guard.
    fn is_legal(&self, u: u32, v: u32, target: Point3) -> bool {
        let shared: Vec<u32> = self.incident[u as usize]
            .iter()
            .copied()
            .filter(|t| self.tris[*t as usize].contains(&v))
            .collect();
        if shared.len() != 2 {
            return false;
        }
        let opposite: Vec<u32> = shared
            .iter()
            .map(|&t| {
                *self.tris[t as usize]
                    .iter()
                    .find(|&&w| w != u && w != v)
                    .unwrap()
            })
            .collect();
        if opposite[0] == opposite[1] {
            return false;
        }
        let nu = self.neighbors(u);
        let nv = self.neighbors(v);
        let common = nu.iter().filter(|w| nv.binary_search(w).is_ok()).count();
        if common != 2 {
            return false;
        }
        for &w in [u, v].iter() {
            for &t in &self.incident[w as usize] {
                let tri = self.tris[t as usize];
                if tri.contains(&u) && tri.contains(&v) {
                    continue;
                }
                let old = tri.map(|i| self.pos[i as usize]);
                let new = tri.map(|i| {
                    if i == u || i == v {
                        target
                    } else {
                        self.pos[i as usize]
                    }
                });
                let n_old = face_normal(old[0], old[1], old[2]);
                let n_new = face_normal(new[0], new[1], new[2]);
                if dot(n_old, n_new) < 0.0 {
                    return false;
                }
            }
        }
        true
    }

    fn collapse(&mut self, u: u32, v: u32, target: Point3) {
        let v_tris = std::mem::take(&mut self.incident[v as usize]);
        for &t in &v_tris {
            let tri = &mut self.tris[t as usize];
            if tri.contains(&u) {
                self.tri_alive[t as usize] = false;
                self.live_tris -= 1;
                for &w in tri.iter() {
                    if w != v {
                        self.incident[w as usize].retain(|&x| x != t);
                    }
                }
            } else {
                for w in tri.iter_mut() {
                    if *w == v {
                        *w = u;
                    }
                }
                self.incident[u as usize].push(t);
            }
        }
        self.vert_alive[v as usize] = false;
        self.pos[u as usize] = target;
        self.quadric[u as usize] = self.quadric[u as usize].add(&self.quadric[v as usize]);
        self.stamp[u as usize] += 1;
    }
}

/// Collapses edges of a watertight mesh until it has at most
/// `target_triangles` triangles.
pub fn decimate_qem(mesh: &TriMesh, target_triangles: usize) -> Result<Decimation> {
    if target_triangles < 16 {
        return Err(Error::Mesh(format!(
            "decimation target {target_triangles} is below the minimum of 16"
        )));
    }
    if mesh.num_triangles() <= target_triangles {
        return Ok(Decimation {
            mesh: mesh.clone(),
            reached_target: true,
        });
    }
    if !mesh.is_watertight() {
        return Err(Error::Mesh("decimation requires a watertight mesh".into()));
    }

    let nv = mesh.vertices.len();
    let mut quadric = vec![Quadric::default(); nv];
    let mut incident = vec![Vec::new(); nv];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|i| mesh.vertices[i as usize]);
        let n = face_normal(a, b, c);
        let len = norm(n);
        if len > 0.0 {
            let n = [n[0] / len, n[1] / len, n[2] / len];
            let q = Quadric::from_plane(n, -dot(n, a));
            for &i in tri {
                quadric[i as usize] = quadric[i as usize].add(&q);
            }
        }
        for &i in tri {
            incident[i as usize].push(t as u32);
        }
    }
    let mut st = State {
        pos: mesh.vertices.clone(),
        tris: mesh.triangles.clone(),
        tri_alive: vec![true; mesh.triangles.len()],
        vert_alive: vec![true; nv],
        incident,
        quadric,
        stamp: vec![0; nv],
        live_tris: mesh.triangles.len(),
    };

    let mut heap = BinaryHeap::new();
    for (a, b) in mesh.edges() {
        heap.push(st.candidate(a, b));
    }

    while st.live_tris > target_triangles {
        let Some(c) = heap.pop() else { break };
        let (u, v) = (c.u, c.v);
        if !st.vert_alive[u as usize]
            || !st.vert_alive[v as usize]
            || st.stamp[u as usize] != c.stamp_u
            || st.stamp[v as usize] != c.stamp_v
        {
            continue;
        }
        if !st.is_legal(u, v, c.target) {
            continue;
        }
        st.collapse(u, v, c.target);
        for w in st.neighbors(u) {
            heap.push(st.candidate(u, w));
        }
    }

    let reached_target = st.live_tris <= target_triangles;
    let triangles = st
        .tris
        .iter()
        .zip(&st.tri_alive)
        .filter(|(_, &alive)| alive)
        .map(|(t, _)| *t)
        .collect();
    let out = TriMesh {
        vertices: st.pos,
        triangles,
    }
    .compacted();
    Ok(Decimation {
        mesh: out,
        reached_target,
    })
}
