//! The 256-case marching cubes triangulation table, derived from face rules.
//!
//! Corner `c` of a cell sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
//! Edge `4 * axis + k` joins corner `EDGE_CORNERS[e].0` to the corner one step
//! along `axis`. On every face the iso-contour cuts off each maximal run of
//! inside corners separately, so a face showing two diagonal inside corners is
//! split into two segments. The rule only depends on the face's own corners,
//! so neighbouring cells always agree and the welded surface is closed.
//! Segments are directed with the inside on their right as seen from outside
//! the cell; chaining them gives loops whose right-hand normal points from
//! inside to outside.

use std::sync::OnceLock;

/// `(lower corner, axis)` of each of the 12 cell edges.
pub const EDGE_CORNERS: [(u8, u8); 12] = {
    let mut out = [(0u8, 0u8); 12];
    let mut axis = 0;
    while axis < 3 {
        let mut k = 0;
        let mut c = 0u8;
        while c < 8 {
            if c & (1 << axis) == 0 {
                out[axis * 4 + k] = (c, axis as u8);
                k += 1;
            }
            c += 1;
        }
        axis += 1;
    }
    out
};

fn edge_between(a: u8, b: u8) -> u8 {
    let diff = a ^ b;
    debug_assert!(diff.count_ones() == 1);
    let axis = diff.trailing_zeros() as u8;
    let lower = a.min(b);
    EDGE_CORNERS
        .iter()
        .position(|&(c, ax)| c == lower && ax == axis)
        .unwrap() as u8
}

/// Corners of each face in counter-clockwise order seen from outside.
fn face_cycles() -> [[u8; 4]; 6] {
    let mut faces = [[0u8; 4]; 6];
    for axis in 0..3usize {
        let b = (axis + 1) % 3;
        let c = (axis + 2) % 3;
        for side in 0..2u8 {
            let corner = |ub: u8, uc: u8| (side << axis) | (ub << b) | (uc << c);
            // (b, c, axis) is right-handed, so this order is CCW seen from +axis.
            let mut cyc = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            if side == 0 {
                cyc.reverse();
            }
            faces[axis * 2 + side as usize] = cyc;
        }
    }
    faces
}

/// Which of the 6 faces contain a given edge (always exactly two).
fn edge_faces(faces: &[[u8; 4]; 6]) -> [[u8; 2]; 12] {
    let mut out = [[0u8; 2]; 12];
    for (e, &(c, axis)) in EDGE_CORNERS.iter().enumerate() {
        let d = c | (1 << axis);
        let mut n = 0;
        for (f, cyc) in faces.iter().enumerate() {
            if cyc.contains(&c) && cyc.contains(&d) {
                out[e][n] = f as u8;
                n += 1;
            }
        }
        debug_assert_eq!(n, 2);
    }
    out
}

fn triangulate_case(case: u8, faces: &[[u8; 4]; 6], efaces: &[[u8; 2]; 12]) -> Vec<[u8; 3]> {
    let inside = |c: u8| case & (1 << c) != 0;
    // next[e] = successor of edge-vertex e along its face segment.
    let mut next = [u8::MAX; 12];
    for cyc in faces {
        for t in 0..4 {
            let prev = (t + 3) % 4;
            if !(inside(cyc[t]) && !inside(cyc[prev])) {
                continue;
            }
            let mut u = t;
            while inside(cyc[(u + 1) % 4]) {
                u = (u + 1) % 4;
            }
            let enter = edge_between(cyc[prev], cyc[t]);
            let leave = edge_between(cyc[u], cyc[(u + 1) % 4]);
            debug_assert_eq!(next[enter as usize], u8::MAX);
            next[enter as usize] = leave;
        }
    }

    let mut tris = Vec::new();
    let mut visited = [false; 12];
    for start in 0..12u8 {
        if next[start as usize] == u8::MAX || visited[start as usize] {
            continue;
        }
        let mut cycle = Vec::new();
        let mut e = start;
        while !visited[e as usize] {
            visited[e as usize] = true;
            cycle.push(e);
            e = next[e as usize];
        }
        debug_assert_eq!(e, start);
        fan(&cycle, efaces, &mut tris);
    }
    tris
}

/// Fan triangulation that never places a diagonal between two vertices lying
/// on a common cell face; such a diagonal could be duplicated by the
/// neighbouring cell and create a non-manifold edge.
fn fan(cycle: &[u8], efaces: &[[u8; 2]; 12], out: &mut Vec<[u8; 3]>) {
    let n = cycle.len();
    let share_face = |a: u8, b: u8| {
        efaces[a as usize]
            .iter()
            .any(|f| efaces[b as usize].contains(f))
    };
    let root = (0..n)
        .find(|&r| (2..n - 1).all(|k| !share_face(cycle[r], cycle[(r + k) % n])))
        .expect("every marching cubes loop admits a safe fan root");
    for k in 1..n - 1 {
        out.push([cycle[root], cycle[(root + k) % n], cycle[(root + k + 1) % n]]);
    }
}

/// Triangles (as edge-vertex triples) for each of the 256 inside/outside cases.
pub fn table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let faces = face_cycles();
        let efaces = edge_faces(&faces);
        std::array::from_fn(|case| triangulate_case(case as u8, &faces, &efaces))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn trivial_cases_are_empty() {
        assert!(table()[0].is_empty());
        assert!(table()[255].is_empty());
    }

    #[test]
    fn classic_case_counts() {
        // One corner inside: one triangle. Two adjacent corners: a quad.
        assert_eq!(table()[1].len(), 1);
        assert_eq!(table()[0b11].len(), 2);
        let max = table().iter().map(|t| t.len()).max().unwrap();
        assert!(max <= 5, "max {max}");
    }

    #[test]
    fn each_case_is_a_closed_patch_inside_the_cell() {
        // Within one cell, every edge between two vertices on a common face is
        // a boundary edge (used once); every other edge is used twice with
        // opposite orientation.
        let faces = face_cycles();
        let efaces = edge_faces(&faces);
        for (case, tris) in table().iter().enumerate() {
            let mut directed: HashMap<(u8, u8), u32> = HashMap::new();
            for t in tris {
                for k in 0..3 {
                    *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
                }
            }
            for (&(a, b), &count) in &directed {
                assert_eq!(count, 1, "case {case}");
                let on_face = efaces[a as usize]
                    .iter()
                    .any(|f| efaces[b as usize].contains(f));
                let rev = directed.contains_key(&(b, a));
                assert!(on_face != rev, "case {case} edge {a}-{b}");
            }
        }
    }

    #[test]
    fn single_corner_normal_points_outward() {
        let pos = |e: u8| {
            let (c, axis) = EDGE_CORNERS[e as usize];
            let mut p = [(c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64];
            p[axis as usize] += 0.5;
            p
        };
        let t = table()[1][0];
        let [a, b, c] = t.map(pos);
        let n = crate::mesh::face_normal(a, b, c);
        assert!(n.iter().all(|&x| x > 0.0), "{n:?}");
    }
}
