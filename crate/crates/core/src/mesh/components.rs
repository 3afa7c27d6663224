use std::collections::HashMap;

use super::TriMesh;
use crate::error::{Error, Result};

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Keeps the edge-connected component with the most triangles.
///
/// Ties go to the component containing the lowest vertex index.
pub fn largest_component(mesh: &TriMesh) -> Result<TriMesh> {
    if mesh.triangles.is_empty() {
        return Err(Error::Mesh("largest_component: empty mesh".into()));
    }
    let nt = mesh.triangles.len();
    let mut parent: Vec<usize> = (0..nt).collect();
    let mut first_on_edge: HashMap<(u32, u32), usize> = HashMap::with_capacity(nt * 2);
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            let key = (a.min(b), a.max(b));
            match first_on_edge.get(&key) {
                Some(&other) => {
                    let (ra, rb) = (find(&mut parent, t), find(&mut parent, other));
                    if ra != rb {
                        parent[ra] = rb;
                    }
                }
                None => {
                    first_on_edge.insert(key, t);
                }
            }
        }
    }
    // root -> (triangle count, lowest vertex index)
    let mut stats: HashMap<usize, (usize, u32)> = HashMap::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let r = find(&mut parent, t);
        let lowest = *tri.iter().min().unwrap();
        let s = stats.entry(r).or_insert((0, u32::MAX));
        s.0 += 1;
        s.1 = s.1.min(lowest);
    }
    let (&best, _) = stats
        .iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .unwrap();
    let triangles = mesh
        .triangles
        .iter()
        .enumerate()
        .filter(|&(t, _)| find(&mut parent, t) == best)
        .map(|(_, tri)| *tri)
        .collect();
    Ok(TriMesh {
        vertices: mesh.vertices.clone(),
        triangles,
    }
    .compacted())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, Volume};
    use crate::mesh::marching_cubes;
    use crate::mesh::testing::unit_cube;

    fn translated(m: &TriMesh, off: f64) -> TriMesh {
        TriMesh {
            vertices: m.vertices.iter().map(|v| [v[0] + off, v[1], v[2]]).collect(),
            triangles: m.triangles.clone(),
        }
    }

    fn merge(a: &TriMesh, b: &TriMesh) -> TriMesh {
        let n = a.vertices.len() as u32;
        let mut m = a.clone();
        m.vertices.extend_from_slice(&b.vertices);
        m.triangles
            .extend(b.triangles.iter().map(|t| t.map(|v| v + n)));
        m
    }

    fn sphere(radius: f64, n: usize) -> TriMesh {
        let g = Grid::isotropic([n; 3], 1.0).unwrap();
        let c = (n - 1) as f64 / 2.0;
        let f = Volume::from_fn(g, |p| {
            (((p[0] - c).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2)).sqrt() - radius) as f32
        });
        marching_cubes(&f, 0.0).unwrap()
    }

    #[test]
    fn keeps_larger_of_two_spheres() {
        let big = sphere(5.0, 16);
        let small = sphere(3.0, 16);
        assert!(big.num_triangles() > small.num_triangles());
        let both = merge(&translated(&small, 0.0), &translated(&big, 40.0));
        let out = largest_component(&both).unwrap();
        assert_eq!(out.num_triangles(), big.num_triangles());
        assert!(out.vertices.iter().all(|v| v[0] > 30.0));
        assert!(!out.has_unreferenced_vertices());
        assert!(out.is_watertight());
    }

    #[test]
    fn connected_mesh_is_unchanged() {
        let c = unit_cube();
        assert_eq!(largest_component(&c).unwrap(), c);
    }

    #[test]
    fn ties_go_to_lowest_vertex() {
        let c = unit_cube();
        let both = merge(&c, &translated(&c, 5.0));
        let out = largest_component(&both).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn empty_is_error() {
        assert!(largest_component(&TriMesh::default()).is_err());
    }
}
