//! Turns a cleaned mesh plus CT and ground-truth distance field into a
//! labelled graph sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Point3, Volume};
use crate::mesh::TriMesh;

pub const NUM_CLASSES: usize = 5;
pub const PATCH_SIZE: usize = 5;
pub const PATCH_VOXELS: usize = PATCH_SIZE * PATCH_SIZE * PATCH_SIZE;

/// HU used for patch voxels outside the CT volume (air).
pub const FILL_HU: f32 = -1000.0;
/// Intensity window mapped to [-1, 1].
pub const HU_WINDOW: f32 = 250.0;

/// Signed-distance cut points separating the five node classes.
///
/// Class 0: `d < t1`; 1: `t1 <= d < t2`; 2: `t2 <= d <= t3`;
/// 3: `t3 < d <= t4`; 4: `d > t4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassThresholds {
    pub edges: [f64; 4],
}

impl Default for ClassThresholds {
    fn default() -> Self {
        Self {
            edges: [-2.5, -0.5, 0.5, 2.5],
        }
    }
}

impl ClassThresholds {
    pub fn new(edges: [f64; 4]) -> Result<Self> {
        let t = Self { edges };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.edges;
        if !(e[0] < e[1] && e[1] < e[2] && e[2] < e[3]) {
            return Err(Error::Config(format!("class thresholds {e:?} must be strictly increasing")));
        }
        if !(e[0] < 0.0 && e[3] > 0.0) {
            return Err(Error::Config(format!("class thresholds {e:?} must satisfy t1 < 0 < t4")));
        }
        Ok(())
    }

    pub fn classify(&self, d: f64) -> u8 {
        let [t1, t2, t3, t4] = self.edges;
        if d < t1 {
            0
        } else if d < t2 {
            1
        } else if d <= t3 {
            2
        } else if d <= t4 {
            3
        } else {
            4
        }
    }
}

/// Where a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub structure_id: u32,
    pub perturbation: u32,
    pub seed: u64,
}

/// One training example: a mesh graph with per-node CT patches and labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphSample {
    pub node_positions: Vec<[f32; 3]>,
    /// `N * 125` normalized intensities, x fastest within each patch.
    pub patches: Vec<f32>,
    /// Directed `(source, target)` pairs; both directions of every mesh edge.
    pub edges: Vec<[u32; 2]>,
    pub pseudo_coords: Vec<[f32; 3]>,
    pub labels: Vec<u8>,
    pub signed_distances: Vec<f32>,
    /// Surface triangles, kept for visualisation.
    pub triangles: Vec<[u32; 3]>,
    pub provenance: Provenance,
}

impl GraphSample {
    pub fn num_nodes(&self) -> usize {
        self.node_positions.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn mesh(&self) -> TriMesh {
        TriMesh {
            vertices: self
                .node_positions
                .iter()
                .map(|p| p.map(|c| c as f64))
                .collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Checks every structural invariant of a sample.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        let bad = |detail: String| Error::Shape {
            context: "GraphSample".into(),
            detail,
        };
        if self.patches.len() != n * PATCH_VOXELS {
            return Err(bad(format!("{} patch values for {n} nodes", self.patches.len())));
        }
        if self.labels.len() != n || self.signed_distances.len() != n {
            return Err(bad("labels/distances length != node count".into()));
        }
        if self.pseudo_coords.len() != self.edges.len() {
            return Err(bad("pseudo-coordinate count != edge count".into()));
        }
        for (e, &[s, t]) in self.edges.iter().enumerate() {
            if s as usize >= n || t as usize >= n {
                return Err(Error::Index {
                    context: "GraphSample edges",
                    index: s.max(t) as usize,
                    len: n,
                });
            }
            if s == t {
                return Err(bad(format!("edge {e} is a self-loop")));
            }
        }
        if self
            .pseudo_coords
            .iter()
            .flatten()
            .any(|&u| !(0.0..=1.0).contains(&u))
        {
            return Err(bad("pseudo-coordinate outside [0, 1]".into()));
        }
        if self.labels.iter().any(|&l| l as usize >= NUM_CLASSES) {
            return Err(bad("label outside 0..5".into()));
        }
        Ok(())
    }

    /// Copy with every patch overwritten by a constant.
    pub fn blinded(&self, value: f32) -> GraphSample {
        let mut s = self.clone();
        s.patches.iter_mut().for_each(|v| *v = value);
        s
    }
}

/// Signed distance of each node to the ground truth and its class.
pub fn label_nodes(
    mesh: &TriMesh,
    gt_sdf: &Volume,
    th: &ClassThresholds,
) -> Result<(Vec<f32>, Vec<u8>)> {
    let mut d = Vec::with_capacity(mesh.num_vertices());
    let mut labels = Vec::with_capacity(mesh.num_vertices());
    for (i, &p) in mesh.vertices.iter().enumerate() {
        let v = gt_sdf
            .trilinear_sample(p)
            .map_err(|e| Error::NodeOutOfBounds {
                node: i,
                reason: e.to_string(),
            })?;
        d.push(v as f32);
        labels.push(th.classify(v));
    }
    Ok((d, labels))
}

/// Directed edges and their Cartesian pseudo-coordinates.
///
/// `u(i -> j) = 0.5 + (p_j - p_i) / (2 D)` where `D` is the largest absolute
/// coordinate difference over all edges of this graph.
pub fn build_edges(mesh: &TriMesh) -> (Vec<[u32; 2]>, Vec<[f32; 3]>) {
    let und = mesh.edges();
    let mut scale = 0.0f64;
    for &(a, b) in &und {
        let d = crate::mesh::sub(mesh.vertices[b as usize], mesh.vertices[a as usize]);
        scale = d.iter().fold(scale, |m, c| m.max(c.abs()));
    }
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut edges = Vec::with_capacity(und.len() * 2);
    let mut pseudo = Vec::with_capacity(und.len() * 2);
    for &(a, b) in &und {
        let d = crate::mesh::sub(mesh.vertices[b as usize], mesh.vertices[a as usize]);
        let half = d.map(|c| c / (2.0 * scale));
        edges.push([a, b]);
        pseudo.push(half.map(|h| (0.5 + h).clamp(0.0, 1.0) as f32));
        edges.push([b, a]);
        pseudo.push(half.map(|h| (0.5 - h).clamp(0.0, 1.0) as f32));
    }
    (edges, pseudo)
}

/// 5x5x5 patch around the voxel nearest to `node`, clamped to the HU window
/// and mapped to [-1, 1]. Voxels outside the volume read as air.
pub fn extract_patch(ct: &Volume, node: Point3) -> [f32; PATCH_VOXELS] {
    let g = &ct.grid;
    let c = g.nearest_voxel(node);
    let r = (PATCH_SIZE / 2) as i64;
    let mut out = [0f32; PATCH_VOXELS];
    let mut n = 0;
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                let inside = (0..3).all(|a| q[a] >= 0 && q[a] < g.dims[a] as i64);
                let hu = if inside {
                    ct.get(q[0] as usize, q[1] as usize, q[2] as usize)
                } else {
                    FILL_HU
                };
                out[n] = hu.clamp(-HU_WINDOW, HU_WINDOW) / HU_WINDOW;
                n += 1;
            }
        }
    }
    out
}

pub fn assemble_sample(
    ct: &Volume,
    mesh: &TriMesh,
    gt_sdf: &Volume,
    th: &ClassThresholds,
    provenance: Provenance,
) -> Result<GraphSample> {
    ct.grid.ensure_matches(&gt_sdf.grid)?;
    let (signed_distances, labels) = label_nodes(mesh, gt_sdf, th)?;
    let (edges, pseudo_coords) = build_edges(mesh);
    let mut patches = Vec::with_capacity(mesh.num_vertices() * PATCH_VOXELS);
    for &p in &mesh.vertices {
        patches.extend_from_slice(&extract_patch(ct, p));
    }
    let s = GraphSample {
        node_positions: mesh.vertices.iter().map(|p| p.map(|c| c as f32)).collect(),
        patches,
        edges,
        pseudo_coords,
        labels,
        signed_distances,
        triangles: mesh.triangles.clone(),
        provenance,
    };
    s.validate()?;
    Ok(s)
}

const RECORD_MAGIC: &[u8; 4] = b"SQGS";
pub const RECORD_VERSION: u32 = 1;

/// Little-endian binary record with a trailing CRC-32.
pub fn encode_sample(s: &GraphSample) -> Vec<u8> {
    let n = s.num_nodes();
    let mut b = Vec::with_capacity(48 + n * (12 + PATCH_VOXELS * 4 + 5) + s.edges.len() * 20);
    b.extend_from_slice(RECORD_MAGIC);
    b.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    b.extend_from_slice(&s.provenance.structure_id.to_le_bytes());
    b.extend_from_slice(&s.provenance.perturbation.to_le_bytes());
    b.extend_from_slice(&s.provenance.seed.to_le_bytes());
    b.extend_from_slice(&(n as u32).to_le_bytes());
    b.extend_from_slice(&(s.edges.len() as u32).to_le_bytes());
    b.extend_from_slice(&(s.triangles.len() as u32).to_le_bytes());
    let f32s = |b: &mut Vec<u8>, v: &[f32]| v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes()));
    let u32s = |b: &mut Vec<u8>, v: &[u32]| v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes()));
    f32s(&mut b, s.node_positions.as_flattened());
    f32s(&mut b, &s.patches);
    u32s(&mut b, s.edges.as_flattened());
    f32s(&mut b, s.pseudo_coords.as_flattened());
    b.extend_from_slice(&s.labels);
    f32s(&mut b, &s.signed_distances);
    u32s(&mut b, s.triangles.as_flattened());
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Dataset("record truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn triples<T: Copy + Default>(v: Vec<T>) -> Vec<[T; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub fn decode_sample(bytes: &[u8]) -> Result<GraphSample> {
    if bytes.len() < 4 {
        return Err(Error::Dataset("record truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum("graph sample record".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != RECORD_MAGIC {
        return Err(Error::Dataset("bad record magic".into()));
    }
    let version = r.u32()?;
    if version != RECORD_VERSION {
        return Err(Error::Dataset(format!("unsupported record version {version}")));
    }
    let provenance = Provenance {
        structure_id: r.u32()?,
        perturbation: r.u32()?,
        seed: r.u64()?,
    };
    let n = r.u32()? as usize;
    let e = r.u32()? as usize;
    let f = r.u32()? as usize;
    let node_positions = triples(r.f32s(n * 3)?);
    let patches = r.f32s(n * PATCH_VOXELS)?;
    let edges = r
        .u32s(e * 2)?
        .chunks_exact(2)
        .map(|c| [c[0], c[1]])
        .collect();
    let pseudo_coords = triples(r.f32s(e * 3)?);
    let labels = r.take(n)?.to_vec();
    let signed_distances = r.f32s(n)?;
    let triangles = triples(r.u32s(f * 3)?);
    if r.pos != body.len() {
        return Err(Error::Dataset("trailing bytes in record".into()));
    }
    let s = GraphSample {
        node_positions,
        patches,
        edges,
        pseudo_coords,
        labels,
        signed_distances,
        triangles,
        provenance,
    };
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::mesh::testing::sphere_sdf;
    use crate::mesh::{extract_clean_mesh, marching_cubes, point_mesh_distance, CleanupConfig};

    fn tetrahedron() -> TriMesh {
        TriMesh::new(
            vec![
                [1.0, 1.0, 1.0],
                [1.0, -1.0, -1.0],
                [-1.0, 1.0, -1.0],
                [-1.0, -1.0, 1.0],
            ],
            vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
        )
        .unwrap()
    }

    #[test]
    fn threshold_buckets() {
        let th = ClassThresholds::default();
        assert_eq!(th.classify(0.0), 2);
        assert_eq!(th.classify(3.0), 4);
        assert_eq!(th.classify(-3.0), 0);
        assert_eq!(th.classify(-2.5), 1);
        assert_eq!(th.classify(-0.5), 2);
        assert_eq!(th.classify(0.5), 2);
        assert_eq!(th.classify(2.5), 3);
        assert_eq!(th.classify(-0.6), 1);
        assert!(ClassThresholds::new([-1.0, -2.0, 0.5, 2.5]).is_err());
        assert!(ClassThresholds::new([0.1, 0.2, 0.5, 2.5]).is_err());
    }

    #[test]
    fn tetrahedron_pseudo_coords() {
        let (edges, u) = build_edges(&tetrahedron());
        assert_eq!(edges.len(), 12);
        for uc in &u {
            let mut mags: Vec<f32> = uc.iter().map(|x| (x - 0.5).abs()).collect();
            mags.sort_by(f32::total_cmp);
            assert_eq!(mags, vec![0.0, 0.5, 0.5]);
        }
        // The longest component maps to 0 or 1 exactly.
        assert!(u.iter().flatten().any(|&x| x == 0.0));
        assert!(u.iter().flatten().any(|&x| x == 1.0));
    }

    #[test]
    fn reverse_edges_are_complementary() {
        let m = marching_cubes(&sphere_sdf(16, 1.0, 5.0), 0.0).unwrap();
        let (edges, u) = build_edges(&m);
        assert_eq!(edges.len(), 3 * m.num_triangles());
        for k in (0..edges.len()).step_by(2) {
            assert_eq!(edges[k], [edges[k + 1][1], edges[k + 1][0]]);
            for a in 0..3 {
                assert!((u[k][a] + u[k + 1][a] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn patch_constant_and_corner() {
        let g = Grid::isotropic([9, 9, 9], 1.0).unwrap();
        let ct = Volume::filled(g, 0.0);
        assert!(extract_patch(&ct, [4.0, 4.0, 4.0]).iter().all(|&v| v == 0.0));
        let corner = extract_patch(&ct, [0.0, 0.0, 0.0]);
        assert_eq!(corner.iter().filter(|&&v| v == -1.0).count(), 98);
        assert_eq!(corner.iter().filter(|&&v| v == 0.0).count(), 27);
        let bright = Volume::filled(g, 500.0);
        assert!(extract_patch(&bright, [4.2, 3.9, 4.4]).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unperturbed_sphere_labels_are_near_zero() {
        let g = Grid::isotropic([48, 48, 48], 1.5).unwrap();
        let c = 47.0 * 1.5 / 2.0;
        let mask_data = (0..g.len())
            .map(|i| {
                let p = g.index_to_world(g.coords(i));
                ((p[0] - c).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2)).sqrt() < 20.0
            })
            .collect();
        let mask = crate::grid::BinaryMask::new(g, mask_data).unwrap();
        let sdf = crate::distance::signed_distance_transform(&mask).unwrap();
        let ct = Volume::filled(g, 0.0);
        let mesh = extract_clean_mesh(&sdf, &CleanupConfig::default()).unwrap();
        let s = assemble_sample(&ct, &mesh, &sdf, &ClassThresholds::default(), Provenance::default()).unwrap();
        let h = s.class_histogram();
        assert_eq!(h.iter().sum::<usize>(), s.num_nodes());
        // The voxel-centre field is steeper than 1 across the mask boundary, so
        // smoothed nodes spread over classes 1-3; none reach an edge class.
        assert_eq!(h[0] + h[4], 0, "{h:?}");
        assert!(s.signed_distances.iter().all(|d| (d.abs() as f64) < g.spacing[0] * 1.2));
        assert_eq!(s.num_edges(), 3 * mesh.num_triangles());

        // Trilinear labels against exact distance to the ground-truth surface.
        let gt_mesh = marching_cubes(&sdf, 0.0).unwrap();
        let tol = 0.5 * g.voxel_diagonal();
        let ok = mesh
            .vertices
            .iter()
            .zip(&s.signed_distances)
            .filter(|(&p, &d)| (point_mesh_distance(p, &gt_mesh) - (d as f64).abs()).abs() < tol)
            .count();
        assert!(ok as f64 >= 0.95 * s.num_nodes() as f64, "{ok}/{}", s.num_nodes());
    }

    #[test]
    fn out_of_bounds_node_named() {
        let sdf = sphere_sdf(8, 1.0, 2.0);
        let m = TriMesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 100.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        match label_nodes(&m, &sdf, &ClassThresholds::default()) {
            Err(Error::NodeOutOfBounds { node, .. }) => assert_eq!(node, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn record_round_trip_and_corruption() {
        let sdf = sphere_sdf(16, 1.0, 5.0);
        let mesh = marching_cubes(&sdf, 0.0).unwrap();
        let ct = Volume::from_fn(sdf.grid, |p| (p[0] * 10.0) as f32);
        let prov = Provenance {
            structure_id: 3,
            perturbation: 7,
            seed: 99,
        };
        let s = assemble_sample(&ct, &mesh, &sdf, &ClassThresholds::default(), prov).unwrap();
        let bytes = encode_sample(&s);
        assert_eq!(decode_sample(&bytes).unwrap(), s);
        assert_eq!(encode_sample(&decode_sample(&bytes).unwrap()), bytes);
        for pos in [5usize, 60, bytes.len() / 2, bytes.len() - 6] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(decode_sample(&bad), Err(Error::Checksum(_))));
        }
    }
}
