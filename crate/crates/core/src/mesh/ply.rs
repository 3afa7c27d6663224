//! Binary little-endian PLY with per-vertex class colours.

use std::fs;
use std::path::Path;

use super::TriMesh;
use crate::error::{Error, Result};

/// RGB per node class: dark blue, light blue, green, orange, red.
pub const CLASS_PALETTE: [[u8; 3]; 5] = [
    [0, 0, 139],
    [135, 206, 250],
    [0, 170, 0],
    [255, 140, 0],
    [220, 20, 20],
];

const UNCLASSIFIED: [u8; 3] = [200, 200, 200];

pub fn write_ply(mesh: &TriMesh, classes: Option<&[u8]>) -> Result<Vec<u8>> {
    if let Some(c) = classes {
        if c.len() != mesh.num_vertices() {
            return Err(Error::Mesh(format!(
                "class count {} != vertex count {}",
                c.len(),
                mesh.num_vertices()
            )));
        }
        if let Some(bad) = c.iter().find(|&&k| k as usize >= CLASS_PALETTE.len()) {
            return Err(Error::Mesh(format!("class {bad} has no palette entry")));
        }
    }
    let header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment segqa node classes\n\
         element vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.num_vertices(),
        mesh.num_triangles()
    );
    let mut out = header.into_bytes();
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in v {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        let rgb = classes.map_or(UNCLASSIFIED, |c| CLASS_PALETTE[c[i] as usize]);
        out.extend_from_slice(&rgb);
    }
    for t in &mesh.triangles {
        out.push(3);
        for &i in t {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn export_ply(mesh: &TriMesh, classes: Option<&[u8]>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_ply(mesh, classes)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A mesh read back from [`write_ply`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyMesh {
    pub mesh: TriMesh,
    pub colors: Vec<[u8; 3]>,
}

/// Parses the layout written by [`write_ply`].
pub fn read_ply(bytes: &[u8]) -> Result<PlyMesh> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Mesh("PLY: missing end_header".into()))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Mesh("PLY: header is not UTF-8".into()))?;
    if !header.starts_with("ply\nformat binary_little_endian 1.0\n") {
        return Err(Error::Mesh("PLY: expected binary_little_endian 1.0".into()));
    }
    let count = |name: &str| -> Result<usize> {
        header
            .lines()
            .find_map(|l| l.strip_prefix(&format!("element {name} ")))
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::Mesh(format!("PLY: missing element {name}")))
    };
    let nv = count("vertex")?;
    let nf = count("face")?;
    let mut body = &bytes[end..];
    let need = nv * 15 + nf * 13;
    if body.len() < need {
        return Err(Error::Mesh("PLY: truncated body".into()));
    }
    let mut vertices = Vec::with_capacity(nv);
    let mut colors = Vec::with_capacity(nv);
    for _ in 0..nv {
        let f = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as f64;
        vertices.push([f(0), f(4), f(8)]);
        colors.push([body[12], body[13], body[14]]);
        body = &body[15..];
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        if body[0] != 3 {
            return Err(Error::Mesh("PLY: only triangles are supported".into()));
        }
        let i = |o: usize| i32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as u32;
        triangles.push([i(1), i(5), i(9)]);
        body = &body[13..];
    }
    Ok(PlyMesh {
        mesh: TriMesh::new(vertices, triangles)?,
        colors,
    })
}
