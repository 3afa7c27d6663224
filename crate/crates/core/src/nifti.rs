//! Minimal NIfTI-1 single-file reader and writer.
//!
//! Only uncompressed little-endian `.nii` files with an axis-aligned affine
//! are supported. Voxel data types: uint8 (2), int16 (4) and float32 (16).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

/// Header fields that the reader cares about.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

fn rd_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn rd_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn rd_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn wr_i16(b: &mut [u8], off: usize, v: i16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn wr_i32(b: &mut [u8], off: usize, v: i32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn wr_f32(b: &mut [u8], off: usize, v: f32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

impl NiftiHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
            return Err(Error::Nifti("compressed (gzip) input is not supported".into()));
        }
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Nifti(format!(
                "sizeof_hdr: file is only {} bytes",
                bytes.len()
            )));
        }
        let sizeof_hdr = rd_i32(bytes, 0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
                return Err(Error::Nifti("sizeof_hdr: big-endian files are not supported".into()));
            }
            return Err(Error::Nifti(format!("sizeof_hdr: expected 348, found {sizeof_hdr}")));
        }
        if &bytes[344..348] != MAGIC {
            if &bytes[344..348] == b"ni1\0" {
                return Err(Error::Nifti("magic: two-file NIfTI (ni1) is not supported".into()));
            }
            return Err(Error::Nifti(format!("magic: unexpected {:?}", &bytes[344..348])));
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = rd_i16(bytes, 40 + 2 * i);
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = rd_f32(bytes, 76 + 4 * i);
        }
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = rd_f32(bytes, 280 + 16 * r + 4 * c);
            }
        }
        Ok(Self {
            dim,
            datatype: rd_i16(bytes, 70),
            bitpix: rd_i16(bytes, 72),
            pixdim,
            vox_offset: rd_f32(bytes, 108),
            scl_slope: rd_f32(bytes, 112),
            scl_inter: rd_f32(bytes, 116),
            qform_code: rd_i16(bytes, 252),
            sform_code: rd_i16(bytes, 254),
            quatern: [rd_f32(bytes, 256), rd_f32(bytes, 260), rd_f32(bytes, 264)],
            qoffset: [rd_f32(bytes, 268), rd_f32(bytes, 272), rd_f32(bytes, 276)],
            srow,
        })
    }

    fn geometry(&self) -> Result<Grid> {
        let ndim = self.dim[0];
        if !(3..=4).contains(&ndim) || (ndim == 4 && self.dim[4] > 1) {
            return Err(Error::Nifti(format!(
                "dim: only single-frame 3D volumes are supported (dim[0] = {ndim})"
            )));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let d = self.dim[a + 1];
            if d < 2 {
                return Err(Error::Nifti(format!("dim[{}] = {d} must be >= 2", a + 1)));
            }
            dims[a] = d as usize;
        }
        let mut spacing = [0f64; 3];
        for a in 0..3 {
            let s = self.pixdim[a + 1] as f64;
            if !(s > 0.0) {
                return Err(Error::Nifti(format!("pixdim[{}] = {s} must be positive", a + 1)));
            }
            spacing[a] = s;
        }
        let mut origin = [0f64; 3];
        if self.sform_code > 0 {
            const NAMES: [&str; 3] = ["srow_x", "srow_y", "srow_z"];
            for r in 0..3 {
                let scale = self.srow[r][r].abs().max(1e-12);
                for c in 0..3 {
                    if c != r && self.srow[r][c].abs() > 1e-6 * scale {
                        return Err(Error::Nifti(format!(
                            "{}: non-axis-aligned affine (entry {c} = {})",
                            NAMES[r], self.srow[r][c]
                        )));
                    }
                }
                if self.srow[r][r] <= 0.0 {
                    return Err(Error::Nifti(format!(
                        "{}: axis flip in affine (diagonal = {})",
                        NAMES[r], self.srow[r][r]
                    )));
                }
                origin[r] = self.srow[r][3] as f64;
            }
        } else if self.qform_code > 0 {
            if self.quatern.iter().any(|q| q.abs() > 1e-6) {
                return Err(Error::Nifti(
                    "quatern_b/c/d: non-axis-aligned affine (rotation quaternion)".into(),
                ));
            }
            if self.pixdim[0] < 0.0 {
                return Err(Error::Nifti("pixdim[0]: axis flip (qfac = -1)".into()));
            }
            for a in 0..3 {
                origin[a] = self.qoffset[a] as f64;
            }
        }
        Grid::new(dims, spacing, origin)
    }
}

/// Reads a NIfTI-1 file as a float volume (integer types are converted).
pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a NIfTI-1 file as a mask; nonzero voxels are foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    load_nifti(path).map(|v| BinaryMask::from_volume(&v))
}

pub fn decode(bytes: &[u8]) -> Result<Volume> {
    let hdr = NiftiHeader::parse(bytes)?;
    let grid = hdr.geometry()?;
    let width = match hdr.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::Nifti(format!(
                "datatype: code {other} is not supported (expected 2, 4 or 16)"
            )))
        }
    };
    let offset = hdr.vox_offset as usize;
    if offset < HEADER_SIZE {
        return Err(Error::Nifti(format!("vox_offset: {} is inside the header", hdr.vox_offset)));
    }
    let n = grid.len();
    let end = offset + n * width;
    if bytes.len() < end {
        return Err(Error::Nifti(format!(
            "vox_offset: data truncated ({} bytes, need {end})",
            bytes.len()
        )));
    }
    let raw = &bytes[offset..end];
    let mut data: Vec<f32> = match hdr.datatype {
        DT_UINT8 => raw.iter().map(|&b| b as f32).collect(),
        DT_INT16 => raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        _ => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    let slope = hdr.scl_slope;
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && hdr.scl_inter == 0.0) {
        for v in &mut data {
            *v = *v * slope + hdr.scl_inter;
        }
    }
    Volume::new(grid, data)
}

fn encode_header(grid: &Grid, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut b = vec![0u8; VOX_OFFSET];
    wr_i32(&mut b, 0, HEADER_SIZE as i32);
    b[38] = b'r'; // regular
    wr_i16(&mut b, 40, 3);
    for a in 0..3 {
        wr_i16(&mut b, 42 + 2 * a, grid.dims[a] as i16);
    }
    for a in 3..7 {
        wr_i16(&mut b, 42 + 2 * a, 1);
    }
    wr_i16(&mut b, 70, datatype);
    wr_i16(&mut b, 72, bitpix);
    wr_f32(&mut b, 76, 1.0); // qfac
    for a in 0..3 {
        wr_f32(&mut b, 80 + 4 * a, grid.spacing[a] as f32);
    }
    for a in 3..7 {
        wr_f32(&mut b, 80 + 4 * a, 1.0);
    }
    wr_f32(&mut b, 108, VOX_OFFSET as f32);
    wr_f32(&mut b, 112, 1.0);
    wr_f32(&mut b, 116, 0.0);
    b[123] = 2 | 8; // mm, seconds
    wr_i16(&mut b, 252, 1); // qform: scanner
    wr_i16(&mut b, 254, 1); // sform: scanner
    for a in 0..3 {
        wr_f32(&mut b, 268 + 4 * a, grid.origin[a] as f32);
    }
    for r in 0..3 {
        wr_f32(&mut b, 280 + 16 * r + 4 * r, grid.spacing[r] as f32);
        wr_f32(&mut b, 280 + 16 * r + 12, grid.origin[r] as f32);
    }
    b[344..348].copy_from_slice(MAGIC);
    b
}

/// Float32 encoding of a volume.
pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let mut b = encode_header(&vol.grid, DT_FLOAT32, 32);
    b.reserve(vol.data.len() * 4);
    for v in &vol.data {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

/// Uint8 encoding of a mask (0/1).
pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    let mut b = encode_header(&mask.grid, DT_UINT8, 8);
    b.extend(mask.data.iter().map(|&m| m as u8));
    b
}

pub fn save_nifti(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(vol)).map_err(|e| Error::io(path, e))
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(mask)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_header_float() {
        let g = Grid::isotropic([4, 4, 4], 1.0).unwrap();
        let v = Volume::from_fn(g, |p| (p[0] + 10.0 * p[1]) as f32);
        let back = decode(&encode_volume(&v)).unwrap();
        assert_eq!(back.grid.dims, [4, 4, 4]);
        assert_eq!(back.grid.spacing, [1.0; 3]);
        assert_eq!(back.grid.origin, [0.0; 3]);
        assert_eq!(back.data, v.data);
    }

    #[test]
    fn random_volume_round_trips_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Grid::new([8, 8, 8], [0.9, 1.1, 2.5], [-12.25, 3.5, 100.0]).unwrap();
        let data: Vec<f32> = (0..g.len()).map(|_| rng.random::<f32>() * 2000.0 - 1000.0).collect();
        let v = Volume::new(g, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        save_nifti(&v, &path).unwrap();
        let back = load_nifti(&path).unwrap();
        let bits = |d: &[f32]| d.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.data), bits(&v.data));
        for a in 0..3 {
            assert_eq!(back.grid.spacing[a], g.spacing[a] as f32 as f64);
            assert_eq!(back.grid.origin[a], g.origin[a] as f32 as f64);
        }
    }

    #[test]
    fn mask_round_trip_single_voxel() {
        let g = Grid::isotropic([5, 6, 7], 1.0).unwrap();
        let mut m = BinaryMask::empty(g);
        m.set(2, 3, 4, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nii");
        save_mask(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(rd_i16(&bytes, 70), DT_UINT8);
        assert_eq!(load_mask(&path).unwrap(), m);
    }

    #[test]
    fn header_echoes_spacing_and_magic() {
        let g = Grid::isotropic([3, 3, 3], 1.5).unwrap();
        let bytes = encode_volume(&Volume::filled(g, 0.0));
        for a in 1..4 {
            assert_eq!(rd_f32(&bytes, 76 + 4 * a), 1.5);
        }
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(rd_f32(&bytes, 108), 352.0);
        assert_eq!(bytes.len(), 352 + 27 * 4);
    }

    #[test]
    fn int16_is_converted_and_scaled() {
        let g = Grid::isotropic([2, 2, 2], 1.0).unwrap();
        let mut b = encode_header(&g, DT_INT16, 16);
        wr_f32(&mut b, 112, 2.0);
        wr_f32(&mut b, 116, -1024.0);
        for v in [-5i16, 0, 7, 100, -100, 1, 2, 3] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let vol = decode(&b).unwrap();
        assert_eq!(vol.data[0], -1034.0);
        assert_eq!(vol.data[3], -824.0);
    }

    #[test]
    fn rejects_rotation_in_srow() {
        let g = Grid::isotropic([4, 4, 4], 1.0).unwrap();
        let mut b = encode_volume(&Volume::filled(g, 0.0));
        wr_f32(&mut b, 280 + 4, 0.3);
        let err = decode(&b).unwrap_err().to_string();
        assert!(err.contains("non-axis-aligned affine"), "{err}");
        assert!(err.contains("srow_x"), "{err}");
    }

    #[test]
    fn rejects_unsupported_inputs() {
        let g = Grid::isotropic([4, 4, 4], 1.0).unwrap();
        let good = encode_volume(&Volume::filled(g, 0.0));

        let mut dt = good.clone();
        wr_i16(&mut dt, 70, 64);
        assert!(decode(&dt).unwrap_err().to_string().contains("datatype"));

        let gz = [0x1f, 0x8b, 0x08, 0x00];
        assert!(decode(&gz).unwrap_err().to_string().contains("compressed"));

        let mut magic = good.clone();
        magic[344..348].copy_from_slice(b"ni1\0");
        assert!(decode(&magic).unwrap_err().to_string().contains("magic"));

        let truncated = &good[..400];
        assert!(decode(truncated).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_nifti("/nonexistent/dir/x.nii").unwrap_err().to_string();
        assert!(err.contains("/nonexistent/dir/x.nii"));
    }
}
