//! Structured noise fields and signed-distance perturbation.
//!
//! White noise is drawn from a ChaCha8 stream (`ChaCha8Rng::seed_from_u64`),
//! smoothed with a separable Gaussian (sigma in mm, truncated at 4 sigma,
//! half-sample reflection at the borders) and rescaled so that the empirical
//! standard deviation over all voxels equals the target exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_sigma")]
    pub kernel_sigma_mm: f64,
    #[serde(default = "default_std")]
    pub target_std_mm: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sigma() -> f64 {
    7.5
}

fn default_std() -> f64 {
    1.0
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kernel_sigma_mm: default_sigma(),
            target_std_mm: default_std(),
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_sigma_mm > 0.0 && self.kernel_sigma_mm.is_finite()) {
            return Err(Error::Config("kernel_sigma_mm must be > 0".into()));
        }
        if !(self.target_std_mm > 0.0 && self.target_std_mm.is_finite()) {
            return Err(Error::Config("target_std_mm must be > 0".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Normalized Gaussian taps for a sigma given in voxels.
pub fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (4.0 * sigma_vox).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
#[inline]
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable convolution of `data` along one axis with reflect padding.
fn convolve_axis(data: &mut [f64], grid: &Grid, axis: usize, kernel: &[f64]) {
    let [nx, ny, _] = grid.dims;
    let len = grid.dims[axis];
    let stride = [1, nx, nx * ny][axis];
    let radius = (kernel.len() / 2) as i64;
    let mut line = vec![0.0; len];
    for start in 0..data.len() {
        if (start / stride) % len != 0 {
            continue;
        }
        for t in 0..len {
            line[t] = data[start + t * stride];
        }
        for t in 0..len {
            let mut acc = 0.0;
            for (o, w) in kernel.iter().enumerate() {
                let src = reflect(t as i64 + o as i64 - radius, len as i64);
                acc += w * line[src];
            }
            data[start + t * stride] = acc;
        }
    }
}

/// Gaussian smoothing with sigma given in millimetres.
pub fn gaussian_smooth(vol: &Volume, sigma_mm: f64) -> Volume {
    let mut data: Vec<f64> = vol.data.iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        let k = gaussian_kernel(sigma_mm / vol.grid.spacing[axis]);
        convolve_axis(&mut data, &vol.grid, axis, &k);
    }
    Volume {
        grid: vol.grid,
        data: data.into_iter().map(|v| v as f32).collect(),
    }
}

fn std_dev(data: &[f64]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Spatially correlated Gaussian noise on `grid`.
pub fn structured_noise(grid: &Grid, cfg: &NoiseConfig) -> Result<Volume> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(Error::Grid("zero-volume grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data: Vec<f64> = (0..grid.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    for axis in 0..3 {
        let sigma_vox = cfg.kernel_sigma_mm / grid.spacing[axis];
        let radius = (4.0 * sigma_vox).ceil() as usize;
        if grid.dims[axis] < 2 * radius {
            log::warn!(
                "axis {axis}: {} voxels is below twice the kernel radius ({radius})",
                grid.dims[axis]
            );
        }
        convolve_axis(&mut data, grid, axis, &gaussian_kernel(sigma_vox));
    }
    let sd = std_dev(&data);
    if !(sd > 0.0) {
        return Err(Error::Grid("noise field has zero variance".into()));
    }
    let scale = cfg.target_std_mm / sd;
    Volume::new(*grid, data.into_iter().map(|v| (v * scale) as f32).collect())
}

/// Voxel-wise sum of a signed distance field and a noise field.
///
/// The result is generally not a true distance field any more.
pub fn perturb_sdf(sdf: &Volume, noise: &Volume) -> Result<Volume> {
    sdf.grid.ensure_matches(&noise.grid)?;
    let data = sdf.data.iter().zip(&noise.data).map(|(a, b)| a + b).collect();
    Volume::new(sdf.grid, data)
}

/// Empirical autocorrelation of a field at an integer voxel lag along `axis`.
pub fn autocorrelation(vol: &Volume, axis: usize, lag: usize) -> f64 {
    let g = &vol.grid;
    let n = vol.data.len() as f64;
    let mean = vol.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol
        .data
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let mut acc = 0.0;
    let mut count = 0usize;
    for idx in 0..vol.data.len() {
        let c = g.coords(idx);
        if c[axis] + lag >= g.dims[axis] {
            continue;
        }
        let mut q = c;
        q[axis] += lag;
        let j = g.index(q[0], q[1], q[2]);
        acc += (vol.data[idx] as f64 - mean) * (vol.data[j] as f64 - mean);
        count += 1;
    }
    acc / count as f64 / var
}
