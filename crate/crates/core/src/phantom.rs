//! Synthetic CT volumes with a single deformed-superellipsoid organ.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, Point3, Volume};
use crate::perturb::{structured_noise, NoiseConfig};
use crate::rng::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Semi-axis range in mm.
    pub radius_range: [f64; 2],
    pub exponent_range: [f64; 2],
    /// Angular smoothing of the radial deformation, as mm on the mean radius.
    pub deform_sigma_mm: f64,
    /// Upper bound on the radial deformation as a fraction of the radius.
    pub deform_amplitude: f64,
    pub organ_hu: f64,
    pub organ_hu_spread: f64,
    pub background_hu: f64,
    pub background_hu_spread: f64,
    pub texture_std_hu: f64,
    pub texture_sigma_mm: f64,
    pub voxel_noise_hu: f64,
    pub margin_voxels: usize,
    pub max_retries: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [80; 3],
            spacing: [1.5; 3],
            radius_range: [15.0, 30.0],
            exponent_range: [1.5, 3.5],
            deform_sigma_mm: 10.0,
            deform_amplitude: 0.2,
            organ_hu: 45.0,
            organ_hu_spread: 10.0,
            background_hu: -30.0,
            background_hu_spread: 15.0,
            texture_std_hu: 8.0,
            texture_sigma_mm: 3.0,
            voxel_noise_hu: 20.0,
            margin_voxels: 8,
            max_retries: 6,
        }
    }
}

impl PhantomConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing, [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        self.grid()?;
        let [r0, r1] = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad("radius_range must satisfy 0 < lo <= hi");
        }
        let [e0, e1] = self.exponent_range;
        if !(e0 >= 1.0 && e0 <= e1) {
            return bad("exponent_range must satisfy 1 <= lo <= hi");
        }
        if !(self.deform_sigma_mm > 0.0) {
            return bad("deform_sigma_mm must be > 0");
        }
        if !(0.0..1.0).contains(&self.deform_amplitude) {
            return bad("deform_amplitude must be in [0, 1)");
        }
        for (name, v) in [
            ("organ_hu_spread", self.organ_hu_spread),
            ("background_hu_spread", self.background_hu_spread),
            ("texture_std_hu", self.texture_std_hu),
            ("voxel_noise_hu", self.voxel_noise_hu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be >= 0"));
            }
        }
        if !(self.texture_sigma_mm > 0.0) {
            return bad("texture_sigma_mm must be > 0");
        }
        if self.dims.iter().any(|&d| d <= 2 * self.margin_voxels + 2) {
            return bad("dims too small for the margin");
        }
        Ok(())
    }
}

/// Shape and intensity parameters actually used for one phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub semi_axes: [f64; 3],
    pub exponent: f64,
    pub center: Point3,
    pub rotation: [[f64; 3]; 3],
    pub deform_amplitude: f64,
    pub organ_hu: f64,
    pub background_hu: f64,
    pub retries: usize,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub ct: Volume,
    pub gt: BinaryMask,
    pub params: PhantomParams,
}

const BUMPS: usize = 16;

struct Shape {
    semi_axes: [f64; 3],
    exponent: f64,
    center: Point3,
    rot: [[f64; 3]; 3],
    bump_dirs: Vec<Point3>,
    bump_weights: Vec<f64>,
    inv_s2: f64,
    bound: f64,
}

fn unit_normal(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn quat_to_matrix(q: &[f64]) -> [[f64; 3]; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

impl Shape {
    /// Radial scale factor `1 + f(n)` with `|f| <= amplitude`.
    fn radial(&self, n: Point3) -> f64 {
        let mut f = 0.0;
        for (d, w) in self.bump_dirs.iter().zip(&self.bump_weights) {
            let c = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
            f += w * ((c - 1.0) * self.inv_s2).exp();
        }
        1.0 + f
    }

    /// Superellipsoid level: < 1 inside, > 1 outside.
    fn level(&self, p: Point3) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let q = [0, 1, 2].map(|i| self.rot[0][i] * d[0] + self.rot[1][i] * d[1] + self.rot[2][i] * d[2]);
        let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        if r > self.bound {
            return f64::INFINITY;
        }
        if r < 1e-12 {
            return 0.0;
        }
        let s = 1.0 / self.radial([q[0] / r, q[1] / r, q[2] / r]);
        (0..3)
            .map(|i| (q[i] * s / self.semi_axes[i]).abs().powf(self.exponent))
            .sum::<f64>()
            .powf(1.0 / self.exponent)
    }
}

fn margin_ok(mask: &BinaryMask, margin: usize) -> bool {
    let g = &mask.grid;
    mask.data.iter().enumerate().filter(|(_, &v)| v).all(|(i, _)| {
        let c = g.coords(i);
        (0..3).all(|a| c[a] >= margin && c[a] + margin < g.dims[a])
    })
}

/// Organ mask and CT volume, deterministic in `seed`.
pub fn generate_phantom(cfg: &PhantomConfig, seed: u64) -> Result<Phantom> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut rng = rng_for(seed, &[0]);
    let mut semi_axes = [0.0; 3];
    for a in &mut semi_axes {
        *a = rng.random_range(cfg.radius_range[0]..=cfg.radius_range[1]);
    }
    let exponent = rng.random_range(cfg.exponent_range[0]..=cfg.exponent_range[1]);
    let rot = quat_to_matrix(&unit_normal(&mut rng, 4));
    let (lo, hi) = grid.bounds();
    let mut center = [0.0; 3];
    for a in 0..3 {
        center[a] = 0.5 * (lo[a] + hi[a]) + rng.random_range(-3.0..=3.0);
    }
    let amplitude = rng.random_range(0.25..=1.0) * cfg.deform_amplitude;
    let bump_dirs: Vec<Point3> = (0..BUMPS)
        .map(|_| {
            let v = unit_normal(&mut rng, 3);
            [v[0], v[1], v[2]]
        })
        .collect();
    let raw: Vec<f64> = (0..BUMPS).map(|_| StandardNormal.sample(&mut rng)).collect();
    let total: f64 = raw.iter().map(|w| w.abs()).sum::<f64>().max(1e-12);
    let bump_weights: Vec<f64> = raw.iter().map(|w| amplitude * w / total).collect();
    let organ_hu = cfg.organ_hu + rng.random_range(-1.0..=1.0) * cfg.organ_hu_spread;
    let background_hu = cfg.background_hu + rng.random_range(-1.0..=1.0) * cfg.background_hu_spread;

    let mut retries = 0;
    let (shape, gt) = loop {
        let mean_r = semi_axes.iter().sum::<f64>() / 3.0;
        let s = cfg.deform_sigma_mm / mean_r;
        let max_axis = semi_axes.iter().cloned().fold(0.0, f64::max);
        let shape = Shape {
            semi_axes,
            exponent,
            center,
            rot,
            bump_dirs: bump_dirs.clone(),
            bump_weights: bump_weights.clone(),
            inv_s2: 1.0 / (s * s),
            bound: max_axis * (1.0 + amplitude) * 3f64.sqrt() + 1e-9,
        };
        let data = (0..grid.len())
            .map(|i| shape.level(grid.index_to_world(grid.coords(i))) < 1.0)
            .collect();
        let gt = BinaryMask::new(grid, data)?.largest_component();
        if gt.count() > 0 && margin_ok(&gt, cfg.margin_voxels) {
            break (shape, gt);
        }
        retries += 1;
        if retries > cfg.max_retries {
            return Err(Error::DegenerateMask("phantom does not fit inside the margin"));
        }
        log::debug!("phantom seed {seed}: margin violated, shrinking (retry {retries})");
        semi_axes = semi_axes.map(|a| a * 0.85);
    };

    // Partial-volume organ fraction from 2x2x2 supersampling near the surface.
    let near = 2.0 * grid.voxel_diagonal() / semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
    let offsets: Vec<Point3> = (0..8)
        .map(|k| [0, 1, 2].map(|a| if k & (1 << a) != 0 { 0.25 } else { -0.25 }))
        .collect();
    let texture = structured_noise(
        &grid,
        &NoiseConfig {
            kernel_sigma_mm: cfg.texture_sigma_mm,
            target_std_mm: cfg.texture_std_hu.max(f64::MIN_POSITIVE),
            seed: derive_seed(seed, &[1]),
        },
    )?;
    let mut noise_rng = rng_for(seed, &[2]);
    let data = (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            let p = grid.index_to_world(c);
            let l = shape.level(p);
            let frac = if (l - 1.0).abs() > near {
                f64::from(u8::from(gt.data[i]))
            } else {
                let inside = offsets
                    .iter()
                    .filter(|o| {
                        let v = [0, 1, 2].map(|a| c[a] as f64 + o[a]);
                        shape.level(grid.voxel_to_world(v)) < 1.0
                    })
                    .count();
                inside as f64 / 8.0
            };
            let n: f64 = StandardNormal.sample(&mut noise_rng);
            let tex = if cfg.texture_std_hu > 0.0 { texture.data[i] as f64 } else { 0.0 };
            (background_hu + (organ_hu - background_hu) * frac + tex + cfg.voxel_noise_hu * n) as f32
        })
        .collect();
    let ct = Volume::new(grid, data)?;
    Ok(Phantom {
        ct,
        gt,
        params: PhantomParams {
            semi_axes,
            exponent,
            center,
            rotation: rot,
            deform_amplitude: amplitude,
            organ_hu,
            background_hu,
            retries,
        },
    })
}
