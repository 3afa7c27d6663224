//! On-disk corpus of perturbed graph samples with a checksummed manifest.
//!
//! Layout: `manifest.json`, `phantoms/sNNN_{ct,gt}.nii` and one binary
//! record per sample in `records/sNNN_pMMM.sqgs`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distance::signed_distance_transform;
use crate::error::{Error, Result};
use crate::eval::{make_folds, FoldPlan};
use crate::graphbuild::{assemble_sample, decode_sample, encode_sample, ClassThresholds, GraphSample, Provenance, NUM_CLASSES};
use crate::grid::{BinaryMask, Volume};
use crate::mesh::{extract_clean_mesh, CleanupConfig};
use crate::network::SampleLoader;
use crate::nifti::{load_mask, load_nifti, save_mask, save_nifti};
use crate::perturb::{perturb_sdf, structured_noise, NoiseConfig};
use crate::phantom::{generate_phantom, PhantomConfig, PhantomParams};
use crate::rng::derive_seed;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_phantoms: usize,
    pub perturbations_per_phantom: usize,
    pub seed: u64,
    pub phantom: PhantomConfig,
    /// `seed` is ignored; each perturbation derives its own.
    pub noise: NoiseConfig,
    pub thresholds: ClassThresholds,
    pub cleanup: CleanupConfig,
    pub folds: usize,
    pub fold_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_phantoms: 16,
            perturbations_per_phantom: 100,
            seed: 0,
            phantom: PhantomConfig::default(),
            noise: NoiseConfig::default(),
            thresholds: ClassThresholds::default(),
            cleanup: CleanupConfig::default(),
            folds: 5,
            fold_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_phantoms == 0 || self.perturbations_per_phantom == 0 {
            return Err(Error::Config("dataset: phantom and perturbation counts must be > 0".into()));
        }
        if self.folds < 2 || self.folds > self.num_phantoms {
            return Err(Error::Config(format!(
                "dataset: folds must be in 2..={} (got {})",
                self.num_phantoms, self.folds
            )));
        }
        self.phantom.validate()?;
        self.noise.validate()?;
        self.thresholds.validate()
    }

    /// Digest of the canonical JSON form and the format version.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(FORMAT_VERSION.to_le_bytes());
        h.update(serde_json::to_vec(self)?);
        Ok(hex::encode(h.finalize()))
    }

    pub fn phantom_seed(&self, id: u32) -> u64 {
        derive_seed(self.seed, &[0x7068, id as u64])
    }

    pub fn noise_seed(&self, id: u32, perturbation: u32) -> u64 {
        derive_seed(self.seed, &[0x6e6f, id as u64, perturbation as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomEntry {
    pub structure_id: u32,
    pub seed: u64,
    pub ct_file: String,
    pub gt_file: String,
    pub params: PhantomParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub file: String,
    pub structure_id: u32,
    pub perturbation: u32,
    pub seed: u64,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub crc32: u32,
    pub class_histogram: [u64; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub config_digest: String,
    pub folds: FoldPlan,
    pub phantoms: Vec<PhantomEntry>,
    pub records: Vec<RecordEntry>,
    /// SHA-256 of the manifest with this field empty.
    pub hash: String,
}

impl Manifest {
    pub fn compute_hash(&self) -> Result<String> {
        let mut m = self.clone();
        m.hash.clear();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&m)?)))
    }

    pub fn class_histogram(&self) -> [u64; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for r in &self.records {
            for (a, b) in h.iter_mut().zip(r.class_histogram) {
                *a += b;
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenerateOutcome {
    Generated { records: usize },
    UpToDate { records: usize },
}

struct Prepared {
    ct: Volume,
    gt_sdf: Volume,
    entry: PhantomEntry,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One perturbed sample: noisy SDF, cleaned mesh, labels and patches.
pub fn perturbed_sample(
    ct: &Volume,
    gt_sdf: &Volume,
    cfg: &DatasetConfig,
    structure_id: u32,
    perturbation: u32,
) -> Result<GraphSample> {
    let seed = cfg.noise_seed(structure_id, perturbation);
    let noise = structured_noise(&gt_sdf.grid, &cfg.noise.with_seed(seed))?;
    let sdf = perturb_sdf(gt_sdf, &noise)?;
    let mesh = extract_clean_mesh(&sdf, &cfg.cleanup)?;
    let prov = Provenance {
        structure_id,
        perturbation,
        seed,
    };
    assemble_sample(ct, &mesh, gt_sdf, &cfg.thresholds, prov)
}

/// Builds the corpus in `dir`. A manifest with the same config digest whose
/// records all verify is left untouched.
pub fn generate_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<GenerateOutcome> {
    cfg.validate()?;
    let digest = cfg.digest()?;
    if dir.join(MANIFEST_FILE).exists() {
        if let Ok(ds) = Dataset::open(dir) {
            if ds.manifest.config_digest == digest && ds.verify().is_ok() {
                log::info!("stage=generate status=up_to_date records={}", ds.manifest.records.len());
                return Ok(GenerateOutcome::UpToDate {
                    records: ds.manifest.records.len(),
                });
            }
        }
    }
    let pdir = dir.join("phantoms");
    let rdir = dir.join("records");
    for d in [&pdir, &rdir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let ids: Vec<u32> = (0..cfg.num_phantoms as u32).collect();
    let prepared: Vec<Prepared> = ids
        .par_iter()
        .map(|&id| {
            let seed = cfg.phantom_seed(id);
            let ph = generate_phantom(&cfg.phantom, seed)?;
            let gt_sdf = signed_distance_transform(&ph.gt)?;
            let ct_file = format!("phantoms/s{id:03}_ct.nii");
            let gt_file = format!("phantoms/s{id:03}_gt.nii");
            save_nifti(&ph.ct, dir.join(&ct_file))?;
            save_mask(&ph.gt, dir.join(&gt_file))?;
            log::info!("stage=generate phantom={id} retries={}", ph.params.retries);
            Ok(Prepared {
                ct: ph.ct,
                gt_sdf,
                entry: PhantomEntry {
                    structure_id: id,
                    seed,
                    ct_file,
                    gt_file,
                    params: ph.params,
                },
            })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, u32)> = (0..prepared.len())
        .flat_map(|i| (0..cfg.perturbations_per_phantom as u32).map(move |p| (i, p)))
        .collect();
    let records: Vec<RecordEntry> = jobs
        .par_iter()
        .map(|&(i, p)| {
            let ph = &prepared[i];
            let id = ph.entry.structure_id;
            let s = perturbed_sample(&ph.ct, &ph.gt_sdf, cfg, id, p)?;
            let bytes = encode_sample(&s);
            let file = format!("records/s{id:03}_p{p:03}.sqgs");
            write_file(&dir.join(&file), &bytes)?;
            Ok(RecordEntry {
                file,
                structure_id: id,
                perturbation: p,
                seed: s.provenance.seed,
                num_nodes: s.num_nodes(),
                num_edges: s.num_edges(),
                crc32: crc32fast::hash(&bytes),
                class_histogram: s.class_histogram().map(|c| c as u64),
            })
        })
        .collect::<Result<_>>()?;

    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        config_digest: digest,
        folds: make_folds(&ids, cfg.folds, cfg.fold_seed)?,
        phantoms: prepared.into_iter().map(|p| p.entry).collect(),
        records,
        hash: String::new(),
    };
    manifest.hash = manifest.compute_hash()?;
    let n = manifest.records.len();
    let tmp = dir.join("manifest.json.tmp");
    write_file(&tmp, &serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, dir.join(MANIFEST_FILE)).map_err(|e| Error::io(dir, e))?;
    log::info!("stage=generate status=done records={n} hash={}", manifest.hash);
    Ok(GenerateOutcome::Generated { records: n })
}

/// Read access to a generated corpus.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let p = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "manifest format {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.compute_hash()? != manifest.hash {
            return Err(Error::Checksum(format!("{} hash mismatch", p.display())));
        }
        Ok(Self { dir, manifest })
    }

    fn read_record(&self, record: usize) -> Result<Vec<u8>> {
        let e = self.entry(record)?;
        let p = self.dir.join(&e.file);
        let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
        if crc32fast::hash(&bytes) != e.crc32 {
            return Err(Error::Checksum(format!("{} does not match the manifest", p.display())));
        }
        Ok(bytes)
    }

    pub fn entry(&self, record: usize) -> Result<&RecordEntry> {
        self.manifest.records.get(record).ok_or(Error::Index {
            context: "dataset records",
            index: record,
            len: self.manifest.records.len(),
        })
    }

    /// Checksums of every record file.
    pub fn verify(&self) -> Result<()> {
        (0..self.manifest.records.len())
            .into_par_iter()
            .try_for_each(|r| self.read_record(r).map(drop))
    }

    pub fn structure_ids(&self) -> Vec<u32> {
        self.manifest.phantoms.iter().map(|p| p.structure_id).collect()
    }

    /// CT volume and ground-truth mask of one structure.
    pub fn phantom(&self, structure_id: u32) -> Result<(Volume, BinaryMask)> {
        let e = self
            .manifest
            .phantoms
            .iter()
            .find(|p| p.structure_id == structure_id)
            .ok_or_else(|| Error::Dataset(format!("no phantom with id {structure_id}")))?;
        Ok((load_nifti(self.dir.join(&e.ct_file))?, load_mask(self.dir.join(&e.gt_file))?))
    }
}

impl SampleLoader for Dataset {
    fn num_records(&self) -> usize {
        self.manifest.records.len()
    }

    fn structure_of(&self, record: usize) -> u32 {
        self.manifest.records[record].structure_id
    }

    fn class_histogram(&self, record: usize) -> [u64; NUM_CLASSES] {
        self.manifest.records[record].class_histogram
    }

    fn load(&self, record: usize) -> Result<GraphSample> {
        decode_sample(&self.read_record(record)?)
    }
}
