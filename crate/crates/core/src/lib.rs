//! Ground-truth-free detection of contouring errors on organ surface meshes.

pub mod autodiff;
pub mod dataset;
pub mod distance;
pub mod error;
pub mod eval;
pub mod graphbuild;
pub mod grid;
pub mod mesh;
pub mod network;
pub mod nifti;
pub mod perturb;
pub mod phantom;
pub mod rng;

pub use error::{Error, Result};

pub use dataset::{generate_dataset, Dataset, DatasetConfig, GenerateOutcome, Manifest};
pub use eval::{Ablation, ConfusionMatrix5, FoldPlan, PrecisionRule, Report};
pub use graphbuild::{ClassThresholds, GraphSample};
pub use grid::{BinaryMask, Grid, Point3, Volume};
pub use mesh::{CleanupConfig, TriMesh};
pub use network::{ModelConfig, TrainConfig};
pub use perturb::NoiseConfig;
pub use phantom::PhantomConfig;
