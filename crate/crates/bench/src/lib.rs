//! Fixtures shared by the benchmarks.

use segqa_core::dataset::{perturbed_sample, DatasetConfig};
use segqa_core::distance::signed_distance_transform;
use segqa_core::phantom::generate_phantom;
use segqa_core::{GraphSample, Result, Volume};

/// Default-sized phantom: CT volume and ground-truth SDF.
pub fn phantom_fixture(seed: u64) -> Result<(Volume, Volume, segqa_core::BinaryMask)> {
    let cfg = DatasetConfig::default();
    let ph = generate_phantom(&cfg.phantom, seed)?;
    let sdf = signed_distance_transform(&ph.gt)?;
    Ok((ph.ct, sdf, ph.gt))
}

/// One perturbed graph sample at default settings (about 500 nodes).
pub fn sample_fixture(seed: u64) -> Result<GraphSample> {
    let (ct, sdf, _) = phantom_fixture(seed)?;
    perturbed_sample(&ct, &sdf, &DatasetConfig::default(), 0, 0)
}
