//! Bags, their on-disk format, synthetic datasets, manifests and folds.

mod bag;
mod folds;
mod manifest;
mod synthetic;

use rand_distr::{Distribution, Normal};

pub(crate) use bag::ByteReader;
pub use bag::{decode_bag, encode_bag, read_bag, write_bag, InstanceBag, BAG_FORMAT_VERSION, BAG_MAGIC};
pub use folds::{split_kfold, Fold, FoldPlan, SINGLE_SPLIT_VALIDATION};
pub use manifest::{write_dataset, DatasetManifest, ManifestEntry, MANIFEST_FORMAT_VERSION};
pub use synthetic::{
    generate_synthetic, grid_coords, Regime, SyntheticDataset, SyntheticSpec, DEFAULT_DIFFUSE_SHIFT,
    DEFAULT_SEPARATION, DEFAULT_WITNESS_RATE,
};

use crate::autodiff::Tensor;
use crate::error::{MilError, Result};
use crate::instrument;
use crate::rng::RngStream;

/// Maps a raw grade to a binary class: grade 1 is low (0), grades 2 and 3
/// are high (1).
pub fn dichotomize(raw_grade: i64) -> Result<usize> {
    match raw_grade {
        1 => Ok(0),
        2 | 3 => Ok(1),
        other => Err(MilError::InvalidLabel(format!("grade {other} is not in {{1, 2, 3}}"))),
    }
}

/// Feature-space jitter: adds i.i.d. `N(0, sigma²)` noise to every feature.
pub fn augment_features(bag: &InstanceBag, sigma: f64, rng: &mut RngStream) -> Result<InstanceBag> {
    instrument::record_augmentation();
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(MilError::InvalidConfig(format!(
            "jitter sigma {sigma} must be non-negative"
        )));
    }
    if sigma == 0.0 {
        return Ok(bag.clone());
    }
    let noise = Normal::new(0.0, sigma).expect("sigma validated");
    let values = bag.features.as_slice().iter().map(|&v| v + noise.sample(rng)).collect();
    Ok(InstanceBag {
        features: Tensor::new(bag.len(), bag.dim(), values)?,
        ..bag.clone()
    })
}
