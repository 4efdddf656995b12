//! Synthetic bags in two regimes.
//!
//! *Focal*: a positive bag hides a small contiguous patch of witness
//! instances shifted along `e₁` among background noise. *Diffuse*: every
//! instance of a positive bag carries a small shift along `e₁`. Negative
//! bags are pure `N(0, I)` noise in both regimes.

use rand_distr::{Distribution, StandardNormal};

use super::bag::InstanceBag;
use crate::autodiff::Tensor;
use crate::error::{MilError, Result};
use crate::rng::{stable_hash, Purpose, RngStream, StreamId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    Focal { witness_rate: f64, separation: f64 },
    Diffuse { shift: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub regime: Regime,
    pub bags_per_class: usize,
    pub bag_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

pub const DEFAULT_WITNESS_RATE: f64 = 0.05;
pub const DEFAULT_SEPARATION: f64 = 3.0;
pub const DEFAULT_DIFFUSE_SHIFT: f64 = 1.0;

impl SyntheticSpec {
    /// Development-set defaults: 100 bags per class of 200 instances in 32-d.
    pub fn focal(seed: u64) -> Self {
        SyntheticSpec {
            regime: Regime::Focal {
                witness_rate: DEFAULT_WITNESS_RATE,
                separation: DEFAULT_SEPARATION,
            },
            bags_per_class: 100,
            bag_size: 200,
            feature_dim: 32,
            seed,
        }
    }

    pub fn diffuse(seed: u64) -> Self {
        SyntheticSpec {
            regime: Regime::Diffuse {
                shift: DEFAULT_DIFFUSE_SHIFT,
            },
            ..SyntheticSpec::focal(seed)
        }
    }

    pub fn witness_count(&self) -> usize {
        match self.regime {
            Regime::Focal { witness_rate, .. } => (witness_rate * self.bag_size as f64 - 1e-9).ceil() as usize,
            Regime::Diffuse { .. } => self.bag_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bags_per_class == 0 || self.bag_size == 0 || self.feature_dim == 0 {
            return Err(MilError::InvalidConfig(
                "bags per class, bag size and feature dim must be positive".into(),
            ));
        }
        match self.regime {
            Regime::Focal {
                witness_rate,
                separation,
            } => {
                if !(witness_rate > 0.0 && witness_rate < 1.0) {
                    return Err(MilError::InvalidConfig(format!(
                        "witness rate {witness_rate} outside (0, 1)"
                    )));
                }
                if witness_rate * (self.bag_size as f64) < 1.0 {
                    return Err(MilError::InvalidConfig(format!(
                        "witness rate {witness_rate} gives fewer than one witness in {} instances",
                        self.bag_size
                    )));
                }
                if !(separation > 0.0 && separation.is_finite()) {
                    return Err(MilError::InvalidConfig(format!(
                        "separation {separation} must be positive"
                    )));
                }
            }
            Regime::Diffuse { shift } => {
                if !(shift > 0.0 && shift.is_finite()) {
                    return Err(MilError::InvalidConfig(format!("shift {shift} must be positive")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub bags: Vec<InstanceBag>,
    /// Per bag, which instances carry the class signal.
    pub witness: Vec<Vec<bool>>,
}

/// Grid position of instance `i` on a `⌈√M⌉`-wide row-major grid.
pub fn grid_coords(bag_size: usize) -> Vec<(u32, u32)> {
    let side = (bag_size as f64).sqrt().ceil().max(1.0) as usize;
    (0..bag_size).map(|i| ((i / side) as u32, (i % side) as u32)).collect()
}

/// Generates `bags_per_class` bags of each class, interleaved negative then
/// positive. `partition` names the split (e.g. `dev`, `test`); different
/// partitions draw from independent streams and get distinct bag ids.
pub fn generate_synthetic(spec: &SyntheticSpec, partition: &str) -> Result<SyntheticDataset> {
    spec.validate()?;
    let coords = grid_coords(spec.bag_size);
    let mut bags = Vec::with_capacity(2 * spec.bags_per_class);
    let mut witness = Vec::with_capacity(2 * spec.bags_per_class);
    for i in 0..spec.bags_per_class {
        for label in 0..2usize {
            let item = (i * 2 + label) as u64;
            let mut rng = RngStream::new(
                spec.seed,
                StreamId::new(Purpose::Generate).fold(stable_hash(partition)).item(item),
            );
            let class = if label == 1 { "pos" } else { "neg" };
            let bag_id = format!("{partition}-{class}-{i:04}");
            let (features, mask) = generate_bag(spec, label == 1, &coords, &mut rng);
            bags.push(InstanceBag::new(bag_id, label, features, Some(coords.clone()))?);
            witness.push(mask);
        }
    }
    Ok(SyntheticDataset { bags, witness })
}

fn generate_bag(
    spec: &SyntheticSpec,
    positive: bool,
    coords: &[(u32, u32)],
    rng: &mut RngStream,
) -> (Tensor, Vec<bool>) {
    let (m, d) = (spec.bag_size, spec.feature_dim);
    let mut values: Vec<f64> = (0..m * d).map(|_| StandardNormal.sample(rng)).collect();
    let mut mask = vec![false; m];
    if positive {
        let shift = match spec.regime {
            Regime::Focal { separation, .. } => {
                for i in witness_patch(coords, spec.witness_count(), rng) {
                    mask[i] = true;
                }
                separation
            }
            Regime::Diffuse { shift } => {
                mask.iter_mut().for_each(|w| *w = true);
                shift
            }
        };
        for (i, _) in mask.iter().enumerate().filter(|(_, w)| **w) {
            values[i * d] += shift;
        }
    }
    (Tensor::from_raw(m, d, values), mask)
}

/// The `count` cells nearest to a random centre cell (ties by index).
fn witness_patch(coords: &[(u32, u32)], count: usize, rng: &mut RngStream) -> Vec<usize> {
    let (cr, cc) = coords[rng.below(coords.len())];
    let mut order: Vec<(u64, usize)> = coords
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            let dr = i64::from(r) - i64::from(cr);
            let dc = i64::from(c) - i64::from(cc);
            ((dr * dr + dc * dc) as u64, i)
        })
        .collect();
    order.sort_unstable();
    order.into_iter().take(count).map(|(_, i)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode_bag;

    fn small(regime: Regime) -> SyntheticSpec {
        SyntheticSpec {
            regime,
            bags_per_class: 6,
            bag_size: 200,
            feature_dim: 8,
            seed: 11,
        }
    }

    #[test]
    fn focal_positive_bags_have_exact_witness_count() {
        let spec = small(Regime::Focal {
            witness_rate: 0.05,
            separation: 3.0,
        });
        let ds = generate_synthetic(&spec, "dev").unwrap();
        for (bag, mask) in ds.bags.iter().zip(&ds.witness) {
            let n = mask.iter().filter(|w| **w).count();
            assert_eq!(n, if bag.label == 1 { 10 } else { 0 }, "{}", bag.bag_id);
        }
    }

    #[test]
    fn witness_rate_below_one_instance_is_rejected() {
        let mut spec = small(Regime::Focal {
            witness_rate: 0.004,
            separation: 3.0,
        });
        assert!(matches!(
            generate_synthetic(&spec, "dev"),
            Err(MilError::InvalidConfig(_))
        ));
        spec.regime = Regime::Focal {
            witness_rate: 0.005,
            separation: 3.0,
        };
        assert!(generate_synthetic(&spec, "dev").is_ok());
    }

    #[test]
    fn class_counts_and_grid() {
        let spec = SyntheticSpec {
            bags_per_class: 50,
            bag_size: 10,
            ..small(Regime::Diffuse { shift: 0.5 })
        };
        let ds = generate_synthetic(&spec, "dev").unwrap();
        assert_eq!(ds.bags.len(), 100);
        assert_eq!(ds.bags.iter().filter(|b| b.label == 1).count(), 50);
        // ⌈√10⌉ = 4 columns.
        assert_eq!(ds.bags[0].coords.as_ref().unwrap()[9], (2, 1));
    }

    #[test]
    fn diffuse_positive_mean_tracks_shift() {
        let shift = 0.5;
        let spec = SyntheticSpec {
            bag_size: 400,
            feature_dim: 16,
            ..small(Regime::Diffuse { shift })
        };
        let ds = generate_synthetic(&spec, "dev").unwrap();
        for bag in ds.bags.iter().filter(|b| b.label == 1) {
            let m = bag.len() as f64;
            let mean_e1 = (0..bag.len()).map(|i| bag.features.get(i, 0)).sum::<f64>() / m;
            assert!((mean_e1 - shift).abs() < 3.0 / m.sqrt(), "{mean_e1}");
            let others: f64 = (0..bag.len())
                .flat_map(|i| bag.features.row(i)[1..].to_vec())
                .sum::<f64>()
                / (m * 15.0);
            assert!(others.abs() < 3.0 / (m * 15.0).sqrt(), "{others}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_partitions_differ() {
        let spec = small(Regime::Focal {
            witness_rate: 0.05,
            separation: 3.0,
        });
        let a = generate_synthetic(&spec, "dev").unwrap();
        let b = generate_synthetic(&spec, "dev").unwrap();
        let t = generate_synthetic(&spec, "test").unwrap();
        for (x, y) in a.bags.iter().zip(&b.bags) {
            assert_eq!(encode_bag(x).unwrap(), encode_bag(y).unwrap());
        }
        assert_ne!(a.bags[0].features, t.bags[0].features);
        assert_ne!(a.bags[0].bag_id, t.bags[0].bag_id);
    }

    #[test]
    fn witnesses_form_a_compact_patch() {
        let spec = small(Regime::Focal {
            witness_rate: 0.05,
            separation: 3.0,
        });
        let ds = generate_synthetic(&spec, "dev").unwrap();
        let (bag, mask) = ds.bags.iter().zip(&ds.witness).find(|(b, _)| b.label == 1).unwrap();
        let coords = bag.coords.as_ref().unwrap();
        let pts: Vec<_> = mask
            .iter()
            .enumerate()
            .filter(|(_, w)| **w)
            .map(|(i, _)| coords[i])
            .collect();
        let span = |f: fn(&(u32, u32)) -> u32| pts.iter().map(f).max().unwrap() - pts.iter().map(f).min().unwrap();
        assert!(span(|p| p.0) <= 4 && span(|p| p.1) <= 4, "{pts:?}");
    }
}
