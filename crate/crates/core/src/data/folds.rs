use std::collections::BTreeMap;

use crate::error::{MilError, Result};
use crate::rng::{Purpose, RngStream, StreamId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Fraction of each class held out for validation when `k == 1`.
pub const SINGLE_SPLIT_VALIDATION: f64 = 0.2;

/// Class-stratified shuffled folds over `(bag_id, label)` pairs.
///
/// For `k ≥ 2` each class is shuffled and dealt round-robin into `k`
/// validation sets, continuing the deal position across classes so fold
/// sizes differ by at most one. For `k = 1` a single stratified 80/20 split
/// is produced.
pub fn split_kfold(items: &[(String, usize)], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(MilError::InvalidConfig("k must be at least 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (id, label) in items {
        by_class.entry(*label).or_default().push(id);
    }
    if by_class.len() < 2 {
        return Err(MilError::InvalidConfig("need bags from at least two classes".into()));
    }
    let min_needed = if k == 1 { 2 } else { k };
    if let Some((label, ids)) = by_class.iter().find(|(_, ids)| ids.len() < min_needed) {
        return Err(MilError::InvalidConfig(format!(
            "class {label} has {} bags, need at least {min_needed} for k={k}",
            ids.len()
        )));
    }

    let mut validation: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut deal = 0usize;
    for (label, ids) in &by_class {
        let mut ids: Vec<&str> = ids.clone();
        let mut rng = RngStream::new(seed, StreamId::new(Purpose::Split).item(*label as u64));
        for i in (1..ids.len()).rev() {
            let j = rng.below(i + 1);
            ids.swap(i, j);
        }
        if k == 1 {
            let n_val = ((ids.len() as f64 * SINGLE_SPLIT_VALIDATION).round() as usize).clamp(1, ids.len() - 1);
            validation[0].extend(ids[..n_val].iter().map(|s| s.to_string()));
        } else {
            for id in ids {
                validation[deal % k].push(id.to_string());
                deal += 1;
            }
        }
    }

    let folds = validation
        .into_iter()
        .map(|val| {
            let mut val_sorted = val.clone();
            val_sorted.sort();
            let train = items
                .iter()
                .filter(|(id, _)| val_sorted.binary_search(id).is_err())
                .map(|(id, _)| id.clone())
                .collect();
            Fold { train, validation: val }
        })
        .collect();
    Ok(FoldPlan { k, seed, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn balanced(per_class: usize) -> Vec<(String, usize)> {
        (0..per_class)
            .flat_map(|i| [(format!("n{i}"), 0), (format!("p{i}"), 1)])
            .collect()
    }

    fn positives(ids: &[String]) -> usize {
        ids.iter().filter(|id| id.starts_with('p')).count()
    }

    #[test]
    fn ten_folds_are_stratified_and_partition() {
        let items = balanced(50);
        let plan = split_kfold(&items, 10, 3).unwrap();
        let mut all_val = HashSet::new();
        for fold in &plan.folds {
            assert_eq!(fold.validation.len(), 10);
            assert_eq!(positives(&fold.validation), 5);
            assert_eq!(fold.train.len(), 90);
            let train: HashSet<_> = fold.train.iter().collect();
            assert!(fold.validation.iter().all(|v| !train.contains(v)));
            for v in &fold.validation {
                assert!(all_val.insert(v.clone()));
            }
        }
        assert_eq!(all_val.len(), 100);
    }

    #[test]
    fn uneven_classes_stay_within_one_bag_of_global_ratio() {
        let mut items = balanced(23);
        items.extend((0..14).map(|i| (format!("p_extra{i}"), 1)));
        let plan = split_kfold(&items, 7, 9).unwrap();
        let global = positives(&items.iter().map(|(i, _)| i.clone()).collect::<Vec<_>>()) as f64 / items.len() as f64;
        for fold in &plan.folds {
            let expected = global * fold.validation.len() as f64;
            assert!((positives(&fold.validation) as f64 - expected).abs() <= 1.0);
        }
    }

    #[test]
    fn single_split_is_eighty_twenty() {
        let plan = split_kfold(&balanced(50), 1, 1).unwrap();
        assert_eq!(plan.folds.len(), 1);
        assert_eq!(plan.folds[0].train.len(), 80);
        assert_eq!(plan.folds[0].validation.len(), 20);
        assert_eq!(positives(&plan.folds[0].validation), 10);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let items = balanced(30);
        assert_eq!(split_kfold(&items, 5, 4).unwrap(), split_kfold(&items, 5, 4).unwrap());
        assert_ne!(split_kfold(&items, 5, 4).unwrap(), split_kfold(&items, 5, 5).unwrap());
    }

    #[test]
    fn too_few_bags_is_invalid_config() {
        assert!(matches!(
            split_kfold(&balanced(4), 5, 0),
            Err(MilError::InvalidConfig(_))
        ));
        assert!(matches!(
            split_kfold(&balanced(4), 0, 0),
            Err(MilError::InvalidConfig(_))
        ));
        let one_class: Vec<_> = (0..10).map(|i| (format!("n{i}"), 0)).collect();
        assert!(split_kfold(&one_class, 2, 0).is_err());
    }
}
