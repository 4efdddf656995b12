//! Within-bag random sampling applied at each training visit.

use std::fmt;
use std::str::FromStr;

use crate::data::InstanceBag;
use crate::error::{MilError, Result};
use crate::instrument;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingPolicy {
    FixedCount(usize),
    Fraction(f64),
    Full,
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingPolicy::FixedCount(0) => Err(MilError::InvalidConfig("sample count must be at least 1".into())),
            SamplingPolicy::Fraction(p) if !(p > 0.0 && p <= 1.0) => {
                Err(MilError::InvalidConfig(format!("sample fraction {p} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Row label in the style of the result tables, e.g. `RS-30%`.
    pub fn label(&self) -> String {
        match *self {
            SamplingPolicy::FixedCount(k) => format!("RS-{k}-samples"),
            SamplingPolicy::Fraction(p) => format!("RS-{}%", trim_float(p * 100.0)),
            SamplingPolicy::Full => "RS-100%".to_string(),
        }
    }

    /// The eight settings of the sampling sweep, smallest budget first.
    pub fn default_grid() -> Vec<SamplingPolicy> {
        vec![
            SamplingPolicy::FixedCount(8),
            SamplingPolicy::Fraction(0.02),
            SamplingPolicy::Fraction(0.06),
            SamplingPolicy::Fraction(0.10),
            SamplingPolicy::Fraction(0.30),
            SamplingPolicy::Fraction(0.60),
            SamplingPolicy::Fraction(0.90),
            SamplingPolicy::Full,
        ]
    }
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

impl fmt::Display for SamplingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            SamplingPolicy::FixedCount(k) => write!(f, "count:{k}"),
            SamplingPolicy::Fraction(p) => write!(f, "frac:{}", trim_float(p)),
            SamplingPolicy::Full => f.write_str("full"),
        }
    }
}

impl FromStr for SamplingPolicy {
    type Err = MilError;

    /// Parses `full`, `frac:<p>` or `count:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || MilError::InvalidConfig(format!("unrecognized sampling policy {s:?}"));
        let policy = match s.trim().split_once(':') {
            None if s.trim() == "full" => SamplingPolicy::Full,
            Some(("frac", p)) => SamplingPolicy::Fraction(p.parse().map_err(|_| bad())?),
            Some(("count", k)) => SamplingPolicy::FixedCount(k.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Number of instances a policy draws from a bag of `bag_size`.
pub fn resolve_count(policy: SamplingPolicy, bag_size: usize) -> usize {
    let m = match policy {
        SamplingPolicy::Full => bag_size,
        // f64::round rounds half away from zero.
        SamplingPolicy::Fraction(p) => ((p * bag_size as f64).round() as usize).max(1),
        SamplingPolicy::FixedCount(k) => k.min(bag_size),
    };
    m.clamp(1.min(bag_size), bag_size)
}

/// Draws `count` distinct positions from `0..n` with a partial Fisher–Yates
/// shuffle, returned in ascending order.
pub fn choose_distinct(n: usize, count: usize, rng: &mut RngStream) -> Vec<usize> {
    let count = count.min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.below(n - i);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool.sort_unstable();
    pool
}

/// Row positions a policy keeps from a bag of `bag_size` instances, in
/// ascending order. The full policy keeps every row and consumes no
/// randomness.
pub fn sample_rows(bag_size: usize, policy: SamplingPolicy, rng: &mut RngStream) -> Result<Vec<usize>> {
    instrument::record_sampling();
    if bag_size == 0 {
        return Err(MilError::TooFewInstances("cannot sample an empty bag".into()));
    }
    policy.validate()?;
    let m = resolve_count(policy, bag_size);
    if m == bag_size {
        return Ok((0..bag_size).collect());
    }
    Ok(choose_distinct(bag_size, m, rng))
}

/// Returns a uniformly drawn sub-bag sized by `policy`.
pub fn sample_bag(bag: &InstanceBag, policy: SamplingPolicy, rng: &mut RngStream) -> Result<InstanceBag> {
    let rows = sample_rows(bag.len(), policy, rng).map_err(|e| match e {
        MilError::TooFewInstances(_) => MilError::TooFewInstances(format!("cannot sample empty bag {}", bag.bag_id)),
        other => other,
    })?;
    if rows.len() == bag.len() {
        return Ok(bag.clone());
    }
    Ok(bag.subset(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng::{Purpose, StreamId};

    fn bag(m: usize) -> InstanceBag {
        let features = Tensor::new(m, 2, (0..2 * m).map(|v| v as f64).collect()).unwrap();
        let coords = (0..m as u32).map(|i| (i / 10, i % 10)).collect();
        InstanceBag::new("bag", 1, features, Some(coords)).unwrap()
    }

    fn stream(seed: u64, epoch: u64) -> RngStream {
        RngStream::new(seed, StreamId::new(Purpose::Sample).epoch(epoch))
    }

    #[test]
    fn resolve_count_examples() {
        assert_eq!(resolve_count(SamplingPolicy::Fraction(0.30), 50), 15);
        assert_eq!(resolve_count(SamplingPolicy::FixedCount(8), 5), 5);
        assert_eq!(resolve_count(SamplingPolicy::Full, 731), 731);
        assert_eq!(resolve_count(SamplingPolicy::Fraction(0.02), 10), 1);
        // 0.5 * 5 = 2.5 rounds away from zero.
        assert_eq!(resolve_count(SamplingPolicy::Fraction(0.5), 5), 3);
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("full".parse::<SamplingPolicy>().unwrap(), SamplingPolicy::Full);
        assert_eq!(
            "frac:0.30".parse::<SamplingPolicy>().unwrap(),
            SamplingPolicy::Fraction(0.3)
        );
        assert_eq!(
            "count:8".parse::<SamplingPolicy>().unwrap(),
            SamplingPolicy::FixedCount(8)
        );
        for bad in ["frac:0", "frac:1.5", "count:0", "half", "count:x"] {
            assert!(bad.parse::<SamplingPolicy>().is_err(), "{bad}");
        }
        assert_eq!(SamplingPolicy::Fraction(0.3).to_string(), "frac:0.3");
        assert_eq!(SamplingPolicy::Fraction(0.3).label(), "RS-30%");
        assert_eq!(SamplingPolicy::FixedCount(8).label(), "RS-8-samples");
    }

    #[test]
    fn full_policy_is_identity() {
        let b = bag(17);
        assert_eq!(sample_bag(&b, SamplingPolicy::Full, &mut stream(1, 0)).unwrap(), b);
        assert_eq!(
            sample_bag(&b, SamplingPolicy::Fraction(1.0), &mut stream(1, 0)).unwrap(),
            b
        );
    }

    #[test]
    fn fixed_count_from_hundred() {
        let b = bag(100);
        let s = sample_bag(&b, SamplingPolicy::FixedCount(8), &mut stream(42, 0)).unwrap();
        assert_eq!(s.len(), 8);
        let mut idx = s.original_indices.clone();
        idx.dedup();
        assert_eq!(idx.len(), 8);
        assert!(idx.iter().all(|&i| i < 100));
        // Rows, coords and indices stay aligned with the source bag.
        for (row, &orig) in s.original_indices.iter().enumerate() {
            assert_eq!(s.features.row(row), b.features.row(orig));
            assert_eq!(s.coords.as_ref().unwrap()[row], b.coords.as_ref().unwrap()[orig]);
        }
        assert_eq!(s.label, b.label);
        assert_eq!(s.bag_id, b.bag_id);
    }

    #[test]
    fn single_draw_frequencies_are_binomially_concentrated() {
        let b = bag(4);
        let draws = 20_000;
        let mut counts = [0usize; 4];
        for e in 0..draws {
            let s = sample_bag(&b, SamplingPolicy::FixedCount(1), &mut stream(3, e)).unwrap();
            counts[s.original_indices[0]] += 1;
        }
        let n = draws as f64;
        let sigma = (n * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n * 0.25).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn changing_epoch_changes_sample() {
        let b = bag(100);
        let policy = SamplingPolicy::FixedCount(8);
        let base = sample_bag(&b, policy, &mut stream(5, 0)).unwrap();
        assert_eq!(base, sample_bag(&b, policy, &mut stream(5, 0)).unwrap());
        let changed = (1..50)
            .filter(|&e| sample_bag(&b, policy, &mut stream(5, e)).unwrap() != base)
            .count();
        assert_eq!(changed, 49);
    }

    #[test]
    fn empty_bag_errors() {
        let empty = InstanceBag {
            bag_id: "e".into(),
            label: 0,
            features: Tensor::zeros(0, 2),
            coords: None,
            original_indices: vec![],
        };
        assert!(matches!(
            sample_bag(&empty, SamplingPolicy::Full, &mut stream(0, 0)),
            Err(MilError::TooFewInstances(_))
        ));
    }
}
