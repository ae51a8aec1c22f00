//! Cluster-level training/test splits stratified by design stratum.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SurveyDataset;
use crate::error::{Error, Result};
use crate::hazard::{ClusterId, StratumId};

/// Splits clusters into training and test sets with `train_fraction` of
/// clusters (rounded) in training.
///
/// Allocation is by stratum with largest-remainder rounding so the overall
/// training size is `round(train_fraction * n)` where feasible; every
/// stratum with at least two clusters keeps at least one cluster on each
/// side.
pub fn holdout_split(
    data: &SurveyDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(SurveyDataset, SurveyDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "training fraction {train_fraction} outside (0, 1)"
        )));
    }
    if data.clusters.is_empty() {
        return Err(Error::Survey("cannot split a survey with no clusters".into()));
    }
    let mut by_stratum: BTreeMap<StratumId, Vec<ClusterId>> = BTreeMap::new();
    for c in &data.clusters {
        by_stratum.entry(c.stratum_id).or_default().push(c.cluster_id);
    }
    let n_total = data.clusters.len();
    let target = (train_fraction * n_total as f64).round() as i64;

    struct Alloc {
        take: i64,
        lo: i64,
        hi: i64,
        frac: f64,
    }
    let mut allocs: Vec<Alloc> = by_stratum
        .values()
        .map(|m| {
            let n = m.len() as i64;
            let exact = train_fraction * n as f64;
            let (lo, hi) = if n >= 2 { (1, n - 1) } else { (0, n) };
            Alloc {
                take: (exact.floor() as i64).clamp(lo, hi),
                lo,
                hi,
                frac: exact - exact.floor(),
            }
        })
        .collect();
    let mut remaining = target - allocs.iter().map(|a| a.take).sum::<i64>();
    let mut order: Vec<usize> = (0..allocs.len()).collect();
    if remaining > 0 {
        order.sort_by(|&a, &b| allocs[b].frac.total_cmp(&allocs[a].frac).then(a.cmp(&b)));
        while remaining > 0 {
            let mut moved = false;
            for &i in &order {
                if remaining > 0 && allocs[i].take < allocs[i].hi {
                    allocs[i].take += 1;
                    remaining -= 1;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
    } else if remaining < 0 {
        order.sort_by(|&a, &b| allocs[a].frac.total_cmp(&allocs[b].frac).then(a.cmp(&b)));
        while remaining < 0 {
            let mut moved = false;
            for &i in &order {
                if remaining < 0 && allocs[i].take > allocs[i].lo {
                    allocs[i].take -= 1;
                    remaining += 1;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (members, alloc) in by_stratum.values().zip(&allocs) {
        let mut m = members.clone();
        m.sort_unstable();
        m.shuffle(&mut rng);
        let k = alloc.take as usize;
        train.extend_from_slice(&m[..k]);
        test.extend_from_slice(&m[k..]);
    }
    Ok((data.subset(&train)?, data.subset(&test)?))
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::{child, cluster};
    use super::*;

    fn big(n: u32, strata: u32) -> SurveyDataset {
        let clusters = (0..n).map(|i| cluster(i, i % strata, 1.0, 1)).collect();
        let births = (0..n).map(|i| child(i as u64, i, 2005, None)).collect();
        SurveyDataset::new(1, clusters, births).unwrap()
    }

    #[test]
    fn half_split_sizes() {
        let d = big(1584, 16);
        let (a, b) = holdout_split(&d, 0.5, 1).unwrap();
        assert!((a.clusters.len() as i64 - 792).abs() <= 1);
        assert_eq!(a.clusters.len() + b.clusters.len(), 1584);
        assert_eq!(a.n_births() + b.n_births(), d.n_births());
    }

    #[test]
    fn split_is_deterministic_and_cluster_level() {
        let d = big(100, 7);
        let (a1, _) = holdout_split(&d, 0.3, 9).unwrap();
        let (a2, _) = holdout_split(&d, 0.3, 9).unwrap();
        assert_eq!(a1, a2);
        let (a3, _) = holdout_split(&d, 0.3, 10).unwrap();
        assert_ne!(a1.clusters, a3.clusters);
    }

    #[test]
    fn extreme_fractions_keep_both_sides() {
        let d = big(60, 6);
        for f in [0.999, 0.001] {
            let (train, test) = holdout_split(&d, f, 3).unwrap();
            for s in 0..6 {
                assert!(train.clusters.iter().any(|c| c.stratum_id == s));
                assert!(test.clusters.iter().any(|c| c.stratum_id == s));
            }
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        let d = SurveyDataset::new(1, vec![], vec![]).unwrap();
        assert!(holdout_split(&d, 0.5, 1).is_err());
        assert!(holdout_split(&big(4, 1), 1.0, 1).is_err());
    }
}
