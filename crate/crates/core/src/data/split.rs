//! Study-level train/val/test splitting and inverse-frequency class weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{streams, Rng};

pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

/// Negative and positive counts of one partition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub negative: usize,
    pub positive: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.negative + self.positive
    }
}

/// Split artifact: seed, ratios, stratification flag and the id lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub stratified: bool,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub counts: [LabelCounts; 3],
}

impl DatasetSplit {
    pub fn partitions(&self) -> [(&'static str, &[String]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Partition sizes `(train, val, test)` for `n` studies: val and test take
/// `max(1, round(r * n))`, train keeps the rest.
pub fn partition_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    check_ratios(ratios)?;
    if n < 3 {
        return Err(Error::Data(format!("splitting needs at least 3 studies, got {n}")));
    }
    let val = ((ratios[1] * n as f64).round() as usize).max(1);
    let test = ((ratios[2] * n as f64).round() as usize).max(1);
    if val + test >= n {
        return Err(Error::Data(format!("{n} studies leave no training partition at ratios {ratios:?}")));
    }
    Ok([n - val - test, val, test])
}

fn check_ratios(r: [f64; 3]) -> Result<()> {
    if r.iter().any(|v| !(*v > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("split ratios must be positive and sum to 1, got {r:?}")));
    }
    Ok(())
}

/// Deterministic study-level split.
///
/// When `stratified`, each partition receives `round(size * P / n)` positives
/// (clamped to what is available), so malignant fractions track the global
/// one. The result depends only on the set of `(id, label)` pairs and `seed`.
pub fn split_dataset(studies: &[(String, u8)], ratios: [f64; 3], seed: u64, stratified: bool) -> Result<DatasetSplit> {
    let sizes = partition_sizes(studies.len(), ratios)?;
    let mut sorted: Vec<(String, u8)> = studies.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Data("duplicate study ids in split input".into()));
    }
    if sorted.iter().any(|s| s.1 > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    let mut rng = Rng::for_stream(seed, streams::SPLIT, 0);

    let mut parts: [Vec<(String, u8)>; 3] = Default::default();
    if stratified {
        let (mut pos, mut neg): (Vec<_>, Vec<_>) = sorted.into_iter().partition(|s| s.1 == 1);
        rng.shuffle(&mut pos);
        rng.shuffle(&mut neg);
        let n = studies.len() as f64;
        let total_pos = pos.len();
        let mut pos_alloc = [0usize; 3];
        for k in [1, 2] {
            pos_alloc[k] = (sizes[k] as f64 * total_pos as f64 / n).round() as usize;
        }
        // Train takes the remaining positives; shift any surplus or deficit
        // into val/test so every partition stays within its size.
        for k in [1, 2] {
            while pos_alloc[1] + pos_alloc[2] > total_pos && pos_alloc[k] > 0 {
                pos_alloc[k] -= 1;
            }
        }
        for k in [1, 2] {
            while total_pos - pos_alloc[1] - pos_alloc[2] > sizes[0] && pos_alloc[k] < sizes[k] {
                pos_alloc[k] += 1;
            }
        }
        pos_alloc[0] = total_pos - pos_alloc[1] - pos_alloc[2];
        let (mut pi, mut ni) = (0, 0);
        for k in 0..3 {
            parts[k].extend(pos[pi..pi + pos_alloc[k]].iter().cloned());
            pi += pos_alloc[k];
            let negs = sizes[k] - pos_alloc[k];
            parts[k].extend(neg[ni..ni + negs].iter().cloned());
            ni += negs;
        }
    } else {
        rng.shuffle(&mut sorted);
        let mut it = sorted.into_iter();
        for k in 0..3 {
            parts[k].extend(it.by_ref().take(sizes[k]));
        }
    }

    let mut counts = [LabelCounts::default(); 3];
    let mut ids: [Vec<String>; 3] = Default::default();
    for k in 0..3 {
        parts[k].sort();
        for (id, label) in &parts[k] {
            if *label == 1 {
                counts[k].positive += 1;
            } else {
                counts[k].negative += 1;
            }
            ids[k].push(id.clone());
        }
    }
    let [train, val, test] = ids;
    Ok(DatasetSplit { seed, ratios, stratified, train, val, test, counts })
}

/// Inverse-frequency weights `w_c = N / (2 N_c)` as `(w_negative, w_positive)`.
pub fn class_weights(labels: &[u8]) -> Result<(f64, f64)> {
    let ((nn, dn), (np, dp)) = class_weight_fractions(labels)?;
    Ok((nn as f64 / dn as f64, np as f64 / dp as f64))
}

/// Class weights as exact fractions `(numerator, denominator)`.
pub fn class_weight_fractions(labels: &[u8]) -> Result<((u64, u64), (u64, u64))> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.iter().filter(|&&l| l == 0).count() as u64;
    if pos + neg != labels.len() as u64 {
        return Err(Error::Data("class weights need labels in {0, 1}".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!(
            "class weights need both classes (negatives {neg}, positives {pos})"
        )));
    }
    let n = pos + neg;
    let reduce = |a: u64, b: u64| {
        let g = gcd(a, b);
        (a / g, b / g)
    };
    Ok((reduce(n, 2 * neg), reduce(n, 2 * pos)))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn studies(n: usize, pos: usize) -> Vec<(String, u8)> {
        (0..n).map(|i| (format!("study{i:04}"), u8::from(i < pos))).collect()
    }

    #[test]
    fn clinical_sized_split() {
        let s = split_dataset(&studies(365, 119), DEFAULT_RATIOS, 0, true).unwrap();
        assert_eq!([s.train.len(), s.val.len(), s.test.len()], [255, 55, 55]);
        let global = 119.0 / 365.0;
        for c in s.counts {
            assert!((c.positive as f64 / c.total() as f64 - global).abs() <= 0.05);
        }
    }

    #[test]
    fn same_seed_same_split_regardless_of_order() {
        let a = split_dataset(&studies(50, 20), DEFAULT_RATIOS, 9, true).unwrap();
        let mut rev = studies(50, 20);
        rev.reverse();
        assert_eq!(split_dataset(&rev, DEFAULT_RATIOS, 9, true).unwrap(), a);
        assert_ne!(split_dataset(&studies(50, 20), DEFAULT_RATIOS, 10, true).unwrap(), a);
    }

    #[test]
    fn too_few_studies() {
        assert!(matches!(split_dataset(&studies(2, 1), DEFAULT_RATIOS, 0, true), Err(Error::Data(_))));
        assert!(split_dataset(&studies(3, 1), DEFAULT_RATIOS, 0, true).is_ok());
        assert!(split_dataset(&studies(10, 1), [0.5, 0.5, 0.5], 0, true).is_err());
    }

    #[test]
    fn class_weight_examples() {
        let mut labels = vec![0u8; 246];
        labels.extend(vec![1u8; 119]);
        let (wn, wp) = class_weights(&labels).unwrap();
        assert!((wn - 0.74187).abs() < 1e-5 && (wp - 1.53361).abs() < 1e-5);
        let ((a, b), (c, d)) = class_weight_fractions(&labels).unwrap();
        // w_neg * 246 == w_pos * 119 as fractions.
        assert_eq!(a as u128 * 246 * d as u128, c as u128 * 119 * b as u128);

        assert_eq!(class_weights(&[0, 1, 0, 1]).unwrap(), (1.0, 1.0));
        let mut skew = vec![0u8; 99];
        skew.push(1);
        let (wn, wp) = class_weights(&skew).unwrap();
        assert_eq!(wp, 50.0);
        assert!((wn - 100.0 / 198.0).abs() < 1e-15);
        assert!(class_weights(&[1, 1]).is_err());
        assert!(class_weights(&[0, 2]).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_cover(n in 3usize..120, pos_frac in 0.0f64..1.0, seed in any::<u64>(), strat in any::<bool>()) {
            let pos = ((n as f64) * pos_frac) as usize;
            let input = studies(n, pos);
            let s = split_dataset(&input, DEFAULT_RATIOS, seed, strat).unwrap();
            let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
            prop_assert_eq!(all.len(), n);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
            let sizes = partition_sizes(n, DEFAULT_RATIOS).unwrap();
            prop_assert_eq!([s.train.len(), s.val.len(), s.test.len()], sizes);
            for k in 0..3 {
                let target = DEFAULT_RATIOS[k] * n as f64;
                prop_assert!((sizes[k] as f64 - target).abs() <= 1.0 || sizes[k] == 1);
            }
            prop_assert_eq!(s.counts.iter().map(|c| c.positive).sum::<usize>(), pos);
            if strat {
                let global = pos as f64 / n as f64;
                for c in s.counts.iter().filter(|c| c.total() >= 20) {
                    prop_assert!((c.positive as f64 / c.total() as f64 - global).abs() <= 0.05);
                }
            }
        }

        #[test]
        fn weighted_masses_are_equal(neg in 1u64..5000, pos in 1u64..5000) {
            let mut labels = vec![0u8; neg as usize];
            labels.extend(std::iter::repeat_n(1u8, pos as usize));
            let ((a, b), (c, d)) = class_weight_fractions(&labels).unwrap();
            prop_assert_eq!(a as u128 * neg as u128 * d as u128, c as u128 * pos as u128 * b as u128);
        }
    }
}
