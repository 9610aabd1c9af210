//! Seeded train/validation/test partitioning.

use rand::seq::SliceRandom;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const STANDARD: SplitFractions = SplitFractions {
        train: 0.70,
        val: 0.15,
        test: 0.15,
    };

    fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be positive: {self:?}"
            )));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must sum to 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Partition sizes for `n` items: validation and test get floored shares,
    /// train gets the rest.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let share = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let val = share(self.val);
        let test = share(self.test).min(n - val);
        (n - val - test, val, test)
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Shuffles with `seed` and cuts into three parts. Each part keeps the input
/// order of its members.
pub fn split_dataset(samples: &[Sample], fractions: SplitFractions, seed: u64) -> Result<Split> {
    fractions.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (n_train, n_val, _) = fractions.sizes(samples.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, &[b"split"])));

    let part = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| samples[i].clone()).collect::<Vec<_>>()
    };
    let train = part(0..n_train);
    let val = part(n_train..n_train + n_val);
    let test = part(n_train + n_val..samples.len());
    Ok(Split { train, val, test })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::data::{ImageBuffer, MaskBuffer};

    fn dataset(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                Sample::new(
                    format!("s{i:03}"),
                    ImageBuffer::filled(1, 1, 1, 0).unwrap(),
                    MaskBuffer::zeros(1, 1).unwrap(),
                )
                .unwrap()
            })
            .collect()
    }

    fn ids(s: &[Sample]) -> Vec<String> {
        s.iter().map(|s| s.id.clone()).collect()
    }

    #[test]
    fn sizes_follow_floor_with_train_remainder() {
        let s = split_dataset(&dataset(100), SplitFractions::STANDARD, 42).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        let s = split_dataset(&dataset(10), SplitFractions::STANDARD, 42).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn same_seed_same_partition() {
        let ds = dataset(37);
        let a = split_dataset(&ds, SplitFractions::STANDARD, 7).unwrap();
        let b = split_dataset(&ds, SplitFractions::STANDARD, 7).unwrap();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.test), ids(&b.test));
        let c = split_dataset(&ds, SplitFractions::STANDARD, 8).unwrap();
        assert_ne!(ids(&a.train), ids(&c.train));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            split_dataset(&[], SplitFractions::STANDARD, 1),
            Err(Error::EmptyDataset)
        ));
        let bad = SplitFractions {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(split_dataset(&dataset(3), bad, 1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn partition_is_disjoint_and_exhaustive(n in 1usize..200, seed in proptest::num::u64::ANY) {
            let ds = dataset(n);
            let s = split_dataset(&ds, SplitFractions::STANDARD, seed).unwrap();
            let mut all: Vec<String> = ids(&s.train);
            all.extend(ids(&s.val));
            all.extend(ids(&s.test));
            let set: BTreeSet<_> = all.iter().cloned().collect();
            proptest::prop_assert_eq!(set.len(), all.len());
            proptest::prop_assert_eq!(set, ids(&ds).into_iter().collect::<BTreeSet<_>>());
        }
    }
}
