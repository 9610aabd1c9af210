//! Removing samples of over-represented classes.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use crate::data::{class_distribution, Sample};
use crate::dedup::{hamming, hash_samples};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DownsamplePolicy {
    /// Cap every class presence count at `n`.
    MaxSamples(usize),
    /// Keep `ceil(f * count)` samples of each majority class.
    Fraction(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RemovalPreference {
    #[default]
    Random,
    /// Drop the samples whose hash is closest to another sample of the same
    /// class first.
    MostSimilar,
}

/// Removes samples of majority classes until each is at its target count.
///
/// With `MaxSamples(n)` the majority classes are those above `n`. With
/// `Fraction(f)` they are the classes whose count exceeds the mean count of
/// the classes present. Only samples whose labels are all majority classes
/// are candidates, so minority counts never change. Output keeps input order.
pub fn downsample_majority(
    samples: &[Sample],
    policy: DownsamplePolicy,
    num_classes: u8,
    preference: RemovalPreference,
    seed: u64,
) -> Result<Vec<Sample>> {
    let dist = class_distribution(samples, num_classes);
    let counts = dist.counts();
    let targets: BTreeMap<u8, usize> = match policy {
        DownsamplePolicy::MaxSamples(n) => counts
            .iter()
            .filter(|(_, &c)| c > n)
            .map(|(&l, _)| (l, n))
            .collect(),
        DownsamplePolicy::Fraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "keep fraction {f} outside (0, 1]"
                )));
            }
            let present: Vec<usize> = counts.values().copied().filter(|&c| c > 0).collect();
            let mean = present.iter().sum::<usize>() as f64 / present.len().max(1) as f64;
            counts
                .iter()
                .filter(|(_, &c)| c as f64 > mean)
                .map(|(&l, &c)| (l, (f * c as f64).ceil() as usize))
                .filter(|(l, t)| *t < counts[l])
                .collect()
        }
    };
    if targets.is_empty() {
        return Ok(samples.to_vec());
    }
    let majority: BTreeSet<u8> = targets.keys().copied().collect();
    let digests = match preference {
        RemovalPreference::MostSimilar => Some(hash_samples(samples)),
        RemovalPreference::Random => None,
    };

    let mut live = vec![true; samples.len()];
    let mut current = counts.clone();
    for (&class, &target) in &targets {
        if current[&class] <= target {
            continue;
        }
        let mut candidates: Vec<usize> = (0..samples.len())
            .filter(|&i| live[i] && samples[i].mask.contains(class))
            .filter(|&i| {
                samples[i]
                    .mask
                    .label_set()
                    .iter()
                    .all(|l| *l == 0 || majority.contains(l))
            })
            .collect();
        match &digests {
            None => {
                let mut rng = seed::rng(seed::derive(seed, &[b"downsample", &[class]]));
                candidates.shuffle(&mut rng);
            }
            Some(d) => {
                let peers: Vec<usize> = (0..samples.len())
                    .filter(|&i| live[i] && samples[i].mask.contains(class))
                    .collect();
                let closeness = |i: usize| {
                    peers
                        .iter()
                        .filter(|&&j| j != i)
                        .map(|&j| hamming(d[i], d[j]))
                        .min()
                        .unwrap_or(u32::MAX)
                };
                candidates.sort_by_key(|&i| (closeness(i), i));
            }
        }
        for i in candidates {
            if current[&class] <= target {
                break;
            }
            live[i] = false;
            for l in samples[i].mask.label_set() {
                if let Some(c) = current.get_mut(&l) {
                    *c -= 1;
                }
            }
        }
        if current[&class] > target {
            log::warn!(
                "class {class}: only {} samples left after removing every pure-majority candidate (target {target})",
                current[&class]
            );
        }
    }
    Ok(samples
        .iter()
        .zip(live)
        .filter(|(_, keep)| *keep)
        .map(|(s, _)| s.clone())
        .collect())
}
