//! n-way k-shot episode sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeOptions {
    pub n: usize,
    pub k: usize,
    pub queries_per_class: usize,
    /// Whether background (label 0) may be drawn as one of the n classes.
    pub include_background: bool,
}

impl EpisodeOptions {
    pub fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            k,
            queries_per_class: 1,
            include_background: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.queries_per_class == 0 {
            return Err(Error::InvalidArgument(format!(
                "episode needs n, k and queries per class >= 1 (got n={}, k={}, q={})",
                self.n, self.k, self.queries_per_class
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeClass {
    pub class: u8,
    pub support: Vec<String>,
    pub query: Vec<String>,
}

/// `(class, support, query)` samples of one episode class.
pub type ResolvedClass<'a> = (u8, Vec<&'a Sample>, Vec<&'a Sample>);

/// One episode; `classes` is sorted by label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub index: u64,
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub classes: Vec<EpisodeClass>,
}

impl Episode {
    pub fn class_labels(&self) -> Vec<u8> {
        self.classes.iter().map(|c| c.class).collect()
    }

    pub fn support_ids(&self) -> impl Iterator<Item = &str> {
        self.classes
            .iter()
            .flat_map(|c| c.support.iter().map(String::as_str))
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.classes
            .iter()
            .flat_map(|c| c.query.iter().map(String::as_str))
    }

    /// Checks shape, ordering and support/query disjointness.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("episode {}: {m}", self.index)));
        if self.classes.len() != self.n {
            return bad(format!("{} classes, expected {}", self.classes.len(), self.n));
        }
        let labels = self.class_labels();
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return bad("classes must be unique and sorted".into());
        }
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if c.support.len() != self.k || c.query.is_empty() {
                return bad(format!(
                    "class {}: {} support and {} query samples",
                    c.class,
                    c.support.len(),
                    c.query.len()
                ));
            }
            for id in c.support.iter().chain(&c.query) {
                if !seen.insert(id.as_str()) {
                    return bad(format!("sample `{id}` used twice"));
                }
            }
        }
        Ok(())
    }

    /// Looks the episode's ids up in `dataset`.
    pub fn resolve<'a>(&self, dataset: &'a [Sample]) -> Result<Vec<ResolvedClass<'a>>> {
        let by_id: HashMap<&str, &Sample> = dataset.iter().map(|s| (s.id.as_str(), s)).collect();
        let get = |id: &String| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Format(format!("episode references unknown sample `{id}`")))
        };
        self.classes
            .iter()
            .map(|c| {
                let support = c.support.iter().map(get).collect::<Result<Vec<_>>>()?;
                let query = c.query.iter().map(get).collect::<Result<Vec<_>>>()?;
                Ok((c.class, support, query))
            })
            .collect()
    }
}

/// Sample indices per label present in the dataset.
fn class_index(dataset: &[Sample], include_background: bool) -> BTreeMap<u8, Vec<usize>> {
    let mut out: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        for l in s.mask.label_set() {
            if l != 0 || include_background {
                out.entry(l).or_default().push(i);
            }
        }
    }
    out
}

const ASSIGNMENT_ATTEMPTS: usize = 8;

fn assign(
    chosen: &[u8],
    index: &BTreeMap<u8, Vec<usize>>,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Option<BTreeMap<u8, Vec<usize>>> {
    let mut order = chosen.to_vec();
    order.sort_by_key(|c| (index[c].len(), *c));
    let mut used = BTreeSet::new();
    let mut out = BTreeMap::new();
    for c in order {
        let mut pool: Vec<usize> = index[&c]
            .iter()
            .copied()
            .filter(|i| !used.contains(i))
            .collect();
        if pool.len() < per_class {
            return None;
        }
        pool.shuffle(rng);
        pool.truncate(per_class);
        used.extend(pool.iter().copied());
        out.insert(c, pool);
    }
    Some(out)
}

/// Draws `n` classes uniformly from those with at least `k + q` samples, then
/// `k` support and `q` query samples per class, no sample used twice.
pub fn sample_episode(dataset: &[Sample], options: &EpisodeOptions, seed: u64) -> Result<Episode> {
    options.validate()?;
    let per_class = options.k + options.queries_per_class;
    let index = class_index(dataset, options.include_background);
    let mut eligible: Vec<u8> = index
        .iter()
        .filter(|(_, v)| v.len() >= per_class)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < options.n {
        if let Some((&class, v)) = index.iter().find(|(_, v)| v.len() < per_class) {
            return Err(Error::InsufficientSamples {
                class,
                needed: per_class,
                available: v.len(),
            });
        }
        return Err(Error::NotEnoughClasses {
            requested: options.n,
            available: eligible.len(),
        });
    }
    let mut rng = seed::rng(seed);
    eligible.shuffle(&mut rng);
    let mut chosen = eligible[..options.n].to_vec();
    chosen.sort_unstable();

    let picks = (0..ASSIGNMENT_ATTEMPTS)
        .find_map(|_| assign(&chosen, &index, per_class, &mut rng))
        .ok_or_else(|| Error::OverlappingClasses(chosen.clone()))?;
    let id = |i: &usize| dataset[*i].id.clone();
    let classes = picks
        .into_iter()
        .map(|(class, idx)| EpisodeClass {
            class,
            support: idx[..options.k].iter().map(id).collect(),
            query: idx[options.k..].iter().map(id).collect(),
        })
        .collect();
    Ok(Episode {
        index: 0,
        seed,
        n: options.n,
        k: options.k,
        classes,
    })
}

/// `num_episodes` episodes, episode `i` drawn with `derive_index(master, i)`.
pub fn episode_stream<'a>(
    dataset: &'a [Sample],
    options: EpisodeOptions,
    num_episodes: u64,
    master_seed: u64,
) -> impl Iterator<Item = Result<Episode>> + 'a {
    (0..num_episodes).map(move |i| {
        let mut e = sample_episode(dataset, &options, seed::derive_index(master_seed, i))?;
        e.index = i;
        Ok(e)
    })
}

/// Episode manifest file: `{"episodes": [...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeManifest {
    pub episodes: Vec<Episode>,
}

impl EpisodeManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        for e in &m.episodes {
            e.validate()?;
        }
        Ok(m)
    }
}
