//! Near-duplicate detection between dataset splits.
//!
//! Images are hashed with a 64-bit difference hash: the image is reduced to
//! gray, box-filtered down to 9 columns by 8 rows, and each bit records
//! whether a cell is brighter than its right neighbour. Everything is integer
//! arithmetic so digests are identical across platforms.

use std::fmt;

use rayon::prelude::*;

use crate::data::{luma601, ImageBuffer, Sample};

const HASH_ROWS: usize = 8;
const HASH_COLS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HashDigest(pub u64);

impl HashDigest {
    pub fn bits(self) -> u64 {
        self.0
    }
}

impl fmt::Display for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

pub fn hamming(a: HashDigest, b: HashDigest) -> u32 {
    (a.0 ^ b.0).count_ones()
}

/// Box-filtered 8x9 gray thumbnail. Cells cover `[i*H/8, (i+1)*H/8)` rows and
/// the analogous column range, widened to one pixel when the image is smaller
/// than the thumbnail.
pub fn thumbnail(image: &ImageBuffer) -> [[u32; HASH_COLS]; HASH_ROWS] {
    let (h, w) = (image.height(), image.width());
    let gray: Vec<u8> = if image.channels() == 1 {
        image.data().to_vec()
    } else {
        image.data().chunks_exact(3).map(luma601).collect()
    };
    let span = |i: usize, cells: usize, len: usize| {
        let lo = (i * len / cells).min(len - 1);
        let hi = ((i + 1) * len / cells).max(lo + 1).min(len);
        (lo, hi)
    };
    let mut out = [[0u32; HASH_COLS]; HASH_ROWS];
    for (r, row) in out.iter_mut().enumerate() {
        let (y0, y1) = span(r, HASH_ROWS, h);
        for (c, cell) in row.iter_mut().enumerate() {
            let (x0, x1) = span(c, HASH_COLS, w);
            let mut sum = 0u64;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += u64::from(gray[y * w + x]);
                }
            }
            *cell = (sum / ((y1 - y0) * (x1 - x0)) as u64) as u32;
        }
    }
    out
}

/// Difference hash. Bit 63 is row 0, column 0; bits run row-major.
pub fn hash_image(image: &ImageBuffer) -> HashDigest {
    let t = thumbnail(image);
    let mut bits = 0u64;
    for row in &t {
        for c in 0..HASH_COLS - 1 {
            bits = (bits << 1) | u64::from(row[c] > row[c + 1]);
        }
    }
    HashDigest(bits)
}

pub fn hash_samples(samples: &[Sample]) -> Vec<HashDigest> {
    samples.par_iter().map(|s| hash_image(&s.image)).collect()
}

/// One train sample dropped by [`dedup_filter`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Removal {
    pub id: String,
    /// Closest test sample, or the earlier train sample for intra-train removals.
    pub nearest_id: String,
    pub distance: u32,
}

#[derive(Clone, Debug, Default)]
pub struct DedupOutcome {
    pub kept: Vec<Sample>,
    pub removed: Vec<Removal>,
}

impl DedupOutcome {
    /// Report as CSV with header `id,nearest_test_id,distance`.
    pub fn report_csv(&self) -> String {
        let mut out = String::from("id,nearest_test_id,distance\n");
        for r in &self.removed {
            out.push_str(&format!("{},{},{}\n", r.id, r.nearest_id, r.distance));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DedupOptions {
    pub threshold: u32,
    /// Also drop train samples within `threshold` of an earlier kept train sample.
    pub intra_train: bool,
}

impl Default for DedupOptions {
    fn default() -> Self {
        Self {
            threshold: 7,
            intra_train: false,
        }
    }
}

/// Index and distance of the closest digest in `pool`, first one on ties.
pub fn nearest(digest: HashDigest, pool: &[HashDigest]) -> Option<(usize, u32)> {
    pool.iter()
        .enumerate()
        .map(|(i, &d)| (i, hamming(digest, d)))
        .min_by_key(|&(i, d)| (d, i))
}

/// Decides which train digests to drop. Returns `(train index, matched id
/// index, distance, matched is test)` for every removal, in train order.
pub fn dedup_digests(
    train: &[HashDigest],
    test: &[HashDigest],
    options: DedupOptions,
) -> Vec<(usize, usize, u32, bool)> {
    let cross: Vec<Option<(usize, u32)>> = train
        .par_iter()
        .map(|&d| nearest(d, test).filter(|&(_, dist)| dist <= options.threshold))
        .collect();
    let mut removed = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for (i, hit) in cross.into_iter().enumerate() {
        if let Some((j, dist)) = hit {
            removed.push((i, j, dist, true));
            continue;
        }
        if options.intra_train {
            let kept_digests: Vec<HashDigest> = kept.iter().map(|&k| train[k]).collect();
            if let Some((k, dist)) = nearest(train[i], &kept_digests) {
                if dist <= options.threshold {
                    removed.push((i, kept[k], dist, false));
                    continue;
                }
            }
        }
        kept.push(i);
    }
    removed
}

/// Removes train samples whose hash lies within `threshold` bits of any test
/// sample. The test set is never modified.
pub fn dedup_filter(train: &[Sample], test: &[Sample], options: DedupOptions) -> DedupOutcome {
    let train_digests = hash_samples(train);
    let test_digests = hash_samples(test);
    let hits = dedup_digests(&train_digests, &test_digests, options);
    let mut drop = vec![false; train.len()];
    let mut removed = Vec::with_capacity(hits.len());
    for (i, j, distance, is_test) in hits {
        drop[i] = true;
        let nearest_id = if is_test { &test[j].id } else { &train[j].id };
        removed.push(Removal {
            id: train[i].id.clone(),
            nearest_id: nearest_id.clone(),
            distance,
        });
    }
    let kept = train
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(s, _)| s.clone())
        .collect();
    DedupOutcome { kept, removed }
}
