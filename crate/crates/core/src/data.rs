//! Core data model: image and mask buffers, samples, class accounting and
//! class importance weights.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 8-bit image with 1 or 3 interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "pixel buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// One channel as an `f64` plane in the 0..255 range.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .map(|&v| f64::from(v))
            .collect()
    }

    /// Returns a copy with `channels` channels; gray is replicated, color is
    /// reduced with integer Rec.601 luma.
    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, 3) => Self::new(
                self.height,
                self.width,
                3,
                self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            ),
            (3, 1) => Self::new(
                self.height,
                self.width,
                1,
                self.data.chunks_exact(3).map(luma601).collect(),
            ),
            _ => Err(Error::InvalidArgument(format!(
                "unsupported channel conversion {} -> {}",
                self.channels, channels
            ))),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::CropTooLarge {
                crop_h: top + height,
                crop_w: left + width,
                src_h: self.height,
                src_w: self.width,
            });
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Self::new(height, width, self.channels, data)
    }
}

/// Integer Rec.601 luma of an RGB triple, rounded to nearest.
#[inline]
pub fn luma601(rgb: &[u8]) -> u8 {
    let sum = 299 * u32::from(rgb[0]) + 587 * u32::from(rgb[1]) + 114 * u32::from(rgb[2]);
    ((sum + 500) / 1000) as u8
}

/// Row-major label mask. Label 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskBuffer {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl MaskBuffer {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "mask buffer has {} labels, expected {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn label_set(&self) -> BTreeSet<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn contains(&self, label: u8) -> bool {
        self.labels.contains(&label)
    }

    /// True when every pixel is background.
    pub fn is_defect_free(&self) -> bool {
        self.labels.iter().all(|&l| l == 0)
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::CropTooLarge {
                crop_h: top + height,
                crop_w: left + width,
                src_h: self.height,
                src_w: self.width,
            });
        }
        let mut labels = Vec::with_capacity(height * width);
        for y in top..top + height {
            let start = y * self.width + left;
            labels.extend_from_slice(&self.labels[start..start + width]);
        }
        Self::new(height, width, labels)
    }

    /// Nearest-neighbour resize, sampling at pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = nearest_index(y, height, self.height);
            for x in 0..width {
                let sx = nearest_index(x, width, self.width);
                labels.push(self.get(sy, sx));
            }
        }
        Self::new(height, width, labels)
    }
}

/// Source index whose pixel centre is nearest to the centre of `dst` when a
/// `dst_len` axis is stretched over `src_len` pixels.
#[inline]
pub(crate) fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    // floor((dst + 0.5) * src / dst_len) in integer arithmetic
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// An image paired with its label mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: ImageBuffer,
    pub mask: MaskBuffer,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: ImageBuffer, mask: MaskBuffer) -> Result<Self> {
        let id = id.into();
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::DimensionMismatch(format!(
                "sample `{id}`: image {}x{} vs mask {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self { id, image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        Sample::new(
            self.id.clone(),
            self.image.crop(top, left, height, width)?,
            self.mask.crop(top, left, height, width)?,
        )
    }

    pub fn check_labels(&self, num_classes: u8) -> Result<()> {
        let max = self.mask.max_label();
        if max > num_classes {
            return Err(Error::LabelOutOfRange {
                id: self.id.clone(),
                label: max,
                max: num_classes,
            });
        }
        Ok(())
    }
}

pub type Dataset = Vec<Sample>;

/// Per-label sample presence counts for labels `1..=num_classes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    counts: BTreeMap<u8, usize>,
}

impl ClassDistribution {
    pub fn new(num_classes: u8) -> Self {
        Self {
            counts: (1..=num_classes).map(|c| (c, 0)).collect(),
        }
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (u8, usize)>) -> Self {
        Self {
            counts: counts.into_iter().collect(),
        }
    }

    /// Adds one presence for every nonzero label in `mask`. Labels beyond the
    /// tracked range extend the table.
    pub fn add_mask(&mut self, mask: &MaskBuffer) {
        for label in mask.label_set() {
            if label != 0 {
                *self.counts.entry(label).or_insert(0) += 1;
            }
        }
    }

    pub fn count(&self, label: u8) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<u8, usize> {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Share of `label` in the summed presence counts, in percent.
    pub fn proportion_percent(&self, label: u8) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            100.0 * self.count(label) as f64 / total as f64
        }
    }
}

/// Counts, for every label `1..=num_classes`, how many samples contain at
/// least one pixel of that label.
pub fn class_distribution(samples: &[Sample], num_classes: u8) -> ClassDistribution {
    let mut dist = ClassDistribution::new(num_classes);
    for s in samples {
        dist.add_mask(&s.mask);
    }
    dist
}

/// Class importance weights used by the weighted IoU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiwTable {
    weights: BTreeMap<u8, f64>,
    #[serde(default)]
    names: BTreeMap<u8, String>,
}

impl CiwTable {
    /// The culvert/sewer importance weights for labels 1..=8.
    pub fn culvert_default() -> Self {
        let rows: [(u8, &str, f64); 8] = [
            (1, "Cracks", 1.0),
            (2, "Holes", 1.0),
            (3, "Roots", 1.0),
            (4, "Deformation", 0.1622),
            (5, "Fracture", 0.7100),
            (6, "Erosion", 0.3518),
            (7, "Joint Problems", 0.6419),
            (8, "Loose Gasket", 0.5419),
        ];
        Self {
            weights: rows.iter().map(|&(l, _, w)| (l, w)).collect(),
            names: rows.iter().map(|&(l, n, _)| (l, n.to_string())).collect(),
        }
    }

    /// Every given label weighted 1.0.
    pub fn uniform(labels: impl IntoIterator<Item = u8>) -> Self {
        Self {
            weights: labels.into_iter().map(|l| (l, 1.0)).collect(),
            names: BTreeMap::new(),
        }
    }

    /// Builds a table without normalizing. Weights must be positive.
    pub fn from_weights(weights: BTreeMap<u8, f64>) -> Result<Self> {
        for (&label, &weight) in &weights {
            if !(weight > 0.0) || !weight.is_finite() {
                return Err(Error::NonPositiveWeight { label, weight });
            }
        }
        Ok(Self {
            weights,
            names: BTreeMap::new(),
        })
    }

    pub fn weight(&self, label: u8) -> f64 {
        self.weights.get(&label).copied().unwrap_or(0.0)
    }

    pub fn weights(&self) -> &BTreeMap<u8, f64> {
        &self.weights
    }

    pub fn name(&self, label: u8) -> Option<&str> {
        self.names.get(&label).map(String::as_str)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|(&l, &w)| (l, w * factor)).collect(),
            names: self.names.clone(),
        }
    }

    /// Parses a CIW config:
    /// `{"classes": [{"label": 1, "name": "Cracks", "weight": 1.0}, ...]}`.
    /// Weights are normalized by the largest one.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            label: u8,
            #[serde(default)]
            name: Option<String>,
            weight: f64,
        }
        #[derive(Deserialize)]
        struct Config {
            classes: Vec<Row>,
        }
        let cfg: Config = serde_json::from_str(text)?;
        if cfg.classes.is_empty() {
            return Err(Error::Format("CIW config lists no classes".into()));
        }
        let mut raw = BTreeMap::new();
        let mut names = BTreeMap::new();
        for row in cfg.classes {
            if raw.insert(row.label, row.weight).is_some() {
                return Err(Error::Format(format!("label {} listed twice", row.label)));
            }
            if let Some(n) = row.name {
                names.insert(row.label, n);
            }
        }
        let mut table = normalize_ciw(&raw)?;
        table.names = names;
        Ok(table)
    }
}

/// Divides every weight by the largest one so the maximum becomes 1.0.
pub fn normalize_ciw(raw: &BTreeMap<u8, f64>) -> Result<CiwTable> {
    let table = CiwTable::from_weights(raw.clone())?;
    let max = raw.values().copied().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return Err(Error::InvalidArgument("no class weights given".into()));
    }
    let weights: BTreeMap<u8, f64> = table.weights.iter().map(|(&l, &w)| (l, w / max)).collect();
    if let Some((&label, &weight)) = weights.iter().find(|(_, &w)| w == 0.0) {
        return Err(Error::NonPositiveWeight { label, weight });
    }
    Ok(CiwTable {
        weights,
        names: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with_labels(id: &str, labels: &[u8]) -> Sample {
        let mut m = vec![0u8; 16];
        for (i, &l) in labels.iter().enumerate() {
            m[i] = l;
        }
        Sample::new(
            id,
            ImageBuffer::filled(4, 4, 1, 0).unwrap(),
            MaskBuffer::new(4, 4, m).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn image_invariants() {
        assert!(ImageBuffer::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(ImageBuffer::new(2, 2, 3, vec![0; 11]).is_err());
        assert!(ImageBuffer::new(0, 2, 1, vec![]).is_err());
        let img = ImageBuffer::new(1, 2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(img.pixel(0, 1), &[4, 5, 6]);
        assert_eq!(img.plane(1), vec![2.0, 5.0]);
    }

    #[test]
    fn sample_rejects_mismatched_dims() {
        let img = ImageBuffer::filled(4, 4, 1, 0).unwrap();
        let mask = MaskBuffer::zeros(4, 5).unwrap();
        assert!(matches!(
            Sample::new("x", img, mask),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn distribution_counts_presence() {
        let ds = vec![
            sample_with_labels("a", &[1]),
            sample_with_labels("b", &[1, 2, 2, 2]),
            sample_with_labels("c", &[2]),
        ];
        let d = class_distribution(&ds, 8);
        assert_eq!(d.count(1), 2);
        assert_eq!(d.count(2), 2);
        assert_eq!(d.count(3), 0);
        assert_eq!(d.total(), 4);
    }

    #[test]
    fn distribution_ignores_background() {
        let d = class_distribution(&[sample_with_labels("a", &[])], 8);
        assert!(d.counts().values().all(|&c| c == 0));
    }

    #[test]
    fn distribution_proportion_matches_published_table() {
        let d = ClassDistribution::from_counts([
            (1, 2981),
            (2, 1171),
            (3, 406),
            (4, 385),
            (5, 3235),
            (6, 78),
            (7, 3991),
            (8, 105),
        ]);
        assert_eq!(d.total(), 12_352);
        assert_eq!(format!("{:.2}", d.proportion_percent(1)), "24.13");
        assert_eq!(format!("{:.2}", d.proportion_percent(8)), "0.85");
    }

    #[test]
    fn normalize_divides_by_max() {
        let t = normalize_ciw(&BTreeMap::from([(1, 2.0), (2, 1.0)])).unwrap();
        assert_eq!(t.weight(1), 1.0);
        assert_eq!(t.weight(2), 0.5);
        let eq = normalize_ciw(&BTreeMap::from([(1, 3.0), (2, 3.0), (3, 3.0)])).unwrap();
        assert!(eq.weights().values().all(|&w| w == 1.0));
        assert!(matches!(
            normalize_ciw(&BTreeMap::from([(1, 0.0)])),
            Err(Error::NonPositiveWeight { label: 1, .. })
        ));
    }

    #[test]
    fn normalize_rejects_weights_that_underflow() {
        let raw = BTreeMap::from([(1, f64::MAX), (2, 5e-324)]);
        assert!(matches!(
            normalize_ciw(&raw),
            Err(Error::NonPositiveWeight { label: 2, .. })
        ));
    }

    #[test]
    fn published_weights_are_already_normalized() {
        let t = CiwTable::culvert_default();
        let n = normalize_ciw(t.weights()).unwrap();
        assert_eq!(n.weights(), t.weights());
        assert_eq!(t.name(7), Some("Joint Problems"));
    }

    #[test]
    fn ciw_json_round() {
        let t = CiwTable::from_json(
            r#"{"classes":[{"label":1,"name":"A","weight":4},{"label":2,"weight":1}]}"#,
        )
        .unwrap();
        assert_eq!(t.weight(1), 1.0);
        assert_eq!(t.weight(2), 0.25);
        assert_eq!(t.name(1), Some("A"));
        assert!(CiwTable::from_json(r#"{"classes":[]}"#).is_err());
        assert!(CiwTable::from_json(r#"{"classes":[{"label":1,"weight":-1}]}"#).is_err());
    }

    #[test]
    fn nearest_resize_preserves_labels() {
        let m = MaskBuffer::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let up = m.resize_nearest(4, 4).unwrap();
        assert_eq!(up.get(0, 0), 1);
        assert_eq!(up.get(0, 3), 2);
        assert_eq!(up.get(3, 0), 3);
        assert_eq!(up.get(3, 3), 4);
        let down = up.resize_nearest(2, 2).unwrap();
        assert_eq!(down, m);
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_idempotent(ws in proptest::collection::btree_map(0u8..9, 0.01f64..100.0, 1..9)) {
            let once = normalize_ciw(&ws).unwrap();
            let twice = normalize_ciw(once.weights()).unwrap();
            proptest::prop_assert_eq!(once.weights(), twice.weights());
            let max = once.weights().values().copied().fold(0.0, f64::max);
            proptest::prop_assert_eq!(max, 1.0);
        }

        #[test]
        fn distribution_is_order_invariant(labels in proptest::collection::vec(proptest::collection::vec(0u8..4, 0..4), 1..8), rot in 0usize..8) {
            let ds: Vec<Sample> = labels.iter().enumerate().map(|(i, l)| sample_with_labels(&i.to_string(), l)).collect();
            let mut rotated = ds.clone();
            let r = rot % rotated.len();
            rotated.rotate_left(r);
            rotated.reverse();
            proptest::prop_assert_eq!(class_distribution(&ds, 3), class_distribution(&rotated, 3));
        }
    }
}
