//! Prototype prediction head over externally computed feature maps.
//!
//! Prototypes are masked averages of support features, L2-normalized. A
//! query pixel's class probabilities are `softmax(α · cos(F, p_c))` over the
//! prototypes.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::data::MaskBuffer;
use crate::error::{Error, Result};
use crate::losses::{ProbabilityMap, LOG_CLAMP};

/// Scale of the cosine similarities inside the softmax.
pub const DEFAULT_ALPHA: f64 = 20.0;

const HEADER_LEN: usize = 16;
const FORMAT_VERSION: u32 = 1;

/// `height x width` grid of `dim`-dimensional vectors, pixel-interleaved and
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map dimensions must be positive, got {height}x{width}x{dim}"
            )));
        }
        if values.len() != height * width * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width}x{dim} feature map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature values must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    /// Every pixel set to `f(y, x)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f32>,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * dim);
        for y in 0..height {
            for x in 0..width {
                let v = f(y, x);
                if v.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "pixel ({y}, {x}) has {} components, expected {dim}",
                        v.len()
                    )));
                }
                values.extend(v);
            }
        }
        Self::new(height, width, dim, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn vector(&self, pixel: usize) -> &[f32] {
        &self.values[pixel * self.dim..(pixel + 1) * self.dim]
    }

    /// Same map with every vector multiplied by `factor(pixel)`.
    pub fn scaled(&self, factor: impl Fn(usize) -> f32) -> Self {
        let mut out = self.clone();
        for (p, px) in out.values.chunks_exact_mut(self.dim).enumerate() {
            let f = factor(p);
            px.iter_mut().for_each(|v| *v *= f);
        }
        out
    }

    /// Header `H, W, D, version` as little-endian u32, then the values as
    /// little-endian f32.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        for v in [self.height, self.width, self.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "feature file has {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4"));
        let (h, w, d, version) = (word(0), word(1), word(2), word(3));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported feature format version {version}")));
        }
        let count = (h as usize)
            .checked_mul(w as usize)
            .and_then(|n| n.checked_mul(d as usize))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format(format!("feature dimensions {h}x{w}x{d} overflow")))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * 4 {
            return Err(Error::Format(format!(
                "feature body has {} bytes, {h}x{w}x{d} needs {}",
                body.len(),
                count * 4
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
            .collect();
        Self::new(h as usize, w as usize, d as usize, values)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub class: u8,
    /// Unit length.
    pub vector: Vec<f64>,
}

/// Mask at feature resolution (nearest-neighbour) if the sizes differ.
pub fn align_mask(mask: &MaskBuffer, features: &FeatureMap) -> Result<MaskBuffer> {
    if (mask.height(), mask.width()) == (features.height, features.width) {
        Ok(mask.clone())
    } else {
        mask.resize_nearest(features.height, features.width)
    }
}

/// Mean feature over the pixels of `class` in each shot, averaged over the
/// shots that contain the class, then L2-normalized.
pub fn masked_average_pool(
    features: &[FeatureMap],
    masks: &[MaskBuffer],
    class: u8,
) -> Result<Prototype> {
    if features.len() != masks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature maps for {} masks",
            features.len(),
            masks.len()
        )));
    }
    let dim = features.first().ok_or(Error::EmptyPrototype(class))?.dim;
    let mut acc = vec![0.0; dim];
    let mut shots = 0usize;
    for (f, m) in features.iter().zip(masks) {
        if f.dim != dim {
            return Err(Error::DimensionMismatch(format!(
                "feature dims {} and {dim} differ",
                f.dim
            )));
        }
        let m = align_mask(m, f)?;
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for (p, &l) in m.labels().iter().enumerate() {
            if l == class {
                for (s, v) in sum.iter_mut().zip(f.vector(p)) {
                    *s += f64::from(*v);
                }
                count += 1;
            }
        }
        if count > 0 {
            for (a, s) in acc.iter_mut().zip(sum) {
                *a += s / count as f64;
            }
            shots += 1;
        }
    }
    if shots == 0 {
        return Err(Error::EmptyPrototype(class));
    }
    acc.iter_mut().for_each(|a| *a /= shots as f64);
    let n = norm(&acc);
    if n == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "class {class}: mean feature is the zero vector"
        )));
    }
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Prototype {
        class,
        vector: acc,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    /// Channel `i` belongs to `classes[i]`.
    pub probabilities: ProbabilityMap,
    pub classes: Vec<u8>,
    /// Class label of the most similar prototype per pixel.
    pub mask: MaskBuffer,
    /// Query pixels with a zero feature vector (given uniform probabilities).
    pub zero_pixels: usize,
}

/// Cosine-softmax segmentation of `query` against `prototypes`.
pub fn segment(query: &FeatureMap, prototypes: &[Prototype], alpha: f64) -> Result<Segmentation> {
    if prototypes.is_empty() {
        return Err(Error::InvalidArgument("segment needs at least one prototype".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    if let Some(p) = prototypes.iter().find(|p| p.vector.len() != query.dim) {
        return Err(Error::DimensionMismatch(format!(
            "prototype {} has {} dims, features have {}",
            p.class,
            p.vector.len(),
            query.dim
        )));
    }
    let k = prototypes.len();
    let n = query.height * query.width;
    let rows: Vec<(Vec<f64>, u8, bool)> = (0..n)
        .into_par_iter()
        .map(|p| {
            let f: Vec<f64> = query.vector(p).iter().map(|&v| f64::from(v)).collect();
            let fn_ = norm(&f);
            if fn_ == 0.0 {
                return (vec![1.0 / k as f64; k], prototypes[0].class, true);
            }
            let cos: Vec<f64> = prototypes
                .iter()
                .map(|pr| f.iter().zip(&pr.vector).map(|(a, b)| a * b).sum::<f64>() / fn_)
                .collect();
            let mut best = 0;
            for (i, c) in cos.iter().enumerate() {
                if *c > cos[best] {
                    best = i;
                }
            }
            let m = cos[best];
            let e: Vec<f64> = cos.iter().map(|c| (alpha * (c - m)).exp()).collect();
            let s: f64 = e.iter().sum();
            (e.iter().map(|v| v / s).collect(), prototypes[best].class, false)
        })
        .collect();
    let zero_pixels = rows.iter().filter(|r| r.2).count();
    if zero_pixels > 0 {
        log::warn!("{zero_pixels} query pixels have zero-norm features; uniform probabilities used");
    }
    let mut values = Vec::with_capacity(n * k);
    let mut labels = Vec::with_capacity(n);
    for (probs, label, _) in rows {
        values.extend(probs);
        labels.push(label);
    }
    Ok(Segmentation {
        probabilities: ProbabilityMap::new(query.height, query.width, k, values)?,
        classes: prototypes.iter().map(|p| p.class).collect(),
        mask: MaskBuffer::new(query.height, query.width, labels)?,
        zero_pixels,
    })
}

/// Background plus the episode classes, sorted and deduplicated.
pub fn prototype_classes(episode_classes: &[u8]) -> Vec<u8> {
    let set: BTreeSet<u8> = std::iter::once(0).chain(episode_classes.iter().copied()).collect();
    set.into_iter().collect()
}

/// Mask aligned to the features with labels outside `classes` set to 0.
fn restrict(mask: &MaskBuffer, features: &FeatureMap, classes: &[u8]) -> Result<MaskBuffer> {
    let mut m = align_mask(mask, features)?;
    for l in m.labels_mut() {
        if !classes.contains(l) {
            *l = 0;
        }
    }
    Ok(m)
}

/// Sum of `-ln M_c` over pixels whose ground truth has a prototype, and the
/// number of such pixels.
fn ce_sum(seg: &Segmentation, gt: &MaskBuffer) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for (p, l) in gt.labels().iter().enumerate() {
        if let Some(i) = seg.classes.iter().position(|c| c == l) {
            sum -= seg.probabilities.get(p, i).max(LOG_CLAMP).ln();
            count += 1;
        }
    }
    (sum, count)
}

fn build_prototypes(
    classes: &[u8],
    features: &[FeatureMap],
    masks: &[MaskBuffer],
    skipped: &mut Vec<u8>,
) -> Result<Vec<Prototype>> {
    let mut out = Vec::new();
    for &c in classes {
        match masked_average_pool(features, masks, c) {
            Ok(p) => out.push(p),
            Err(Error::EmptyPrototype(_)) => skipped.push(c),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BidirectionalOutcome {
    pub classes: Vec<u8>,
    pub query_predictions: Vec<MaskBuffer>,
    pub support_predictions: Vec<MaskBuffer>,
    pub l_query: f64,
    pub l_support: f64,
    pub l_total: f64,
    /// Classes without a support prototype in the forward pass.
    pub skipped_forward: Vec<u8>,
    /// Classes absent from the predicted query masks in the reverse pass.
    pub skipped_reverse: Vec<u8>,
}

/// One support → query → support round.
///
/// Forward: prototypes from the support shots segment the queries, scored
/// against the query ground truth. Reverse: prototypes from the query
/// features under the predicted query masks segment the support images,
/// scored against the support ground truth. Both losses are mean pixel
/// cross-entropies; pixels whose class has no prototype are left out.
pub fn bidirectional_round(
    support: &[(FeatureMap, MaskBuffer)],
    query: &[(FeatureMap, MaskBuffer)],
    episode_classes: &[u8],
    alpha: f64,
) -> Result<BidirectionalOutcome> {
    if support.is_empty() || query.is_empty() {
        return Err(Error::InvalidArgument("episode needs support and query maps".into()));
    }
    let classes = prototype_classes(episode_classes);
    let s_feat: Vec<FeatureMap> = support.iter().map(|(f, _)| f.clone()).collect();
    let s_gt = support
        .iter()
        .map(|(f, m)| restrict(m, f, &classes))
        .collect::<Result<Vec<_>>>()?;
    let q_feat: Vec<FeatureMap> = query.iter().map(|(f, _)| f.clone()).collect();
    let q_gt = query
        .iter()
        .map(|(f, m)| restrict(m, f, &classes))
        .collect::<Result<Vec<_>>>()?;

    let mut skipped_forward = Vec::new();
    let forward = build_prototypes(&classes, &s_feat, &s_gt, &mut skipped_forward)?;
    if forward.is_empty() {
        return Err(Error::EmptyPrototype(classes[0]));
    }
    if !skipped_forward.is_empty() {
        log::warn!("forward pass: no support pixels for classes {skipped_forward:?}");
    }
    let (mut sum, mut count) = (0.0, 0usize);
    let mut query_predictions = Vec::with_capacity(query.len());
    for (f, gt) in q_feat.iter().zip(&q_gt) {
        let seg = segment(f, &forward, alpha)?;
        let (s, c) = ce_sum(&seg, gt);
        sum += s;
        count += c;
        query_predictions.push(seg.mask);
    }
    let l_query = if count > 0 { sum / count as f64 } else { 0.0 };

    let mut skipped_reverse = Vec::new();
    let reverse = build_prototypes(&classes, &q_feat, &query_predictions, &mut skipped_reverse)?;
    if !skipped_reverse.is_empty() {
        log::warn!("reverse pass: classes {skipped_reverse:?} vanished from query predictions");
    }
    let (mut sum, mut count) = (0.0, 0usize);
    let mut support_predictions = Vec::with_capacity(support.len());
    for (f, gt) in s_feat.iter().zip(&s_gt) {
        let seg = segment(f, &reverse, alpha)?;
        let (s, c) = ce_sum(&seg, gt);
        sum += s;
        count += c;
        support_predictions.push(seg.mask);
    }
    let l_support = if count > 0 { sum / count as f64 } else { 0.0 };

    Ok(BidirectionalOutcome {
        classes,
        query_predictions,
        support_predictions,
        l_query,
        l_support,
        l_total: l_query + l_support,
        skipped_forward,
        skipped_reverse,
    })
}
