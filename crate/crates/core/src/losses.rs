//! Segmentation losses over per-pixel class probabilities.
//!
//! All reductions run in row-major pixel order, class-minor, so results are
//! bit-stable.

use serde::{Deserialize, Serialize};

use crate::data::MaskBuffer;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;
/// Smoothing added to the numerator and denominator of soft dice.
pub const DICE_EPS: f64 = 1e-6;
/// Weights of the final output and three auxiliary decoder levels.
pub const DEEP_SUPERVISION_WEIGHTS: [f64; 4] = [1.0, 0.4, 0.3, 0.2];

/// Class probabilities, pixel-major: entry `(p, c)` lives at `p * classes + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::InvalidArgument("empty probability map".into()));
        }
        if values.len() != height * width * classes {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width}x{classes} map",
                values.len()
            )));
        }
        for (p, px) in values.chunks_exact(classes).enumerate() {
            if px.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "pixel {p}: probability outside [0, 1]"
                )));
            }
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "pixel {p}: probabilities sum to {sum}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            values,
        })
    }

    /// Softmax over each pixel's logits.
    pub fn from_logits(height: usize, width: usize, classes: usize, logits: &[f64]) -> Result<Self> {
        if classes == 0 || logits.len() != height * width * classes {
            return Err(Error::DimensionMismatch("logit count".into()));
        }
        let mut values = Vec::with_capacity(logits.len());
        for px in logits.chunks_exact(classes) {
            let m = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = px.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            values.extend(e.iter().map(|v| v / s));
        }
        Self::new(height, width, classes, values)
    }

    pub fn one_hot(mask: &MaskBuffer, classes: usize) -> Result<Self> {
        let mut values = vec![0.0; mask.labels().len() * classes];
        for (p, &l) in mask.labels().iter().enumerate() {
            if usize::from(l) >= classes {
                return Err(Error::LabelOutOfRange {
                    id: "one-hot".into(),
                    label: l,
                    max: (classes - 1) as u8,
                });
            }
            values[p * classes + usize::from(l)] = 1.0;
        }
        Self::new(mask.height(), mask.width(), classes, values)
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Result<Self> {
        Self::new(
            height,
            width,
            classes,
            vec![1.0 / classes as f64; height * width * classes],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, pixel: usize, class: usize) -> f64 {
        self.values[pixel * self.classes + class]
    }

    /// Highest-probability class per pixel; ties go to the lower label.
    pub fn argmax(&self) -> MaskBuffer {
        let labels = self
            .values
            .chunks_exact(self.classes)
            .map(|px| {
                let mut best = 0;
                for (c, v) in px.iter().enumerate() {
                    if *v > px[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        MaskBuffer::new(self.height, self.width, labels).expect("shape")
    }

    fn check(&self, gt: &MaskBuffer) -> Result<()> {
        if (gt.height(), gt.width()) != (self.height, self.width) {
            return Err(Error::DimensionMismatch(format!(
                "probabilities are {}x{}, mask is {}x{}",
                self.height,
                self.width,
                gt.height(),
                gt.width()
            )));
        }
        let max = gt.max_label();
        if usize::from(max) >= self.classes {
            return Err(Error::LabelOutOfRange {
                id: "loss".into(),
                label: max,
                max: (self.classes - 1) as u8,
            });
        }
        Ok(())
    }
}

/// Loss functions on flat slices, with analytic gradients with respect to
/// every probability entry. `probs` is pixel-major with `classes` entries per
/// pixel, `labels` one class index per pixel. No validation is done here.
pub mod raw {
    use super::{DICE_EPS, LOG_CLAMP};

    pub fn cross_entropy(probs: &[f64], labels: &[u8], classes: usize) -> f64 {
        let s: f64 = labels
            .iter()
            .enumerate()
            .map(|(p, &l)| -probs[p * classes + usize::from(l)].max(LOG_CLAMP).ln())
            .sum();
        s / labels.len() as f64
    }

    pub fn cross_entropy_grad(probs: &[f64], labels: &[u8], classes: usize) -> Vec<f64> {
        let n = labels.len() as f64;
        let mut g = vec![0.0; probs.len()];
        for (p, &l) in labels.iter().enumerate() {
            let i = p * classes + usize::from(l);
            if probs[i] > LOG_CLAMP {
                g[i] = -1.0 / (n * probs[i]);
            }
        }
        g
    }

    /// Per-class `(Σ p·y, Σ p + Σ y)`.
    fn dice_terms(probs: &[f64], labels: &[u8], classes: usize) -> Vec<(f64, f64)> {
        let mut t = vec![(0.0, 0.0); classes];
        for (p, &l) in labels.iter().enumerate() {
            for (c, tc) in t.iter_mut().enumerate() {
                let v = probs[p * classes + c];
                let y = f64::from(usize::from(l) == c);
                tc.0 += v * y;
                tc.1 += v + y;
            }
        }
        t
    }

    /// Mean of `1 - (2I + ε)/(S + ε)` over classes with `S > 0`.
    pub fn dice(probs: &[f64], labels: &[u8], classes: usize) -> f64 {
        let terms: Vec<(f64, f64)> = dice_terms(probs, labels, classes)
            .into_iter()
            .filter(|t| t.1 > 0.0)
            .collect();
        let s: f64 = terms
            .iter()
            .map(|(i, s)| 1.0 - (2.0 * i + DICE_EPS) / (s + DICE_EPS))
            .sum();
        s / terms.len() as f64
    }

    pub fn dice_grad(probs: &[f64], labels: &[u8], classes: usize) -> Vec<f64> {
        let terms = dice_terms(probs, labels, classes);
        let k = terms.iter().filter(|t| t.1 > 0.0).count() as f64;
        let mut g = vec![0.0; probs.len()];
        for (p, &l) in labels.iter().enumerate() {
            for (c, &(i, s)) in terms.iter().enumerate() {
                if s > 0.0 {
                    let y = f64::from(usize::from(l) == c);
                    let d = s + DICE_EPS;
                    g[p * classes + c] = -(2.0 * y * d - (2.0 * i + DICE_EPS)) / (d * d * k);
                }
            }
        }
        g
    }

    /// One-vs-rest focal loss, mean over pixels then over classes.
    pub fn focal(probs: &[f64], labels: &[u8], classes: usize, alpha: f64, gamma: f64) -> f64 {
        let n = labels.len() as f64;
        let mut total = 0.0;
        for c in 0..classes {
            let mut s = 0.0;
            for (p, &l) in labels.iter().enumerate() {
                let v = probs[p * classes + c];
                let pt = if usize::from(l) == c { v } else { 1.0 - v };
                s += -alpha * (1.0 - pt).powf(gamma) * pt.max(LOG_CLAMP).ln();
            }
            total += s / n;
        }
        total / classes as f64
    }
}

pub fn cross_entropy(probs: &ProbabilityMap, gt: &MaskBuffer) -> Result<f64> {
    probs.check(gt)?;
    Ok(raw::cross_entropy(&probs.values, gt.labels(), probs.classes))
}

/// Soft dice loss averaged over the classes present in the prediction or the
/// ground truth.
pub fn dice_loss(probs: &ProbabilityMap, gt: &MaskBuffer) -> Result<f64> {
    probs.check(gt)?;
    Ok(raw::dice(&probs.values, gt.labels(), probs.classes))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 2.0,
        }
    }
}

pub fn focal_loss(probs: &ProbabilityMap, gt: &MaskBuffer, alpha: f64, gamma: f64) -> Result<f64> {
    probs.check(gt)?;
    if !(alpha >= 0.0 && gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "focal alpha {alpha} and gamma {gamma} must be >= 0"
        )));
    }
    Ok(raw::focal(&probs.values, gt.labels(), probs.classes, alpha, gamma))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
    pub focal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 0.5,
            dice: 0.3,
            focal: 0.2,
        }
    }
}

impl LossWeights {
    pub fn combine(&self, ce: f64, dice: f64, focal: f64) -> f64 {
        self.ce * ce + self.dice * dice + self.focal * focal
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dice: f64,
    pub focal: f64,
    pub total: f64,
}

pub fn combined_loss_with(
    probs: &ProbabilityMap,
    gt: &MaskBuffer,
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(probs, gt)?;
    let dice = dice_loss(probs, gt)?;
    let focal = focal_loss(probs, gt, focal.alpha, focal.gamma)?;
    Ok(LossBreakdown {
        ce,
        dice,
        focal,
        total: weights.combine(ce, dice, focal),
    })
}

/// `0.5·CE + 0.3·dice + 0.2·focal` with focal α = 1, γ = 2.
pub fn combined_loss(probs: &ProbabilityMap, gt: &MaskBuffer) -> Result<f64> {
    Ok(combined_loss_with(probs, gt, &LossWeights::default(), &FocalParams::default())?.total)
}

/// `Σ β_d·L_d` with the first entry the final output. Fewer than four levels
/// use the leading weights.
pub fn deep_supervision_combine(level_losses: &[f64]) -> Result<f64> {
    if level_losses.len() > DEEP_SUPERVISION_WEIGHTS.len() {
        return Err(Error::InvalidArgument(format!(
            "{} supervision levels, at most {} supported",
            level_losses.len(),
            DEEP_SUPERVISION_WEIGHTS.len()
        )));
    }
    Ok(level_losses
        .iter()
        .zip(DEEP_SUPERVISION_WEIGHTS)
        .map(|(l, b)| l * b)
        .sum())
}
