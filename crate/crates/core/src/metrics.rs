//! Pixel confusion accounting and the segmentation metric suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{CiwTable, MaskBuffer};
use crate::error::{Error, Result};

/// Pixel counts for one class. `tn` is every evaluated pixel that is neither
/// a true positive, a false positive nor a false negative for the class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClassConfusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl ClassConfusion {
    /// `|Y ∪ Ŷ|`.
    pub fn union(&self) -> u64 {
        self.tp + self.fp + self.fn_
    }

    /// Present in the ground truth or the prediction.
    pub fn is_evaluable(&self) -> bool {
        self.union() > 0
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp as f64, (self.tp + self.fp) as f64)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp as f64, (self.tp + self.fn_) as f64)
    }

    /// `2TP / (2TP + FP + FN)`, the same value as `2PR / (P + R)`.
    pub fn f1(&self) -> f64 {
        ratio(2.0 * self.tp as f64, (2 * self.tp + self.fp + self.fn_) as f64)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp as f64, self.union() as f64)
    }

    /// Zero when any factor of the denominator is zero.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, fn_, tn) = (
            self.tp as f64,
            self.fp as f64,
            self.fn_ as f64,
            self.tn as f64,
        );
        let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        ratio(tn * tp - fn_ * fp, den)
    }
}

/// Per-class totals for labels `0..=num_classes`, built from a
/// `(num_classes + 1)²` confusion matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionTotals {
    num_classes: u8,
    /// `matrix[gt][pred]`.
    matrix: Vec<u64>,
    pixels: u64,
}

impl ConfusionTotals {
    pub fn new(num_classes: u8) -> Self {
        let k = usize::from(num_classes) + 1;
        Self {
            num_classes,
            matrix: vec![0; k * k],
            pixels: 0,
        }
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn pixels(&self) -> u64 {
        self.pixels
    }

    fn k(&self) -> usize {
        usize::from(self.num_classes) + 1
    }

    /// Pixels with ground truth `gt` predicted as `pred`.
    pub fn cell(&self, gt: u8, pred: u8) -> u64 {
        self.matrix[usize::from(gt) * self.k() + usize::from(pred)]
    }

    pub fn accumulate(&mut self, pred: &MaskBuffer, gt: &MaskBuffer) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::DimensionMismatch(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let k = self.k();
        let max = pred.max_label().max(gt.max_label());
        if max > self.num_classes {
            return Err(Error::LabelOutOfRange {
                id: "confusion".into(),
                label: max,
                max: self.num_classes,
            });
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            self.matrix[usize::from(g) * k + usize::from(p)] += 1;
        }
        self.pixels += pred.labels().len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionTotals) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "cannot merge totals over {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
        self.pixels += other.pixels;
        Ok(())
    }

    pub fn class(&self, c: u8) -> ClassConfusion {
        let k = self.k();
        let c = usize::from(c);
        let tp = self.matrix[c * k + c];
        let gt: u64 = self.matrix[c * k..(c + 1) * k].iter().sum();
        let pred: u64 = (0..k).map(|g| self.matrix[g * k + c]).sum();
        let (fp, fn_) = (pred - tp, gt - tp);
        ClassConfusion {
            tp,
            fp,
            fn_,
            tn: self.pixels - tp - fp - fn_,
        }
    }

    pub fn classes(&self) -> impl Iterator<Item = (u8, ClassConfusion)> + '_ {
        (0..=self.num_classes).map(|c| (c, self.class(c)))
    }

    /// Classes with a nonzero union.
    pub fn evaluable(&self) -> impl Iterator<Item = (u8, ClassConfusion)> + '_ {
        self.classes().filter(|(_, c)| c.is_evaluable())
    }
}

pub fn accumulate_confusion(
    pred: &MaskBuffer,
    gt: &MaskBuffer,
    totals: &mut ConfusionTotals,
) -> Result<()> {
    totals.accumulate(pred, gt)
}

fn per_class(totals: &ConfusionTotals, f: impl Fn(&ClassConfusion) -> f64) -> BTreeMap<u8, f64> {
    totals.evaluable().map(|(l, c)| (l, f(&c))).collect()
}

/// F1 for every class present in the ground truth or the prediction.
pub fn f1_per_class(totals: &ConfusionTotals) -> BTreeMap<u8, f64> {
    per_class(totals, ClassConfusion::f1)
}

pub fn iou_per_class(totals: &ConfusionTotals) -> BTreeMap<u8, f64> {
    per_class(totals, ClassConfusion::iou)
}

pub fn mcc_per_class(totals: &ConfusionTotals) -> BTreeMap<u8, f64> {
    per_class(totals, ClassConfusion::mcc)
}

/// `Σ w_c·|Y_c ∩ Ŷ_c| / Σ w_c·|Y_c ∪ Ŷ_c|` over the labels weighted in `ciw`.
pub fn fwiou(totals: &ConfusionTotals, ciw: &CiwTable) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (label, c) in totals.classes() {
        let w = ciw.weight(label);
        num += w * c.tp as f64;
        den += w * c.union() as f64;
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument(
            "weighted IoU undefined: every weighted union is zero".into(),
        ));
    }
    Ok(num / den)
}

/// Mean recall over the classes present in the ground truth, with the
/// number of classes averaged.
pub fn balanced_accuracy_with_divisor(totals: &ConfusionTotals) -> (f64, usize) {
    let recalls: Vec<f64> = totals
        .classes()
        .filter(|(_, c)| c.tp + c.fn_ > 0)
        .map(|(_, c)| c.recall())
        .collect();
    let k = recalls.len();
    (ratio(recalls.iter().sum(), k as f64), k)
}

pub fn balanced_accuracy(totals: &ConfusionTotals) -> f64 {
    balanced_accuracy_with_divisor(totals).0
}

fn mean<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    ratio(s, n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: u8,
    pub name: Option<String>,
    #[serde(flatten)]
    pub confusion: ClassConfusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub mcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub images: usize,
    pub pixels: u64,
    pub per_class: Vec<ClassMetrics>,
    /// Classes absent from both prediction and ground truth.
    pub excluded: Vec<u8>,
    pub avg_f1_with_bg: f64,
    pub avg_f1_without_bg: f64,
    pub avg_iou_with_bg: f64,
    pub avg_iou_without_bg: f64,
    pub fwiou: f64,
    pub balanced_accuracy: f64,
    pub balanced_accuracy_divisor: usize,
    pub mean_mcc: f64,
}

impl MetricsReport {
    pub fn from_totals(totals: &ConfusionTotals, images: usize, ciw: &CiwTable) -> Result<Self> {
        let per_class: Vec<ClassMetrics> = totals
            .evaluable()
            .map(|(label, c)| ClassMetrics {
                label,
                name: ciw.name(label).map(str::to_owned),
                confusion: c,
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                iou: c.iou(),
                mcc: c.mcc(),
            })
            .collect();
        let excluded: Vec<u8> = totals
            .classes()
            .filter(|(_, c)| !c.is_evaluable())
            .map(|(l, _)| l)
            .collect();
        if !excluded.is_empty() {
            log::info!("classes absent from prediction and ground truth: {excluded:?}");
        }
        let fg = || per_class.iter().filter(|m| m.label != 0);
        let (ba, ba_k) = balanced_accuracy_with_divisor(totals);
        Ok(Self {
            images,
            pixels: totals.pixels(),
            avg_f1_with_bg: mean(per_class.iter().map(|m| &m.f1)),
            avg_f1_without_bg: mean(fg().map(|m| &m.f1)),
            avg_iou_with_bg: mean(per_class.iter().map(|m| &m.iou)),
            avg_iou_without_bg: mean(fg().map(|m| &m.iou)),
            fwiou: fwiou(totals, ciw)?,
            balanced_accuracy: ba,
            balanced_accuracy_divisor: ba_k,
            mean_mcc: mean(per_class.iter().map(|m| &m.mcc)),
            per_class,
            excluded,
        })
    }

    pub fn summary(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("avg_f1_with_bg", self.avg_f1_with_bg),
            ("avg_f1_without_bg", self.avg_f1_without_bg),
            ("avg_iou_with_bg", self.avg_iou_with_bg),
            ("avg_iou_without_bg", self.avg_iou_without_bg),
            ("fwiou", self.fwiou),
            ("balanced_accuracy", self.balanced_accuracy),
            ("mean_mcc", self.mean_mcc),
        ]
    }

    /// `key = value` lines, per-class values keyed `<metric>.<label>`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images = {}", self.images);
        let _ = writeln!(s, "pixels = {}", self.pixels);
        for m in &self.per_class {
            let name = m.name.as_deref().unwrap_or("");
            let _ = writeln!(s, "name.{} = {name}", m.label);
            for (k, v) in [("f1", m.f1), ("iou", m.iou), ("mcc", m.mcc)] {
                let _ = writeln!(s, "{k}.{} = {v:.6}", m.label);
            }
        }
        let excluded: Vec<String> = self.excluded.iter().map(u8::to_string).collect();
        let _ = writeln!(s, "excluded = {}", excluded.join(" "));
        for (k, v) in self.summary() {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        let _ = writeln!(
            s,
            "balanced_accuracy_divisor = {}",
            self.balanced_accuracy_divisor
        );
        s
    }

    /// One row per evaluable class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,name,tp,fp,fn,tn,precision,recall,f1,iou,mcc\n");
        for m in &self.per_class {
            let c = m.confusion;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                m.label,
                m.name.as_deref().unwrap_or(""),
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                m.precision,
                m.recall,
                m.f1,
                m.iou,
                m.mcc
            );
        }
        s
    }
}

/// Accumulates every (prediction, ground truth) pair and builds the report.
pub fn evaluate_dataset(
    preds: &[MaskBuffer],
    gts: &[MaskBuffer],
    num_classes: u8,
    ciw: &CiwTable,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let totals = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| {
            let mut t = ConfusionTotals::new(num_classes);
            t.accumulate(p, g)?;
            Ok::<_, Error>(t)
        })
        .try_reduce(
            || ConfusionTotals::new(num_classes),
            |mut a, b| {
                a.merge(&b)?;
                Ok(a)
            },
        )?;
    MetricsReport::from_totals(&totals, preds.len(), ciw)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn mask(w: usize, labels: &[u8]) -> MaskBuffer {
        MaskBuffer::new(labels.len() / w, w, labels.to_vec()).unwrap()
    }

    fn conf(tp: u64, fp: u64, fn_: u64, tn: u64) -> ClassConfusion {
        ClassConfusion { tp, fp, fn_, tn }
    }

    #[test]
    fn scalar_formulas() {
        let c = conf(6, 2, 4, 0);
        assert_eq!(c.precision(), 0.75);
        assert_eq!(c.recall(), 0.6);
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.iou(), 0.5);
        assert_eq!(conf(10, 0, 0, 5).f1(), 1.0);
        assert_eq!(conf(0, 3, 2, 5).f1(), 0.0);
        assert_eq!(conf(0, 0, 0, 9).mcc(), 0.0);
    }

    #[test]
    fn perfect_and_missed_predictions() {
        let gt = mask(3, &[0, 1, 2, 2, 1, 0]);
        let mut t = ConfusionTotals::new(2);
        t.accumulate(&gt, &gt).unwrap();
        for (_, c) in t.classes() {
            assert_eq!((c.fp, c.fn_), (0, 0));
        }
        assert_eq!(t.class(1).mcc(), 1.0);

        let mut t = ConfusionTotals::new(3);
        t.accumulate(&mask(2, &[0; 6]), &mask(2, &[3; 6])).unwrap();
        assert_eq!((t.class(3).tp, t.class(3).fn_), (0, 6));
    }

    #[test]
    fn swapped_binary_labels_give_minus_one() {
        let gt = mask(4, &[0, 1, 0, 1, 1, 0, 0, 1]);
        let pred = mask(4, &[1, 0, 1, 0, 0, 1, 1, 0]);
        let mut t = ConfusionTotals::new(1);
        t.accumulate(&pred, &gt).unwrap();
        assert_eq!(t.class(1).mcc(), -1.0);
        assert_eq!(t.class(0).mcc(), -1.0);
    }

    #[test]
    fn accumulate_checks_shape_and_labels() {
        let mut t = ConfusionTotals::new(2);
        assert!(t.accumulate(&mask(2, &[0; 4]), &mask(4, &[0; 4])).is_err());
        assert!(t.accumulate(&mask(2, &[3, 0, 0, 0]), &mask(2, &[0; 4])).is_err());
    }

    #[test]
    fn fwiou_two_class_example() {
        // both classes have union 4 and intersection 2
        let gt = mask(4, &[1, 1, 1, 0, 2, 2, 2, 0]);
        let pred = mask(4, &[0, 1, 1, 1, 0, 2, 2, 2]);
        let mut t = ConfusionTotals::new(2);
        t.accumulate(&pred, &gt).unwrap();
        let ciw = CiwTable::from_weights([(1, 1.0), (2, 0.5)].into()).unwrap();
        assert!((fwiou(&t, &ciw).unwrap() - 0.5).abs() < 1e-15);
        assert!(fwiou(&ConfusionTotals::new(2), &ciw).is_err());
    }

    #[test]
    fn balanced_accuracy_cases() {
        let gt = mask(4, &[1, 1, 2, 2]);
        let pred = mask(4, &[1, 1, 1, 1]);
        let mut t = ConfusionTotals::new(2);
        t.accumulate(&pred, &gt).unwrap();
        assert_eq!(balanced_accuracy_with_divisor(&t), (0.5, 2));
        let mut single = ConfusionTotals::new(2);
        single.accumulate(&mask(2, &[1, 0]), &mask(2, &[1, 1])).unwrap();
        assert_eq!(balanced_accuracy(&single), single.class(1).recall());
    }

    #[test]
    fn report_without_background_drops_label_zero() {
        let gt = mask(4, &[0, 0, 1, 1, 0, 1, 1, 1]);
        let pred = mask(4, &[0, 1, 1, 1, 0, 0, 1, 1]);
        let ciw = CiwTable::uniform([0, 1]);
        let r = evaluate_dataset(std::slice::from_ref(&pred), std::slice::from_ref(&gt), 1, &ciw).unwrap();
        let mut t = ConfusionTotals::new(1);
        t.accumulate(&pred, &gt).unwrap();
        let (f0, f1) = (t.class(0).f1(), t.class(1).f1());
        assert!((r.avg_f1_with_bg - (f0 + f1) / 2.0).abs() < 1e-15);
        assert_eq!(r.avg_f1_without_bg, f1);
        assert!(r.to_text().contains("fwiou = "));
        assert!(r.to_csv().starts_with("class,name,tp,fp,fn,tn"));
    }

    #[test]
    fn identical_sets_score_one() {
        let m = mask(4, &[0, 3, 3, 5, 5, 0, 1, 1]);
        let r = evaluate_dataset(std::slice::from_ref(&m), std::slice::from_ref(&m), 8, &CiwTable::culvert_default()).unwrap();
        for (_, v) in r.summary() {
            assert_eq!(v, 1.0);
        }
        assert_eq!(r.excluded, vec![2, 4, 6, 7, 8]);
    }

    proptest! {
        #[test]
        fn merge_equals_concatenation(
            a in proptest::collection::vec(0u8..4, 16),
            b in proptest::collection::vec(0u8..4, 16),
            c in proptest::collection::vec(0u8..4, 16),
            d in proptest::collection::vec(0u8..4, 16),
        ) {
            let mut parts = ConfusionTotals::new(3);
            parts.accumulate(&mask(4, &a), &mask(4, &b)).unwrap();
            let mut other = ConfusionTotals::new(3);
            other.accumulate(&mask(4, &c), &mask(4, &d)).unwrap();
            parts.merge(&other).unwrap();
            let mut whole = ConfusionTotals::new(3);
            let pred: Vec<u8> = a.iter().chain(&c).copied().collect();
            let gt: Vec<u8> = b.iter().chain(&d).copied().collect();
            whole.accumulate(&mask(4, &pred), &mask(4, &gt)).unwrap();
            prop_assert_eq!(parts, whole);
        }

        #[test]
        fn metrics_bounded_and_dice_jaccard(
            pred in proptest::collection::vec(0u8..4, 36),
            gt in proptest::collection::vec(0u8..4, 36),
            scale in 0.1f64..10.0,
        ) {
            let mut t = ConfusionTotals::new(3);
            t.accumulate(&mask(6, &pred), &mask(6, &gt)).unwrap();
            for (_, c) in t.evaluable() {
                prop_assert_eq!(c.tp + c.fp + c.fn_ + c.tn, 36);
                prop_assert!((0.0..=1.0).contains(&c.f1()));
                prop_assert!((0.0..=1.0).contains(&c.iou()));
                prop_assert!((-1.0..=1.0).contains(&c.mcc()));
                prop_assert!((c.f1() - 2.0 * c.iou() / (1.0 + c.iou())).abs() < 1e-12);
            }
            let ciw = CiwTable::culvert_default();
            if let Ok(v) = fwiou(&t, &ciw) {
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!((fwiou(&t, &ciw.scaled(scale)).unwrap() - v).abs() < 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&balanced_accuracy(&t)));
        }
    }
}
