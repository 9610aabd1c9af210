//! Dynamic label injection: every defect-free sample of a batch receives a
//! defect of the class that is currently rarest in the batch.

pub mod poisson;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::geometric::{affine, resize, AffineParams};
use crate::data::{ClassDistribution, ImageBuffer, Sample};
use crate::error::{Error, Result};
use crate::seed;

pub use poisson::{
    dilate_max, forward_gradient, poisson_clone, PoissonSolution, PoissonSystem, SolverMethod,
    SolverSettings,
};

/// Presence counts of a batch plus the positions of its defect-free samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchCounts {
    pub distribution: ClassDistribution,
    pub defect_free: Vec<usize>,
}

pub fn count_batch_classes(batch: &[Sample], num_classes: u8) -> BatchCounts {
    let mut distribution = ClassDistribution::new(num_classes);
    let mut defect_free = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        if s.mask.is_defect_free() {
            defect_free.push(i);
        } else {
            distribution.add_mask(&s.mask);
        }
    }
    BatchCounts {
        distribution,
        defect_free,
    }
}

/// The eligible label with the fewest presences; ties go to the lowest label.
pub fn select_minority_class(dist: &ClassDistribution, eligible: &BTreeSet<u8>) -> Option<u8> {
    eligible.iter().copied().min_by_key(|&c| (dist.count(c), c))
}

/// Random all-background crops. For every sample and every size that fits,
/// up to `attempts` crop positions are tried and the first with an all-zero
/// mask is kept. Output ids are `<id>__free<size>`.
pub fn harvest_defect_free(
    dataset: &[Sample],
    sizes: &[usize],
    attempts: usize,
    seed: u64,
) -> Vec<Sample> {
    let per_sample: Vec<Vec<Sample>> = dataset
        .par_iter()
        .map(|s| {
            let mut found = Vec::new();
            for &size in sizes {
                if size == 0 || size > s.height() || size > s.width() {
                    log::debug!("`{}`: crop size {size} does not fit", s.id);
                    continue;
                }
                let tag = format!("free{size}");
                let mut rng = seed::rng(seed::derive(seed, &[s.id.as_bytes(), tag.as_bytes()]));
                for _ in 0..attempts {
                    let top = rng.random_range(0..=s.height() - size);
                    let left = rng.random_range(0..=s.width() - size);
                    let mask = s.mask.crop(top, left, size, size).expect("fits");
                    if mask.is_defect_free() {
                        let crop = s.crop(top, left, size, size).expect("fits");
                        found.push(crop.with_id(format!("{}__{tag}", s.id)));
                        break;
                    }
                }
            }
            found
        })
        .collect();
    per_sample.into_iter().flatten().collect()
}

/// Pastes the defect pixels (mask ≠ 0) onto `target`. The mask of the result
/// is the defect mask.
pub fn cut_paste(defect: &Sample, target: &ImageBuffer) -> Result<Sample> {
    let (h, w) = (target.height(), target.width());
    if (defect.height(), defect.width()) != (h, w) {
        return Err(Error::DimensionMismatch(format!(
            "defect `{}` is {}x{}, target is {h}x{w}",
            defect.id,
            defect.height(),
            defect.width()
        )));
    }
    let ch = target.channels();
    let src = defect.image.with_channels(ch)?;
    let mut image = target.clone();
    for (p, &label) in defect.mask.labels().iter().enumerate() {
        if label != 0 {
            let (y, x) = (p / w, p % w);
            for c in 0..ch {
                image.set(y, x, c, src.get(y, x, c));
            }
        }
    }
    Sample::new(defect.id.clone(), image, defect.mask.clone())
}

/// Ranges of the random affine transform applied to a defect source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassTransform {
    pub allow_flip: bool,
    pub max_degrees: f64,
    pub scale: (f64, f64),
    /// Maximum shift as a fraction of each side.
    pub max_translate: f64,
}

impl Default for ClassTransform {
    fn default() -> Self {
        Self {
            allow_flip: true,
            max_degrees: 15.0,
            scale: (0.9, 1.1),
            max_translate: 0.1,
        }
    }
}

impl ClassTransform {
    pub const NONE: ClassTransform = ClassTransform {
        allow_flip: false,
        max_degrees: 0.0,
        scale: (1.0, 1.0),
        max_translate: 0.0,
    };

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite())
            || !(self.max_degrees >= 0.0 && self.max_degrees <= 180.0)
            || !(self.max_translate >= 0.0 && self.max_translate <= 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "invalid class transform {self:?}"
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> AffineParams {
        fn sym(rng: &mut ChaCha8Rng, m: f64) -> f64 {
            if m > 0.0 {
                rng.random_range(-m..=m)
            } else {
                0.0
            }
        }
        let flip = self.allow_flip && rng.random_bool(0.5);
        let degrees = sym(rng, self.max_degrees);
        let scale = if self.scale.0 < self.scale.1 {
            rng.random_range(self.scale.0..=self.scale.1)
        } else {
            self.scale.0
        };
        let tx = sym(rng, self.max_translate);
        let ty = sym(rng, self.max_translate);
        AffineParams {
            flip,
            degrees,
            scale,
            translate: (tx, ty),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub p_poisson: f64,
    /// Per-label overrides of `default_transform`.
    pub class_transforms: BTreeMap<u8, ClassTransform>,
    pub default_transform: ClassTransform,
    pub mask_dilation_kernel: usize,
    pub solver: SolverSettings,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            p_poisson: 0.5,
            class_transforms: BTreeMap::new(),
            default_transform: ClassTransform::default(),
            mask_dilation_kernel: 3,
            solver: SolverSettings::default(),
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_poisson) {
            return Err(Error::InvalidArgument(format!(
                "p_poisson {} outside [0, 1]",
                self.p_poisson
            )));
        }
        if self.mask_dilation_kernel == 0 || self.mask_dilation_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "mask dilation kernel must be odd and positive, got {}",
                self.mask_dilation_kernel
            )));
        }
        self.default_transform.validate()?;
        for t in self.class_transforms.values() {
            t.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn transform_for(&self, class: u8) -> &ClassTransform {
        self.class_transforms
            .get(&class)
            .unwrap_or(&self.default_transform)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMethod {
    CutPaste,
    Poisson,
}

impl fmt::Display for BlendMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CutPaste => "cut_paste",
            Self::Poisson => "poisson",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InjectionEvent {
    /// Position of the modified sample in the batch.
    pub position: usize,
    pub sample_id: String,
    pub class: u8,
    pub method: BlendMethod,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectionOutcome {
    pub batch: Vec<Sample>,
    pub events: Vec<InjectionEvent>,
}

/// Sources usable for `class`: masks containing `class` and nothing else
/// besides background.
pub fn eligible_sources(sources: &[Sample]) -> BTreeMap<u8, Vec<usize>> {
    let mut out: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, s) in sources.iter().enumerate() {
        let labels: Vec<u8> = s.mask.label_set().into_iter().filter(|&l| l != 0).collect();
        if let [c] = labels[..] {
            out.entry(c).or_default().push(i);
        }
    }
    out
}

/// Replaces every defect-free sample of `batch` with an injected one.
///
/// Counts are recomputed after each injection, so each step targets the
/// class that is rarest at that moment. Classes `1..=num_classes` without an
/// eligible source are skipped and logged. Injection `i` draws from its own
/// RNG stream derived from `seed`.
pub fn inject_batch(
    batch: &[Sample],
    sources: &[Sample],
    num_classes: u8,
    config: &InjectionConfig,
    seed: u64,
) -> Result<InjectionOutcome> {
    config.validate()?;
    let counts = count_batch_classes(batch, num_classes);
    let mut out = batch.to_vec();
    let mut events = Vec::new();
    if counts.defect_free.is_empty() {
        return Ok(InjectionOutcome { batch: out, events });
    }
    let pools = eligible_sources(sources);
    let eligible: BTreeSet<u8> = (1..=num_classes)
        .filter(|c| pools.contains_key(c))
        .collect();
    for c in (1..=num_classes).filter(|c| !eligible.contains(c)) {
        log::warn!("class {c}: no source with labels in {{0, {c}}}, skipped");
    }
    let mut dist = counts.distribution;
    for (step, &pos) in counts.defect_free.iter().enumerate() {
        let class = select_minority_class(&dist, &eligible).ok_or(Error::NoEligibleSource)?;
        let mut rng = seed::rng(seed::derive_index(seed, step as u64));
        let source = &sources[*pools[&class].choose(&mut rng).expect("pool nonempty")];
        let target = &out[pos];
        let params = config.transform_for(class).draw(&mut rng);
        let resized = resize(source, target.height(), target.width())?;
        let moved = affine(&resized, params)?;
        // a transform that pushes the defect off the canvas falls back to the
        // untransformed source
        let defect = if moved.mask.contains(class) {
            moved
        } else if resized.mask.contains(class) {
            resized
        } else {
            return Err(Error::EmptyDefect(source.id.clone()));
        };
        let method = if rng.random::<f64>() < config.p_poisson {
            BlendMethod::Poisson
        } else {
            BlendMethod::CutPaste
        };
        let injected = match method {
            BlendMethod::CutPaste => cut_paste(&defect, &target.image)?,
            BlendMethod::Poisson => poisson_clone(
                &defect,
                &target.image,
                config.mask_dilation_kernel,
                &config.solver,
            )?,
        };
        let id = target.id.clone();
        dist.add_mask(&injected.mask);
        events.push(InjectionEvent {
            position: pos,
            sample_id: id.clone(),
            class,
            method,
            source_id: source.id.clone(),
        });
        out[pos] = injected.with_id(id);
    }
    Ok(InjectionOutcome { batch: out, events })
}

/// Injection report rows: `batch_idx,sample_id,class,method`.
pub fn report_csv(batches: &[(usize, &[InjectionEvent])]) -> String {
    let mut s = String::from("batch_idx,sample_id,class,method\n");
    for (b, events) in batches {
        for e in *events {
            s.push_str(&format!("{b},{},{},{}\n", e.sample_id, e.class, e.method));
        }
    }
    s
}

/// Batch manifest file: `{"batches": [["id", ...], ...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchManifest {
    pub batches: Vec<Vec<String>>,
}

impl BatchManifest {
    /// Shuffles `ids` with `seed` and cuts them into batches of `batch_size`;
    /// the last batch may be shorter.
    pub fn shuffled(ids: &[String], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut ids = ids.to_vec();
        ids.shuffle(&mut seed::rng(seed::derive(seed, &[b"batches"])));
        Ok(Self {
            batches: ids.chunks(batch_size).map(<[String]>::to_vec).collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.batches.iter().any(Vec::is_empty) {
            return Err(Error::Format("batch manifest contains an empty batch".into()));
        }
        let mut seen = BTreeSet::new();
        for id in m.batches.iter().flatten() {
            if !seen.insert(id) {
                return Err(Error::Format(format!("sample `{id}` listed twice")));
            }
        }
        Ok(m)
    }
}
