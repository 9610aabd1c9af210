//! Joint image/mask augmentation.
//!
//! Geometric transforms move image and mask with the same spatial map (mask
//! resampled nearest-neighbour). Photometric transforms leave the mask
//! untouched. Mixing transforms combine two samples.

pub mod downsample;
pub mod geometric;
pub mod photometric;

use rayon::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageBuffer, MaskBuffer, Sample};
use crate::error::{Error, Result};
use crate::seed;

pub use downsample::{downsample_majority, DownsamplePolicy, RemovalPreference};
pub use photometric::LightPattern;

/// Axis-aligned rectangle in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

fn default_emphasis() -> f64 {
    1.5
}

/// One augmentation step as written in a pipeline config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    Hflip,
    Vflip,
    Rotate { degrees: f64 },
    HistogramEq,
    /// Corner jitter as a fraction of side length.
    Perspective { strength: f64 },
    Elastic { alpha: f64, sigma: f64 },
    GaussianNoise { stddev: f64 },
    GaussianBlur { radius: f64 },
    Sharpen,
    RandomCrop { height: usize, width: usize },
    Shadow { pattern: LightPattern, strength: f64 },
    Highlight { pattern: LightPattern, strength: f64 },
    ColorJitter {
        #[serde(default)]
        brightness: f64,
        #[serde(default)]
        contrast: f64,
        #[serde(default)]
        saturation: f64,
    },
    ChannelEmphasis {
        channel: usize,
        #[serde(default = "default_emphasis")]
        factor: f64,
    },
    Mixup { lambda: f64 },
    /// Region taken from the partner sample; random when absent.
    Cutmix {
        #[serde(default)]
        region: Option<Region>,
    },
}

impl TransformSpec {
    pub const DEFAULT_PERSPECTIVE: f64 = 0.1;
    pub const DEFAULT_ELASTIC_ALPHA: f64 = 34.0;
    pub const DEFAULT_ELASTIC_SIGMA: f64 = 4.0;

    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            Self::Hflip
                | Self::Vflip
                | Self::Rotate { .. }
                | Self::Perspective { .. }
                | Self::Elastic { .. }
                | Self::RandomCrop { .. }
        )
    }

    pub fn is_mixing(&self) -> bool {
        matches!(self, Self::Mixup { .. } | Self::Cutmix { .. })
    }

    pub fn is_photometric(&self) -> bool {
        !self.is_geometric() && !self.is_mixing()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                bad(format!("{name} must be finite and >= 0, got {v}"))
            }
        };
        match *self {
            Self::Rotate { degrees } if !(degrees > -180.0 && degrees <= 180.0) => {
                bad(format!("rotation {degrees} outside (-180, 180]"))
            }
            Self::Perspective { strength } => nonneg("perspective strength", strength),
            Self::Elastic { alpha, sigma } => {
                nonneg("elastic alpha", alpha)?;
                nonneg("elastic sigma", sigma)
            }
            Self::GaussianNoise { stddev } => nonneg("noise stddev", stddev),
            Self::GaussianBlur { radius } => nonneg("blur radius", radius),
            Self::RandomCrop { height, width } if height == 0 || width == 0 => {
                bad("crop dimensions must be positive".into())
            }
            Self::Shadow { strength, .. } | Self::Highlight { strength, .. }
                if !(0.0..=1.0).contains(&strength) =>
            {
                bad(format!("light strength {strength} outside [0, 1]"))
            }
            Self::ColorJitter {
                brightness,
                contrast,
                saturation,
            } => {
                nonneg("brightness", brightness)?;
                nonneg("contrast", contrast)?;
                nonneg("saturation", saturation)
            }
            Self::ChannelEmphasis { factor, .. } => nonneg("emphasis factor", factor),
            Self::Mixup { lambda } if !(0.0..=1.0).contains(&lambda) => {
                bad(format!("mixup lambda {lambda} outside [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Short name used in derived sample ids and RNG stream labels.
    pub fn tag(&self) -> String {
        match self {
            Self::Hflip => "hflip".into(),
            Self::Vflip => "vflip".into(),
            Self::Rotate { degrees } => format!("rot{degrees}"),
            Self::HistogramEq => "histeq".into(),
            Self::Perspective { .. } => "persp".into(),
            Self::Elastic { .. } => "elastic".into(),
            Self::GaussianNoise { .. } => "noise".into(),
            Self::GaussianBlur { .. } => "blur".into(),
            Self::Sharpen => "sharpen".into(),
            Self::RandomCrop { height, width } => format!("crop{height}x{width}"),
            Self::Shadow { .. } => "shadow".into(),
            Self::Highlight { .. } => "highlight".into(),
            Self::ColorJitter { .. } => "jitter".into(),
            Self::ChannelEmphasis { channel, .. } => format!("emph{channel}"),
            Self::Mixup { .. } => "mixup".into(),
            Self::Cutmix { .. } => "cutmix".into(),
        }
    }
}

/// Applies a geometric spec to image and mask together.
pub fn apply_geometric(spec: &TransformSpec, sample: &Sample, seed: u64) -> Result<Sample> {
    if !spec.is_geometric() {
        return Err(Error::InvalidArgument(format!(
            "`{}` is not a geometric transform",
            spec.tag()
        )));
    }
    spec.validate()?;
    let mut rng = seed::rng(seed);
    match *spec {
        TransformSpec::Hflip => geometric::hflip(sample),
        TransformSpec::Vflip => geometric::vflip(sample),
        TransformSpec::Rotate { degrees } => geometric::rotate(sample, degrees),
        TransformSpec::Perspective { strength } => {
            geometric::perspective(sample, strength, &mut rng)
        }
        TransformSpec::Elastic { alpha, sigma } => {
            geometric::elastic(sample, alpha, sigma, &mut rng)
        }
        TransformSpec::RandomCrop { height, width } => {
            geometric::random_crop(sample, height, width, &mut rng)
        }
        _ => unreachable!("checked by is_geometric"),
    }
}

/// Applies a photometric spec to the image. The mask is returned as-is.
pub fn apply_photometric(spec: &TransformSpec, sample: &Sample, seed: u64) -> Result<Sample> {
    if !spec.is_photometric() {
        return Err(Error::InvalidArgument(format!(
            "`{}` is not a photometric transform",
            spec.tag()
        )));
    }
    spec.validate()?;
    let mut rng = seed::rng(seed);
    let img = &sample.image;
    let image = match *spec {
        TransformSpec::HistogramEq => photometric::histogram_equalize(img),
        TransformSpec::GaussianNoise { stddev } => {
            photometric::gaussian_noise(img, stddev, &mut rng)?
        }
        TransformSpec::GaussianBlur { radius } => photometric::gaussian_blur(img, radius),
        TransformSpec::Sharpen => photometric::sharpen(img),
        TransformSpec::Shadow { pattern, strength } => {
            photometric::shadow(img, pattern, strength, &mut rng)
        }
        TransformSpec::Highlight { pattern, strength } => {
            photometric::highlight(img, pattern, strength, &mut rng)
        }
        TransformSpec::ColorJitter {
            brightness,
            contrast,
            saturation,
        } => photometric::color_jitter(img, brightness, contrast, saturation, &mut rng),
        TransformSpec::ChannelEmphasis { channel, factor } => {
            photometric::channel_emphasis(img, channel, factor)?
        }
        _ => unreachable!("checked by is_photometric"),
    };
    Sample::new(sample.id.clone(), image, sample.mask.clone())
}

fn random_region(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Region {
    let height = rng.random_range(1..=h);
    let width = rng.random_range(1..=w);
    Region {
        top: rng.random_range(0..=h - height),
        left: rng.random_range(0..=w - width),
        height,
        width,
    }
}

/// Mixes `a` with `b`. CutMix copies pixels and labels inside the region from
/// `b`. Mixup blends pixels by `lambda` and keeps the mask of whichever
/// sample dominates (`a` when `lambda >= 0.5`).
pub fn mix_samples(spec: &TransformSpec, a: &Sample, b: &Sample, seed: u64) -> Result<Sample> {
    if !spec.is_mixing() {
        return Err(Error::InvalidArgument(format!(
            "`{}` is not a mixing transform",
            spec.tag()
        )));
    }
    spec.validate()?;
    let (h, w) = (a.height(), a.width());
    if (h, w) != (b.height(), b.width()) {
        return Err(Error::DimensionMismatch(format!(
            "cannot mix {}x{} `{}` with {}x{} `{}`",
            h,
            w,
            a.id,
            b.height(),
            b.width(),
            b.id
        )));
    }
    let ch = a.image.channels();
    let b_img = b.image.with_channels(ch)?;
    match *spec {
        TransformSpec::Mixup { lambda } => {
            let data = a
                .image
                .data()
                .iter()
                .zip(b_img.data())
                .map(|(&x, &y)| {
                    geometric::round_u8(lambda * f64::from(x) + (1.0 - lambda) * f64::from(y))
                })
                .collect();
            let mask = if lambda >= 0.5 { &a.mask } else { &b.mask };
            Sample::new(a.id.clone(), ImageBuffer::new(h, w, ch, data)?, mask.clone())
        }
        TransformSpec::Cutmix { region } => {
            let region = match region {
                Some(r) => r,
                None => random_region(h, w, &mut seed::rng(seed)),
            };
            if region.top + region.height > h || region.left + region.width > w {
                return Err(Error::InvalidArgument(format!(
                    "cutmix region {region:?} exceeds {h}x{w}"
                )));
            }
            let mut image = a.image.clone();
            let mut labels = a.mask.labels().to_vec();
            for y in region.top..region.top + region.height {
                for x in region.left..region.left + region.width {
                    for c in 0..ch {
                        image.set(y, x, c, b_img.get(y, x, c));
                    }
                    labels[y * w + x] = b.mask.get(y, x);
                }
            }
            Sample::new(a.id.clone(), image, MaskBuffer::new(h, w, labels)?)
        }
        _ => unreachable!("checked by is_mixing"),
    }
}

/// The six transforms added next to each original in the standard pipeline.
pub fn standard_transforms() -> Vec<TransformSpec> {
    vec![
        TransformSpec::Hflip,
        TransformSpec::Rotate { degrees: 30.0 },
        TransformSpec::Rotate { degrees: 50.0 },
        TransformSpec::HistogramEq,
        TransformSpec::Perspective {
            strength: TransformSpec::DEFAULT_PERSPECTIVE,
        },
        TransformSpec::Elastic {
            alpha: TransformSpec::DEFAULT_ELASTIC_ALPHA,
            sigma: TransformSpec::DEFAULT_ELASTIC_SIGMA,
        },
    ]
}

/// A pipeline config: `{"transforms": [{"kind": "hflip"}, ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub transforms: Vec<TransformSpec>,
}

impl PipelineConfig {
    pub fn standard() -> Self {
        Self {
            transforms: standard_transforms(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        for t in &cfg.transforms {
            t.validate()?;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Suffix per transform; repeated tags get their position appended.
fn variant_suffixes(specs: &[TransformSpec]) -> Vec<String> {
    let tags: Vec<String> = specs.iter().map(TransformSpec::tag).collect();
    tags.iter()
        .enumerate()
        .map(|(i, t)| {
            if tags.iter().filter(|o| *o == t).count() > 1 {
                format!("{t}_{i}")
            } else {
                t.clone()
            }
        })
        .collect()
}

/// Applies any single spec. Mixing specs use `partner` as the second sample.
pub fn apply_transform(
    spec: &TransformSpec,
    sample: &Sample,
    partner: Option<&Sample>,
    seed: u64,
) -> Result<Sample> {
    if spec.is_geometric() {
        apply_geometric(spec, sample, seed)
    } else if spec.is_mixing() {
        let partner = partner.ok_or_else(|| {
            Error::InvalidArgument(format!("`{}` needs a partner sample", spec.tag()))
        })?;
        mix_samples(spec, sample, partner, seed)
    } else {
        apply_photometric(spec, sample, seed)
    }
}

/// Returns every original followed by one variant per spec, sample by sample.
/// Variant ids are `<id>__<tag>`. Each variant draws from an RNG seeded by
/// `(seed, id, suffix)`, so output does not depend on thread count. Mixing
/// specs pair each sample with the next one in input order (wrapping).
pub fn run_pipeline(samples: &[Sample], specs: &[TransformSpec], seed: u64) -> Result<Vec<Sample>> {
    for s in specs {
        s.validate()?;
    }
    let suffixes = variant_suffixes(specs);
    let per_sample: Vec<Result<Vec<Sample>>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let partner = &samples[(i + 1) % samples.len()];
            let mut out = Vec::with_capacity(specs.len() + 1);
            out.push(sample.clone());
            for (spec, suffix) in specs.iter().zip(&suffixes) {
                let s = seed::derive(seed, &[sample.id.as_bytes(), suffix.as_bytes()]);
                let variant = apply_transform(spec, sample, Some(partner), s)?;
                out.push(variant.with_id(format!("{}__{}", sample.id, suffix)));
            }
            Ok(out)
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len() * (specs.len() + 1));
    for r in per_sample {
        out.extend(r?);
    }
    Ok(out)
}

/// Original plus horizontal flip, 30 and 50 degree rotations, histogram
/// equalization, perspective and elastic variants: 7 samples per input.
pub fn standard_pipeline(samples: &[Sample], seed: u64) -> Result<Vec<Sample>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    run_pipeline(samples, &standard_transforms(), seed)
}
