//! Intensity transforms. These only touch image pixels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometric::{gaussian_smooth, round_u8};
use crate::data::{luma601, ImageBuffer};
use crate::error::{Error, Result};

/// Per-channel histogram equalization through the normalized CDF.
/// A single-valued channel is returned unchanged.
pub fn histogram_equalize(img: &ImageBuffer) -> ImageBuffer {
    let ch = img.channels();
    let n = (img.height() * img.width()) as u64;
    let mut out = img.clone();
    for c in 0..ch {
        let mut hist = [0u64; 256];
        for v in img.data().iter().skip(c).step_by(ch) {
            hist[*v as usize] += 1;
        }
        let mut cdf = [0u64; 256];
        let mut acc = 0;
        for (i, h) in hist.iter().enumerate() {
            acc += h;
            cdf[i] = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        let span = n - cdf_min;
        if span == 0 {
            continue;
        }
        let lut: Vec<u8> = cdf
            .iter()
            .map(|&v| ((v.saturating_sub(cdf_min) * 255 + span / 2) / span) as u8)
            .collect();
        for v in out.data_mut().iter_mut().skip(c).step_by(ch) {
            *v = lut[*v as usize];
        }
    }
    out
}

pub fn gaussian_noise(img: &ImageBuffer, stddev: f64, rng: &mut ChaCha8Rng) -> Result<ImageBuffer> {
    if stddev == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, stddev)
        .map_err(|e| Error::InvalidArgument(format!("noise stddev {stddev}: {e}")))?;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = round_u8(f64::from(*v) + normal.sample(rng));
    }
    Ok(out)
}

fn map_planes(img: &ImageBuffer, f: impl Fn(&[f64]) -> Vec<f64>) -> ImageBuffer {
    let ch = img.channels();
    let mut out = img.clone();
    for c in 0..ch {
        let plane = f(&img.plane(c));
        for (v, p) in out.data_mut().iter_mut().skip(c).step_by(ch).zip(plane) {
            *v = round_u8(p);
        }
    }
    out
}

/// Gaussian blur with a kernel half-width of `radius` pixels (sigma = radius / 2).
pub fn gaussian_blur(img: &ImageBuffer, radius: f64) -> ImageBuffer {
    if radius <= 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    map_planes(img, |p| gaussian_smooth(p, h, w, radius / 2.0))
}

/// 3x3 unsharp kernel `[0 -1 0; -1 5 -1; 0 -1 0]` with replicated borders.
pub fn sharpen(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = (img.height(), img.width());
    map_planes(img, |p| {
        let at = |y: isize, x: isize| {
            p[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
        };
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                out[y as usize * w + x as usize] = 5.0 * at(y, x)
                    - at(y - 1, x)
                    - at(y + 1, x)
                    - at(y, x - 1)
                    - at(y, x + 1);
            }
        }
        out
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightPattern {
    Linear,
    Radial,
}

/// Per-pixel effect weight in `[0, 1]` for a randomly placed pattern.
fn pattern_weights(h: usize, w: usize, pattern: LightPattern, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match pattern {
        LightPattern::Linear => {
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = phi.sin_cos();
            let proj = |x: f64, y: f64| x * c + y * s;
            let corners = [
                proj(0.0, 0.0),
                proj((w - 1) as f64, 0.0),
                proj(0.0, (h - 1) as f64),
                proj((w - 1) as f64, (h - 1) as f64),
            ];
            let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-9);
            (0..h * w)
                .map(|i| (proj((i % w) as f64, (i / w) as f64) - lo) / span)
                .collect()
        }
        LightPattern::Radial => {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let r = rng.random_range(0.25..=0.75) * h.max(w) as f64;
            (0..h * w)
                .map(|i| {
                    let d = ((i % w) as f64 - cx).hypot((i / w) as f64 - cy);
                    (1.0 - d / r).max(0.0)
                })
                .collect()
        }
    }
}

/// Darkens by up to `strength` (fraction of intensity) along a pattern.
pub fn shadow(
    img: &ImageBuffer,
    pattern: LightPattern,
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> ImageBuffer {
    let weights = pattern_weights(img.height(), img.width(), pattern, rng);
    let ch = img.channels();
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = round_u8(f64::from(*v) * (1.0 - strength * weights[i / ch]));
    }
    out
}

/// Brightens towards white by up to `strength` along a pattern.
pub fn highlight(
    img: &ImageBuffer,
    pattern: LightPattern,
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> ImageBuffer {
    let weights = pattern_weights(img.height(), img.width(), pattern, rng);
    let ch = img.channels();
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let f = f64::from(*v);
        *v = round_u8(f + strength * weights[i / ch] * (255.0 - f));
    }
    out
}

/// Random brightness, contrast and saturation factors drawn from
/// `[1 - b, 1 + b]` and so on.
pub fn color_jitter(
    img: &ImageBuffer,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    rng: &mut ChaCha8Rng,
) -> ImageBuffer {
    let mut factor = |spread: f64| {
        if spread > 0.0 {
            rng.random_range((1.0 - spread).max(0.0)..=1.0 + spread)
        } else {
            1.0
        }
    };
    let (b, c, s) = (factor(brightness), factor(contrast), factor(saturation));
    let ch = img.channels();
    let mut vals: Vec<f64> = img.data().iter().map(|&v| f64::from(v) * b).collect();
    let gray = |px: &[f64]| {
        if ch == 3 {
            0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
        } else {
            px[0]
        }
    };
    let mean = vals.chunks_exact(ch).map(gray).sum::<f64>() / (vals.len() / ch) as f64;
    vals.iter_mut().for_each(|v| *v = mean + (*v - mean) * c);
    if ch == 3 {
        for px in vals.chunks_exact_mut(3) {
            let g = gray(px);
            px.iter_mut().for_each(|v| *v = g + (*v - g) * s);
        }
    }
    let data = vals.into_iter().map(round_u8).collect();
    ImageBuffer::new(img.height(), img.width(), ch, data).expect("same shape")
}

/// Scales one channel by `factor`.
pub fn channel_emphasis(img: &ImageBuffer, channel: usize, factor: f64) -> Result<ImageBuffer> {
    let ch = img.channels();
    if channel >= ch {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} out of range for {ch}-channel image"
        )));
    }
    let mut out = img.clone();
    for v in out.data_mut().iter_mut().skip(channel).step_by(ch) {
        *v = round_u8(f64::from(*v) * factor);
    }
    Ok(out)
}

/// Gray value of each pixel; used by callers that need luminance.
pub fn luminance(img: &ImageBuffer) -> Vec<u8> {
    match img.channels() {
        1 => img.data().to_vec(),
        _ => img.data().chunks_exact(3).map(luma601).collect(),
    }
}
