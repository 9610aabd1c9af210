//! Spatial transforms applied jointly to image and mask.
//!
//! Every warp is an inverse map from output pixel to source coordinate. The
//! mask takes the nearest source label; the image is sampled bilinearly. A
//! source coordinate whose nearest pixel is outside the canvas yields black
//! and background.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageBuffer, MaskBuffer, Sample};
use crate::error::{Error, Result};

/// Resamples `sample` onto an `out_h` x `out_w` canvas. `map` receives output
/// `(x, y)` and returns the source `(x, y)`.
pub fn warp<F>(sample: &Sample, out_h: usize, out_w: usize, map: F) -> Result<Sample>
where
    F: Fn(f64, f64) -> (f64, f64),
{
    let (h, w, ch) = (sample.height(), sample.width(), sample.image.channels());
    let src = sample.image.data();
    let mut img = vec![0u8; out_h * out_w * ch];
    let mut mask = vec![0u8; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = map(x as f64, y as f64);
            if !sx.is_finite() || !sy.is_finite() {
                continue;
            }
            let rx = (sx + 0.5).floor();
            let ry = (sy + 0.5).floor();
            if rx < 0.0 || ry < 0.0 || rx >= w as f64 || ry >= h as f64 {
                continue;
            }
            let o = y * out_w + x;
            mask[o] = sample.mask.get(ry as usize, rx as usize);

            let cx = sx.clamp(0.0, (w - 1) as f64);
            let cy = sy.clamp(0.0, (h - 1) as f64);
            let x0 = cx.floor() as usize;
            let y0 = cy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = cx - x0 as f64;
            let fy = cy - y0 as f64;
            for c in 0..ch {
                let p = |yy: usize, xx: usize| f64::from(src[(yy * w + xx) * ch + c]);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                img[o * ch + c] = round_u8(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Sample::new(
        sample.id.clone(),
        ImageBuffer::new(out_h, out_w, ch, img)?,
        MaskBuffer::new(out_h, out_w, mask)?,
    )
}

#[inline]
pub(crate) fn round_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn hflip(sample: &Sample) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    remap_exact(sample, |y, x| (y, w - 1 - x), h, w)
}

pub fn vflip(sample: &Sample) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    remap_exact(sample, |y, x| (h - 1 - y, x), h, w)
}

fn remap_exact(
    sample: &Sample,
    src_of: impl Fn(usize, usize) -> (usize, usize),
    h: usize,
    w: usize,
) -> Result<Sample> {
    let ch = sample.image.channels();
    let mut img = Vec::with_capacity(h * w * ch);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src_of(y, x);
            img.extend_from_slice(sample.image.pixel(sy, sx));
            mask.push(sample.mask.get(sy, sx));
        }
    }
    Sample::new(
        sample.id.clone(),
        ImageBuffer::new(h, w, ch, img)?,
        MaskBuffer::new(h, w, mask)?,
    )
}

/// Source coordinate of output `(x, y)` under a rotation by `degrees` about
/// the canvas centre (positive turns counter-clockwise on screen).
pub fn rotation_preimage(degrees: f64, h: usize, w: usize, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (dx, dy) = (x - cx, y - cy);
    (c * dx - s * dy + cx, s * dx + c * dy + cy)
}

/// Rotation about the centre, same canvas size, black fill.
pub fn rotate(sample: &Sample, degrees: f64) -> Result<Sample> {
    if degrees == 0.0 {
        return Ok(sample.clone());
    }
    let (h, w) = (sample.height(), sample.width());
    warp(sample, h, w, |x, y| rotation_preimage(degrees, h, w, x, y))
}

/// 3x3 homography, row-major, last entry fixed to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    /// Solves for the homography taking each `from[i]` to `to[i]`.
    pub fn from_points(from: [(f64, f64); 4], to: [(f64, f64); 4]) -> Option<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (&(x, y), &(u, v))) in from.iter().zip(&to).enumerate() {
            let r = 2 * i;
            a.row_mut(r)
                .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1)
                .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a.lu().solve(&b)?;
        Some(Self([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0]))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let d = m[6] * x + m[7] * y + m[8];
        (
            (m[0] * x + m[1] * y + m[2]) / d,
            (m[3] * x + m[4] * y + m[5]) / d,
        )
    }
}

/// Random perspective warp. Each source corner is jittered by up to
/// `strength` times the side length; the canvas keeps its size.
pub fn perspective(sample: &Sample, strength: f64, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    let corners = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
    let mut jittered = corners;
    for c in jittered.iter_mut() {
        c.0 += rng.random_range(-1.0..=1.0) * strength * w as f64;
        c.1 += rng.random_range(-1.0..=1.0) * strength * h as f64;
    }
    if strength == 0.0 {
        return Ok(sample.clone());
    }
    let hom = Homography::from_points(corners, jittered)
        .ok_or_else(|| Error::InvalidArgument("degenerate perspective jitter".into()))?;
    warp(sample, h, w, |x, y| hom.apply(x, y))
}

/// Separable Gaussian smoothing with clamp-to-edge borders.
pub fn gaussian_smooth(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    convolve_separable(plane, h, w, &kernel)
}

pub(crate) fn convolve_separable(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * plane[y * w + clampi(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * tmp[clampi(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// Elastic deformation: uniform noise displacement fields smoothed by a
/// Gaussian of width `sigma` and scaled by `alpha`.
pub fn elastic(sample: &Sample, alpha: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    let mut field = || {
        let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..=1.0)).collect();
        gaussian_smooth(&noise, h, w, sigma)
            .into_iter()
            .map(|v| v * alpha)
            .collect::<Vec<_>>()
    };
    let dx = field();
    let dy = field();
    if alpha == 0.0 {
        return Ok(sample.clone());
    }
    warp(sample, h, w, |x, y| {
        let i = y as usize * w + x as usize;
        (x + dx[i], y + dy[i])
    })
}

pub fn random_crop(
    sample: &Sample,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    if height == 0 || width == 0 || height > sample.height() || width > sample.width() {
        return Err(Error::CropTooLarge {
            crop_h: height,
            crop_w: width,
            src_h: sample.height(),
            src_w: sample.width(),
        });
    }
    let top = rng.random_range(0..=sample.height() - height);
    let left = rng.random_range(0..=sample.width() - width);
    sample.crop(top, left, height, width)
}

/// Parameters of a similarity-plus-flip transform about the canvas centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub flip: bool,
    pub degrees: f64,
    pub scale: f64,
    /// Shift as a fraction of width and height.
    pub translate: (f64, f64),
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        flip: false,
        degrees: 0.0,
        scale: 1.0,
        translate: (0.0, 0.0),
    };
}

/// Flip, rotate, scale and translate about the centre on the same canvas.
pub fn affine(sample: &Sample, p: AffineParams) -> Result<Sample> {
    if p == AffineParams::IDENTITY {
        return Ok(sample.clone());
    }
    let (h, w) = (sample.height(), sample.width());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (s, c) = p.degrees.to_radians().sin_cos();
    let (tx, ty) = (p.translate.0 * w as f64, p.translate.1 * h as f64);
    warp(sample, h, w, |x, y| {
        let dx = (x - cx - tx) / p.scale;
        let dy = (y - cy - ty) / p.scale;
        let (mut sx, sy) = (c * dx - s * dy, s * dx + c * dy);
        if p.flip {
            sx = -sx;
        }
        (sx + cx, sy + cy)
    })
}

/// Resizes to `height` x `width`: nearest label for the mask, bilinear for
/// the image, pixel centres aligned.
pub fn resize(sample: &Sample, height: usize, width: usize) -> Result<Sample> {
    if height == sample.height() && width == sample.width() {
        return Ok(sample.clone());
    }
    let sy = sample.height() as f64 / height as f64;
    let sx = sample.width() as f64 / width as f64;
    let mut out = warp(sample, height, width, |x, y| {
        ((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5)
    })?;
    out.mask = sample.mask.resize_nearest(height, width)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::SeedableRng;

    use super::*;

    fn patterned(h: usize, w: usize, ch: usize) -> Sample {
        let img: Vec<u8> = (0..h * w * ch).map(|i| (i * 37 % 251) as u8).collect();
        let mask: Vec<u8> = (0..h * w)
            .map(|i| if (i / w) % 4 < 2 && (i % w).is_multiple_of(3) { 5 } else { 0 })
            .collect();
        Sample::new(
            "p",
            ImageBuffer::new(h, w, ch, img).unwrap(),
            MaskBuffer::new(h, w, mask).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let s = patterned(7, 10, 3);
        assert_eq!(hflip(&hflip(&s).unwrap()).unwrap(), s);
        assert_eq!(vflip(&vflip(&s).unwrap()).unwrap(), s);
        let f = hflip(&s).unwrap();
        assert_eq!(f.image.pixel(2, 0), s.image.pixel(2, 9));
        assert_ne!(f, s);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = patterned(9, 9, 1);
        assert_eq!(rotate(&s, 0.0).unwrap(), s);
    }

    #[test]
    fn quarter_turn_moves_pixels_exactly() {
        let s = patterned(9, 9, 1);
        let r = rotate(&s, 90.0).unwrap();
        // output (x, y) samples source rotation_preimage(x, y); with 90 degrees
        // about (4, 4) that is (8 - y, x)
        for y in 0..9 {
            for x in 0..9 {
                assert_eq!(r.mask.get(y, x), s.mask.get(x, 8 - y));
                assert_eq!(r.image.get(y, x, 0), s.image.get(x, 8 - y, 0));
            }
        }
    }

    #[test]
    fn rotation_keeps_label_set() {
        let s = patterned(32, 32, 3);
        let r = rotate(&s, 30.0).unwrap();
        let labels = r.mask.label_set();
        assert!(labels.is_subset(&BTreeSet::from([0, 5])));
        assert!(labels.contains(&5));
        // corners rotate out of the canvas and become black
        assert_eq!(r.image.pixel(0, 0), &[0, 0, 0]);
    }

    #[test]
    fn homography_recovers_identity() {
        let c = [(0.0, 0.0), (9.0, 0.0), (9.0, 9.0), (0.0, 9.0)];
        let h = Homography::from_points(c, c).unwrap();
        let (x, y) = h.apply(3.5, 7.25);
        assert!((x - 3.5).abs() < 1e-12 && (y - 7.25).abs() < 1e-12);
        let shifted = c.map(|(x, y)| (x + 2.0, y - 1.0));
        let h = Homography::from_points(c, shifted).unwrap();
        let (x, y) = h.apply(4.0, 4.0);
        assert!((x - 6.0).abs() < 1e-9 && (y - 3.0).abs() < 1e-9);
    }

    #[test]
    fn perspective_and_elastic_keep_canvas() {
        let s = patterned(24, 20, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = perspective(&s, 0.1, &mut rng).unwrap();
        assert_eq!((p.height(), p.width()), (24, 20));
        assert!(p.mask.label_set().is_subset(&BTreeSet::from([0, 5])));
        let e = elastic(&s, 34.0, 4.0, &mut rng).unwrap();
        assert_eq!((e.height(), e.width()), (24, 20));
        assert!(e.mask.label_set().is_subset(&BTreeSet::from([0, 5])));
        assert_eq!(perspective(&s, 0.0, &mut rng).unwrap(), s);
    }

    #[test]
    fn crop_too_large_errors() {
        let s = patterned(8, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            random_crop(&s, 9, 4, &mut rng),
            Err(Error::CropTooLarge { .. })
        ));
        let c = random_crop(&s, 8, 8, &mut rng).unwrap();
        assert_eq!(c, s);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let plane = vec![3.0; 30];
        let out = gaussian_smooth(&plane, 5, 6, 1.5);
        assert!(out.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn affine_identity_and_flip() {
        let s = patterned(6, 8, 1);
        assert_eq!(affine(&s, AffineParams::IDENTITY).unwrap(), s);
        let f = affine(
            &s,
            AffineParams {
                flip: true,
                ..AffineParams::IDENTITY
            },
        )
        .unwrap();
        assert_eq!(f, hflip(&s).unwrap());
    }

    #[test]
    fn resize_round_trip_on_integer_factor() {
        let s = patterned(4, 4, 1);
        let up = resize(&s, 8, 8).unwrap();
        assert_eq!(up.mask.label_set(), s.mask.label_set());
        assert_eq!(resize(&s, 4, 4).unwrap(), s);
    }
}
