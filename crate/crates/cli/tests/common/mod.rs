#![allow(dead_code)]

use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng;
use segforge::protohead::FeatureMap;
use segforge::{io, seed, ImageBuffer, MaskBuffer, Sample};

pub fn run_in<I, S>(dir: &Path, args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_segforge"))
        .current_dir(dir)
        .env_remove("SEGFORGE_SEED")
        .env_remove("RUST_LOG")
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs and requires exit code 0.
pub fn ok_in<I, S>(dir: &Path, args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let o = run_in(dir, args);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    o
}

/// Low-frequency random texture: a coarse random grid upsampled bilinearly,
/// so different seeds give different perceptual hashes.
#[allow(clippy::needless_range_loop)]
pub fn texture(seed: u64, h: usize, w: usize) -> ImageBuffer {
    let mut rng = seed::rng(seed);
    let (gh, gw) = (5, 5);
    let grid: Vec<[f64; 3]> = (0..gh * gw)
        .map(|_| {
            [
                rng.random_range(40.0..220.0),
                rng.random_range(40.0..220.0),
                rng.random_range(40.0..220.0),
            ]
        })
        .collect();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / (h - 1).max(1) as f64 * (gh - 1) as f64;
            let fx = x as f64 / (w - 1).max(1) as f64 * (gw - 1) as f64;
            let (y0, x0) = ((fy as usize).min(gh - 2), (fx as usize).min(gw - 2));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            for c in 0..3 {
                let g = |yy: usize, xx: usize| grid[yy * gw + xx][c];
                let v = g(y0, x0) * (1.0 - ty) * (1.0 - tx)
                    + g(y0, x0 + 1) * (1.0 - ty) * tx
                    + g(y0 + 1, x0) * ty * (1.0 - tx)
                    + g(y0 + 1, x0 + 1) * ty * tx;
                data.push(v.round() as u8);
            }
        }
    }
    ImageBuffer::new(h, w, 3, data).unwrap()
}

pub fn defect_color(label: u8) -> [u8; 3] {
    match label % 4 {
        0 => [250, 250, 250],
        1 => [20, 20, 20],
        2 => [200, 30, 30],
        _ => [30, 200, 30],
    }
}

/// Textured sample with one `size x size` square per label at seeded positions.
pub fn defect_sample(id: &str, seed: u64, h: usize, w: usize, labels: &[u8], size: usize) -> Sample {
    let mut image = texture(seed, h, w);
    let mut mask = MaskBuffer::zeros(h, w).unwrap();
    let mut rng = seed::rng(seed ^ 0x5eed);
    for &l in labels {
        let top = rng.random_range(0..=h - size);
        let left = rng.random_range(0..=w - size);
        let col = defect_color(l);
        for y in top..top + size {
            for x in left..left + size {
                mask.set(y, x, l);
                for (c, v) in col.iter().enumerate() {
                    image.set(y, x, c, *v);
                }
            }
        }
    }
    Sample::new(id, image, mask).unwrap()
}

pub fn write_dataset(dir: &Path, samples: &[Sample]) {
    fs::create_dir_all(dir).unwrap();
    for s in samples {
        io::save_sample(dir, s).unwrap();
    }
}

/// One-hot label features at `stride` with a small intensity channel in the
/// last dimension.
pub fn label_features(sample_dir: &Path, id: &str, dim: usize, stride: usize, classes: u8) -> FeatureMap {
    let s = io::load_sample(sample_dir, id, classes).unwrap();
    let (h, w) = (s.height().div_ceil(stride), s.width().div_ceil(stride));
    let small = s.mask.resize_nearest(h, w).unwrap();
    FeatureMap::from_fn(h, w, dim, |y, x| {
        let (sy, sx) = (y * stride, x * stride);
        let mut v = vec![0.0f32; dim];
        v[usize::from(small.get(y, x))] = 1.0;
        v[dim - 1] += f32::from(s.image.pixel(sy, sx)[0]) / 255.0 * 0.05;
        v
    })
    .unwrap()
}

pub fn write_features(dir: &Path, id: &str, f: &FeatureMap) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join(format!("{id}.feat")), f.encode()).unwrap();
}

/// Every regular file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Parses `key = value` report lines.
pub fn report_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
