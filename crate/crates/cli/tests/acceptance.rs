//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the verdict lines are always printed.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use segforge::augment::geometric::hflip;
use segforge::augment::photometric::LightPattern;
use segforge::augment::{apply_geometric, apply_photometric, standard_pipeline, TransformSpec};
use segforge::dli::{inject_batch, InjectionConfig, PoissonSystem, SolverSettings};
use segforge::episodic::EpisodeManifest;
use segforge::losses::{
    combined_loss_with, cross_entropy, deep_supervision_combine, dice_loss, focal_loss, FocalParams,
    LossWeights, ProbabilityMap,
};
use segforge::metrics::{fwiou, ConfusionTotals};
use segforge::netcost::{reduction_factor, tikan_active, ConvShape, SplineBasis};
use segforge::protohead::{bidirectional_round, masked_average_pool, segment, FeatureMap};
use segforge::{io, seed, CiwTable, ImageBuffer, MaskBuffer, Sample};
use tempfile::TempDir;

#[derive(Default)]
struct Checks {
    failures: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }
}

fn random_mask(rng: &mut impl Rng, h: usize, w: usize, max_label: u8) -> MaskBuffer {
    MaskBuffer::new(h, w, (0..h * w).map(|_| rng.random_range(0..=max_label)).collect()).unwrap()
}

fn random_sample(seed: u64, h: usize, w: usize, max_label: u8) -> Sample {
    let mut rng = seed::rng(seed);
    let image = ImageBuffer::new(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap();
    let mut mask = MaskBuffer::zeros(h, w).unwrap();
    for _ in 0..rng.random_range(1..4) {
        let l = rng.random_range(1..=max_label);
        let (y0, x0) = (rng.random_range(0..h - 4), rng.random_range(0..w - 4));
        let (bh, bw) = (rng.random_range(2..h / 2), rng.random_range(2..w / 2));
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                mask.set(y, x, l);
            }
        }
    }
    Sample::new(format!("r{seed}"), image, mask).unwrap()
}

fn poisson_correctness(c: &mut Checks) {
    let (h, w) = (64, 64);
    let region: Vec<bool> = (0..h * w)
        .map(|i| (20..44).contains(&(i / w)) && (20..44).contains(&(i % w)))
        .collect();
    let settings = SolverSettings::default();

    let target: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            128.0 + 60.0 * (x / 7.0).sin() * (y / 9.0).cos() + 0.5 * x
        })
        .collect();
    let start = Instant::now();
    let sys = PoissonSystem::from_source(h, w, region.clone(), target.clone(), &target).unwrap();
    let sol = sys.solve(&settings).unwrap();
    let t = start.elapsed();
    let err = max_diff(&sol.values, &target);
    c.check(err <= 1e-3, || format!("own-gradient error {err:e}"));
    c.check(t < Duration::from_secs(1), || format!("own-gradient solve took {t:?}"));

    // left edge 10, right edge 240, linear in between on the boundary
    let ramp: Vec<f64> = (0..h * w)
        .map(|i| 10.0 + 230.0 * (i % w) as f64 / (w - 1) as f64)
        .collect();
    let boundary: Vec<f64> = ramp
        .iter()
        .zip(&region)
        .map(|(&v, &inside)| if inside { 0.0 } else { v })
        .collect();
    let start = Instant::now();
    let sys = PoissonSystem::zero_guidance(h, w, region, boundary).unwrap();
    let sol = sys.solve(&settings).unwrap();
    let t = start.elapsed();
    let err = max_diff(&sol.values, &ramp);
    c.check(err <= 1e-3, || format!("harmonic ramp error {err:e}"));
    c.check(t < Duration::from_secs(1), || format!("ramp solve took {t:?}"));
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn labelled(id: &str, labels: &[u8]) -> Sample {
    let (h, w) = (24, 24);
    let mut mask = MaskBuffer::zeros(h, w).unwrap();
    for (i, &l) in labels.iter().enumerate() {
        for y in 4..10 {
            for x in 3 + 7 * i..8 + 7 * i {
                mask.set(y, x, l);
            }
        }
    }
    let image = texture(id.len() as u64 * 31 + u64::from(labels.iter().sum::<u8>()), h, w);
    Sample::new(id, image, mask).unwrap()
}

/// Independent replay of the counting loop: presence counts, argmin over the
/// eligible labels with the lowest label winning ties, recount after each step.
fn replay(batch: &[Sample], eligible: &[u8]) -> Vec<u8> {
    let mut counts: BTreeMap<u8, usize> = eligible.iter().map(|&l| (l, 0)).collect();
    for s in batch {
        for l in s.mask.label_set() {
            if let Some(n) = counts.get_mut(&l) {
                *n += 1;
            }
        }
    }
    let mut out = Vec::new();
    for s in batch {
        if s.mask.labels().iter().all(|&l| l == 0) {
            let (&l, _) = counts.iter().min_by_key(|(&l, &n)| (n, l)).unwrap();
            *counts.get_mut(&l).unwrap() += 1;
            out.push(l);
        }
    }
    out
}

fn dli_replay(c: &mut Checks) {
    // classes 1, 2, 3 present in 2, 1, 0 samples; the remaining defect
    // samples carry label 4, which has no source and is never injected
    let batch = vec![
        labelled("a", &[1]),
        labelled("f0", &[]),
        labelled("b", &[1, 2]),
        labelled("f1", &[]),
        labelled("c", &[4]),
        labelled("d", &[4]),
        labelled("f2", &[]),
        labelled("e", &[4]),
    ];
    let sources = vec![labelled("s1", &[1]), labelled("s2", &[2]), labelled("s3", &[3])];
    let outcome = inject_batch(&batch, &sources, 4, &InjectionConfig::default(), 42).unwrap();
    let got: Vec<u8> = outcome.events.iter().map(|e| e.class).collect();
    let oracle = replay(&batch, &[1, 2, 3]);
    c.check(got == oracle, || format!("injected {got:?}, replay gives {oracle:?}"));
    let remaining = outcome.batch.iter().filter(|s| s.mask.is_defect_free()).count();
    c.check(remaining == 0, || format!("{remaining} defect-free samples remain"));
    c.check(got == [3, 2, 1], || {
        format!("expected sequence [3, 2, 1], got {got:?} (replay with recount gives {oracle:?})")
    });
}

fn brute_counts(pred: &MaskBuffer, gt: &MaskBuffer, c: u8) -> [u64; 4] {
    let mut out = [0u64; 4];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let i = match (g == c, p == c) {
            (true, true) => 0,
            (false, true) => 1,
            (true, false) => 2,
            (false, false) => 3,
        };
        out[i] += 1;
    }
    out
}

fn div0(n: f64, d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        n / d
    }
}

fn metric_oracle(c: &mut Checks) {
    let mut rng = seed::rng(3);
    for pair in 0..200 {
        let pred = random_mask(&mut rng, 8, 8, 3);
        let gt = random_mask(&mut rng, 8, 8, 3);
        let mut t = ConfusionTotals::new(3);
        t.accumulate(&pred, &gt).unwrap();
        for label in 0..=3u8 {
            let [tp, fp, fn_, tn] = brute_counts(&pred, &gt, label);
            let got = t.class(label);
            c.check([got.tp, got.fp, got.fn_, got.tn] == [tp, fp, fn_, tn], || {
                format!("pair {pair} class {label}: counts {got:?} vs {:?}", [tp, fp, fn_, tn])
            });
            let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
            let f1 = div0(2.0 * tp, 2.0 * tp + fp + fn_);
            let iou = div0(tp, tp + fp + fn_);
            let mcc = div0(tp * tn - fp * fn_, ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt());
            for (name, a, b) in [("f1", got.f1(), f1), ("iou", got.iou(), iou), ("mcc", got.mcc(), mcc)] {
                c.check((a - b).abs() <= 1e-12, || format!("pair {pair} class {label}: {name} {a} vs {b}"));
            }
            if got.union() > 0 {
                let dj = 2.0 * got.iou() / (1.0 + got.iou());
                c.check((got.f1() - dj).abs() <= 1e-12, || {
                    format!("pair {pair} class {label}: dice-Jaccard {} vs {dj}", got.f1())
                });
            }
        }
    }
}

fn fwiou_properties(c: &mut Checks) {
    let mut rng = seed::rng(4);
    let mut t = ConfusionTotals::new(3);
    let (mut inter, mut union) = (0u64, 0u64);
    for _ in 0..50 {
        let pred = random_mask(&mut rng, 8, 8, 3);
        let gt = random_mask(&mut rng, 8, 8, 3);
        t.accumulate(&pred, &gt).unwrap();
        for label in 0..=3 {
            let [tp, fp, fn_, _] = brute_counts(&pred, &gt, label);
            inter += tp;
            union += tp + fp + fn_;
        }
    }
    let ones = CiwTable::uniform(0..=3);
    let micro = inter as f64 / union as f64;
    let v = fwiou(&t, &ones).unwrap();
    c.check((v - micro).abs() <= 1e-12, || format!("uniform FWIoU {v} vs micro IoU {micro}"));
    for table in [ones, CiwTable::culvert_default()] {
        let a = fwiou(&t, &table).unwrap();
        let b = fwiou(&t, &table.scaled(3.7)).unwrap();
        c.check((a - b).abs() < 1e-12, || format!("scaling weights moved FWIoU {a} -> {b}"));
    }
    let mut perfect = ConfusionTotals::new(8);
    for _ in 0..10 {
        let m = random_mask(&mut rng, 8, 8, 8);
        perfect.accumulate(&m, &m).unwrap();
    }
    let p = fwiou(&perfect, &CiwTable::culvert_default()).unwrap();
    c.check(p == 1.0, || format!("perfect prediction FWIoU {p}"));
}

fn random_probs(rng: &mut impl Rng, h: usize, w: usize, k: usize) -> ProbabilityMap {
    let logits: Vec<f64> = (0..h * w * k).map(|_| rng.random_range(-3.0..3.0)).collect();
    ProbabilityMap::from_logits(h, w, k, &logits).unwrap()
}

fn loss_constants(c: &mut Checks) {
    let wts = LossWeights::default();
    for (input, want) in [((1.0, 0.0, 0.0), 0.5), ((0.0, 1.0, 0.0), 0.3), ((0.0, 0.0, 1.0), 0.2)] {
        let got = wts.combine(input.0, input.1, input.2);
        c.check(got == want, || format!("combine{input:?} = {got}, want {want}"));
    }
    let ds = deep_supervision_combine(&[1.0; 4]).unwrap();
    c.check((ds - 1.9).abs() <= 1e-12, || format!("deep supervision {ds}"));

    let mut rng = seed::rng(5);
    let k = 4;
    for map in 0..100 {
        let probs = random_probs(&mut rng, 6, 6, k);
        let gt = random_mask(&mut rng, 6, 6, (k - 1) as u8);
        let focal = focal_loss(&probs, &gt, 1.0, 0.0).unwrap();
        let mut bce = 0.0;
        for class in 0..k {
            let mut s = 0.0;
            for (p, &l) in gt.labels().iter().enumerate() {
                let q = probs.get(p, class);
                s -= if usize::from(l) == class { q.ln() } else { (1.0 - q).ln() };
            }
            bce += s / gt.labels().len() as f64;
        }
        bce /= k as f64;
        c.check((focal - bce).abs() <= 1e-9, || format!("map {map}: focal {focal} vs BCE {bce}"));
        if map < 5 {
            let b = combined_loss_with(&probs, &gt, &wts, &FocalParams::default()).unwrap();
            let manual = 0.5 * cross_entropy(&probs, &gt).unwrap()
                + 0.3 * dice_loss(&probs, &gt).unwrap()
                + 0.2 * focal_loss(&probs, &gt, 1.0, 2.0).unwrap();
            c.check((b.total - manual).abs() <= 1e-12, || format!("combined {} vs {manual}", b.total));
        }
    }
}

fn stitched(mask: &MaskBuffer, basis: &[Vec<f32>]) -> FeatureMap {
    FeatureMap::from_fn(mask.height(), mask.width(), basis[0].len(), |y, x| {
        basis[usize::from(mask.get(y, x))].clone()
    })
    .unwrap()
}

/// Random labels 0..=2 with every label present.
fn with_all(rng: &mut impl Rng) -> MaskBuffer {
    let mut m = random_mask(rng, 16, 16, 2);
    for l in 0..3 {
        m.set(0, usize::from(l), l);
    }
    m
}

fn prototype_reproduction(c: &mut Checks) {
    let start = Instant::now();
    let basis: Vec<Vec<f32>> = (0..3)
        .map(|i| {
            let mut v = vec![0.0f32; 8];
            v[i * 2] = 1.0 + i as f32;
            v
        })
        .collect();
    let mut rng = seed::rng(6);
    let target = with_all(&mut rng);
    let support_mask = with_all(&mut rng);
    let query = stitched(&target, &basis);
    let support = stitched(&support_mask, &basis);
    let protos: Vec<_> = (0..3)
        .map(|l| masked_average_pool(std::slice::from_ref(&support), std::slice::from_ref(&support_mask), l).unwrap())
        .collect();
    let seg = segment(&query, &protos, 20.0).unwrap();
    c.check(seg.mask == target, || "segmentation differs from the target mask".into());
    let k = seg.probabilities.classes();
    for p in 0..16 * 16 {
        let s: f64 = (0..k).map(|i| seg.probabilities.get(p, i)).sum();
        c.check((s - 1.0).abs() <= 1e-6, || format!("pixel {p} probabilities sum to {s}"));
    }
    let out = bidirectional_round(&[(support, support_mask)], &[(query, target)], &[1, 2], 20.0).unwrap();
    c.check(out.l_total == out.l_query + out.l_support, || {
        format!("L_total {} != {} + {}", out.l_total, out.l_query, out.l_support)
    });
    let t = start.elapsed();
    c.check(t < Duration::from_secs(1), || format!("took {t:?}"));
}

fn netcost_constants(c: &mut Checks) {
    let r = reduction_factor(&ConvShape::new(3, 1, 1_000_000).unwrap());
    c.check(r > 8.99 && r < 9.0, || format!("reduction factor {r}"));
    for ch in [8, 16, 32] {
        for side in [16, 32, 64] {
            let want = ch >= 16 && side * side <= 1024;
            let got = tikan_active(ch, side, side);
            c.check(got == want, || format!("tikan_active({ch}, {side}x{side}) = {got}"));
        }
    }
    for degree in 1..=5 {
        let b = SplineBasis::default_grid(8, degree).unwrap();
        for i in 1..=1000 {
            let x = -1.0 + 2.0 * i as f64 / 1001.0;
            let s: f64 = b.basis(x).unwrap().iter().sum();
            c.check((s - 1.0).abs() <= 1e-9, || format!("degree {degree} at {x}: sum {s}"));
        }
    }
}

fn augmentation_soundness(c: &mut Checks) {
    let photometric = [
        TransformSpec::HistogramEq,
        TransformSpec::GaussianNoise { stddev: 12.0 },
        TransformSpec::GaussianBlur { radius: 1.5 },
        TransformSpec::Sharpen,
        TransformSpec::Shadow { pattern: LightPattern::Linear, strength: 0.6 },
        TransformSpec::Highlight { pattern: LightPattern::Radial, strength: 0.6 },
        TransformSpec::ColorJitter { brightness: 0.3, contrast: 0.3, saturation: 0.3 },
        TransformSpec::ChannelEmphasis { channel: 1, factor: 1.5 },
    ];
    let mut rng = seed::rng(9);
    for i in 0..100u64 {
        let s = random_sample(i, 20 + (i % 7) as usize, 24, 8);
        let twice = hflip(&hflip(&s).unwrap()).unwrap();
        c.check(twice == s, || format!("hflip twice changed sample {i}"));
        let spec = &photometric[i as usize % photometric.len()];
        let out = apply_photometric(spec, &s, i).unwrap();
        c.check(out.mask == s.mask, || format!("{} changed a mask", spec.tag()));
        let geo = match i % 6 {
            0 => TransformSpec::Hflip,
            1 => TransformSpec::Vflip,
            2 => TransformSpec::Rotate { degrees: rng.random_range(-179.0..180.0) },
            3 => TransformSpec::Perspective { strength: 0.2 },
            4 => TransformSpec::Elastic { alpha: 34.0, sigma: 4.0 },
            _ => TransformSpec::RandomCrop { height: 10, width: 12 },
        };
        let out = apply_geometric(&geo, &s, i).unwrap();
        let mut allowed = s.mask.label_set();
        allowed.insert(0);
        let got = out.mask.label_set();
        c.check(got.is_subset(&allowed), || format!("{} produced labels {got:?} from {allowed:?}", geo.tag()));
    }
    let samples: Vec<Sample> = (0..5).map(|i| random_sample(1000 + i, 16, 16, 3)).collect();
    let out = standard_pipeline(&samples, 42).unwrap();
    c.check(out.len() == 35, || format!("standard pipeline gave {} samples from 5", out.len()));
    let ids: BTreeSet<&str> = out.iter().map(|s| s.id.as_str()).collect();
    c.check(ids.len() == 35, || "standard pipeline ids collide".into());
}

/// Twelve train and four test images; the train set holds an exact copy of
/// `t0` and a copy of `t1` with one bit flipped.
fn chain_fixture(root: &Path) {
    let test: Vec<Sample> = (0..4)
        .map(|i| defect_sample(&format!("t{i}"), 500 + i, 64, 64, &[(i % 3) as u8 + 1], 12))
        .collect();
    let mut train: Vec<Sample> = (0..10u64)
        .map(|i| {
            let labels: &[u8] = match i {
                9 => &[1, 2],
                _ => &[[1, 2, 3][i as usize % 3]],
            };
            defect_sample(&format!("r{i:02}"), 600 + i, 64, 64, labels, 12)
        })
        .collect();
    train.push(test[0].clone().with_id("r_dup"));
    let mut near = test[1].clone().with_id("r_near");
    near.image.data_mut()[3 * (64 * 40 + 5)] ^= 1;
    train.push(near);
    write_dataset(&root.join("train"), &train);
    write_dataset(&root.join("test"), &test);
}

fn chain(root: &Path) -> (String, Duration) {
    chain_fixture(root);
    let start = Instant::now();
    let mut log = String::new();
    let mut step = |args: &[&str]| {
        let mut full = vec!["--classes", "3"];
        full.extend_from_slice(args);
        let o = ok_in(root, &full);
        log.push_str(&stdout(&o));
    };
    step(&["dedup", "train", "test", "--report", "dedup.csv", "--manifest", "kept.txt", "--out", "kept"]);
    step(&["augment", "kept", "aug"]);
    step(&["harvest", "aug", "aug", "--sizes", "24,20"]);
    step(&["batches", "aug", "--batch-size", "8", "--out", "batches.json"]);
    step(&["inject", "batches.json", "aug", "--data", "aug", "--out", "injected", "--report", "inject.csv"]);
    step(&["episode", "aug", "--n", "2", "--k", "2", "--episodes", "2", "--out", "episodes.json"]);
    let manifest = EpisodeManifest::from_json(&fs::read_to_string(root.join("episodes.json")).unwrap()).unwrap();
    for e in &manifest.episodes {
        for id in e.support_ids().chain(e.query_ids()) {
            let f = label_features(&root.join("aug"), id, 8, 2, 3);
            write_features(&root.join("features"), id, &f);
        }
    }
    step(&["protohead", "episodes.json", "features", "--data", "aug", "--out", "proto"]);
    for e in &manifest.episodes {
        let dir = format!("proto/episode_{:04}", e.index);
        let ids = format!("{dir}/manifest.txt");
        let csv = format!("metrics_{:04}.csv", e.index);
        step(&["metrics", &dir, "aug", "--manifest", &ids, "--csv", &csv]);
    }
    (log, start.elapsed())
}

fn pipeline_determinism(c: &mut Checks) {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (log_a, t_a) = chain(a.path());
    let (log_b, t_b) = chain(b.path());
    for t in [t_a, t_b] {
        c.check(t < Duration::from_secs(10), || format!("chain took {t:?}"));
    }
    c.check(log_a == log_b, || "command output differs between runs".into());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<_> = sa
        .keys()
        .chain(sb.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| sa.get(*k) != sb.get(*k))
        .collect();
    c.check(differing.is_empty(), || format!("files differ: {differing:?}"));
    let report = fs::read_to_string(a.path().join("dedup.csv")).unwrap();
    let removed: BTreeSet<&str> = report.lines().skip(1).filter_map(|l| l.split(',').next()).collect();
    c.check(removed == BTreeSet::from(["r_dup", "r_near"]), || format!("dedup removed {removed:?}"));
    let kept = io::read_manifest(&a.path().join("kept.txt")).unwrap();
    c.check(kept.len() == 10, || format!("{} train samples kept", kept.len()));
    let injected = fs::read_to_string(a.path().join("inject.csv")).unwrap();
    c.check(injected.lines().count() > 1, || "no injections happened".into());
}

type Criterion = (&'static str, fn(&mut Checks));

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("Poisson correctness", poisson_correctness),
        ("DLI algorithm replay", dli_replay),
        ("metric oracle equivalence", metric_oracle),
        ("FWIoU properties", fwiou_properties),
        ("loss constants", loss_constants),
        ("prototype head reproduction", prototype_reproduction),
        ("net-cost constants", netcost_constants),
        ("pipeline determinism and hygiene", pipeline_determinism),
        ("augmentation soundness", augmentation_soundness),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let mut c = Checks::default();
        run(&mut c);
        if c.failures.is_empty() {
            println!("PASS {}. {name}", i + 1);
        } else {
            failed += 1;
            let shown: Vec<&str> = c.failures.iter().take(5).map(String::as_str).collect();
            println!(
                "FAIL {}. {name}: {} ({} check(s) failed)",
                i + 1,
                shown.join("; "),
                c.failures.len()
            );
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
