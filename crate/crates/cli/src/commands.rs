use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use segforge::augment::{run_pipeline, PipelineConfig};
use segforge::dedup::{dedup_filter, DedupOptions};
use segforge::dli::{harvest_defect_free, inject_batch, report_csv, BatchManifest, InjectionConfig};
use segforge::episodic::{episode_stream, EpisodeManifest, EpisodeOptions};
use segforge::losses::{combined_loss_with, FocalParams, LossWeights, ProbabilityMap};
use segforge::metrics::evaluate_dataset;
use segforge::netcost::{cost_table_csv, LayerSpecFile};
use segforge::protohead::{bidirectional_round, FeatureMap};
use segforge::{io, seed, CiwTable, MaskBuffer, Sample};

use crate::{
    AugmentArgs, BatchesArgs, Cli, Command, CostArgs, DedupArgs, EpisodeArgs, HarvestArgs,
    InjectArgs, MetricsArgs, ProtoheadArgs,
};

/// Extension of feature-map files.
pub const FEATURE_EXT: &str = "feat";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Lib(segforge::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Lib(e) if e.is_data_error() => 2,
            CliError::Lib(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
            CliError::Lib(e) => e.fmt(f),
        }
    }
}

impl From<segforge::Error> for CliError {
    fn from(e: segforge::Error) -> Self {
        CliError::Lib(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    if cli.classes == 0 {
        return Err(CliError::Usage("--classes must be positive".into()));
    }
    match &cli.command {
        Command::Dedup(a) => dedup(cli, a),
        Command::Augment(a) => augment(cli, a),
        Command::Harvest(a) => harvest(cli, a),
        Command::Batches(a) => batches(cli, a),
        Command::Inject(a) => inject(cli, a),
        Command::Episode(a) => episode(cli, a),
        Command::Protohead(a) => protohead(cli, a),
        Command::Metrics(a) => metrics(cli, a),
        Command::Cost(a) => cost(a),
    }
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: not a directory", dir.display())))
    }
}

fn save_all(dir: &Path, samples: &[Sample]) -> Result<()> {
    io::create_dir(dir)?;
    samples.par_iter().try_for_each(|s| io::save_sample(dir, s))?;
    Ok(())
}

fn ids_of(samples: &[Sample]) -> Vec<String> {
    samples.iter().map(|s| s.id.clone()).collect()
}

fn dedup(cli: &Cli, a: &DedupArgs) -> Result<()> {
    require_dir(&a.train_dir)?;
    require_dir(&a.test_dir)?;
    let train = io::load_dataset(&a.train_dir, cli.classes)?;
    let test = io::load_dataset(&a.test_dir, cli.classes)?;
    let options = DedupOptions {
        threshold: a.threshold,
        intra_train: a.intra_train,
    };
    let outcome = dedup_filter(&train, &test, options);
    log::info!(
        "kept {} of {} train samples, removed {}",
        outcome.kept.len(),
        train.len(),
        outcome.removed.len()
    );
    if let Some(p) = &a.report {
        io::write_text(p, &outcome.report_csv())?;
    }
    let kept = ids_of(&outcome.kept);
    match &a.manifest {
        Some(p) => io::write_manifest(p, &kept)?,
        None => kept.iter().for_each(|id| println!("{id}")),
    }
    if let Some(dir) = &a.out {
        save_all(dir, &outcome.kept)?;
    }
    Ok(())
}

fn load_input(dir: &Path, manifest: Option<&PathBuf>, classes: u8) -> Result<Vec<Sample>> {
    require_dir(dir)?;
    Ok(match manifest {
        Some(m) => io::load_samples(dir, &io::read_manifest(m)?, classes)?,
        None => io::load_dataset(dir, classes)?,
    })
}

fn augment(cli: &Cli, a: &AugmentArgs) -> Result<()> {
    let samples = load_input(&a.in_dir, a.manifest.as_ref(), cli.classes)?;
    let config = if a.pipeline == "standard" {
        PipelineConfig::standard()
    } else {
        PipelineConfig::from_json(&io::read_text(Path::new(&a.pipeline))?)?
    };
    let out = run_pipeline(&samples, &config.transforms, cli.seed)?;
    save_all(&a.out_dir, &out)?;
    io::write_manifest(&a.out_dir.join("manifest.txt"), &ids_of(&out))?;
    println!("{} samples from {} inputs", out.len(), samples.len());
    Ok(())
}

fn harvest(cli: &Cli, a: &HarvestArgs) -> Result<()> {
    if a.sizes.contains(&0) {
        return Err(CliError::Usage("crop sizes must be positive".into()));
    }
    let samples = load_input(&a.in_dir, None, cli.classes)?;
    let crops = harvest_defect_free(&samples, &a.sizes, a.attempts, cli.seed);
    save_all(&a.out_dir, &crops)?;
    println!("{} defect-free crops", crops.len());
    Ok(())
}

fn batches(cli: &Cli, a: &BatchesArgs) -> Result<()> {
    require_dir(&a.data_dir)?;
    if a.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be positive".into()));
    }
    let ids = io::list_ids(&a.data_dir)?;
    let manifest = BatchManifest::shuffled(&ids, a.batch_size, cli.seed)?;
    io::write_text(&a.out, &manifest.to_json())?;
    Ok(())
}

fn inject(cli: &Cli, a: &InjectArgs) -> Result<()> {
    let manifest = BatchManifest::from_json(&io::read_text(&a.batches)?)?;
    let mut config = match &a.config {
        Some(p) => InjectionConfig::from_json(&io::read_text(p)?)?,
        None => InjectionConfig::default(),
    };
    if let Some(p) = a.p_poisson {
        config.p_poisson = p;
    }
    config.validate()?;
    require_dir(&a.data)?;
    let sources = load_input(&a.source_dir, None, cli.classes)?;
    let outcomes = manifest
        .batches
        .par_iter()
        .enumerate()
        .map(|(idx, ids)| {
            let batch = ids
                .iter()
                .map(|id| io::load_sample(&a.data, id, cli.classes))
                .collect::<segforge::Result<Vec<_>>>()?;
            let seed = seed::derive_index(cli.seed, idx as u64);
            inject_batch(&batch, &sources, cli.classes, &config, seed)
        })
        .collect::<segforge::Result<Vec<_>>>()?;
    for (idx, o) in outcomes.iter().enumerate() {
        save_all(&a.out.join(format!("batch_{idx:04}")), &o.batch)?;
    }
    let rows: Vec<(usize, &[_])> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| (i, o.events.as_slice()))
        .collect();
    let report = report_csv(&rows);
    match &a.report {
        Some(p) => io::write_text(p, &report)?,
        None => print!("{report}"),
    }
    Ok(())
}

fn episode(cli: &Cli, a: &EpisodeArgs) -> Result<()> {
    let samples = load_input(&a.data_dir, None, cli.classes)?;
    let options = EpisodeOptions {
        n: a.n,
        k: a.k,
        queries_per_class: a.queries,
        include_background: !a.no_background,
    };
    let episodes = episode_stream(&samples, options, a.episodes, cli.seed)
        .collect::<segforge::Result<Vec<_>>>()?;
    io::write_text(&a.out, &EpisodeManifest { episodes }.to_json())?;
    Ok(())
}

fn load_features(dir: &Path, id: &str) -> Result<FeatureMap> {
    let path = dir.join(format!("{id}.{FEATURE_EXT}"));
    if !path.exists() {
        return Err(CliError::Data(format!("missing feature map for `{id}` ({})", path.display())));
    }
    Ok(FeatureMap::decode(&io::read_bytes(&path)?)?)
}

fn load_pairs<'a>(
    ids: impl Iterator<Item = &'a str>,
    features: &Path,
    data: &Path,
    classes: u8,
) -> Result<Vec<(String, FeatureMap, MaskBuffer)>> {
    ids.map(|id| {
        let f = load_features(features, id)?;
        let m = io::load_mask(&io::mask_path(data, id), classes)?;
        Ok((id.to_string(), f, m))
    })
    .collect()
}

fn protohead(cli: &Cli, a: &ProtoheadArgs) -> Result<()> {
    let manifest = EpisodeManifest::from_json(&io::read_text(&a.manifest)?)?;
    require_dir(&a.features_dir)?;
    require_dir(&a.data)?;
    io::create_dir(&a.out)?;
    let mut losses = String::from("episode,l_query,l_support,l_total\n");
    for e in &manifest.episodes {
        let support = load_pairs(e.support_ids(), &a.features_dir, &a.data, cli.classes)?;
        let query = load_pairs(e.query_ids(), &a.features_dir, &a.data, cli.classes)?;
        let strip = |v: &[(String, FeatureMap, MaskBuffer)]| -> Vec<(FeatureMap, MaskBuffer)> {
            v.iter().map(|(_, f, m)| (f.clone(), m.clone())).collect()
        };
        let outcome = bidirectional_round(&strip(&support), &strip(&query), &e.class_labels(), a.alpha)?;
        if !outcome.skipped_forward.is_empty() || !outcome.skipped_reverse.is_empty() {
            log::warn!(
                "episode {}: no prototype for {:?} (forward) {:?} (reverse)",
                e.index,
                outcome.skipped_forward,
                outcome.skipped_reverse
            );
        }
        let dir = a.out.join(format!("episode_{:04}", e.index));
        io::create_dir(&dir)?;
        for ((id, _, gt), pred) in query.iter().zip(&outcome.query_predictions) {
            let full = pred.resize_nearest(gt.height(), gt.width())?;
            io::save_mask(&io::mask_path(&dir, id), &full)?;
        }
        let ids: Vec<String> = query.iter().map(|(id, _, _)| id.clone()).collect();
        io::write_manifest(&dir.join("manifest.txt"), &ids)?;
        let _ = writeln!(
            losses,
            "{},{},{},{}",
            e.index, outcome.l_query, outcome.l_support, outcome.l_total
        );
    }
    io::write_text(&a.out.join("losses.csv"), &losses)?;
    print!("{losses}");
    Ok(())
}

#[derive(Default)]
struct LossSums {
    ce: f64,
    dice: f64,
    focal: f64,
    total: f64,
}

fn metrics(cli: &Cli, a: &MetricsArgs) -> Result<()> {
    require_dir(&a.pred_dir)?;
    require_dir(&a.gt_dir)?;
    let ids = match &a.manifest {
        Some(m) => io::read_manifest(m)?,
        None => io::list_mask_ids(&a.gt_dir)?,
    };
    if ids.is_empty() {
        return Err(segforge::Error::EmptyDataset.into());
    }
    let ciw = match &a.ciw {
        Some(p) => CiwTable::from_json(&io::read_text(p)?)?,
        None => CiwTable::culvert_default(),
    };
    let classes = usize::from(cli.classes) + 1;
    let loaded = ids
        .par_iter()
        .map(|id| {
            let gt = io::load_mask(&io::mask_path(&a.gt_dir, id), cli.classes)?;
            if a.loss {
                let f = load_features(&a.pred_dir, id)?;
                if f.dim() != classes {
                    return Err(CliError::Data(format!(
                        "`{id}`: logit map has {} channels, expected {classes}",
                        f.dim()
                    )));
                }
                let logits: Vec<f64> = f.values().iter().map(|&v| f64::from(v)).collect();
                let probs = ProbabilityMap::from_logits(f.height(), f.width(), classes, &logits)?;
                let l = combined_loss_with(&probs, &gt, &LossWeights::default(), &FocalParams::default())?;
                Ok((probs.argmax(), gt, Some(l)))
            } else {
                let path = io::mask_path(&a.pred_dir, id);
                if !path.exists() {
                    return Err(CliError::Data(format!(
                        "missing prediction for `{id}` ({})",
                        path.display()
                    )));
                }
                Ok((io::load_mask(&path, cli.classes)?, gt, None))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut preds = Vec::with_capacity(loaded.len());
    let mut gts = Vec::with_capacity(loaded.len());
    let mut sums = LossSums::default();
    for (p, g, l) in loaded {
        preds.push(p);
        gts.push(g);
        if let Some(l) = l {
            sums.ce += l.ce;
            sums.dice += l.dice;
            sums.focal += l.focal;
            sums.total += l.total;
        }
    }
    let report = evaluate_dataset(&preds, &gts, cli.classes, &ciw)?;
    let mut text = report.to_text();
    if a.loss {
        let n = preds.len() as f64;
        for (k, v) in [
            ("ce", sums.ce),
            ("dice", sums.dice),
            ("focal", sums.focal),
            ("total", sums.total),
        ] {
            let _ = writeln!(text, "loss.{k} = {:.6}", v / n);
        }
    }
    print!("{text}");
    if let Some(p) = &a.csv {
        io::write_text(p, &report.to_csv())?;
    }
    Ok(())
}

fn cost(a: &CostArgs) -> Result<()> {
    let mut spec = LayerSpecFile::from_json(&io::read_text(&a.layers)?)?;
    if a.bias {
        spec.layers.iter_mut().for_each(|l| l.bias = true);
    }
    let table = cost_table_csv(&spec.costs()?);
    match &a.out {
        Some(p) => io::write_text(p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}
