use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use log::{error, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use weedshift::adapt::{self, Monitor, Strategy};
use weedshift::config::{RunConfig, RESOLVED_CONFIG_FILE};
use weedshift::corpus::{DatasetDir, FeatureTable, FEATURES_FILE, MANIFEST_FILE};
use weedshift::data::{DomainDataset, Split};
use weedshift::eval::{self, MetricsReport};
use weedshift::nn::{build_model, Checkpoint};
use weedshift::raster::{extract_tile_pixels, tile_descriptor, Raster};
use weedshift::synth;
use weedshift::tiling::{self, BBoxAnnotation, SplitManifest, TileRecord};

use crate::{Cli, Command, EvalArgs, ReportArgs, SplitArgs, SynthArgs, TileArgs, TrainArgs};

pub const PLANTS_FILE: &str = "plants.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.txt";
pub const PLOT_FILE: &str = "plot.jsonl";

struct Session {
    config: RunConfig,
    out_root: Option<PathBuf>,
}

impl Session {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.out_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .context("cannot start the worker pool")?;
    let mut ctx = Session {
        config,
        out_root: cli.out_root,
    };
    match cli.command {
        Command::Tile(a) => cmd_tile(&mut ctx, a),
        Command::Split(a) => cmd_split(&mut ctx, a),
        Command::Train(a) => cmd_train(&mut ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Synth(a) => cmd_synth(&mut ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_resolved(config: &RunConfig, dir: &Path) -> Result<()> {
    config.validate()?;
    config.save(&dir.join(RESOLVED_CONFIG_FILE))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !matches!(ext, "pgm" | "ppm" | "pnm") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                bail!("two images named `{stem}`: {} and {}", prev.display(), path.display());
            }
        }
    }
    Ok(out)
}

type TiledImage = (Vec<TileRecord>, Vec<Vec<f64>>);

fn tile_one(
    image_id: &str,
    path: Option<&PathBuf>,
    boxes: &[BBoxAnnotation],
    config: &tiling::TilingConfig,
) -> Result<TiledImage> {
    let path = path.with_context(|| format!("image `{image_id}` is annotated but has no raster"))?;
    let raster = Raster::load(path)?;
    let records = tiling::tile_image(image_id, raster.width, raster.height, boxes, config)?;
    let features = records
        .iter()
        .map(|r| Ok(tile_descriptor(&extract_tile_pixels(&raster, r.x, r.y, r.side)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, features))
}

fn cmd_tile(ctx: &mut Session, a: TileArgs) -> Result<ExitCode> {
    if let Some(t) = a.tile {
        ctx.config.tiling.tile = t;
    }
    if let Some(r) = a.r_th {
        ctx.config.tiling.r_th = r;
    }
    ctx.config.validate()?;
    let tcfg = ctx.config.tiling.to_tiling();
    let boxes = tiling::read_annotations(&a.annotations)?;
    let images = image_files(&a.images)?;
    let mut ids: BTreeSet<String> = images.keys().cloned().collect();
    ids.extend(boxes.iter().map(|b| b.image_id.clone()));
    let mut by_image: BTreeMap<&str, Vec<BBoxAnnotation>> = BTreeMap::new();
    for b in &boxes {
        by_image.entry(&b.image_id).or_default().push(b.clone());
    }

    let ids: Vec<String> = ids.into_iter().collect();
    let results: Vec<Result<TiledImage>> = ids
        .par_iter()
        .map(|id| {
            let own = by_image.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            tile_one(id, images.get(id), own, &tcfg)
        })
        .collect();

    let mut records = Vec::new();
    let mut features: Option<FeatureTable> = None;
    let mut failures = 0;
    for (id, res) in ids.iter().zip(results) {
        match res {
            Ok((recs, feats)) => {
                for (r, f) in recs.iter().zip(feats) {
                    let table = features.get_or_insert_with(|| FeatureTable::new(f.len()));
                    table.insert((r.image_id.clone(), r.x, r.y), f)?;
                }
                records.extend(recs);
            }
            Err(e) => {
                error!("image `{id}`: {e:#}");
                failures += 1;
            }
        }
    }

    let out = ctx.out(&a.out);
    create_dir(&out)?;
    let counts = tiling::label_counts(&records);
    let mut plants = csv::Writer::from_path(out.join(PLANTS_FILE))?;
    plants.write_record(["image_id", "x", "y", "plant_id"])?;
    for r in &records {
        for p in &r.plants {
            plants.write_record([r.image_id.clone(), r.x.to_string(), r.y.to_string(), p.clone()])?;
        }
    }
    plants.flush()?;
    let manifest = SplitManifest::unsplit(records, &a.domain)?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    features
        .unwrap_or_else(|| FeatureTable::new(1))
        .save(&out.join(FEATURES_FILE))?;
    write_resolved(&ctx.config, &out)?;
    println!(
        "tiles: {} background, {} positive, {} unclear ({} images, {} failed)",
        counts[0],
        counts[1],
        counts[2],
        ids.len() - failures,
        failures
    );
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

#[derive(Deserialize)]
struct PlantRow {
    image_id: String,
    x: u32,
    y: u32,
    plant_id: String,
}

fn read_plants(dir: &Path) -> Result<BTreeMap<(String, u32, u32), BTreeSet<String>>> {
    let path = dir.join(PLANTS_FILE);
    let mut out: BTreeMap<_, BTreeSet<String>> = BTreeMap::new();
    if !path.exists() {
        warn!("{} missing; positive tiles are grouped by image", path.display());
        return Ok(out);
    }
    let mut rdr = csv::Reader::from_path(&path).with_context(|| format!("cannot read {}", path.display()))?;
    for row in rdr.deserialize::<PlantRow>() {
        let row = row?;
        out.entry((row.image_id, row.x, row.y)).or_default().insert(row.plant_id);
    }
    Ok(out)
}

fn cmd_split(ctx: &mut Session, a: SplitArgs) -> Result<ExitCode> {
    if let Some(v) = a.val_fraction {
        ctx.config.split.val_fraction = v;
    }
    if let Some(m) = &a.mode {
        ctx.config.split.mode = m.parse()?;
    }
    if let Some(s) = a.seed {
        ctx.config.split.seed = s;
    }
    ctx.config.validate()?;
    let mut records = Vec::new();
    let mut features: Option<FeatureTable> = None;
    for dir in &a.inputs {
        let data = DatasetDir::load(dir)?;
        let plants = read_plants(dir)?;
        let table = features.get_or_insert_with(|| FeatureTable::new(data.features.dim));
        if table.dim != data.features.dim {
            bail!(
                "{} has {}-dimensional features, earlier inputs have {}",
                dir.display(),
                data.features.dim,
                table.dim
            );
        }
        for (k, v) in data.features.rows {
            table.insert(k, v)?;
        }
        for rec in data.manifest.records {
            let mut tile = rec.tile;
            if let Some(p) = plants.get(&(tile.image_id.clone(), tile.x, tile.y)) {
                tile.plants = p.clone();
            } else if tile.label != 0 {
                tile.plants.insert(format!("image:{}", tile.image_id));
            }
            records.push((tile, rec.domain_id));
        }
    }
    let s = &ctx.config.split;
    let manifest = tiling::build_splits(records, s.val_fraction, s.mode, s.seed)?;
    let out = ctx.out(&a.out);
    let dir = DatasetDir {
        manifest,
        features: features.context("no inputs")?,
    };
    dir.save(&out)?;
    write_resolved(&ctx.config, &out)?;
    for d in dir.manifest.domains() {
        let count = |split| {
            dir.manifest
                .records
                .iter()
                .filter(|r| r.domain_id == d && r.split == split)
                .count()
        };
        println!("{d}: {} train, {} val", count(Split::Train), count(Split::Val));
    }
    Ok(ExitCode::SUCCESS)
}

fn apply_train_overrides(config: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    let t = &mut config.training;
    if let Some(s) = &a.strategy {
        t.strategy = s.parse()?;
    }
    if let Some(o) = &a.optimizer {
        t.optimizer = o.parse()?;
    }
    macro_rules! set {
        ($($field:expr => $value:expr),* $(,)?) => {
            $(if let Some(v) = $value { $field = v; })*
        };
    }
    set! {
        t.lambda => a.lambda,
        t.epochs => a.epochs,
        t.warmup => a.warmup,
        t.lr => a.lr,
        t.batch_size => a.batch_size,
        t.seed => a.seed,
        config.model.unfreeze => a.unfreeze,
        config.model.lora_rank => a.lora_rank,
        config.evaluation.window => a.window,
    }
    Ok(())
}

fn cmd_train(ctx: &mut Session, a: TrainArgs) -> Result<ExitCode> {
    apply_train_overrides(&mut ctx.config, &a)?;
    ctx.config.validate()?;
    let acfg = ctx.config.training.to_adaptation()?;
    if acfg.strategy != Strategy::Vanilla && a.target.is_none() {
        bail!(weedshift::Error::Config(format!(
            "strategy {} needs an unlabelled target stream (--target)",
            acfg.strategy
        )));
    }

    let mut train_sets: BTreeMap<String, DomainDataset> = BTreeMap::new();
    let mut val_sets = Vec::new();
    for dir in &a.sources {
        let data = DatasetDir::load(dir)?;
        for ((domain, split), ds) in data.datasets()? {
            match split {
                Split::Train => {
                    if train_sets.insert(domain.clone(), ds).is_some() {
                        bail!("source domain `{domain}` appears in more than one input");
                    }
                }
                Split::Val => val_sets.push(ds),
                _ => {}
            }
        }
    }
    let sources: Vec<DomainDataset> = train_sets.into_values().collect();
    if acfg.strategy == Strategy::M3sdaBeta && sources.len() < 2 {
        bail!(weedshift::Error::Config(format!(
            "m3sda_beta needs at least 2 source domains, got {}",
            sources.len()
        )));
    }
    let dim = sources
        .first()
        .map(|d| d.dim)
        .context("no training tiles in the source inputs")?;
    let target = match &a.target {
        Some(dir) => DatasetDir::load(dir)?.by_domain()?,
        None => Vec::new(),
    };

    let model_cfg = ctx.config.model.to_model(
        dim,
        adapt::head_layout(acfg.strategy, sources.len()),
        acfg.seed,
    )?;
    let mut model = build_model(&model_cfg)?;
    info!(
        "training {} on {} source domains, {} trainable parameters",
        acfg.strategy,
        sources.len(),
        model.trainable_count()
    );
    let monitor = Monitor {
        validation: &val_sets,
        target: &target,
    };
    let outcome = adapt::train(&mut model, &sources, &target, &monitor, &acfg, ctx.config.evaluation.window)?;

    let out = ctx.out(&a.out);
    create_dir(&out)?;
    write_resolved(&ctx.config, &out)?;
    write_jsonl(&out.join(HISTORY_FILE), &outcome.history)?;
    write_jsonl(&out.join(STEPS_FILE), &outcome.steps)?;
    let meta = BTreeMap::from([
        ("strategy".to_string(), acfg.strategy.to_string()),
        ("selected_epoch".to_string(), outcome.selected_epoch.to_string()),
        (
            "source_domains".to_string(),
            sources.iter().map(|d| d.domain_id.as_str()).collect::<Vec<_>>().join(","),
        ),
    ]);
    Checkpoint {
        model: outcome.selected.clone(),
        meta,
    }
    .save(&out.join(CHECKPOINT_FILE))?;
    write_report(&out, &outcome.report)?;
    println!(
        "selected epoch {} (val F1 {:.4}); target median F1 {}",
        outcome.selected_epoch,
        outcome.history[outcome.selected_epoch - 1].val_f1,
        outcome
            .report
            .median_f1()
            .map_or("n/a".to_string(), |f| format!("{f:.4}"))
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct PlotRow<'a> {
    subdomain: &'a str,
    precision: f64,
    recall: f64,
    f1: f64,
    positives: u64,
    excluded: bool,
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<()> {
    fs::write(out.join(REPORT_FILE), report.to_table())?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(out.join(METRICS_FILE), json)?;
    let rows: Vec<PlotRow> = report
        .per_subdomain
        .iter()
        .map(|(id, s)| PlotRow {
            subdomain: id,
            precision: s.scores.precision,
            recall: s.scores.recall,
            f1: s.scores.f1,
            positives: s.counts.positives(),
            excluded: s.excluded,
        })
        .collect();
    write_jsonl(&out.join(PLOT_FILE), &rows)
}

fn cmd_eval(ctx: &Session, a: EvalArgs) -> Result<ExitCode> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let data = DatasetDir::load(&a.target)?;
    let model_dim = checkpoint.model.input_dim();
    if data.features.dim != model_dim {
        bail!(
            "feature dimension mismatch: {} has {}-dimensional features but the checkpoint expects {}",
            a.target.display(),
            data.features.dim,
            model_dim
        );
    }
    let domains = data.by_domain()?;
    let counts: Vec<(String, eval::ConfusionCounts)> = domains
        .par_iter()
        .map(|d| {
            let predicted = checkpoint.model.predict(&d.features, d.len())?;
            Ok((
                d.domain_id.clone(),
                eval::ConfusionCounts::from_predictions(&predicted, &d.labels),
            ))
        })
        .collect::<weedshift::Result<_>>()?;
    let mut report = MetricsReport::from_counts(counts.into_iter().collect());
    report.selected_epoch = checkpoint.meta.get("selected_epoch").and_then(|e| e.parse().ok());
    let out = ctx.out(&a.out);
    create_dir(&out)?;
    write_report(&out, &report)?;
    print!("{}", report.to_table());
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(ctx: &mut Session, a: SynthArgs) -> Result<ExitCode> {
    let s = &mut ctx.config.synth;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.n_samples {
        s.n_samples = v;
    }
    if let Some(v) = a.target_shift {
        s.target_shift = v;
    }
    ctx.config.validate()?;
    let s = &ctx.config.synth;
    let mut spec = synth::default_benchmark().with_target_shift(s.target_shift);
    for d in spec.sources.iter_mut().chain([&mut spec.target]) {
        d.n_samples = s.n_samples;
    }
    let corpus = synth::generate(&spec, s.seed)?;
    let mut parts = Vec::new();
    for src in &corpus.sources {
        parts.push(synth::split_validation(src, s.val_fraction, s.seed)?);
    }
    let source_parts: Vec<(&DomainDataset, Split)> = parts
        .iter()
        .flat_map(|(train, val)| [(train, Split::Train), (val, Split::Val)])
        .collect();
    let out = ctx.out(&a.out);
    DatasetDir::from_datasets(&source_parts)?.save(&out.join("source"))?;
    DatasetDir::from_datasets(&[(&corpus.target, Split::Test)])?.save(&out.join("target"))?;
    let mut spec_json = serde_json::to_string_pretty(&spec)?;
    spec_json.push('\n');
    fs::write(out.join("benchmark.json"), spec_json)?;
    write_resolved(&ctx.config, &out)?;
    let reference = synth::bayes_reference(&spec, &corpus)?;
    for (domain, f1) in &reference {
        println!("{domain}: reference F1 {f1:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ReportRow {
    run: String,
    strategy: String,
    adaptation: String,
    trainable_params: usize,
    median_f1: Option<f64>,
    sigma_epochs: Option<f64>,
}

fn cmd_report(ctx: &Session, a: ReportArgs) -> Result<ExitCode> {
    let mut rows = Vec::new();
    for run in &a.runs {
        let config = RunConfig::load(&run.join(RESOLVED_CONFIG_FILE))?;
        let checkpoint = Checkpoint::load(&run.join(CHECKPOINT_FILE))?;
        let metrics_path = run.join(METRICS_FILE);
        let metrics: MetricsReport = serde_json::from_str(
            &fs::read_to_string(&metrics_path).with_context(|| format!("cannot read {}", metrics_path.display()))?,
        )?;
        let adaptation = if config.model.lora_rank > 0 {
            format!("lora R={}", config.model.lora_rank)
        } else {
            format!("unfreeze {}", config.model.unfreeze)
        };
        rows.push(ReportRow {
            run: run.display().to_string(),
            strategy: config.training.strategy.to_string(),
            adaptation,
            trainable_params: checkpoint.model.trainable_count(),
            median_f1: metrics.median_f1(),
            sigma_epochs: metrics.sigma_epochs,
        });
    }
    rows.sort_by(|a, b| (a.trainable_params, &a.run).cmp(&(b.trainable_params, &b.run)));
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let mut text = format!(
        "{:<32} {:<11} {:<14} {:>10} {:>9} {:>9}\n",
        "run", "strategy", "adaptation", "trainable", "median F1", "sigma"
    );
    for r in &rows {
        text.push_str(&format!(
            "{:<32} {:<11} {:<14} {:>10} {:>9} {:>9}\n",
            r.run,
            r.strategy,
            r.adaptation,
            r.trainable_params,
            fmt(r.median_f1),
            fmt(r.sigma_epochs)
        ));
    }
    std::io::stdout().write_all(text.as_bytes())?;
    if let Some(out) = &a.out {
        let out = ctx.out(out);
        create_dir(&out)?;
        fs::write(out.join(REPORT_FILE), &text)?;
        write_jsonl(&out.join(PLOT_FILE), &rows)?;
    }
    Ok(ExitCode::SUCCESS)
}
