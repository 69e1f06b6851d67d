use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use bysgnn::data::{
    generate_synthetic, load_metadata_csv, load_visits_csv, parse_timestamp, write_metadata_csv,
    write_visits_csv, PoiMetadata, SynthSpec, VisitSeriesDataset,
};
use bysgnn::eval::{run_ablation, Baseline};
use bysgnn::graphgen::{load_distance_matrix, pairwise_distances, write_matrix_csv};
use bysgnn::pipeline::{build_model, model_report, prepare, test_comparison, PreparedData};
use bysgnn::semantics::write_embeddings_csv;
use bysgnn::training::{log_csv, train, Checkpoint};
use bysgnn::{Ablation, Error, TrainConfig};
use diffcore::{Tape, Tensor};

use crate::args::{AblateArgs, EvalArgs, FitArgs, InspectArgs, SynthArgs, TrainArgs};
use crate::run_config::RunConfig;

pub const VISITS_FILE: &str = "visits.csv";
pub const METADATA_FILE: &str = "metadata.csv";
pub const SPEC_FILE: &str = "synth_spec.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            SynthSpec::parse(&text)?
        }
        None => SynthSpec::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
        spec.set(k.trim(), v.trim())?;
    }
    spec.validate()?;
    if args.out.exists() {
        let non_empty = fs::read_dir(&args.out)
            .map_err(|e| Error::io(&args.out, e))?
            .next()
            .is_some();
        if non_empty && !args.force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to write into it",
                args.out.display()
            ))
            .into());
        }
    }
    create_dir(&args.out)?;
    let (ds, meta) = generate_synthetic(&spec, args.seed)?;
    write_visits_csv(&ds, &args.out.join(VISITS_FILE))?;
    write_metadata_csv(&meta, &args.out.join(METADATA_FILE))?;
    write(
        &args.out.join(SPEC_FILE),
        &format!("# seed = {}\n{}", args.seed, spec.to_text()),
    )?;
    eprintln!(
        "wrote {} POIs × {} hours to {}",
        ds.n_pois(),
        ds.len(),
        args.out.display()
    );
    Ok(())
}

fn load_data(dir: &Path) -> Result<(VisitSeriesDataset, Vec<PoiMetadata>)> {
    let (ds, report) = load_visits_csv(&dir.join(VISITS_FILE))?;
    if report.missing_count > 0 {
        eprintln!(
            "warning: {} missing POI-hours filled with zero",
            report.missing_count
        );
    }
    let meta = load_metadata_csv(&dir.join(METADATA_FILE))?;
    Ok((ds, meta))
}

fn distances(rc: &RunConfig, data: &PreparedData) -> Result<Vec<Vec<f64>>> {
    match &rc.distances {
        Some(p) => Ok(load_distance_matrix(p, data.n_pois())?),
        None => Ok(pairwise_distances(&data.metadata)),
    }
}

fn apply_fit_overrides(rc: &mut RunConfig, fit: &FitArgs) -> Result<()> {
    let t = &mut rc.train;
    if let Some(v) = &fit.data {
        rc.data = Some(v.clone());
    }
    if let Some(v) = &fit.out {
        rc.out = Some(v.clone());
    }
    if let Some(v) = &fit.embeddings {
        rc.embeddings = Some(v.clone());
    }
    if let Some(v) = &fit.distances {
        rc.distances = Some(v.clone());
    }
    if let Some(v) = fit.epochs {
        t.epochs = v;
    }
    if let Some(v) = fit.lr {
        t.lr0 = v;
    }
    if let Some(v) = fit.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = fit.decay_factor {
        t.decay_factor = v;
    }
    if let Some(v) = fit.decay_every {
        t.decay_every = v;
    }
    if let Some(v) = &fit.loss {
        t.loss = v.parse()?;
    }
    if let Some(v) = fit.stride {
        t.stride = v;
    }
    Ok(())
}

fn required(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| anyhow!(Error::Config(format!("{flag} is required (flag or config file)"))))
}

/// Resolves the configuration of a training-type command.
pub fn resolve_train(args: &TrainArgs, threads: Option<usize>) -> Result<RunConfig> {
    let mut rc = RunConfig::base(args.fit.config.as_deref())?;
    rc.command = Some("train".into());
    apply_fit_overrides(&mut rc, &args.fit)?;
    if let Some(s) = args.seed {
        rc.train.seed = s;
    }
    for a in &args.ablate {
        rc.train.ablation.enable(a)?;
    }
    if let Some(t) = threads {
        rc.threads = Some(t);
    }
    rc.threads.get_or_insert(1);
    rc.model.validate()?;
    rc.train.validate()?;
    Ok(rc)
}

pub fn train_cmd(args: &TrainArgs, threads: Option<usize>) -> Result<()> {
    let rc = resolve_train(args, threads)?;
    let data_dir = required(&rc.data, "--data")?;
    let out = required(&rc.out, "--out")?;
    let (ds, meta) = load_data(&data_dir)?;
    let data = prepare(&ds, &meta, &rc.model, &rc.train, None)?;
    let mut model = build_model(
        &data,
        &rc.model,
        &rc.train,
        rc.embeddings.as_deref(),
        distances(&rc, &data)?,
    )?;
    create_dir(&out)?;
    rc.write_snapshot(&out)?;
    eprintln!(
        "training on {} windows ({} validation), {} nodes, {} parameters",
        data.train.len(),
        data.val.len(),
        model.n_nodes(),
        model.store.num_scalars()
    );
    let outcome = train(&mut model, &data, &rc.train, |e| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train {:.4}  val {}",
            e.epoch,
            e.lr,
            e.train_loss,
            e.val_loss.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    })?;
    write(&out.join(LOG_FILE), &log_csv(&outcome.log))?;
    Checkpoint::from_model(&model, &rc.train, &data.stats, outcome.best_epoch)
        .save(&out.join(CHECKPOINT_FILE))?;
    if let Some(msg) = outcome.failure {
        return Err(Error::Numerical(format!(
            "{msg}; saved last good parameters to {}",
            out.join(CHECKPOINT_FILE).display()
        ))
        .into());
    }
    eprintln!(
        "best epoch {:?}, gate alpha {:.4}; wrote {}",
        outcome.best_epoch,
        model.alpha(),
        out.display()
    );
    Ok(())
}

fn load_for_checkpoint(ck_path: &Path, data_dir: &Path) -> Result<(Checkpoint, PreparedData)> {
    let ck = Checkpoint::load(ck_path)?;
    let (ds, meta) = load_data(data_dir)?;
    ck.check_nodes(ds.poi_ids())?;
    let data = prepare(
        &ds,
        &meta,
        &ck.model_config,
        &ck.train_config,
        Some(ck.stats.clone()),
    )?;
    Ok((ck, data))
}

pub fn eval_cmd(args: &EvalArgs, threads: Option<usize>) -> Result<()> {
    let (ck, data) = load_for_checkpoint(&args.checkpoint, &args.data)?;
    let model = ck.to_model()?;
    let batch = args.batch_size.unwrap_or(ck.train_config.batch_size);
    let report = test_comparison(&model, &data, batch)?;
    for b in Baseline::ALL {
        if !report.rows.iter().any(|r| r.method == b.to_string()) {
            eprintln!(
                "warning: {b} needs {} hours of history before the test split; omitted",
                b.history()
            );
        }
    }
    create_dir(&args.out)?;
    RunConfig {
        command: Some("eval".into()),
        data: Some(args.data.clone()),
        out: Some(args.out.clone()),
        checkpoint: Some(args.checkpoint.clone()),
        threads: Some(threads.unwrap_or(1)),
        model: ck.model_config.clone(),
        train: ck.train_config.clone(),
        ..Default::default()
    }
    .write_snapshot(&args.out)?;
    write(&args.out.join("metrics.csv"), &report.to_csv())?;
    let text = report.to_text();
    write(&args.out.join("metrics.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn ablate_cmd(args: &AblateArgs, threads: Option<usize>) -> Result<()> {
    let mut rc = RunConfig::base(args.fit.config.as_deref())?;
    rc.command = Some("ablate".into());
    apply_fit_overrides(&mut rc, &args.fit)?;
    if !args.variants.is_empty() {
        rc.variants = Some(args.variants.clone());
    }
    if !args.seeds.is_empty() {
        rc.seeds = Some(args.seeds.clone());
    }
    rc.variants
        .get_or_insert_with(|| Ablation::VARIANTS.iter().map(|s| s.to_string()).collect());
    rc.seeds.get_or_insert_with(|| vec![0, 1, 2]);
    if let Some(t) = threads {
        rc.threads = Some(t);
    }
    rc.threads.get_or_insert(1);
    rc.model.validate()?;
    rc.train.validate()?;
    let variants = rc
        .variants
        .iter()
        .flatten()
        .map(|v| Ablation::single(v))
        .collect::<bysgnn::Result<Vec<_>>>()?;
    let seeds = rc.seeds.clone().unwrap_or_default();

    let data_dir = required(&rc.data, "--data")?;
    let out = required(&rc.out, "--out")?;
    let (ds, meta) = load_data(&data_dir)?;
    let data = prepare(&ds, &meta, &rc.model, &rc.train, None)?;
    let dist = distances(&rc, &data)?;
    create_dir(&out)?;
    rc.write_snapshot(&out)?;

    let table = run_ablation(&variants, &seeds, |variant, seed| {
        let tc = TrainConfig {
            seed,
            ablation: variant,
            ..rc.train.clone()
        };
        let mut model = build_model(&data, &rc.model, &tc, rc.embeddings.as_deref(), dist.clone())?;
        let outcome = train(&mut model, &data, &tc, |_| {})?;
        if let Some(msg) = outcome.failure {
            return Err(Error::Numerical(format!("{variant} seed {seed}: {msg}")));
        }
        let report = model_report(&model, &data, &data.test, tc.batch_size)?;
        eprintln!("{variant} seed {seed}: test MAE {:.3}", report.mae);
        Ok(report)
    })?;
    write(&out.join("ablation.csv"), &table.to_csv())?;
    let text = table.to_text();
    write(&out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn inspect_cmd(args: &InspectArgs, threads: Option<usize>) -> Result<()> {
    let (ck, data) = load_for_checkpoint(&args.checkpoint, &args.data)?;
    let model = ck.to_model()?;
    let ts = parse_timestamp(&args.timestamp).map_err(Error::Config)?;
    let t = model.config.window;
    let origin = hour_of(&data, ts)
        .filter(|&h| h >= t)
        .ok_or_else(|| {
            Error::Config(format!(
                "{} leaves no full {t}-hour input window inside the dataset",
                args.timestamp
            ))
        })?;
    let nodes = model.n_nodes();
    let mut x = Vec::with_capacity(nodes * t);
    for s in 0..nodes {
        x.extend(
            data.raw[s][origin - t..origin]
                .iter()
                .map(|&v| data.stats.normalize(s, v)),
        );
    }
    let tape = Tape::new();
    let fwd = model.forward(&tape, &Tensor::new(&[nodes, 1, t], x)?)?;
    let adjacency = fwd.adjacency.value().as_ref().clone().reshape(&[nodes, nodes])?;
    let emb = fwd.node_embeddings.value();
    let width = emb.shape()[2];
    let embeddings = emb.as_ref().clone().reshape(&[nodes, width])?;
    if !adjacency.all_finite() || !embeddings.all_finite() {
        return Err(Error::Numerical("non-finite graph export".into()).into());
    }

    create_dir(&args.out)?;
    let labels = model.node_labels();
    write_matrix_csv(&args.out.join("adjacency.csv"), &labels, &adjacency)?;
    write_embeddings_csv(&args.out.join("embeddings.csv"), &labels, &embeddings)?;
    write(&args.out.join("gate_alpha.txt"), &format!("{}\n", model.alpha()))?;
    RunConfig {
        command: Some("inspect-graph".into()),
        data: Some(args.data.clone()),
        out: Some(args.out.clone()),
        checkpoint: Some(args.checkpoint.clone()),
        timestamp: Some(args.timestamp.clone()),
        threads: Some(threads.unwrap_or(1)),
        model: ck.model_config.clone(),
        train: ck.train_config.clone(),
        ..Default::default()
    }
    .write_snapshot(&args.out)?;
    let kept = adjacency.data().iter().filter(|&&v| v != 0.0).count();
    eprintln!(
        "{nodes}×{nodes} graph with {kept} nonzero entries, {} rows without edges, alpha {:.4}",
        fwd.dead_rows,
        model.alpha()
    );
    Ok(())
}

fn hour_of(data: &PreparedData, ts: chrono::DateTime<chrono::Utc>) -> Option<usize> {
    let secs = (ts - data.start).num_seconds();
    if secs < 0 || secs % 3600 != 0 {
        return None;
    }
    let h = (secs / 3600) as usize;
    (h <= data.len()).then_some(h)
}

/// Exit status for a failed command: 3 for numerical failures, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

pub fn bail_if_zero_threads(threads: Option<usize>) -> Result<()> {
    if threads == Some(0) {
        bail!(Error::Config("--threads must be at least 1".into()));
    }
    Ok(())
}
