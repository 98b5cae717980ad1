use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::info;
use mstgcn::data::{generate_synthetic, load_dataset, save_dataset, Dataset, SyntheticSpec};
use mstgcn::metrics::Metrics;
use mstgcn::params::{load_checkpoint, save_checkpoint};
use mstgcn::train::{self as core_train, build_model, EpochStats, TrainError, TrainedModel};
use mstgcn::STAGE_NAMES;
use rayon::prelude::*;

use crate::config::{parse_list, RunConfig};
use crate::{create_dir, CliError, CvArgs, EvalArgs, Result, RunArgs, SweepArgs, SynthArgs, TrainArgs};

const META_DOMAINS: &str = "#@domains = ";
const META_CHANNELS: &str = "#@channels = ";
const META_HELD_OUT: &str = "#@held_out = ";

pub fn synth_data(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        subjects: a.subjects,
        epochs_per_subject: a.epochs,
        channels: a.channels,
        samples: a.samples,
        bias_strength: a.bias,
        noise_sigma: a.noise,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let (manifest, ds) = generate_synthetic(&spec)?;
    save_dataset(&a.output, &ds)?;
    println!(
        "wrote {}: {} subjects, {} epochs, channels {}, class counts {:?}",
        a.output.display(),
        manifest.subjects.len(),
        ds.len(),
        manifest.channels.join(","),
        manifest.class_counts
    );
    Ok(())
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
pub(crate) fn resolve_config(
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply(o)?;
    }
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(e) = epochs {
        cfg.set("epochs", &e.to_string())?;
    }
    Ok(cfg)
}

fn run_config(r: &RunArgs) -> Result<RunConfig> {
    resolve_config(r.config.as_deref(), &r.overrides, r.seed, r.epochs)
}

pub(crate) fn load_data(path: &Path) -> Result<Dataset> {
    let (_, ds) = load_dataset(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if ds.is_empty() {
        return Err(CliError::Data(format!("{} holds no epochs", path.display())));
    }
    Ok(ds)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn checkpoint_meta(cfg: &RunConfig, channels: &[String], domains: &[u32], held_out: &[u32]) -> String {
    format!(
        "{}{META_DOMAINS}{}\n{META_CHANNELS}{}\n{META_HELD_OUT}{}\n",
        cfg.to_text(),
        join(domains),
        channels.join(","),
        join(held_out)
    )
}

fn meta_line<'a>(meta: &'a str, prefix: &str) -> Result<&'a str> {
    meta.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .ok_or_else(|| CliError::Data(format!("checkpoint metadata lacks {:?}", prefix.trim_end_matches(" = "))))
}

/// A trained model rebuilt from a checkpoint, with the subjects it was not
/// trained on.
pub(crate) struct Restored {
    pub trained: TrainedModel,
    pub config: RunConfig,
    pub held_out: Vec<u32>,
}

pub(crate) fn restore(path: &Path, ds: &Dataset) -> Result<Restored> {
    let (saved, meta) = load_checkpoint(path)?;
    let config = RunConfig::parse(&meta)?;
    let domains: Vec<u32> = parse_list(meta_line(&meta, META_DOMAINS)?).map_err(CliError::Data)?;
    let channels: Vec<String> = meta_line(&meta, META_CHANNELS)?.split(',').map(str::to_string).collect();
    let held_out: Vec<u32> = parse_list(meta_line(&meta, META_HELD_OUT)?).map_err(CliError::Data)?;
    if channels != ds.channels {
        return Err(CliError::Data(format!(
            "checkpoint expects channels {} but the dataset has {}",
            channels.join(","),
            ds.channels.join(",")
        )));
    }
    let tc = config.train_config()?;
    let layout = config.layout(&ds.channels)?;
    let (model, mut store) = build_model(&ds.channels, &layout, &tc, domains.len())?;
    store.load_values_from(&saved)?;
    let trained = TrainedModel {
        model,
        store,
        history: Vec::new(),
        domain_subjects: domains,
        gradient_subjects: BTreeSet::new(),
    };
    Ok(Restored { trained, config, held_out })
}

/// Subjects named on the command line, else the checkpoint's held-out
/// subjects, else all of them.
pub(crate) fn target_subjects(flag: Option<&str>, held_out: &[u32], ds: &Dataset) -> Result<Vec<u32>> {
    let subjects = match flag {
        Some(s) => parse_list(s).map_err(CliError::Usage)?,
        None if !held_out.is_empty() => held_out.to_vec(),
        None => ds.subjects(),
    };
    let known = ds.subjects();
    if let Some(s) = subjects.iter().find(|s| !known.contains(s)) {
        return Err(CliError::Usage(format!("subject {s} is not in the dataset")));
    }
    if subjects.is_empty() {
        return Err(CliError::Usage("no subjects selected".into()));
    }
    Ok(subjects)
}

const HISTORY_HEADER: [&str; 8] =
    ["epoch", "beta", "class_ce", "domain_ce", "graph", "total", "train_accuracy", "val_loss"];

fn history_row(h: &EpochStats) -> Vec<String> {
    vec![
        h.epoch.to_string(),
        h.beta.to_string(),
        h.class_ce.to_string(),
        h.domain_ce.to_string(),
        h.graph.to_string(),
        h.total.to_string(),
        h.train_accuracy.to_string(),
        h.val_loss.map(|v| v.to_string()).unwrap_or_default(),
    ]
}

fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_HEADER)?;
    for h in history {
        w.write_record(history_row(h))?;
    }
    w.flush()?;
    Ok(())
}

fn metrics_header() -> Vec<String> {
    let mut h: Vec<String> = ["scope", "windows", "accuracy", "macro_f1", "kappa"].map(String::from).to_vec();
    h.extend(STAGE_NAMES.iter().map(|s| format!("f1_{s}")));
    h
}

fn metrics_row(scope: &str, m: &Metrics) -> Vec<String> {
    let mut r = vec![
        scope.to_string(),
        m.confusion.total().to_string(),
        m.accuracy.to_string(),
        m.macro_f1.to_string(),
        m.kappa.to_string(),
    ];
    r.extend(m.per_class_f1.iter().map(f64::to_string));
    r
}

fn write_metrics(path: &Path, rows: &[(String, &Metrics)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(metrics_header())?;
    for (scope, m) in rows {
        w.write_record(metrics_row(scope, m))?;
    }
    w.flush()?;
    Ok(())
}

fn write_confusion(path: &Path, m: &Metrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(STAGE_NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (i, row) in m.confusion.rows().iter().enumerate() {
        let mut r = vec![STAGE_NAMES[i].to_string()];
        r.extend(row.iter().map(u64::to_string));
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn print_metrics(scope: &str, m: &Metrics) {
    println!(
        "{scope}: accuracy {:.4}, macro-F1 {:.4}, kappa {:.4} over {} windows",
        m.accuracy,
        m.macro_f1,
        m.kappa,
        m.confusion.total()
    );
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = run_config(&a.run)?;
    let tc = cfg.train_config()?;
    let ds = load_data(&a.run.data)?;
    let layout = cfg.layout(&ds.channels)?;
    let validation = cfg.subject_list("validation_subjects")?;
    let train_subjects: Vec<u32> = ds.subjects().into_iter().filter(|s| !validation.contains(s)).collect();
    create_dir(&a.run.output)?;
    let out = &a.run.output;
    fs::write(out.join("effective.cfg"), cfg.to_text())?;
    let meta = checkpoint_meta(&cfg, &ds.channels, &train_subjects, &validation);
    let trained = match core_train::train(&ds, &layout, &train_subjects, &validation, &tc) {
        Ok(t) => t,
        Err(TrainError::Divergence { epoch, batch, reason, last_good }) => {
            save_checkpoint(&out.join("model.ckpt"), &last_good, &meta)?;
            return Err(CliError::Numerical(format!(
                "training diverged at epoch {epoch}, batch {batch}: {reason}; last good parameters saved"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    write_history(&out.join("history.csv"), &trained.history)?;
    save_checkpoint(&out.join("model.ckpt"), &trained.store, &meta)?;
    let (scope, subjects) = if validation.is_empty() { ("train", &train_subjects) } else { ("validation", &validation) };
    let m = core_train::evaluate(&trained, &ds, subjects, tc.batch_size)?;
    write_metrics(&out.join("metrics.csv"), &[(scope.to_string(), &m)])?;
    write_confusion(&out.join("confusion.csv"), &m)?;
    print_metrics(scope, &m);
    Ok(())
}

pub fn cross_validate(a: &CvArgs) -> Result<()> {
    let mut cfg = run_config(&a.run)?;
    if let Some(f) = a.folds {
        cfg.set("folds", &f.to_string())?;
    }
    let tc = cfg.train_config()?;
    let folds: usize = cfg.get("folds").parse().map_err(|_| CliError::Usage("folds".into()))?;
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let ds = load_data(&a.run.data)?;
    let layout = cfg.layout(&ds.channels)?;
    create_dir(&a.run.output)?;
    let out = &a.run.output;
    fs::write(out.join("effective.cfg"), cfg.to_text())?;
    let report = core_train::cross_validate(&ds, &layout, folds, &tc, a.jobs)?;

    let mut w = csv::Writer::from_path(out.join("history.csv"))?;
    let mut header = vec!["fold"];
    header.extend(HISTORY_HEADER);
    w.write_record(&header)?;
    for f in &report.folds {
        for h in &f.trained.history {
            let mut r = vec![f.split.fold.to_string()];
            r.extend(history_row(h));
            w.write_record(&r)?;
        }
        let meta = checkpoint_meta(&cfg, &ds.channels, &f.split.train, &f.split.test);
        save_checkpoint(&out.join(format!("fold{}.ckpt", f.split.fold)), &f.trained.store, &meta)?;
    }
    w.flush()?;

    let mut rows: Vec<(String, &Metrics)> =
        report.folds.iter().map(|f| (format!("fold{}", f.split.fold), &f.metrics)).collect();
    rows.push(("pooled".into(), &report.pooled));
    let mut mw = csv::Writer::from_path(out.join("metrics.csv"))?;
    mw.write_record(metrics_header())?;
    for (scope, m) in &rows {
        mw.write_record(metrics_row(scope, m))?;
    }
    let blank = vec![String::new(); mstgcn::NUM_STAGES];
    for (scope, pick) in [("mean", 0usize), ("std", 1)] {
        let v = |p: (f64, f64)| if pick == 0 { p.0 } else { p.1 };
        let mut r = vec![
            scope.to_string(),
            String::new(),
            v(report.accuracy).to_string(),
            v(report.macro_f1).to_string(),
            v(report.kappa).to_string(),
        ];
        r.extend(blank.iter().cloned());
        mw.write_record(&r)?;
    }
    mw.flush()?;
    write_confusion(&out.join("confusion.csv"), &report.pooled)?;
    for f in &report.folds {
        print_metrics(&format!("fold {} (test {:?})", f.split.fold, f.split.test), &f.metrics);
    }
    print_metrics("pooled", &report.pooled);
    println!(
        "mean accuracy {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4}, kappa {:.4} ± {:.4}",
        report.accuracy.0, report.accuracy.1, report.macro_f1.0, report.macro_f1.1, report.kappa.0, report.kappa.1
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let r = restore(&a.model, &ds)?;
    let subjects = target_subjects(a.subjects.as_deref(), &r.held_out, &ds)?;
    let batch = r.config.train_config()?.batch_size;
    let m = core_train::evaluate(&r.trained, &ds, &subjects, batch)?;
    print_metrics(&format!("subjects {}", join(&subjects)), &m);
    if let Some(out) = &a.output {
        create_dir(out)?;
        write_metrics(&out.join("metrics.csv"), &[("eval".into(), &m)])?;
        write_confusion(&out.join("confusion.csv"), &m)?;
    }
    Ok(())
}

const SWEPT: [&str; 5] = ["layers", "time_kernel", "cheb_k", "graph_lambda", "fc_source"];

struct SweepRow {
    values: Vec<String>,
    outcome: std::result::Result<(Metrics, f64), CliError>,
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let base = resolve_config(a.config.as_deref(), &a.overrides, None, None)?;
    base.train_config()?;
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let flags = [&a.layers, &a.kernels, &a.cheb_k, &a.lambda, &a.fc_source];
    let axes: Vec<Vec<String>> = SWEPT
        .iter()
        .zip(flags)
        .map(|(key, flag)| match flag {
            Some(list) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            None => vec![base.get(key).to_string()],
        })
        .collect();
    if axes.iter().any(Vec::is_empty) {
        return Err(CliError::Usage("every swept list needs at least one value".into()));
    }
    let mut grid: Vec<Vec<String>> = vec![vec![]];
    for axis in &axes {
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect();
    }
    let mut configs = Vec::with_capacity(grid.len());
    for point in &grid {
        let mut c = base.clone();
        for (key, v) in SWEPT.iter().zip(point) {
            c.set(key, v)?;
        }
        configs.push(c.train_config()?);
    }

    let ds = load_data(&a.data)?;
    let layout = base.layout(&ds.channels)?;
    let held_out: Option<Vec<u32>> = a.test_subjects.as_deref().map(parse_list).transpose().map_err(CliError::Usage)?;
    let folds: usize = base.get("folds").parse().map_err(|_| CliError::Usage("folds".into()))?;
    if let Some(h) = &held_out {
        target_subjects(Some(&join(h)), &[], &ds)?;
    }
    create_dir(&a.output)?;
    fs::write(a.output.join("effective.cfg"), base.to_text())?;

    let run_one = |tc: &mstgcn::train::TrainConfig| -> std::result::Result<(Metrics, f64), CliError> {
        match &held_out {
            Some(test) => {
                let train: Vec<u32> = ds.subjects().into_iter().filter(|s| !test.contains(s)).collect();
                let t = core_train::train(&ds, &layout, &train, &[], tc)?;
                Ok((core_train::evaluate(&t, &ds, test, tc.batch_size)?, 0.0))
            }
            None => {
                let r = core_train::cross_validate(&ds, &layout, folds, tc, 1)?;
                let mean = Metrics { accuracy: r.accuracy.0, macro_f1: r.macro_f1.0, kappa: r.kappa.0, ..r.pooled };
                Ok((mean, r.accuracy.1))
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        grid.par_iter()
            .zip(configs.par_iter())
            .map(|(values, tc)| {
                info!("sweep point {values:?}");
                SweepRow { values: values.clone(), outcome: run_one(tc) }
            })
            .collect()
    });

    let mut w = csv::Writer::from_path(a.output.join("results.csv"))?;
    let mut header: Vec<&str> = vec!["run"];
    header.extend(SWEPT);
    header.extend(["accuracy", "accuracy_std", "macro_f1", "kappa", "status"]);
    w.write_record(&header)?;
    let mut failures = 0;
    for (i, row) in rows.iter().enumerate() {
        let mut r = vec![i.to_string()];
        r.extend(row.values.iter().cloned());
        match &row.outcome {
            Ok((m, std)) => {
                r.extend([m.accuracy.to_string(), std.to_string(), m.macro_f1.to_string(), m.kappa.to_string()]);
                r.push("ok".into());
                println!("{:?}: accuracy {:.4}, macro-F1 {:.4}, kappa {:.4}", row.values, m.accuracy, m.macro_f1, m.kappa);
            }
            Err(e) => {
                failures += 1;
                r.extend([String::new(), String::new(), String::new(), String::new()]);
                r.push(e.to_string());
                println!("{:?}: failed: {e}", row.values);
            }
        }
        w.write_record(&r)?;
    }
    w.flush()?;
    match rows.iter().find_map(|r| r.outcome.as_ref().err()) {
        Some(CliError::Numerical(e)) => Err(CliError::Numerical(format!("{failures} sweep run(s) failed; first: {e}"))),
        Some(e) => Err(CliError::Data(format!("{failures} sweep run(s) failed; first: {e}"))),
        None => Ok(()),
    }
}
