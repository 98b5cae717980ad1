use std::path::Path;

use mstgcn::train::{predict, WindowPrediction};
use mstgcn::STAGE_NAMES;

use crate::run::{load_data, restore, target_subjects, Restored};
use crate::{create_dir, CliError, ExportArgs, Result};

const ADJACENCY_NOTE: &str =
    "mean of the per-window learned functional adjacency (centre epoch) over correctly classified windows of each true stage";

fn predictions(a: &ExportArgs) -> Result<(Restored, Vec<String>, Vec<WindowPrediction>)> {
    let ds = load_data(&a.data)?;
    let r = restore(&a.model, &ds)?;
    let subjects = target_subjects(a.subjects.as_deref(), &r.held_out, &ds)?;
    let batch = r.config.train_config()?.batch_size;
    let preds = predict(&r.trained, &ds, &subjects, batch)?;
    create_dir(&a.output)?;
    Ok((r, ds.channels, preds))
}

/// Element-wise mean of equally sized vectors; `None` when empty.
fn mean_of<'a>(items: impl Iterator<Item = &'a [f64]>) -> Option<(Vec<f64>, usize)> {
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0;
    for v in items {
        let a = acc.get_or_insert_with(|| vec![0.0; v.len()]);
        a.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        count += 1;
    }
    acc.map(|mut a| {
        a.iter_mut().for_each(|s| *s /= count as f64);
        (a, count)
    })
}

fn write_matrix(path: &Path, corner: &str, row_names: &[String], col_names: &[String], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![corner.to_string()];
    header.extend(col_names.iter().cloned());
    w.write_record(&header)?;
    for (i, name) in row_names.iter().enumerate() {
        let mut r = vec![name.clone()];
        r.extend(values[i * col_names.len()..(i + 1) * col_names.len()].iter().map(f64::to_string));
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn adjacency(a: &ExportArgs) -> Result<()> {
    let (r, channels, preds) = predictions(a)?;
    if preds.iter().any(|p| p.fc_adjacency.is_none()) {
        return Err(CliError::Usage(format!(
            "the model uses a fixed functional adjacency ({}); only learned adjacencies can be exported",
            r.config.get("fc_source")
        )));
    }
    let n = channels.len();
    let mut summary = csv::Writer::from_path(a.output.join("adjacency_summary.csv"))?;
    summary.write_record(["stage", "file", "windows", "aggregation"])?;
    for (stage, name) in STAGE_NAMES.iter().enumerate() {
        let correct = preds.iter().filter(|p| p.label == stage && p.pred == stage);
        let (mean, count) = mean_of(correct.map(|p| p.fc_adjacency.as_deref().unwrap_or(&[])))
            .unwrap_or_else(|| (vec![f64::NAN; n * n], 0));
        let file = format!("adjacency_{name}.csv");
        write_matrix(&a.output.join(&file), "channel", &channels, &channels, &mean)?;
        summary.write_record([name.to_string(), file, count.to_string(), ADJACENCY_NOTE.to_string()])?;
        println!("{name}: {count} correctly classified windows");
    }
    summary.flush()?;
    Ok(())
}

pub fn attention(a: &ExportArgs) -> Result<()> {
    let (r, channels, preds) = predictions(a)?;
    let d = r.trained.model.config().context as i64;
    let offsets: Vec<String> = (-d..=d).map(|o| format!("{o:+}")).collect();
    let to_offsets: Vec<String> = offsets.iter().map(|o| format!("to_{o}")).collect();
    let (mean, _) = mean_of(preds.iter().map(|p| p.temporal_attention.as_slice()))
        .ok_or_else(|| CliError::Data("no windows to export".into()))?;
    write_matrix(&a.output.join("temporal.csv"), "offset", &offsets, &to_offsets, &mean)?;

    let mut by_stage = csv::Writer::from_path(a.output.join("temporal_by_stage.csv"))?;
    let mut header = vec!["stage".to_string(), "windows".to_string(), "offset".to_string()];
    header.extend(to_offsets.iter().cloned());
    by_stage.write_record(&header)?;
    let mut spatial = csv::Writer::from_path(a.output.join("spatial.csv"))?;
    let mut header = vec!["stage".to_string(), "windows".to_string()];
    header.extend(channels.iter().cloned());
    spatial.write_record(&header)?;
    let n = channels.len();
    let t = offsets.len();
    for (stage, name) in STAGE_NAMES.iter().enumerate() {
        let of_stage: Vec<&WindowPrediction> = preds.iter().filter(|p| p.label == stage).collect();
        let name = name.to_string();
        let temporal = mean_of(of_stage.iter().map(|p| p.temporal_attention.as_slice()));
        let (tm, count) = temporal.unwrap_or_else(|| (vec![f64::NAN; t * t], 0));
        for (i, row) in tm.chunks(t).enumerate() {
            let mut rec = vec![name.clone(), count.to_string(), offsets[i].clone()];
            rec.extend(row.iter().map(f64::to_string));
            by_stage.write_record(&rec)?;
        }
        // column weight of channel j: mean over rows i of P'[i, j]
        let cols = of_stage.iter().map(|p| {
            (0..n).map(|j| (0..n).map(|i| p.spatial_attention[i * n + j]).sum::<f64>() / n as f64).collect::<Vec<_>>()
        });
        let cols: Vec<Vec<f64>> = cols.collect();
        let (sm, _) = mean_of(cols.iter().map(Vec::as_slice)).unwrap_or_else(|| (vec![f64::NAN; n], 0));
        let mut rec = vec![name, count.to_string()];
        rec.extend(sm.iter().map(f64::to_string));
        spatial.write_record(&rec)?;
    }
    by_stage.flush()?;
    spatial.flush()?;
    println!("exported attention over {} windows (context {d})", preds.len());
    Ok(())
}
