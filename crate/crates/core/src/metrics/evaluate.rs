use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{write_atomic, write_json};
use crate::metrics::identification::two_way_identification;
use crate::metrics::report::{ExtractorBank, MetricReport, MetricRow, SubjectRow, COLUMNS};
use crate::metrics::svg::bar_chart;
use crate::mimevis::Granularity;
use crate::nncore::{Real, Tensor};
use crate::pipeline::{averaged_test_voxels, infer, Model, StimulusTable};
use crate::renderer::{write_renders, Renderer};
use crate::synthdata::Dataset;

fn rows_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Everything one evaluation pass produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub ids: Vec<u64>,
    /// Per subject, rendered test images aligned with `ids`.
    pub renders: Vec<Vec<Vec<f64>>>,
    /// Two-way identification of `x''` against the semantic targets, mean over subjects.
    pub embedding_two_way: f64,
}

/// Average test repetitions, encode, render and score every subject.
pub fn evaluate<T: Real, R: Renderer>(
    model: &Model<T>,
    renderer: &R,
    dataset: &Dataset,
    granularity: Granularity,
    config_hash: &str,
) -> Result<Evaluation> {
    let ids = dataset.manifest.test_ids.clone();
    let table = StimulusTable::build(dataset, &ids, granularity, model.config.pooled_side)?;
    let truth = rows_of(&table.pixels);
    let targets = rows_of(&table.targets);
    let bank = ExtractorBank::new(dataset.config().image_side)?;
    let voxels = averaged_test_voxels(dataset)?;
    if voxels.len() != model.n_subjects() {
        return Err(Error::Data(format!(
            "dataset has {} subjects, the model {}",
            voxels.len(),
            model.n_subjects()
        )));
    }
    let mut per_subject = Vec::new();
    let mut renders = Vec::new();
    let mut embedding_two_way = 0.0;
    for (k, vox) in voxels.iter().enumerate() {
        let out = infer(model, &vox.cast(), k)?;
        let semantic = rows_of(&out.semantic.cast());
        let visual = out.visual.map(|v| rows_of(&v.cast()));
        embedding_two_way += two_way_identification(&semantic, &targets)? / voxels.len() as f64;
        let images = semantic
            .iter()
            .enumerate()
            .map(|(i, s)| renderer.render(s, visual.as_ref().map(|v| v[i].as_slice())))
            .collect::<Result<Vec<_>>>()?;
        per_subject.push(SubjectRow {
            subject: k,
            row: bank.score(&images, &truth)?,
        });
        renders.push(images);
    }
    let mean = MetricRow::mean(&per_subject.iter().map(|s| s.row.clone()).collect::<Vec<_>>())?;
    Ok(Evaluation {
        report: MetricReport {
            label: model.mode.label().to_string(),
            mean,
            per_subject,
            samples: ids.len(),
            config_hash: config_hash.to_string(),
        },
        ids,
        renders,
        embedding_two_way,
    })
}

/// `metrics.csv`, `metrics.json`, `metrics.svg` and `renders/subject<k>/recon_<id>.png`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation, side: usize) -> Result<Vec<String>> {
    write_atomic(&dir.join("metrics.csv"), eval.report.to_csv().as_bytes())?;
    write_json(&dir.join("metrics.json"), &eval.report)?;
    let bars: Vec<(String, f64)> = COLUMNS
        .iter()
        .zip(eval.report.mean.values())
        .map(|(c, v)| (c.to_string(), v))
        .collect();
    write_atomic(&dir.join("metrics.svg"), bar_chart(&eval.report.label, &bars).as_bytes())?;
    for (k, images) in eval.renders.iter().enumerate() {
        write_renders(&dir.join("renders").join(format!("subject{k}")), &eval.ids, images, side)?;
    }
    Ok(vec![
        "metrics.csv".into(),
        "metrics.json".into(),
        "metrics.svg".into(),
        "renders".into(),
    ])
}
