//! Deterministic center-crop evaluation and report output.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};
use crate::frame_ingest::{center_frame_indices, view_crops, VideoSample};
use crate::model::{clip_patches, VqaModel};
use crate::quality_head::{decode_score, DecodeMode, Svr};

use super::metrics::{plcc, srocc};

/// Prediction output for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub probs: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub srocc: f64,
    pub plcc: f64,
    /// Set when predictions or labels have zero variance; both metrics are then 0.
    pub degenerate: bool,
    pub count: usize,
    /// `(id, predicted score, scaled label)`.
    pub pairs: Vec<(String, f64, f64)>,
}

impl EvalReport {
    /// CSV with header `id,pred,label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,pred,label\n");
        for (id, p, l) in &self.pairs {
            out.push_str(&format!("{id},{p},{l}\n"));
        }
        std::fs::write(path, out).map_err(io_err(path))
    }
}

/// Probabilities averaged over `views` evenly spaced crops of the centrally
/// sampled frames, with the score averaged over the per-view decodes.
pub fn predict_sample(
    model: &VqaModel,
    sample: &VideoSample,
    views: usize,
    mode: DecodeMode,
    svr: Option<&Svr>,
) -> Result<PredictionRecord> {
    let cfg = &model.net.cfg;
    let v = &sample.frames;
    let indices = center_frame_indices(v.frame_count, cfg.frames, cfg.stride)?;
    let origins = view_crops(v.height, v.width, cfg.crop_h, cfg.crop_w, views)?;
    let mut probs = vec![0.0; cfg.grades];
    let mut score = 0.0;
    for &origin in &origins {
        let p = model.predict(&clip_patches(v, &indices, origin, cfg)?)?;
        score += decode_score(&p, &model.net.ratings, mode, svr)?;
        for (acc, x) in probs.iter_mut().zip(&p) {
            *acc += x;
        }
    }
    let k = origins.len() as f64;
    probs.iter_mut().for_each(|x| *x /= k);
    Ok(PredictionRecord {
        id: sample.id.clone(),
        probs,
        score: score / k,
    })
}

pub fn evaluate(
    model: &VqaModel,
    samples: &[&VideoSample],
    views: usize,
    mode: DecodeMode,
    svr: Option<&Svr>,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let records = samples
        .iter()
        .map(|s| predict_sample(model, s, views, mode, svr))
        .collect::<Result<Vec<_>>>()?;
    let pred: Vec<f64> = records.iter().map(|r| r.score).collect();
    let label: Vec<f64> = samples.iter().map(|s| s.scaled_mos).collect();
    let s = srocc(&pred, &label)?;
    let p = plcc(&pred, &label)?;
    if s.degenerate || p.degenerate {
        log::warn!("zero-variance predictions or labels; correlations reported as 0");
    }
    let report = EvalReport {
        srocc: s.value,
        plcc: p.value,
        degenerate: s.degenerate || p.degenerate,
        count: samples.len(),
        pairs: samples
            .iter()
            .zip(&pred)
            .map(|(s, &p)| (s.id.clone(), p, s.scaled_mos))
            .collect(),
    };
    Ok((report, records))
}

/// One JSON object per line.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(io_err(path))?;
    }
    Ok(())
}
