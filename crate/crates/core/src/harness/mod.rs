//! Data generation, dataset loading, training and evaluation.

pub mod diagnostics;
pub mod eval;
pub mod metrics;
pub mod synthetic;
pub mod train;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{io_err, Error, Result};
use crate::frame_ingest::{read_manifest, resolve_frames_path, FrameTensorFile, VideoSample};
use crate::model::Ablation;
use crate::numerics::RngState;
use crate::quality_head::{scale_mos, DecodeMode, SvrParams, DEFAULT_T, DEFAULT_U};

pub use eval::{evaluate, EvalReport, PredictionRecord};
pub use metrics::{average_ranks, plcc, srocc, Correlation};
pub use synthetic::{generate_synthetic, synthetic_samples, Distortion, SyntheticSpec};
pub use train::{load_model, train, EpochLog, TrainOutcome, Trainer};

/// Everything a training or evaluation run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub decay_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub split_ratio: f64,
    /// Evaluation crops per video.
    pub views: usize,
    pub decode: DecodeMode,
    pub svr: SvrParams,
    /// Native MOS range; taken from the training manifest when absent.
    pub mos_range: Option<[f64; 2]>,
    /// Global gradient-norm limit; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            ablation: Ablation::default(),
            lr: 0.005,
            momentum: 0.9,
            lr_decay: 0.1,
            decay_epochs: 10,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            split_ratio: 0.8,
            views: 1,
            decode: DecodeMode::ExpectedValue,
            svr: SvrParams::default(),
            mos_range: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio {} must lie in (0, 1)", self.split_ratio)));
        }
        if self.batch_size == 0 || self.decay_epochs == 0 || self.views == 0 {
            return Err(Error::Config("batch_size, decay_epochs and views must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr must be positive and momentum in [0, 1)".into()));
        }
        if let Some([lo, hi]) = self.mos_range {
            if !(lo < hi) {
                return Err(Error::DegenerateRange { lo, hi });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(io_err(path))
    }

    /// Learning rate for a 1-based epoch: `lr * lr_decay^((epoch - 1) / decay_epochs)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = epoch.saturating_sub(1) / self.decay_epochs;
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

/// Reads every manifest entry and its frames. Labels are scaled onto the
/// reference-rating interval using `range`, or the manifest's own min/max.
pub fn load_samples(manifest: &Path, range: Option<[f64; 2]>) -> Result<(Vec<VideoSample>, [f64; 2])> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Format {
            path: manifest.display().to_string(),
            detail: "manifest is empty".into(),
        });
    }
    let range = range.unwrap_or_else(|| {
        let lo = entries.iter().map(|e| e.mos).fold(f64::INFINITY, f64::min);
        let hi = entries.iter().map(|e| e.mos).fold(f64::NEG_INFINITY, f64::max);
        [lo, hi]
    });
    let samples = entries
        .into_iter()
        .map(|e| {
            let frames = FrameTensorFile::load(&resolve_frames_path(manifest, &e))?;
            let scaled_mos = scale_mos(e.mos.clamp(range[0], range[1]), range[0], range[1], DEFAULT_T, DEFAULT_U)?;
            Ok(VideoSample {
                id: e.id,
                frames,
                raw_mos: e.mos,
                scaled_mos,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, range))
}

/// Disjoint train/test index sets covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`; the first `round(ratio * n)` go to training.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut RngState::new(seed, "split").rng());
    let cut = ((ratio * n as f64).round() as usize).min(n);
    let mut train = idx[..cut].to_vec();
    let mut test = idx[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Split { train, test }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = [1, 10, 11, 20, 21].iter().map(|&e| cfg.lr_at(e)).collect();
        let expected = [0.005, 0.005, 0.0005, 0.0005, 0.00005];
        for (a, b) in lrs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn eight_two_split() {
        let s = split_indices(200, 0.8, 3);
        assert_eq!(s.train.len(), 160);
        assert_eq!(s.test.len(), 40);
        assert_eq!(s, split_indices(200, 0.8, 3));
        assert_ne!(s, split_indices(200, 0.8, 4));
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "seed": 9}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.lr, 0.005);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        let bad = TrainConfig {
            split_ratio: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_exhaustive(n in 1usize..300, ratio in 0.05f64..0.95, seed: u64) {
            let s = split_indices(n, ratio, seed);
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
