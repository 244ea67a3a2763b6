//! SGD with momentum, step learning-rate decay, per-epoch logging and checkpoints.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::frame_ingest::{random_crop, sample_frame_indices, VideoSample};
use crate::model::{clip_patches, VqaModel};
use crate::numerics::{Checkpoint, Graph, RngState, Tensor};
use crate::quality_head::{encode_mos, DecodeMode, Svr, SvrParams};

use super::eval::{evaluate, EvalReport};
use super::{split_indices, Split, TrainConfig};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_srocc: f64,
    pub val_plcc: f64,
    pub degenerate: bool,
}

/// Owns the model and the momentum buffers.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: VqaModel,
    velocity: Vec<Vec<f64>>,
    /// Optimizer steps taken so far.
    pub steps: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = VqaModel::new(&cfg.model, cfg.seed, cfg.ablation)?;
        let velocity = model.store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Ok(Self {
            cfg: cfg.clone(),
            model,
            velocity,
            steps: 0,
        })
    }

    /// Forward and backward for one sample with its own crop and frame offset;
    /// gradients accumulate into the store. Returns the loss.
    fn accumulate(&mut self, sample: &VideoSample, epoch: usize) -> Result<f64> {
        let cfg = &self.model.net.cfg;
        let v = &sample.frames;
        let mut rng = RngState::new(self.cfg.seed, format!("train/e{epoch}/{}", sample.id)).rng();
        let indices = sample_frame_indices(v.frame_count, cfg.frames, cfg.stride, &mut rng)?;
        let origin = random_crop(v.height, v.width, cfg.crop_h, cfg.crop_w, &mut rng)?;
        let patches = clip_patches(v, &indices, origin, cfg)?;
        let target = encode_mos(sample.scaled_mos, &self.model.net.ratings)?;
        let mut g = Graph::new();
        let out = self.model.net.forward(&mut g, &self.model.store, &patches)?;
        let loss = self.model.net.loss(&mut g, out.probs, &target)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.steps });
        }
        g.backward_into(loss, &mut self.model.store)?;
        Ok(value)
    }

    /// One optimizer step on a batch; gradients are averaged over the batch.
    /// Returns the mean loss.
    pub fn step(&mut self, batch: &[&VideoSample], epoch: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        self.model.store.zero_grads();
        let mut total = 0.0;
        for s in batch {
            total += self.accumulate(s, epoch)?;
        }
        let inv = 1.0 / batch.len() as f64;
        let clip = self.cfg.grad_clip.map(|limit| {
            let norm: f64 = self
                .model
                .store
                .trainable()
                .filter_map(|(_, p)| p.tensor.grad())
                .flat_map(|g| g.iter().map(|v| (v * inv) * (v * inv)))
                .sum::<f64>()
                .sqrt();
            if norm > limit { limit / norm } else { 1.0 }
        });
        let scale = inv * clip.unwrap_or(1.0);
        let lr = self.cfg.lr_at(epoch);
        let mu = self.cfg.momentum;
        for ((_, p), vel) in self.model.store.iter_mut().zip(&mut self.velocity) {
            if p.frozen {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for ((w, v), g) in p.tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = mu * *v + g * scale;
                *w -= lr * *v;
            }
        }
        self.model.store.zero_grads();
        self.steps += 1;
        Ok(total * inv)
    }

    /// One pass over `train` in a seeded order. Returns the mean sample loss.
    pub fn epoch(&mut self, samples: &[VideoSample], train: &[usize], epoch: usize) -> Result<f64> {
        let mut order = train.to_vec();
        order.shuffle(&mut RngState::new(self.cfg.seed, format!("shuffle/e{epoch}")).rng());
        let mut sum = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&VideoSample> = chunk.iter().map(|&i| &samples[i]).collect();
            sum += self.step(&batch, epoch)? * batch.len() as f64;
        }
        Ok(sum / order.len().max(1) as f64)
    }

    pub fn checkpoint(&self, mos_range: [f64; 2]) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.model.store);
        push_meta(&mut ck, mos_range, self.cfg.svr);
        ck
    }
}

fn push_meta(ck: &mut Checkpoint, mos_range: [f64; 2], svr: SvrParams) {
    ck.push("meta.mos_range", Tensor::row(mos_range.to_vec()));
    ck.push("meta.svr", Tensor::row(vec![svr.c, svr.epsilon, svr.gamma]));
}

pub struct TrainOutcome {
    pub model: VqaModel,
    pub log: Vec<EpochLog>,
    pub split: Split,
    pub mos_range: [f64; 2],
    /// Held-out report for the final weights.
    pub report: EvalReport,
    pub best_epoch: usize,
    pub final_checkpoint: Vec<u8>,
}

/// Fits the SVR decoder when the config asks for it.
pub fn decoder(cfg: &TrainConfig, model: &VqaModel) -> Result<Option<Svr>> {
    match cfg.decode {
        DecodeMode::ExpectedValue => Ok(None),
        DecodeMode::Svr => Ok(Some(Svr::fit_to_ratings(cfg.svr, &model.net.ratings, 0.01)?)),
    }
}

/// Trains on the seeded 8:2 split of `samples`. With `out_dir`, writes the
/// config, a JSON-lines epoch log, `last.ckpt` every epoch and `best.ckpt`
/// whenever held-out SROCC improves.
pub fn train(cfg: &TrainConfig, samples: &[VideoSample], mos_range: [f64; 2], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    let split = split_indices(samples.len(), cfg.split_ratio, cfg.seed);
    if split.train.is_empty() || split.test.len() < 3 {
        return Err(Error::Usage(format!(
            "{} samples give {} training and {} held-out videos; need at least 1 and 3",
            samples.len(),
            split.train.len(),
            split.test.len()
        )));
    }
    let test: Vec<&VideoSample> = split.test.iter().map(|&i| &samples[i]).collect();
    let svr = decoder(cfg, &trainer.model)?;
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            cfg.save(&dir.join(CONFIG_FILE))?;
            let p = dir.join(TRAIN_LOG);
            Some((std::fs::File::create(&p).map_err(io_err(&p))?, p))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut best = (0, f64::NEG_INFINITY);
    let mut report = None;
    let mut bytes = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mean_loss = trainer.epoch(samples, &split.train, epoch)?;
        let (r, _) = evaluate(&trainer.model, &test, 1, cfg.decode, svr.as_ref())?;
        let entry = EpochLog {
            epoch,
            lr: cfg.lr_at(epoch),
            mean_loss,
            val_srocc: r.srocc,
            val_plcc: r.plcc,
            degenerate: r.degenerate,
        };
        log::info!(
            "epoch {epoch}: loss {mean_loss:.5} srocc {:.4} plcc {:.4}",
            r.srocc,
            r.plcc
        );
        bytes = trainer.checkpoint(mos_range).to_bytes();
        if let Some((f, p)) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(io_err(p))?;
            let dir = out_dir.expect("log file implies an output directory");
            let last = dir.join(LAST_CHECKPOINT);
            std::fs::write(&last, &bytes).map_err(io_err(&last))?;
            if r.srocc > best.1 {
                let b = dir.join(BEST_CHECKPOINT);
                std::fs::write(&b, &bytes).map_err(io_err(&b))?;
            }
        }
        if r.srocc > best.1 {
            best = (epoch, r.srocc);
        }
        log.push(entry);
        report = Some(r);
    }
    let report = match report {
        Some(r) => r,
        None => evaluate(&trainer.model, &test, 1, cfg.decode, svr.as_ref())?.0,
    };
    if bytes.is_empty() {
        bytes = trainer.checkpoint(mos_range).to_bytes();
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
        split,
        mos_range,
        report,
        best_epoch: best.0,
        final_checkpoint: bytes,
    })
}

/// Rebuilds a model from a checkpoint. Returns the model, the MOS range and
/// the SVR settings stored alongside the weights.
pub fn load_model(cfg: &TrainConfig, path: &Path) -> Result<(VqaModel, [f64; 2], SvrParams)> {
    let ck = Checkpoint::load(path)?;
    let mut model = VqaModel::new(&cfg.model, cfg.seed, cfg.ablation)?;
    ck.apply_to(&mut model.store)?;
    model.refresh_text()?;
    let bad = |what: &str| Error::Format {
        path: path.display().to_string(),
        detail: format!("missing or malformed {what}"),
    };
    let range = ck.get("meta.mos_range").ok_or_else(|| bad("meta.mos_range"))?;
    let svr = ck.get("meta.svr").ok_or_else(|| bad("meta.svr"))?;
    if range.numel() != 2 || svr.numel() != 3 {
        return Err(bad("metadata"));
    }
    let r = range.data();
    let s = svr.data();
    Ok((
        model,
        [r[0], r[1]],
        SvrParams {
            c: s[0],
            epsilon: s[1],
            gamma: s[2],
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synthetic::{generate, SyntheticSpec};

    fn tiny_samples(count: usize) -> Vec<VideoSample> {
        let spec = SyntheticSpec {
            count,
            frames: 8,
            ..SyntheticSpec::default()
        };
        generate(&spec)
            .unwrap()
            .into_iter()
            .map(|v| VideoSample {
                id: v.id,
                frames: v.frames,
                raw_mos: v.mos,
                scaled_mos: v.mos,
            })
            .collect()
    }

    #[test]
    fn one_small_step_lowers_that_samples_loss() {
        let samples = tiny_samples(3);
        // Retry over a few samples: a single SGD step is only guaranteed to
        // descend for a small enough rate.
        let mut descended = false;
        for s in &samples {
            let cfg = TrainConfig {
                lr: 1e-3,
                momentum: 0.0,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(&cfg).unwrap();
            let before = t.step(&[s], 1).unwrap();
            let mut probe = Trainer::new(&cfg).unwrap();
            probe.model = t.model.clone();
            probe.model.store.zero_grads();
            let after = probe.accumulate(s, 1).unwrap();
            if after < before {
                descended = true;
                break;
            }
        }
        assert!(descended);
    }

    #[test]
    fn text_weights_stay_fixed() {
        let samples = tiny_samples(4);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&cfg).unwrap();
        let snapshot = |m: &VqaModel| {
            m.store
                .iter()
                .filter(|(_, p)| p.name.starts_with("text."))
                .map(|(_, p)| p.tensor.data().to_vec())
                .collect::<Vec<_>>()
        };
        let before = snapshot(&t.model);
        let batch: Vec<&VideoSample> = samples.iter().collect();
        for _ in 0..3 {
            t.step(&batch, 1).unwrap();
        }
        assert_eq!(snapshot(&t.model), before);
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let samples = tiny_samples(1);
        let mut t = Trainer::new(&TrainConfig::default()).unwrap();
        t.step(&[&samples[0]], 1).unwrap();
        let id = t.model.net.sat.out_proj;
        t.model.store.get_mut(id).tensor.data_mut()[0] = f64::NAN;
        assert!(matches!(t.step(&[&samples[0]], 1), Err(Error::NonFiniteLoss { step: 1 })));
    }

    #[test]
    fn checkpoint_round_trip_restores_predictions() {
        let samples = tiny_samples(15);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &samples, [1.0, 5.0], Some(dir.path())).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
        let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        let parsed: EpochLog = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(parsed, out.log[0]);
        let (model, range, svr) = load_model(&cfg, &dir.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(range, [1.0, 5.0]);
        assert_eq!(svr, SvrParams::default());
        let test: Vec<&VideoSample> = out.split.test.iter().map(|&i| &samples[i]).collect();
        let (again, _) = evaluate(&model, &test, 1, DecodeMode::ExpectedValue, None).unwrap();
        assert_eq!(again, out.report);
        assert_eq!(std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap(), out.final_checkpoint);
    }
}
