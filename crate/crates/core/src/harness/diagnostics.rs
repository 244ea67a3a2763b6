//! End-to-end finite-difference check of the training loss.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::frame_ingest::{center_crop, center_frame_indices};
use crate::model::{clip_patches, VqaModel};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport};
use crate::quality_head::encode_mos;

use super::synthetic::{generate, SyntheticSpec};
use super::TrainConfig;

/// Module a parameter belongs to, from its name prefix.
pub fn module_of(name: &str) -> &str {
    if name.starts_with("fpt.embed.") {
        return "frame_ingest";
    }
    name.split('.').next().unwrap_or(name)
}

/// Checks the loss gradient of a freshly initialized model on one synthetic
/// video. `entries_per_param` limits how many entries of each parameter are
/// perturbed; `None` checks all of them.
pub fn model_grad_check(cfg: &TrainConfig, entries_per_param: Option<usize>) -> Result<GradCheckReport> {
    cfg.validate()?;
    let m = &cfg.model;
    let spec = SyntheticSpec {
        count: 1,
        seed: cfg.seed,
        frames: m.frames * m.stride,
        height: m.crop_h + 4,
        width: m.crop_w + 4,
        ..SyntheticSpec::default()
    };
    let video = generate(&spec)?.remove(0);
    let indices = center_frame_indices(video.frames.frame_count, m.frames, m.stride)?;
    let origin = center_crop(video.frames.height, video.frames.width, m.crop_h, m.crop_w)?;
    let patches = clip_patches(&video.frames, &indices, origin, m)?;

    let mut model = VqaModel::new(m, cfg.seed, cfg.ablation)?;
    let target = encode_mos(video.mos, &model.net.ratings)?;
    let net = model.net.clone();
    let opts = GradCheckOptions {
        max_entries_per_param: entries_per_param,
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    grad_check::<Error>(
        &mut model.store,
        |g, s| {
            let out = net.forward(g, s, &patches)?;
            net.loss(g, out.probs, &target)
        },
        &opts,
    )
}

/// Largest relative error per module.
pub fn per_module(report: &GradCheckReport) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for p in &report.params {
        let e = out.entry(module_of(&p.name).to_string()).or_insert(0.0f64);
        *e = e.max(p.max_rel_error);
    }
    out
}
