//! Shared fixtures for the benchmarks.

use vqa_core::frame_ingest::{center_crop, center_frame_indices, VideoSample};
use vqa_core::harness::{synthetic_samples, SyntheticSpec};
use vqa_core::model::clip_patches;
use vqa_core::numerics::Tensor;
use vqa_core::ModelConfig;

/// `count` small synthetic videos as training samples.
pub fn samples(count: usize) -> Vec<VideoSample> {
    synthetic_samples(&SyntheticSpec {
        count,
        ..SyntheticSpec::default()
    })
    .expect("synthetic videos")
}

/// Center-crop patches of one sample for `cfg`.
pub fn patches(sample: &VideoSample, cfg: &ModelConfig) -> Vec<Tensor> {
    let v = &sample.frames;
    let idx = center_frame_indices(v.frame_count, cfg.frames, cfg.stride).expect("indices");
    let origin = center_crop(v.height, v.width, cfg.crop_h, cfg.crop_w).expect("crop");
    clip_patches(v, &idx, origin, cfg).expect("patches")
}
