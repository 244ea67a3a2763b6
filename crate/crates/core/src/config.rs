use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mos2language::QualityMode;

/// Architecture dimensions shared by every module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Sampled frames per video (N).
    pub frames: usize,
    /// Frame interval between samples.
    pub stride: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    /// Patch edge length (s).
    pub patch: usize,
    /// Token width (d); must equal `patch * patch * 3`.
    pub width: usize,
    /// Shared text/video embedding length (r).
    pub embed_dim: usize,
    /// Number of quality grades and reference ratings (g).
    pub grades: usize,
    /// CAT blocks in the frame perception transformer (L).
    pub cat_blocks: usize,
    /// Content-and-language blocks (B).
    pub candla_blocks: usize,
    /// Text encoder layers.
    pub text_layers: usize,
    /// Head count used when a width is not a multiple of 64.
    pub heads: usize,
    pub quality_language: QualityMode,
}

impl ModelConfig {
    /// Desk-scale configuration: N=4, 16x16 crops, 4x4 patches, d=48, r=16, L=2, B=1.
    pub fn toy() -> Self {
        Self {
            frames: 4,
            stride: 2,
            crop_h: 16,
            crop_w: 16,
            patch: 4,
            width: 48,
            embed_dim: 16,
            grades: 5,
            cat_blocks: 2,
            candla_blocks: 1,
            text_layers: 2,
            heads: 4,
            quality_language: QualityMode::Short,
        }
    }

    /// Full-size settings: N=32 frames at interval 4, 224x224 crops, 16x16 patches,
    /// 12 CAT blocks and 2 content-and-language blocks.
    pub fn full_size() -> Self {
        Self {
            frames: 32,
            stride: 4,
            crop_h: 224,
            crop_w: 224,
            patch: 16,
            width: 768,
            embed_dim: 512,
            grades: 5,
            cat_blocks: 12,
            candla_blocks: 2,
            text_layers: 12,
            heads: 12,
            quality_language: QualityMode::Short,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.crop_h / self.patch, self.crop_w / self.patch)
    }

    /// Patches per frame (P).
    pub fn patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Frame tokens per video (K = N * P).
    pub fn frame_tokens(&self) -> usize {
        self.frames * self.patches()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("frames", self.frames),
            ("stride", self.stride),
            ("crop_h", self.crop_h),
            ("crop_w", self.crop_w),
            ("patch", self.patch),
            ("width", self.width),
            ("embed_dim", self.embed_dim),
            ("grades", self.grades),
            ("cat_blocks", self.cat_blocks),
            ("text_layers", self.text_layers),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.grades < 2 {
            return Err(Error::Config("grades must be at least 2".into()));
        }
        if self.patches() == 0 {
            return Err(Error::Config(format!(
                "crop {}x{} holds no {}x{} patch",
                self.crop_h, self.crop_w, self.patch, self.patch
            )));
        }
        if self.width != self.patch * self.patch * 3 {
            return Err(Error::Config(format!(
                "width {} must equal patch*patch*3 = {}",
                self.width,
                self.patch * self.patch * 3
            )));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}
