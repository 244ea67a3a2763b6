//! The assembled network: frames in, probability vector over reference ratings out.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fpt::{Fpt, FusionMode, TokenBundle};
use crate::frame_ingest::{crop_and_patchify, CropOrigin, FrameTensorFile};
use crate::mos2language::{QualityScale, TextEncoder};
use crate::numerics::nn::ParamBuilder;
use crate::numerics::{Graph, ParamStore, RngState, Tensor, Var};
use crate::quality_head::{cross_entropy_graph, fuse, vr_loss_graph, ReferenceRatings};
use crate::sat::Sat;
use crate::vat::Vat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Vr,
    CrossEntropy,
}

/// Component switches for comparison runs. The default is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// No fusion tokens in the frame stage and no fusion branch in aggregation.
    pub no_fusion: bool,
    /// Skip content-and-language fusion: `Ỹ_v = Y_t`.
    pub no_vat: bool,
    pub loss: LossKind,
}

/// Module weights and cached text embeddings. Parameters live in a separate
/// [`ParamStore`] so gradient checks can borrow them mutably.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub ablation: Ablation,
    pub fpt: Fpt,
    pub sat: Sat,
    pub text: TextEncoder,
    pub vat: Vat,
    pub scale: QualityScale,
    pub ratings: ReferenceRatings,
    y_t: Tensor,
}

/// Every intermediate of one forward pass.
pub struct ForwardOutput {
    pub bundle: TokenBundle,
    pub y_v: Var,
    pub y_t: Var,
    pub content: Option<Var>,
    pub y_tilde: Var,
    /// `1 x g` probabilities.
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct VqaModel {
    pub store: ParamStore,
    pub net: Network,
}

impl VqaModel {
    /// Builds a freshly initialized model; each module draws from its own stream.
    pub fn new(cfg: &ModelConfig, seed: u64, ablation: Ablation) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let fpt = Fpt::new(&mut ParamBuilder::new(&mut store, &RngState::new(seed, "init/fpt")), cfg)?;
        let sat = Sat::new(&mut ParamBuilder::new(&mut store, &RngState::new(seed, "init/sat")), cfg)?;
        let text = TextEncoder::new(&mut ParamBuilder::new(&mut store, &RngState::new(seed, "init/text")), cfg)?;
        let vat = Vat::new(&mut ParamBuilder::new(&mut store, &RngState::new(seed, "init/vat")), cfg)?;
        let scale = QualityScale::new(cfg.quality_language);
        if scale.len() != cfg.grades {
            return Err(Error::Config(format!(
                "the quality scale has {} grades, config asks for {}",
                scale.len(),
                cfg.grades
            )));
        }
        let ratings = ReferenceRatings::standard(cfg.grades)?;
        let y_t = text.encode_scale(&store, &scale)?;
        let mut net = Network {
            cfg: cfg.clone(),
            ablation,
            fpt,
            sat,
            text,
            vat,
            scale,
            ratings,
            y_t,
        };
        net.set_ablation(ablation);
        Ok(Self { store, net })
    }

    /// Recomputes `Y_t`; needed after text-encoder weights are replaced.
    pub fn refresh_text(&mut self) -> Result<()> {
        self.net.y_t = self.net.text.encode_scale(&self.store, &self.net.scale)?;
        Ok(())
    }

    pub fn predict(&self, patches: &[Tensor]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.net.forward(&mut g, &self.store, patches)?;
        Ok(g.value(out.probs).data().to_vec())
    }
}

impl Network {
    pub fn set_ablation(&mut self, ablation: Ablation) {
        self.ablation = ablation;
        self.fpt.fusion = if ablation.no_fusion {
            FusionMode::Disabled
        } else {
            FusionMode::Attention
        };
    }

    pub fn y_t(&self) -> &Tensor {
        &self.y_t
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: &[Tensor]) -> Result<ForwardOutput> {
        let bundle = self.fpt.forward(g, store, patches)?;
        self.head(g, store, bundle)
    }

    /// Everything after the frame stage.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, bundle: TokenBundle) -> Result<ForwardOutput> {
        let y_v = self.sat.forward(g, store, &bundle)?.video;
        let y_t = g.constant(self.y_t.clone());
        let (content, y_tilde) = if self.ablation.no_vat {
            (None, y_t)
        } else {
            let v = self.vat.forward(g, store, &bundle.frame_tokens, y_t)?;
            (Some(v.content), v.out)
        };
        let probs = fuse(g, y_tilde, y_v)?;
        Ok(ForwardOutput {
            bundle,
            y_v,
            y_t,
            content,
            y_tilde,
            probs,
        })
    }

    /// Training loss against an encoded MOS vector.
    pub fn loss(&self, g: &mut Graph, probs: Var, target: &[f64]) -> Result<Var> {
        let y = g.constant(Tensor::row(target.to_vec()));
        match self.ablation.loss {
            LossKind::Vr => vr_loss_graph(g, y, probs),
            LossKind::CrossEntropy => cross_entropy_graph(g, y, probs),
        }
    }
}

/// Patch matrices for the given frame indices, all cropped at `origin`.
pub fn clip_patches(
    video: &FrameTensorFile,
    indices: &[usize],
    origin: CropOrigin,
    cfg: &ModelConfig,
) -> Result<Vec<Tensor>> {
    indices
        .iter()
        .map(|&i| {
            if i >= video.frame_count {
                return Err(Error::Usage(format!("frame {i} outside {} frames", video.frame_count)));
            }
            crop_and_patchify(
                video.frame(i),
                video.height,
                video.width,
                origin,
                cfg.crop_h,
                cfg.crop_w,
                cfg.patch,
            )
        })
        .collect()
}
