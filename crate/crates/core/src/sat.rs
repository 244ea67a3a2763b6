//! Spatiotemporal aggregation of pseudo-MOS and fusion tokens into the
//! video-level representation `y_v`.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fpt::TokenBundle;
use crate::numerics::nn::{resolve_heads, sinusoid_positions, LayerNorm, MultiHeadAttention, ParamBuilder};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Init std of the output projection. Larger values saturate the grade softmax early in training.
const OUT_PROJ_STD: f64 = 0.005;

#[derive(Clone, Debug)]
pub struct Sat {
    /// Fixed `N x d` temporal position table.
    positions: Tensor,
    pub ln_in: LayerNorm,
    pub msa: MultiHeadAttention,
    pub ln_out: LayerNorm,
    /// Channel-wise weights applied to the per-frame fusion-token average.
    pub delta: ParamId,
    /// `d x r` projection onto the shared embedding.
    pub out_proj: ParamId,
}

/// Intermediate SAT values, exposed for inspection in tests.
pub struct SatOutput {
    pub video: Var,
    pub mos: Var,
    pub fusion: Option<Var>,
}

impl Sat {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.width;
        let heads = resolve_heads(d, cfg.heads)?;
        Ok(Self {
            positions: sinusoid_positions(cfg.frames, d),
            ln_in: LayerNorm::new(b, "sat.ln_in", d)?,
            msa: MultiHeadAttention::new(b, "sat.msa", d, heads)?,
            ln_out: LayerNorm::new(b, "sat.ln_out", d)?,
            delta: b.filled("sat.delta", &[d], 1.0)?,
            out_proj: b.normal("sat.out_proj", &[d, cfg.embed_dim], OUT_PROJ_STD)?,
        })
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    /// `y_v = Mean_frames(δ ⊙ Mean_blocks(fusion) + LN(M + MSA(LN(M)))) · W_out`
    /// with `M = M_mos + V_pos`. Returns a `1 x r` row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, bundle: &TokenBundle) -> Result<SatOutput> {
        let (n, d) = g.shape(bundle.mos_tokens);
        if bundle.frames() == 0 || n == 0 {
            return Err(Error::Usage("empty token bundle".into()));
        }
        if (n, d) != self.positions.dims2() {
            return Err(crate::numerics::NumericsError::ShapeMismatch {
                op: "sat",
                lhs: vec![n, d],
                rhs: self.positions.shape().to_vec(),
            }
            .into());
        }
        let pos = g.constant(self.positions.clone());
        let m = g.add(bundle.mos_tokens, pos)?;
        let h = self.ln_in.forward(g, store, m)?;
        let a = self.msa.self_attend(g, store, h, None)?;
        let m = g.add(m, a)?;
        let mos = self.ln_out.forward(g, store, m)?;

        let (fusion, pooled) = if bundle.fusion_tokens.is_empty() {
            (None, mos)
        } else {
            let mut acc = bundle.fusion_tokens[0];
            for &f in &bundle.fusion_tokens[1..] {
                acc = g.add(acc, f)?;
            }
            let avg = g.scale(acc, 1.0 / bundle.fusion_tokens.len() as f64);
            let delta = g.param(store, self.delta);
            let fusion = g.mul(avg, delta)?;
            (Some(fusion), g.add(fusion, mos)?)
        };
        let mean = g.mean(pooled, 0)?;
        let w = g.param(store, self.out_proj);
        let video = g.matmul(mean, w)?;
        Ok(SatOutput { video, mos, fusion })
    }
}
