//! Frame perception transformer: a stack of CAT blocks, each running one
//! per-frame encoder layer followed by cross-frame attention over the
//! pseudo-MOS tokens, whose outputs are appended to every frame as fusion tokens.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::frame_ingest::FrameEmbedding;
use crate::numerics::nn::{resolve_heads, EncoderLayer, LayerNorm, MultiHeadAttention, ParamBuilder};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// How a CAT block produces fusion tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    /// `MSA(LN(M_mos)) + M_mos`.
    #[default]
    Attention,
    /// Fusion tokens are the pseudo-MOS tokens themselves; no cross-frame exchange.
    Identity,
    /// No fusion tokens are produced or appended.
    Disabled,
}

#[derive(Clone, Debug)]
pub struct CatBlock {
    pub frame_layer: EncoderLayer,
    pub fusion_ln: LayerNorm,
    pub fusion_msa: MultiHeadAttention,
}

/// Per-video outputs of the frame perception stage.
#[derive(Clone, Debug)]
pub struct TokenBundle {
    /// `N` matrices of `P x d` frame tokens after the last block.
    pub frame_tokens: Vec<Var>,
    /// `N x d` pseudo-MOS tokens after the last block.
    pub mos_tokens: Var,
    /// One `N x d` matrix per block: row `n` of entry `l` is frame `n`'s fusion
    /// token as emitted by block `l + 1`. Empty when fusion is disabled.
    pub fusion_tokens: Vec<Var>,
    /// Per-frame sequence length after each block.
    pub tokens_per_frame: Vec<usize>,
}

impl TokenBundle {
    pub fn frames(&self) -> usize {
        self.frame_tokens.len()
    }

    /// `(N, P, d)`, `(N, d)` and `(N, L, d)`.
    pub fn shapes(&self, g: &Graph) -> ([usize; 3], [usize; 2], [usize; 3]) {
        let n = self.frames();
        let (p, d) = g.shape(self.frame_tokens[0]);
        let (mn, md) = g.shape(self.mos_tokens);
        ([n, p, d], [mn, md], [n, self.fusion_tokens.len(), d])
    }

    /// Fusion token of frame `n` (0-based) from block `l` (0-based).
    pub fn fusion_token(&self, g: &Graph, n: usize, l: usize) -> Vec<f64> {
        g.value(self.fusion_tokens[l]).row_slice(n).to_vec()
    }
}

#[derive(Clone, Debug)]
pub struct Fpt {
    pub embedding: FrameEmbedding,
    pub blocks: Vec<CatBlock>,
    pub fusion: FusionMode,
    patches: usize,
}

impl Fpt {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        if cfg.cat_blocks == 0 {
            return Err(Error::Config("at least one CAT block is required".into()));
        }
        let heads = resolve_heads(cfg.width, cfg.heads)?;
        let embedding = FrameEmbedding::new(b, cfg)?;
        let blocks = (1..=cfg.cat_blocks)
            .map(|l| {
                let name = format!("fpt.block{l}");
                Ok(CatBlock {
                    frame_layer: EncoderLayer::new(b, &format!("{name}.frame"), cfg.width, heads)?,
                    fusion_ln: LayerNorm::new(b, &format!("{name}.fusion_ln"), cfg.width)?,
                    fusion_msa: MultiHeadAttention::new(b, &format!("{name}.fusion_msa"), cfg.width, heads)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embedding,
            blocks,
            fusion: FusionMode::Attention,
            patches: cfg.patches(),
        })
    }

    fn expected_tokens(&self, block: usize) -> usize {
        let fused = if self.fusion == FusionMode::Disabled { 0 } else { block - 1 };
        self.patches + 1 + fused
    }

    /// Runs CAT block `block` (1-based) over the per-frame matrices, which must be
    /// ordered `[ê, e_1..e_P, f^1..f^(block-1)]`. Returns the updated matrices and
    /// the block's `N x d` fusion tokens (if fusion is enabled).
    pub fn cat_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: usize,
        frames: &[Var],
    ) -> Result<(Vec<Var>, Option<Var>)> {
        if block == 0 || block > self.blocks.len() {
            return Err(Error::Usage(format!(
                "block {block} outside 1..={}",
                self.blocks.len()
            )));
        }
        if frames.is_empty() {
            return Err(Error::Usage("no frames".into()));
        }
        let expected = self.expected_tokens(block);
        for &f in frames {
            let got = g.shape(f).0;
            if got != expected {
                return Err(Error::TokenCount { block, expected, got });
            }
        }
        let weights = &self.blocks[block - 1];

        let mut encoded = Vec::with_capacity(frames.len());
        for &f in frames {
            encoded.push(weights.frame_layer.forward(g, store, f, None)?);
        }
        if self.fusion == FusionMode::Disabled {
            return Ok((encoded, None));
        }

        let mos_rows = encoded
            .iter()
            .map(|&m| g.row(m, 0))
            .collect::<Result<Vec<_>, _>>()?;
        let mos = g.concat(&mos_rows, 0)?;
        let fusion = match self.fusion {
            FusionMode::Attention => {
                let h = weights.fusion_ln.forward(g, store, mos)?;
                let a = weights.fusion_msa.self_attend(g, store, h, None)?;
                g.add(a, mos)?
            }
            _ => mos,
        };
        let mut out = Vec::with_capacity(frames.len());
        for (n, &m) in encoded.iter().enumerate() {
            let f = g.row(fusion, n)?;
            out.push(g.concat(&[m, f], 0)?);
        }
        Ok((out, Some(fusion)))
    }

    /// Embeds each frame's patches and runs every CAT block.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: &[Tensor]) -> Result<TokenBundle> {
        if patches.is_empty() {
            return Err(Error::Usage("no frames".into()));
        }
        let mut frames = patches
            .iter()
            .map(|p| self.embedding.forward(g, store, p))
            .collect::<Result<Vec<_>>>()?;
        self.run(g, store, &mut frames)
    }

    /// Runs every CAT block over already embedded frame matrices `E_(n)`.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, frames: &mut Vec<Var>) -> Result<TokenBundle> {
        let mut fusion_tokens = Vec::new();
        let mut tokens_per_frame = Vec::new();
        for block in 1..=self.blocks.len() {
            let (next, fusion) = self.cat_block(g, store, block, frames)?;
            *frames = next;
            fusion_tokens.extend(fusion);
            tokens_per_frame.push(g.shape(frames[0]).0);
        }
        let mut frame_tokens = Vec::with_capacity(frames.len());
        let mut mos_rows = Vec::with_capacity(frames.len());
        for &m in frames.iter() {
            mos_rows.push(g.row(m, 0)?);
            frame_tokens.push(g.slice(m, 0, 1, self.patches)?);
        }
        let mos_tokens = g.concat(&mos_rows, 0)?;
        Ok(TokenBundle {
            frame_tokens,
            mos_tokens,
            fusion_tokens,
            tokens_per_frame,
        })
    }
}
