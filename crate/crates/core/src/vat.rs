//! Content reduction and content-and-language (CandLA) cross-attention blocks.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::nn::{resolve_heads, LayerNorm, Mlp, MultiHeadAttention, ParamBuilder};
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Var};

pub const KERNEL: usize = 3;

/// Per-frame 3x3 same-padded convolution over the patch grid with global
/// average pooling, then a linear map from the frame axis onto `g` rows.
#[derive(Clone, Debug)]
pub struct ContentReducer {
    /// `(9*d) x r`, rows ordered by kernel offset (dy, dx) then input channel.
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    /// `g x N`.
    pub frame_weight: ParamId,
    /// `g x 1`.
    pub frame_bias: ParamId,
    grid: (usize, usize),
    /// For every output position, the 9 source rows; `P` marks zero padding.
    taps: Vec<usize>,
}

fn conv_taps(gh: usize, gw: usize) -> Vec<usize> {
    let pad = gh * gw;
    let mut taps = Vec::with_capacity(gh * gw * KERNEL * KERNEL);
    for y in 0..gh as isize {
        for x in 0..gw as isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (sy, sx) = (y + dy, x + dx);
                    let inside = sy >= 0 && sx >= 0 && sy < gh as isize && sx < gw as isize;
                    taps.push(if inside { sy as usize * gw + sx as usize } else { pad });
                }
            }
        }
    }
    taps
}

impl ContentReducer {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let (gh, gw) = cfg.grid();
        let fan_in = KERNEL * KERNEL * cfg.width;
        Ok(Self {
            conv_weight: b.normal("vat.conv.weight", &[fan_in, cfg.embed_dim], (fan_in as f64).powf(-0.5))?,
            conv_bias: b.filled("vat.conv.bias", &[cfg.embed_dim], 0.0)?,
            frame_weight: b.normal("vat.frames.weight", &[cfg.grades, cfg.frames], (cfg.frames as f64).powf(-0.5))?,
            frame_bias: b.filled("vat.frames.bias", &[cfg.grades, 1], 0.0)?,
            grid: (gh, gw),
            taps: conv_taps(gh, gw),
        })
    }

    /// One frame's `P x d` tokens to a `1 x r` row.
    pub fn conv_pool(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let (p, d) = g.shape(tokens);
        if p != self.grid.0 * self.grid.1 {
            return Err(NumericsError::ShapeMismatch {
                op: "reduce_content",
                lhs: vec![p, d],
                rhs: vec![self.grid.0 * self.grid.1, d],
            }
            .into());
        }
        let zero = g.constant(crate::numerics::Tensor::zeros(&[1, d]));
        let padded = g.concat(&[tokens, zero], 0)?;
        let cols = g.gather(padded, &self.taps)?;
        let cols = g.reshape(cols, p, KERNEL * KERNEL * d)?;
        let w = g.param(store, self.conv_weight);
        let bias = g.param(store, self.conv_bias);
        let out = g.matmul(cols, w)?;
        let out = g.add(out, bias)?;
        Ok(g.mean(out, 0)?)
    }

    /// `Y_c`: `g x r`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: &[Var]) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::Usage("no frame tokens".into()));
        }
        let rows = frames
            .iter()
            .map(|&f| self.conv_pool(g, store, f))
            .collect::<Result<Vec<_>>>()?;
        let per_frame = g.concat(&rows, 0)?;
        let w = g.param(store, self.frame_weight);
        let bias = g.param(store, self.frame_bias);
        let out = g.matmul(w, per_frame)?;
        Ok(g.add(out, bias)?)
    }
}

/// `Ŷ = Y + MCA(LN_q(Y), LN_k(Y_c), LN_v(Y_c))`, then `Ỹ = Ŷ + MLP(LN(Ŷ))`.
#[derive(Clone, Debug)]
pub struct CandlaBlock {
    pub ln_q: LayerNorm,
    pub ln_k: LayerNorm,
    pub ln_v: LayerNorm,
    pub mca: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

pub struct CandlaOutput {
    pub out: Var,
    /// Per-head `g x g` attention weights.
    pub weights: Vec<Var>,
}

impl CandlaBlock {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(b, &format!("{name}.ln_q"), width)?,
            ln_k: LayerNorm::new(b, &format!("{name}.ln_k"), width)?,
            ln_v: LayerNorm::new(b, &format!("{name}.ln_v"), width)?,
            mca: MultiHeadAttention::new(b, &format!("{name}.mca"), width, heads)?,
            ln_mlp: LayerNorm::new(b, &format!("{name}.ln_mlp"), width)?,
            mlp: Mlp::new(b, &format!("{name}.mlp"), width)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, y: Var, content: Var) -> Result<CandlaOutput> {
        let q = self.ln_q.forward(g, store, y)?;
        let k = self.ln_k.forward(g, store, content)?;
        let v = self.ln_v.forward(g, store, content)?;
        let att = self.mca.forward(g, store, q, k, v, None)?;
        let y = g.add(y, att.out)?;
        let h = self.ln_mlp.forward(g, store, y)?;
        let m = self.mlp.forward(g, store, h)?;
        Ok(CandlaOutput {
            out: g.add(y, m)?,
            weights: att.weights,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Vat {
    pub reducer: ContentReducer,
    pub blocks: Vec<CandlaBlock>,
}

pub struct VatOutput {
    pub content: Var,
    pub out: Var,
}

impl Vat {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let heads = resolve_heads(cfg.embed_dim, cfg.heads)?;
        let reducer = ContentReducer::new(b, cfg)?;
        let blocks = (1..=cfg.candla_blocks)
            .map(|i| CandlaBlock::new(b, &format!("vat.candla{i}"), cfg.embed_dim, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { reducer, blocks })
    }

    /// `Ỹ_v` from the final frame tokens and `Y_t`; the query stream chains
    /// through the blocks while `Y_c` is shared.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: &[Var], y_t: Var) -> Result<VatOutput> {
        let content = self.reducer.forward(g, store, frames)?;
        if g.shape(content) != g.shape(y_t) {
            let (a, b) = (g.shape(content), g.shape(y_t));
            return Err(NumericsError::ShapeMismatch {
                op: "candla",
                lhs: vec![b.0, b.1],
                rhs: vec![a.0, a.1],
            }
            .into());
        }
        let mut y = y_t;
        for block in &self.blocks {
            y = block.forward(g, store, y, content)?.out;
        }
        Ok(VatOutput { content, out: y })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{RngState, Tensor};
    use rand::Rng;

    fn setup(cfg: &ModelConfig) -> (ParamStore, Vat) {
        let mut store = ParamStore::new();
        let vat = Vat::new(&mut ParamBuilder::new(&mut store, &RngState::new(4, "init/vat")), cfg).unwrap();
        (store, vat)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = RngState::new(seed, "vat-test").rng();
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn frames(cfg: &ModelConfig, seed: u64) -> Vec<Tensor> {
        (0..cfg.frames).map(|n| random(cfg.patches(), cfg.width, seed * 100 + n as u64)).collect()
    }

    fn content(store: &ParamStore, vat: &Vat, f: &[Tensor]) -> Tensor {
        let mut g = Graph::new();
        let vars: Vec<Var> = f.iter().map(|t| g.constant(t.clone())).collect();
        let y = vat.reducer.forward(&mut g, store, &vars).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn content_shape() {
        let cfg = ModelConfig::toy();
        let (store, vat) = setup(&cfg);
        assert_eq!(content(&store, &vat, &frames(&cfg, 1)).shape(), &[5, 16]);
    }

    #[test]
    fn zero_input_gives_zero_and_scaling_is_homogeneous() {
        let cfg = ModelConfig::toy();
        let (store, vat) = setup(&cfg);
        let zeros: Vec<Tensor> = (0..cfg.frames).map(|_| Tensor::zeros(&[16, 48])).collect();
        assert!(content(&store, &vat, &zeros).data().iter().all(|&v| v == 0.0));
        let f = frames(&cfg, 2);
        let doubled: Vec<Tensor> = f
            .iter()
            .map(|t| Tensor::matrix(16, 48, t.data().iter().map(|v| 2.0 * v).collect()).unwrap())
            .collect();
        let a = content(&store, &vat, &f);
        let b = content(&store, &vat, &doubled);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        let cfg = ModelConfig::toy();
        let (mut store, vat) = setup(&cfg);
        store.get_mut(vat.reducer.conv_bias).tensor = Tensor::new(vec![16], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let f = random(16, 48, 7);
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let got = vat.reducer.conv_pool(&mut g, &store, x).unwrap();
        let got = g.value(got).data().to_vec();

        let w = store.get(vat.reducer.conv_weight).tensor.clone();
        let bias = store.get(vat.reducer.conv_bias).tensor.clone();
        let (gh, gw, d, r) = (4usize, 4usize, 48usize, 16usize);
        let mut expected = vec![0.0; r];
        for y in 0..gh as isize {
            for x in 0..gw as isize {
                for o in 0..r {
                    let mut acc = bias.data()[o];
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let (sy, sx) = (y + ky - 1, x + kx - 1);
                            if sy < 0 || sx < 0 || sy >= gh as isize || sx >= gw as isize {
                                continue;
                            }
                            let src = sy as usize * gw + sx as usize;
                            let k = (ky * 3 + kx) as usize;
                            for c in 0..d {
                                acc += f.data()[src * d + c] * w.data()[(k * d + c) * r + o];
                            }
                        }
                    }
                    expected[o] += acc / (gh * gw) as f64;
                }
            }
        }
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zeroed_branches_are_pure_residual() {
        let cfg = ModelConfig::toy();
        let (mut store, vat) = setup(&cfg);
        let blk = &vat.blocks[0];
        for id in [blk.mca.out.weight, blk.mca.out.bias.unwrap(), blk.mlp.fc2.weight, blk.mlp.fc2.bias.unwrap()] {
            store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let y_t = g.constant(random(5, 16, 3));
        let c = g.constant(random(5, 16, 4));
        let out = blk.forward(&mut g, &store, y_t, c).unwrap();
        assert_eq!(g.value(out.out).data(), g.value(y_t).data());
    }

    #[test]
    fn single_grade_attends_with_weight_one() {
        let cfg = ModelConfig {
            grades: 1,
            ..ModelConfig::toy()
        };
        let (store, vat) = setup(&cfg);
        let mut g = Graph::new();
        let y_t = g.constant(random(1, 16, 5));
        let c = g.constant(random(1, 16, 6));
        let out = vat.blocks[0].forward(&mut g, &store, y_t, c).unwrap();
        assert_eq!(out.weights.len(), 4);
        for w in out.weights {
            assert_eq!(g.value(w).data(), &[1.0]);
        }
    }

    #[test]
    fn stacked_blocks_compose() {
        let cfg = ModelConfig {
            candla_blocks: 2,
            ..ModelConfig::toy()
        };
        let (store, vat) = setup(&cfg);
        let f = frames(&cfg, 8);
        let y_t = random(5, 16, 9);
        let mut g = Graph::new();
        let vars: Vec<Var> = f.iter().map(|t| g.constant(t.clone())).collect();
        let yt = g.constant(y_t.clone());
        let mono = vat.forward(&mut g, &store, &vars, yt).unwrap();
        assert_eq!(g.shape(mono.out), (5, 16));

        let mut g2 = Graph::new();
        let c = g2.constant(content(&store, &vat, &f));
        let mut y = g2.constant(y_t);
        for blk in &vat.blocks {
            y = blk.forward(&mut g2, &store, y, c).unwrap().out;
        }
        assert_eq!(g.value(mono.out).data(), g2.value(y).data());
    }

    #[test]
    fn output_depends_on_every_frame() {
        let cfg = ModelConfig::toy();
        let (store, vat) = setup(&cfg);
        let f = frames(&cfg, 10);
        let y_t = random(5, 16, 11);
        let run = |f: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = f.iter().map(|t| g.constant(t.clone())).collect();
            let yt = g.constant(y_t.clone());
            let out = vat.forward(&mut g, &store, &vars, yt).unwrap();
            g.value(out.out).clone()
        };
        let base = run(&f);
        for n in 0..cfg.frames {
            let mut p = f.clone();
            p[n].data_mut()[5] += 1e-4;
            let moved = run(&p);
            let fd = moved.max_abs_diff(&base) / 1e-4;
            assert!(fd > 1e-6, "frame {n} has no effect");
        }
    }

    #[test]
    fn wrong_grid_is_rejected() {
        let cfg = ModelConfig::toy();
        let (store, vat) = setup(&cfg);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[15, 48]));
        assert!(vat.reducer.conv_pool(&mut g, &store, x).is_err());
    }
}
