//! Transformer building blocks composed from graph primitives.

use rand_chacha::ChaCha8Rng;

use super::{normal_init, Graph, NumericsError, ParamId, ParamStore, RngState, Tensor, Var};

/// Additive mask value for disallowed attention positions. Finite so the tape
/// never sees infinities; `exp` of it underflows to exactly zero.
pub const MASK_VALUE: f64 = -1e30;

/// Registers parameters into a store with a shared RNG and freeze flag.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    frozen: bool,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &RngState) -> Self {
        Self {
            store,
            rng: rng.rng(),
            frozen: false,
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId, NumericsError> {
        let t = normal_init(&mut self.rng, shape, std);
        self.store.add(name, t, self.frozen)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId, NumericsError> {
        self.store.add(name, Tensor::filled(shape, value), self.frozen)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}

/// Picks the attention head count for a given width: `width / 64` when that
/// divides evenly, otherwise the configured count.
pub fn resolve_heads(width: usize, configured: usize) -> Result<usize, NumericsError> {
    let heads = if width % 64 == 0 { width / 64 } else { configured };
    if heads == 0 || width % heads != 0 {
        return Err(NumericsError::Config(format!(
            "{heads} attention heads do not divide width {width}"
        )));
    }
    Ok(heads)
}

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Result<Self, NumericsError> {
        let weight = b.normal(&format!("{name}.weight"), &[input, output], (input as f64).powf(-0.5))?;
        let bias = if bias {
            Some(b.filled(&format!("{name}.bias"), &[output], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, width: usize) -> Result<Self, NumericsError> {
        Ok(Self {
            gain: b.filled(&format!("{name}.gain"), &[width], 1.0)?,
            bias: b.filled(&format!("{name}.bias"), &[width], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head scaled dot-product attention with learned input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

/// Attention output plus the per-head weight matrices (`n_q x n_k`, rows sum to 1).
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
    /// Per-head context before the output projection, concatenated over heads.
    pub context: Var,
}

impl MultiHeadAttention {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self, NumericsError> {
        if heads == 0 || width % heads != 0 {
            return Err(NumericsError::Config(format!(
                "{heads} attention heads do not divide width {width}"
            )));
        }
        Ok(Self {
            q: Linear::new(b, &format!("{name}.q"), width, width, true)?,
            k: Linear::new(b, &format!("{name}.k"), width, width, true)?,
            v: Linear::new(b, &format!("{name}.v"), width, width, true)?,
            out: Linear::new(b, &format!("{name}.out"), width, width, true)?,
            heads,
            width,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&Tensor>,
    ) -> Result<AttentionOutput, NumericsError> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, key)?;
        let v = self.v.forward(g, store, value)?;
        let head_dim = self.width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mask = mask.map(|m| g.constant(m.clone()));

        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * head_dim, head_dim)?;
            let kh = g.slice(k, 1, h * head_dim, head_dim)?;
            let vh = g.slice(v, 1, h * head_dim, head_dim)?;
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt)?;
            let mut logits = g.scale(logits, scale);
            if let Some(m) = mask {
                logits = g.add(logits, m)?;
            }
            let w = g.softmax(logits);
            contexts.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let context = if contexts.len() == 1 {
            contexts[0]
        } else {
            g.concat(&contexts, 1)?
        };
        let out = self.out.forward(g, store, context)?;
        Ok(AttentionOutput {
            out,
            weights,
            context,
        })
    }

    /// Self-attention convenience wrapper returning only the projected output.
    pub fn self_attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var, NumericsError> {
        Ok(self.forward(g, store, x, x, x, mask)?.out)
    }
}

/// Two-layer perceptron with GELU, hidden width `ratio * width`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

impl Mlp {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, width: usize) -> Result<Self, NumericsError> {
        Ok(Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), width, MLP_RATIO * width, true)?,
            fc2: Linear::new(b, &format!("{name}.fc2"), MLP_RATIO * width, width, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-LN transformer layer: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            ln_attn: LayerNorm::new(b, &format!("{name}.ln_attn"), width)?,
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), width, heads)?,
            ln_mlp: LayerNorm::new(b, &format!("{name}.ln_mlp"), width)?,
            mlp: Mlp::new(b, &format!("{name}.mlp"), width)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var, NumericsError> {
        let h = self.ln_attn.forward(g, store, x)?;
        let a = self.attn.self_attend(g, store, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln_mlp.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

/// `n x n` additive mask that blocks attention to later positions.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            m.data_mut()[i * n + j] = MASK_VALUE;
        }
    }
    m
}

/// Sinusoidal position table, one row per position:
/// `v[2j] = sin(p / 10000^(2j/d))`, `v[2j+1] = cos(p / 10000^(2j/d))`.
pub fn sinusoid_positions(positions: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; positions * width];
    for p in 0..positions {
        for c in 0..width {
            let pair = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data[p * width + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(positions, width, data).expect("positions and width are positive")
}
