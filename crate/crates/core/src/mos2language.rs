//! Quality-language descriptions and the frozen text encoder that turns them
//! into the `g x r` matrix `Y_t`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::nn::{causal_mask, resolve_heads, EncoderLayer, LayerNorm, ParamBuilder};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor};

pub const CONTEXT_LEN: usize = 16;

const LONG: [&str; 5] = [
    "Excellent and Imperceptible",
    "Good and perceptible, but not annoying",
    "Fair and slightly annoying",
    "Poor and annoying",
    "Bad and very annoying",
];
const SHORT: [&str; 5] = ["Excellent", "Good", "Fair", "Poor", "Bad"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityMode {
    Long,
    #[default]
    Short,
}

impl FromStr for QualityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "long" => Ok(Self::Long),
            "short" => Ok(Self::Short),
            other => Err(Error::Usage(format!("quality language must be long or short, got {other:?}"))),
        }
    }
}

impl fmt::Display for QualityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Long => "long",
            Self::Short => "short",
        })
    }
}

/// Descriptions in descending score order (5 down to 1).
pub fn build_quality_texts(mode: QualityMode) -> [&'static str; 5] {
    match mode {
        QualityMode::Long => LONG,
        QualityMode::Short => SHORT,
    }
}

/// The five-grade scale: `(score, description)` ordered by descending score.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityScale {
    pub mode: QualityMode,
    pub entries: Vec<(u8, &'static str)>,
}

impl QualityScale {
    pub fn new(mode: QualityMode) -> Self {
        let entries = build_quality_texts(mode)
            .iter()
            .enumerate()
            .map(|(i, &t)| (5 - i as u8, t))
            .collect();
        Self { mode, entries }
    }

    pub fn texts(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(_, t)| *t).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Word-level tokenizer over the closed vocabulary of both description tables.
#[derive(Clone, Debug)]
pub struct TextTokenizer {
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
    pub context_len: usize,
}

fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

impl TextTokenizer {
    pub fn new() -> Self {
        let mut vocab: Vec<String> = LONG
            .iter()
            .chain(SHORT.iter())
            .flat_map(|t| split_words(t))
            .collect();
        vocab.sort();
        vocab.dedup();
        let words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(vocab).collect();
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self {
            words,
            ids,
            context_len: CONTEXT_LEN,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Lowercased words and punctuation joined the way `detokenize` prints them.
    pub fn normalize(text: &str) -> String {
        join_words(&split_words(text))
    }

    /// `[BOS, words.., EOS]`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        for w in split_words(text) {
            ids.push(*self.ids.get(&w).ok_or(Error::UnknownWord(w))?);
        }
        ids.push(EOS);
        if ids.len() > self.context_len {
            return Err(Error::ContextOverflow {
                text: text.to_string(),
                tokens: ids.len(),
                context_len: self.context_len,
            });
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let words: Vec<String> = ids
            .iter()
            .filter(|&&i| i >= SPECIALS.len() && i < self.words.len())
            .map(|&i| self.words[i].clone())
            .collect();
        join_words(&words)
    }
}

impl Default for TextTokenizer {
    fn default() -> Self {
        Self::new()
    }
}

fn join_words(words: &[String]) -> String {
    let mut out = String::new();
    for w in words {
        let punct = w.chars().all(|c| c.is_ascii_punctuation());
        if !out.is_empty() && !punct {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

/// Causal transformer over word tokens; every parameter is registered frozen.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tokenizer: TextTokenizer,
    pub token_embedding: ParamId,
    pub positions: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub ln_final: LayerNorm,
    pub projection: ParamId,
}

impl TextEncoder {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.width;
        let heads = resolve_heads(d, cfg.heads)?;
        let tokenizer = TextTokenizer::new();
        b.set_frozen(true);
        let token_embedding = b.normal("text.token_embedding", &[tokenizer.vocab_size(), d], 0.02)?;
        let positions = b.normal("text.positions", &[tokenizer.context_len, d], 0.01)?;
        let layers = (0..cfg.text_layers)
            .map(|i| EncoderLayer::new(b, &format!("text.layer{i}"), d, heads))
            .collect::<Result<Vec<_>, _>>()?;
        let ln_final = LayerNorm::new(b, "text.ln_final", d)?;
        let projection = b.normal("text.projection", &[d, cfg.embed_dim], (d as f64).powf(-0.5))?;
        b.set_frozen(false);
        Ok(Self {
            tokenizer,
            token_embedding,
            positions,
            layers,
            ln_final,
            projection,
        })
    }

    /// Final-layer hidden states (before the final LN) for a token sequence.
    pub fn hidden_states(&self, store: &ParamStore, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, store, ids)?;
        Ok(g.value(h).clone())
    }

    fn hidden(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<crate::numerics::Var> {
        if ids.is_empty() || ids.len() > self.tokenizer.context_len {
            return Err(Error::ContextOverflow {
                text: self.tokenizer.detokenize(ids),
                tokens: ids.len(),
                context_len: self.tokenizer.context_len,
            });
        }
        let table = g.param(store, self.token_embedding);
        let x = g.gather(table, ids)?;
        let pos = g.param(store, self.positions);
        let pos = g.slice(pos, 0, 0, ids.len())?;
        let mut x = g.add(x, pos)?;
        let mask = causal_mask(ids.len());
        for layer in &self.layers {
            x = layer.forward(g, store, x, Some(&mask))?;
        }
        Ok(x)
    }

    /// Embeds one text: hidden state at the EOS position, final LN, projection.
    pub fn encode_ids(&self, store: &ParamStore, ids: &[usize]) -> Result<Vec<f64>> {
        let eos = ids
            .iter()
            .position(|&i| i == EOS)
            .ok_or_else(|| Error::Usage("token sequence has no EOS".into()))?;
        let mut g = Graph::new();
        let h = self.hidden(&mut g, store, ids)?;
        let h = g.row(h, eos)?;
        let h = self.ln_final.forward(&mut g, store, h)?;
        let w = g.param(store, self.projection);
        let y = g.matmul(h, w)?;
        Ok(g.value(y).data().to_vec())
    }

    /// `Y_t`: one row per text, in input order.
    pub fn encode_texts(&self, store: &ParamStore, texts: &[&str]) -> Result<Tensor> {
        let mut rows = Vec::new();
        for t in texts {
            let ids = self.tokenizer.tokenize(t)?;
            rows.extend(self.encode_ids(store, &ids)?);
        }
        let r = rows.len() / texts.len().max(1);
        Ok(Tensor::matrix(texts.len(), r, rows)?)
    }

    pub fn encode_scale(&self, store: &ParamStore, scale: &QualityScale) -> Result<Tensor> {
        self.encode_texts(store, &scale.texts())
    }
}
