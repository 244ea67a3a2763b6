//! Feature fusion, MOS vectorization, the vectorized-regression loss and
//! score decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Graph, Tensor, Var};

pub const DEFAULT_T: f64 = 1.0;
pub const DEFAULT_U: f64 = 5.0;

/// `g` equally spaced anchors `b_i = T + i (U - T) / (g - 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRatings {
    pub t: f64,
    pub u: f64,
    pub b: Vec<f64>,
}

impl ReferenceRatings {
    pub fn new(t: f64, u: f64, g: usize) -> Result<Self> {
        if !(t < u) || !t.is_finite() || !u.is_finite() {
            return Err(Error::DegenerateRange { lo: t, hi: u });
        }
        if g < 2 {
            return Err(Error::Config(format!("need at least 2 reference ratings, got {g}")));
        }
        let step = (u - t) / (g - 1) as f64;
        let mut b: Vec<f64> = (0..g).map(|i| t + i as f64 * step).collect();
        b[g - 1] = u;
        Ok(Self { t, u, b })
    }

    pub fn standard(g: usize) -> Result<Self> {
        Self::new(DEFAULT_T, DEFAULT_U, g)
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }
}

/// `ŷ = softmax(Ỹ_v y_v)` for a `g x r` matrix and a `1 x r` row; returns `1 x g`.
pub fn fuse(g: &mut Graph, y_tilde: Var, y_v: Var) -> Result<Var> {
    let t = g.transpose(y_tilde);
    let logits = g.matmul(y_v, t)?;
    Ok(g.softmax(logits))
}

/// Plain-value version of [`fuse`].
pub fn fuse_values(y_tilde: &Tensor, y_v: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols) = y_tilde.dims2();
    if cols != y_v.len() {
        return Err(crate::numerics::NumericsError::ShapeMismatch {
            op: "fuse",
            lhs: vec![rows, cols],
            rhs: vec![y_v.len()],
        }
        .into());
    }
    let logits: Vec<f64> = (0..rows)
        .map(|i| y_tilde.row_slice(i).iter().zip(y_v).map(|(a, b)| a * b).sum())
        .collect();
    Ok(softmax(&logits))
}

/// Linear map of a native-range MOS onto `[t, u]`.
pub fn scale_mos(raw: f64, raw_min: f64, raw_max: f64, t: f64, u: f64) -> Result<f64> {
    if !(raw_min < raw_max) {
        return Err(Error::DegenerateRange { lo: raw_min, hi: raw_max });
    }
    if !(raw_min..=raw_max).contains(&raw) {
        return Err(Error::OutOfRange {
            value: raw,
            lo: raw_min,
            hi: raw_max,
        });
    }
    Ok(t + (u - t) * (raw - raw_min) / (raw_max - raw_min))
}

/// `y = softmax(-(c - b_i)^2)`.
pub fn encode_mos(c: f64, ratings: &ReferenceRatings) -> Result<Vec<f64>> {
    if !(ratings.t..=ratings.u).contains(&c) {
        return Err(Error::OutOfRange {
            value: c,
            lo: ratings.t,
            hi: ratings.u,
        });
    }
    let z: Vec<f64> = ratings.b.iter().map(|b| -(c - b) * (c - b)).collect();
    Ok(softmax(&z))
}

/// `1 - <y, ŷ> / (|y| |ŷ|)`.
pub fn vr_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(crate::numerics::NumericsError::ShapeMismatch {
            op: "vr_loss",
            lhs: vec![y.len()],
            rhs: vec![y_hat.len()],
        }
        .into());
    }
    let dot: f64 = y.iter().zip(y_hat).map(|(a, b)| a * b).sum();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nh = y_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ny == 0.0 || nh == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(1.0 - dot / (ny * nh))
}

/// Differentiable [`vr_loss`] for a `1 x g` target row and prediction row.
pub fn vr_loss_graph(g: &mut Graph, y: Var, y_hat: Var) -> Result<Var> {
    let dot = g.mul(y, y_hat)?;
    let dot = g.sum(dot);
    let yy = g.mul(y, y)?;
    let yy = g.sum(yy);
    let hh = g.mul(y_hat, y_hat)?;
    let hh = g.sum(hh);
    let norms = g.mul(yy, hh)?;
    let norms = g.sqrt(norms);
    if g.value(norms).data()[0] == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let cos = g.div(dot, norms)?;
    let one = g.constant(Tensor::scalar(1.0));
    Ok(g.sub(one, cos)?)
}

/// `-Σ y_i log ŷ_i`, the classification loss used for comparison runs.
pub fn cross_entropy_graph(g: &mut Graph, y: Var, y_hat: Var) -> Result<Var> {
    let log = g.log(y_hat);
    let p = g.mul(y, log)?;
    let s = g.sum(p);
    Ok(g.scale(s, -1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    ExpectedValue,
    Svr,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expected_value" | "ev" => Ok(Self::ExpectedValue),
            "svr" => Ok(Self::Svr),
            other => Err(Error::Usage(format!("unknown decode mode {other:?}"))),
        }
    }
}

/// `ĉ = Σ ŷ_i b_i`.
pub fn expected_value(probs: &[f64], ratings: &ReferenceRatings) -> f64 {
    probs.iter().zip(&ratings.b).map(|(p, b)| p * b).sum()
}

/// Probability vector plus its decoded score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution {
    pub probs: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    pub c: f64,
    pub epsilon: f64,
    pub gamma: f64,
}

impl Default for SvrParams {
    fn default() -> Self {
        Self {
            c: 10.0,
            epsilon: 0.01,
            gamma: 1.0,
        }
    }
}

/// Epsilon-insensitive support vector regression with an RBF kernel.
///
/// The bias is folded into the kernel (`k + 1`) and targets are centred, so the
/// dual has only box constraints and is solved by coordinate descent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Svr {
    pub params: SvrParams,
    support: Vec<Vec<f64>>,
    coef: Vec<f64>,
    offset: f64,
}

impl Svr {
    pub fn new(params: SvrParams) -> Self {
        Self {
            params,
            support: Vec::new(),
            coef: Vec::new(),
            offset: 0.0,
        }
    }

    pub fn is_fitted(&self) -> bool {
        !self.support.is_empty()
    }

    pub fn support_count(&self) -> usize {
        self.support.len()
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-self.params.gamma * d2).exp() + 1.0
    }

    pub fn fit(&mut self, xs: &[Vec<f64>], ys: &[f64]) -> Result<()> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Usage(format!("svr fit needs matching samples, got {} and {}", xs.len(), ys.len())));
        }
        let n = xs.len();
        let offset = ys.iter().sum::<f64>() / n as f64;
        let q: Vec<f64> = (0..n * n).map(|k| self.kernel(&xs[k / n], &xs[k % n])).collect();
        let (c, eps) = (self.params.c, self.params.epsilon);
        let mut beta = vec![0.0; n];
        // grad_i = (Q beta)_i - (y_i - offset)
        let mut grad: Vec<f64> = ys.iter().map(|y| -(y - offset)).collect();
        for _sweep in 0..20_000 {
            let mut max_step = 0.0f64;
            for i in 0..n {
                let qii = q[i * n + i];
                let z = beta[i] - grad[i] / qii;
                let shrunk = z.signum() * (z.abs() - eps / qii).max(0.0);
                let new = shrunk.clamp(-c, c);
                let step = new - beta[i];
                if step != 0.0 {
                    beta[i] = new;
                    let row = &q[i * n..(i + 1) * n];
                    for (gj, qij) in grad.iter_mut().zip(row) {
                        *gj += step * qij;
                    }
                    max_step = max_step.max(step.abs());
                }
            }
            if max_step < 1e-9 {
                break;
            }
        }
        self.support.clear();
        self.coef.clear();
        for (x, b) in xs.iter().zip(beta) {
            if b != 0.0 {
                self.support.push(x.clone());
                self.coef.push(b);
            }
        }
        self.offset = offset;
        if self.support.is_empty() {
            // Every target sits inside the tube around the mean.
            self.support.push(xs[0].clone());
            self.coef.push(0.0);
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if !self.is_fitted() {
            return Err(Error::NotFitted);
        }
        Ok(self.offset + self.support.iter().zip(&self.coef).map(|(s, b)| b * self.kernel(s, x)).sum::<f64>())
    }

    /// Fits on `(encode_mos(c), c)` for `c` on a uniform grid over `[T, U]`.
    pub fn fit_to_ratings(params: SvrParams, ratings: &ReferenceRatings, step: f64) -> Result<Self> {
        let count = ((ratings.u - ratings.t) / step).round() as usize;
        let cs: Vec<f64> = (0..=count).map(|i| (ratings.t + i as f64 * step).min(ratings.u)).collect();
        let xs = cs.iter().map(|&c| encode_mos(c, ratings)).collect::<Result<Vec<_>>>()?;
        let mut svr = Self::new(params);
        svr.fit(&xs, &cs)?;
        Ok(svr)
    }
}

/// Decodes a probability vector into a score.
pub fn decode_score(probs: &[f64], ratings: &ReferenceRatings, mode: DecodeMode, svr: Option<&Svr>) -> Result<f64> {
    match mode {
        DecodeMode::ExpectedValue => Ok(expected_value(probs, ratings)),
        DecodeMode::Svr => svr.ok_or(Error::NotFitted)?.predict(probs),
    }
}
