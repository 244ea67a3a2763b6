//! Rank and linear correlation between predicted and ground-truth scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A correlation value; `degenerate` marks an input with zero variance, for
/// which the value is reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // Positions i..j hold ranks i+1..=j.
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!("{} predictions for {} labels", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::Usage(format!("correlation needs at least 3 samples, got {}", a.len())));
    }
    Ok(())
}

fn pearson_unchecked(a: &[f64], b: &[f64]) -> Correlation {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Correlation {
            value: 0.0,
            degenerate: true,
        };
    }
    Correlation {
        value: (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Pearson linear correlation (PLCC).
pub fn plcc(pred: &[f64], label: &[f64]) -> Result<Correlation> {
    check(pred, label)?;
    Ok(pearson_unchecked(pred, label))
}

/// Spearman rank-order correlation (SROCC): Pearson over average ranks.
pub fn srocc(pred: &[f64], label: &[f64]) -> Result<Correlation> {
    check(pred, label)?;
    Ok(pearson_unchecked(&average_ranks(pred), &average_ranks(label)))
}
