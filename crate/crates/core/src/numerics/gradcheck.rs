//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use serde::Serialize;

use super::{Graph, NumericsError, ParamStore, RngState, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many entries per parameter (drawn without replacement).
    /// `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamGradError {
    pub name: String,
    /// max over checked entries of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamGradError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&ParamGradError> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Largest error among parameters whose name starts with `prefix`.
    pub fn max_with_prefix(&self, prefix: &str) -> Option<f64> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.max_rel_error)
            .reduce(f64::max)
    }
}

fn scalar_loss<E: From<NumericsError>>(
    store: &ParamStore,
    f: &mut impl FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
) -> Result<(Graph, Var), E> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let (r, c) = g.shape(loss);
    if (r, c) != (1, 1) {
        return Err(NumericsError::NotScalar { shape: vec![r, c] }.into());
    }
    Ok((g, loss))
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(θ+eps) − f(θ−eps)) / (2 eps)` for every non-frozen parameter in `store`.
///
/// Leaves parameter values unchanged and gradient buffers zeroed.
pub fn grad_check<E: From<NumericsError>>(
    store: &mut ParamStore,
    mut f: impl FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E> {
    store.zero_grads();
    let (mut g, loss) = scalar_loss(store, &mut f)?;
    g.backward_into(loss, store)?;

    let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let (name, numel, analytic) = {
            let p = store.get(id);
            let numel = p.tensor.numel();
            let analytic = p
                .tensor
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; numel]);
            (p.name.clone(), numel, analytic)
        };
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < numel => {
                let mut rng = RngState::new(opts.seed, format!("gradcheck/{name}")).rng();
                let mut idx = sample(&mut rng, numel, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..numel).collect(),
        };

        let mut worst: f64 = 0.0;
        for &i in &entries {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + opts.eps;
            let (g, l) = scalar_loss(store, &mut f)?;
            let plus = g.value(l).data()[0];
            store.get_mut(id).tensor.data_mut()[i] = orig - opts.eps;
            let (g, l) = scalar_loss(store, &mut f)?;
            let minus = g.value(l).data()[0];
            store.get_mut(id).tensor.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        report.params.push(ParamGradError {
            name,
            max_rel_error: worst,
            checked: entries.len(),
        });
    }
    store.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0), false).unwrap();
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let y = g.mul(xv, xv).unwrap();
        g.backward_into(y, &mut store).unwrap();
        assert!((store.get(x).tensor.grad().unwrap()[0] - 6.0).abs() < 1e-12);

        let report = grad_check::<NumericsError>(
            &mut store,
            |g, s| {
                let xv = g.param(s, x);
                g.mul(xv, xv)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.get("x").unwrap().max_rel_error < 1e-7);
    }

    #[test]
    fn frozen_params_excluded() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0), false).unwrap();
        let y = store.add("y", Tensor::scalar(2.0), true).unwrap();
        let report = grad_check::<NumericsError>(
            &mut store,
            |g, s| {
                let a = g.param(s, x);
                let b = g.param(s, y);
                g.mul(a, b)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.params.len(), 1);
        assert!(report.get("y").is_none());
    }

    #[test]
    fn non_scalar_is_usage_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(vec![1.0, 2.0]), false).unwrap();
        let err = grad_check::<NumericsError>(
            &mut store,
            |g, s| Ok(g.param(s, x)),
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::NotScalar { .. }));
    }

    #[test]
    fn subsampling_limits_entries() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(vec![0.5; 10]), false).unwrap();
        let opts = GradCheckOptions {
            max_entries_per_param: Some(3),
            ..Default::default()
        };
        let report = grad_check::<NumericsError>(
            &mut store,
            |g, s| {
                let v = g.param(s, x);
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &opts,
        )
        .unwrap();
        assert_eq!(report.get("x").unwrap().checked, 3);
    }
}
