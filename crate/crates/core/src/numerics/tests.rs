use proptest::prelude::*;
use rand::Rng;

use super::nn::{causal_mask, resolve_heads, MultiHeadAttention, ParamBuilder};
use super::*;

fn uniform_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Central-difference check of input gradients for `f`, reduced to a scalar
/// through a fixed random weighting so every output entry contributes.
fn check_inputs(
    inputs: Vec<Tensor>,
    seed: u64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
) -> f64 {
    let eval = |inputs: &[Tensor], keep: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let (r, c) = g.shape(out);
        let mut rng = RngState::new(seed, "weights").rng();
        let w = g.constant(uniform_tensor(&mut rng, r, c));
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).data()[0];
        if !keep {
            return (value, vec![]);
        }
        g.backward(loss).unwrap();
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.numel()]))
            .collect();
        (value, grads)
    };

    let (_, analytic) = eval(&inputs, true);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * eps);
            let err = (analytic[k][i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn softmax_uniform_logits() {
    let p = softmax(&[0.0; 5]);
    for v in p {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn softmax_hand_evaluated() {
    let z = [-4.0f64, -1.0, 0.0, -1.0, -4.0];
    let exps: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let total: f64 = exps.iter().sum();
    let oracle: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let frozen = [0.01033, 0.20756, 0.56421, 0.20756, 0.01033];
    let p = softmax(&z);
    for i in 0..5 {
        assert!((p[i] - oracle[i]).abs() < 1e-15);
        assert!((p[i] - frozen[i]).abs() < 1e-5);
    }
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(
        g.add(a, c),
        Err(NumericsError::ShapeMismatch { op: "add", .. })
    ));
}

#[test]
fn layer_norm_param_grads_match_finite_differences() {
    let mut rng = RngState::new(11, "ln").rng();
    let x = uniform_tensor(&mut rng, 4, 8);
    let w = uniform_tensor(&mut rng, 4, 8);
    let mut store = ParamStore::new();
    let gain = store.add("ln.gain", uniform_tensor(&mut rng, 1, 8), false).unwrap();
    let bias = store.add("ln.bias", uniform_tensor(&mut rng, 1, 8), false).unwrap();
    let report = grad_check::<NumericsError>(
        &mut store,
        |g, s| {
            let xv = g.constant(x.clone());
            let gv = g.param(s, gain);
            let bv = g.param(s, bias);
            let y = g.layer_norm(xv, gv, bv)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            let p = g.mul(p, p)?;
            Ok(g.sum(p))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{report:?}");
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut rng = RngState::new(3, "ln").rng();
    let mut g = Graph::new();
    let input = uniform_tensor(&mut rng, 5, 16);
    let x = g.constant(input.clone());
    let one = g.constant(Tensor::filled(&[1, 16], 1.0));
    let zero = g.constant(Tensor::zeros(&[1, 16]));
    let y = g.layer_norm(x, one, zero).unwrap();
    let y = g.value(y);
    for r in 0..5 {
        let row = y.row_slice(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        // eps inside the square root shrinks the variance to var_in / (var_in + eps).
        let xin = input.row_slice(r);
        let m_in = xin.iter().sum::<f64>() / 16.0;
        let var_in = xin.iter().map(|v| (v - m_in).powi(2)).sum::<f64>() / 16.0;
        assert!((var - var_in / (var_in + LAYER_NORM_EPS)).abs() < 1e-12, "var {var}");
    }
}

#[test]
fn layer_norm_unit_variance_without_eps_bias() {
    // Rows with large spread make the eps term negligible.
    let mut rng = RngState::new(5, "ln").rng();
    let mut g = Graph::new();
    let t = uniform_tensor(&mut rng, 3, 8);
    let big: Vec<f64> = t.data().iter().map(|v| v * 1e3).collect();
    let x = g.constant(Tensor::matrix(3, 8, big).unwrap());
    let one = g.constant(Tensor::filled(&[1, 8], 1.0));
    let zero = g.constant(Tensor::zeros(&[1, 8]));
    let y = g.layer_norm(x, one, zero).unwrap();
    for r in 0..3 {
        let row = g.value(y).row_slice(r);
        let var = row.iter().map(|v| v * v).sum::<f64>() / 8.0;
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn primitive_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = RngState::new(seed, "prim").rng();
        let mut m = |r, c| uniform_tensor(&mut rng, r, c);
        let tol = 1e-4;

        prop_assert!(check_inputs(vec![m(3, 4), m(4, 2)], seed, |g, v| g.matmul(v[0], v[1])) < tol);
        prop_assert!(check_inputs(vec![m(3, 4)], seed, |g, v| Ok(g.transpose(v[0]))) < tol);
        prop_assert!(check_inputs(vec![m(3, 4), m(3, 4)], seed, |g, v| g.add(v[0], v[1])) < tol);
        prop_assert!(check_inputs(vec![m(3, 4), m(1, 4)], seed, |g, v| g.add(v[0], v[1])) < tol);
        prop_assert!(check_inputs(vec![m(3, 4), m(3, 1)], seed, |g, v| g.mul(v[0], v[1])) < tol);
        prop_assert!(check_inputs(vec![m(3, 4), m(3, 4)], seed, |g, v| g.mul(v[0], v[1])) < tol);
        prop_assert!(check_inputs(vec![m(2, 3)], seed, |g, v| Ok(g.scale(v[0], -2.5))) < tol);
        prop_assert!(check_inputs(vec![m(2, 3), m(1, 3)], seed, |g, v| g.concat(&[v[0], v[1]], 0)) < tol);
        prop_assert!(check_inputs(vec![m(2, 3), m(2, 2)], seed, |g, v| g.concat(&[v[0], v[1]], 1)) < tol);
        prop_assert!(check_inputs(vec![m(4, 5)], seed, |g, v| g.slice(v[0], 0, 1, 2)) < tol);
        prop_assert!(check_inputs(vec![m(4, 5)], seed, |g, v| g.slice(v[0], 1, 2, 3)) < tol);
        prop_assert!(check_inputs(vec![m(4, 5)], seed, |g, v| g.mean(v[0], 0)) < tol);
        prop_assert!(check_inputs(vec![m(4, 5)], seed, |g, v| g.mean(v[0], 1)) < tol);
        prop_assert!(check_inputs(vec![m(4, 5)], seed, |g, v| Ok(g.softmax(v[0]))) < tol);
        prop_assert!(check_inputs(vec![m(4, 6), m(1, 6), m(1, 6)], seed, |g, v| g.layer_norm(v[0], v[1], v[2])) < tol);
        prop_assert!(check_inputs(vec![m(3, 5)], seed, |g, v| Ok(g.gelu(v[0]))) < tol);
        prop_assert!(check_inputs(vec![m(4, 3)], seed, |g, v| g.gather(v[0], &[2, 0, 2, 3])) < tol);
        prop_assert!(check_inputs(vec![m(4, 3)], seed, |g, v| g.reshape(v[0], 2, 6)) < tol);
        prop_assert!(check_inputs(vec![m(2, 3)], seed, |g, v| Ok(g.sum(v[0]))) < tol);
        // sqrt, log and div need inputs bounded away from zero.
        let pos = |t: Tensor| {
            let d = t.data().iter().map(|v| 1.5 + v).collect();
            Tensor::new(t.shape().to_vec(), d).unwrap()
        };
        prop_assert!(check_inputs(vec![pos(m(2, 3))], seed, |g, v| Ok(g.sqrt(v[0]))) < tol);
        prop_assert!(check_inputs(vec![pos(m(2, 3))], seed, |g, v| Ok(g.log(v[0]))) < tol);
        prop_assert!(check_inputs(vec![m(2, 3), pos(m(1, 1))], seed, |g, v| g.div(v[0], v[1])) < tol);
    }

    #[test]
    fn softmax_rows_positive_and_normalized(
        data in prop::collection::vec(-30.0f64..30.0, 12)
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, data).unwrap());
        let y = g.softmax(x);
        let y = g.value(y);
        for r in 0..3 {
            let row = y.row_slice(r);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant(
        data in prop::collection::vec(-5.0f64..5.0, 5),
        k in -50.0f64..50.0,
    ) {
        let a = softmax(&data);
        let shifted: Vec<f64> = data.iter().map(|v| v + k).collect();
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

fn attention_fixture(width: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let attn = {
        let mut b = ParamBuilder::new(&mut store, &RngState::new(seed, "attn"));
        MultiHeadAttention::new(&mut b, "attn", width, heads).unwrap()
    };
    // Non-zero biases so the brute-force comparison covers them.
    let mut rng = RngState::new(seed, "bias").rng();
    for (_, p) in store.iter_mut() {
        if p.name.ends_with(".bias") {
            for v in p.tensor.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    (store, attn)
}

/// Query-by-query, head-by-head evaluation written without graph ops.
fn brute_force_attention(
    store: &ParamStore,
    attn: &MultiHeadAttention,
    q_in: &Tensor,
    kv_in: &Tensor,
) -> Vec<Vec<f64>> {
    let lin = |l: &nn::Linear, x: &[f64]| -> Vec<f64> {
        let w = &store.get(l.weight).tensor;
        let (inp, out) = w.dims2();
        (0..out)
            .map(|j| {
                let b = l.bias.map(|b| store.get(b).tensor.data()[j]).unwrap_or(0.0);
                (0..inp).map(|i| x[i] * w.at(i, j)).sum::<f64>() + b
            })
            .collect()
    };
    let (nq, _) = q_in.dims2();
    let (nk, _) = kv_in.dims2();
    let hd = attn.width / attn.heads;
    let keys: Vec<Vec<f64>> = (0..nk).map(|j| lin(&attn.k, kv_in.row_slice(j))).collect();
    let vals: Vec<Vec<f64>> = (0..nk).map(|j| lin(&attn.v, kv_in.row_slice(j))).collect();
    let mut out = Vec::new();
    for i in 0..nq {
        let q = lin(&attn.q, q_in.row_slice(i));
        let mut ctx = vec![0.0; attn.width];
        for h in 0..attn.heads {
            let cols = h * hd..(h + 1) * hd;
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| {
                    cols.clone().map(|c| q[c] * k[c]).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, v) in vals.iter().enumerate() {
                for c in cols.clone() {
                    ctx[c] += e[j] / z * v[c];
                }
            }
        }
        out.push(lin(&attn.out, &ctx));
    }
    out
}

#[test]
fn attention_matches_brute_force() {
    for heads in [1, 3] {
        for seed in 0..5 {
            let (store, attn) = attention_fixture(3, heads, seed);
            let mut rng = RngState::new(seed, "x").rng();
            let q = uniform_tensor(&mut rng, 3, 3);
            let kv = uniform_tensor(&mut rng, 3, 3);
            let mut g = Graph::new();
            let qv = g.constant(q.clone());
            let kvv = g.constant(kv.clone());
            let out = attn.forward(&mut g, &store, qv, kvv, kvv, None).unwrap();
            let expected = brute_force_attention(&store, &attn, &q, &kv);
            for (r, row) in expected.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    assert!((g.value(out.out).at(r, c) - v).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn single_key_weight_is_one() {
    let (store, attn) = attention_fixture(8, 2, 1);
    let mut rng = RngState::new(1, "x").rng();
    let mut g = Graph::new();
    let q = g.constant(uniform_tensor(&mut rng, 4, 8));
    let kv = g.constant(uniform_tensor(&mut rng, 1, 8));
    let out = attn.forward(&mut g, &store, q, kv, kv, None).unwrap();
    for w in out.weights {
        assert!(g.value(w).data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn zero_query_projection_gives_uniform_weights() {
    let (mut store, attn) = attention_fixture(8, 2, 2);
    for id in [attn.q.weight, attn.q.bias.unwrap()] {
        store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = RngState::new(2, "x").rng();
    let mut g = Graph::new();
    let x = g.constant(uniform_tensor(&mut rng, 5, 8));
    let out = attn.forward(&mut g, &store, x, x, x, None).unwrap();
    for w in &out.weights {
        assert!(g.value(*w).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }
    let v = attn.v.forward(&mut g, &store, x).unwrap();
    let mean = g.mean(v, 0).unwrap();
    for r in 0..5 {
        for c in 0..8 {
            assert!((g.value(out.context).at(r, c) - g.value(mean).at(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let (store, attn) = attention_fixture(6, 3, 4);
    let mut rng = RngState::new(4, "x").rng();
    let x = uniform_tensor(&mut rng, 4, 6);
    let perm = [2usize, 0, 3, 1];
    let mut g = Graph::new();
    let xv = g.constant(x);
    let px = g.gather(xv, &perm).unwrap();
    let a = attn.self_attend(&mut g, &store, xv, None).unwrap();
    let b = attn.self_attend(&mut g, &store, px, None).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..6 {
            assert!((g.value(b).at(i, c) - g.value(a).at(p, c)).abs() < 1e-12);
        }
    }
    // Permuting keys/values alone leaves the output unchanged.
    let c = attn.forward(&mut g, &store, xv, px, px, None).unwrap().out;
    assert!(g.value(c).max_abs_diff(g.value(a)) < 1e-12);
}

#[test]
fn heads_must_divide_width() {
    let mut store = ParamStore::new();
    let mut b = ParamBuilder::new(&mut store, &RngState::new(0, "a"));
    assert!(matches!(
        MultiHeadAttention::new(&mut b, "a", 10, 4),
        Err(NumericsError::Config(_))
    ));
    assert_eq!(resolve_heads(768, 5).unwrap(), 12);
    assert_eq!(resolve_heads(48, 4).unwrap(), 4);
    assert!(resolve_heads(48, 5).is_err());
}

#[test]
fn causal_mask_blocks_future() {
    let (store, attn) = attention_fixture(4, 1, 6);
    let mut rng = RngState::new(6, "x").rng();
    let mut g = Graph::new();
    let x = g.constant(uniform_tensor(&mut rng, 4, 4));
    let m = causal_mask(4);
    let out = attn.forward(&mut g, &store, x, x, x, Some(&m)).unwrap();
    let w = g.value(out.weights[0]);
    for i in 0..4 {
        for j in (i + 1)..4 {
            assert_eq!(w.at(i, j), 0.0);
        }
    }
}

#[test]
fn gradient_accumulation_is_additive() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::scalar(2.0), false).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new();
        let v = g.param(&store, x);
        let y = g.mul(v, v).unwrap();
        g.backward_into(y, &mut store).unwrap();
    }
    assert_eq!(store.get(x).tensor.grad().unwrap(), &[8.0]);
}
