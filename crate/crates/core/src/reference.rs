//! Slow, loop-only reference implementations in `f64`.
//!
//! Nothing here calls into the optimized kernels or the tape; these exist
//! so the verification suite and the tests have something independent to
//! compare against.

#![allow(clippy::needless_range_loop)]

use crate::mamba::MambaBranch;
use crate::params::{Linear, ParamStore};
use crate::tensor::Tensor;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor<f64>) -> Mat {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn from_mat(m: &Mat) -> Tensor<f64> {
    let cols = m.first().map_or(0, Vec::len);
    Tensor::new(vec![m.len(), cols], m.concat()).expect("rectangular")
}

fn linear(store: &ParamStore<f64>, lin: &Linear, x: &Mat) -> Mat {
    let w = store.get(lin.weight);
    x.iter()
        .map(|row| {
            (0..lin.fan_out)
                .map(|j| {
                    let mut acc = lin.bias.map_or(0.0, |b| store.get(b).data()[j]);
                    for (i, xi) in row.iter().enumerate() {
                        acc += xi * w.data()[i * lin.fan_out + j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// The recurrence written out step by step with `h_0 = 0`.
///
/// `reverse` runs it from the last step to the first.
pub fn scan(
    x: &Tensor<f64>,
    a_bar: &Tensor<f64>,
    b_bar: &Tensor<f64>,
    c: &Tensor<f64>,
    d_skip: &Tensor<f64>,
    reverse: bool,
) -> Tensor<f64> {
    let (m, d) = (x.shape()[0], x.shape()[1]);
    let n = c.shape()[1];
    let mut y = vec![vec![0.0; d]; m];
    let steps: Vec<usize> = if reverse {
        (0..m).rev().collect()
    } else {
        (0..m).collect()
    };
    for i in 0..d {
        for j in 0..n {
            let mut h = 0.0;
            for &t in &steps {
                h = a_bar.get(&[t, i, j]) * h + b_bar.get(&[t, i, j]) * x.get(&[t, i]);
                y[t][i] += c.get(&[t, j]) * h;
            }
        }
        for t in 0..m {
            y[t][i] += d_skip.data()[i] * x.get(&[t, i]);
        }
    }
    from_mat(&y)
}

/// Continuous-parameter selective SSM: `x, delta: [M, D]`, `a: [D, N]`,
/// `b, c: [M, N]`, skip `[D]`. The state update uses `exp(delta * a)`
/// and `delta * b` directly.
pub fn selective_ssm(
    x: &Tensor<f64>,
    delta: &Tensor<f64>,
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    c: &Tensor<f64>,
    d_skip: &Tensor<f64>,
    reverse: bool,
) -> Tensor<f64> {
    let (m, d) = (x.shape()[0], x.shape()[1]);
    let n = a.shape()[1];
    let mut y = vec![vec![0.0; d]; m];
    let steps: Vec<usize> = if reverse {
        (0..m).rev().collect()
    } else {
        (0..m).collect()
    };
    for i in 0..d {
        let mut h = vec![0.0; n];
        for &t in &steps {
            let dt = delta.get(&[t, i]);
            let mut acc = d_skip.data()[i] * x.get(&[t, i]);
            for (j, hj) in h.iter_mut().enumerate() {
                *hj = (dt * a.get(&[i, j])).exp() * *hj + dt * b.get(&[t, j]) * x.get(&[t, i]);
                acc += c.get(&[t, j]) * *hj;
            }
            y[t][i] = acc;
        }
    }
    from_mat(&y)
}

/// One modality's bidirectional block without any cross-modal mixing,
/// for an input `[M, E]`.
pub fn bidirectional_ssm(
    store: &ParamStore<f64>,
    branch: &MambaBranch,
    input: &Tensor<f64>,
) -> Tensor<f64> {
    let f = to_mat(input);
    let m = f.len();
    let xs = linear(store, &branch.in_x, &f);
    let z = linear(store, &branch.in_z, &f);
    let d = branch.in_x.fan_out;
    let kernel = store.get(branch.conv_kernel);
    let k = kernel.shape()[0];
    let conv_bias = store.get(branch.conv_bias);
    let mut xc = vec![vec![0.0; d]; m];
    for t in 0..m {
        for c in 0..d {
            let mut acc = conv_bias.data()[c];
            for j in 0..k {
                // tap j looks back k - 1 - j steps
                if let Some(src) = (t + j + 1).checked_sub(k) {
                    acc += kernel.get(&[j, c]) * xs[src][c];
                }
            }
            xc[t][c] = silu(acc);
        }
    }
    let mut total = vec![vec![0.0; d]; m];
    for (dir, p) in branch.directions.iter().enumerate() {
        let bs = linear(store, &p.b_proj, &xc);
        let cs = linear(store, &p.c_proj, &xc);
        let dt: Mat = linear(store, &p.delta_proj, &xc)
            .into_iter()
            .map(|r| r.into_iter().map(softplus).collect())
            .collect();
        let a_log = store.get(p.a_log);
        let n = a_log.shape()[1];
        let skip = store.get(p.d_skip);
        let steps: Vec<usize> = if dir == 0 {
            (0..m).collect()
        } else {
            (0..m).rev().collect()
        };
        for c in 0..d {
            let mut h = vec![0.0; n];
            for &t in &steps {
                let mut y = skip.data()[c] * xc[t][c];
                for (s, hs) in h.iter_mut().enumerate() {
                    let a = -a_log.get(&[c, s]).exp();
                    *hs = (dt[t][c] * a).exp() * *hs + dt[t][c] * bs[t][s] * xc[t][c];
                    y += cs[t][s] * *hs;
                }
                total[t][c] += y;
            }
        }
    }
    let gated: Mat = (0..m)
        .map(|t| (0..d).map(|c| silu(z[t][c]) * total[t][c]).collect())
        .collect();
    from_mat(&linear(store, &branch.out, &gated))
}

/// Multi-head attention with explicit per-query, per-key loops.
///
/// `weights` holds the query, key, value and output matrices, each
/// `[E, E]`; head `i` owns columns `i * E / heads ..`.
pub fn attention(
    q_in: &Tensor<f64>,
    kv_in: &Tensor<f64>,
    weights: &[Tensor<f64>; 4],
    heads: usize,
) -> Tensor<f64> {
    let [wq, wk, wv, wo] = weights;
    let (mq, mk, e) = (q_in.shape()[0], kv_in.shape()[0], q_in.shape()[1]);
    let dk = e / heads;
    let project = |x: &Tensor<f64>, w: &Tensor<f64>, row: usize, col: usize| -> f64 {
        (0..e).map(|i| x.get(&[row, i]) * w.get(&[i, col])).sum()
    };
    let mut concat = vec![vec![0.0; e]; mq];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for (t, out) in concat.iter_mut().enumerate() {
            let q: Vec<f64> = cols.clone().map(|c| project(q_in, wq, t, c)).collect();
            let scores: Vec<f64> = (0..mk)
                .map(|s| {
                    let dot: f64 = cols
                        .clone()
                        .zip(&q)
                        .map(|(c, qc)| qc * project(kv_in, wk, s, c))
                        .sum();
                    dot / (dk as f64).sqrt()
                })
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                out[c] = (0..mk)
                    .map(|s| exps[s] / z * project(kv_in, wv, s, c))
                    .sum();
            }
        }
    }
    let out: Mat = concat
        .iter()
        .map(|row| {
            (0..e)
                .map(|j| (0..e).map(|i| row[i] * wo.get(&[i, j])).sum())
                .collect()
        })
        .collect();
    from_mat(&out)
}
