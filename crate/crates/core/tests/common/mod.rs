//! Dense reference implementations shared by the integration tests.
//!
//! Everything here is written against plain `ndarray` products with
//! materialized matrix powers, so it shares no code path with the sparse
//! kernels or the tape.

#![allow(dead_code)]

use gsan_core::graph::{build_graph, Graph};
use gsan_core::model::{GcnParams, GsanParams, ModelConfig};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Edges = Vec<(usize, usize, f64)>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Erdos-Renyi style graph with random weights in [0.25, 2.0).
pub fn random_edges(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Edges {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j, rng.random_range(0.25..2.0)));
            }
        }
    }
    edges
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> (Graph, Edges) {
    let edges = random_edges(rng, n, p);
    (build_graph(n, &edges).unwrap(), edges)
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Rows moved so that old row `i` lands at `perm[i]`.
pub fn permute_rows(x: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).assign(&x.row(i));
    }
    out
}

pub fn dense_weights(n: usize, edges: &[(usize, usize, f64)]) -> Array2<f64> {
    let mut w = Array2::zeros((n, n));
    for &(i, j, v) in edges {
        w[[i, j]] = v;
        w[[j, i]] = v;
    }
    w
}

pub fn dense_degrees(w: &Array2<f64>) -> Array1<f64> {
    w.sum_axis(Axis(1))
}

pub fn dense_adjacency(w: &Array2<f64>) -> Array2<f64> {
    let n = w.nrows();
    let d = dense_degrees(w);
    let s = Array2::from_diag(&d.mapv(|v| 1.0 / (v + 1.0).sqrt()));
    let shifted = w + &Array2::<f64>::eye(n);
    s.dot(&shifted).dot(&s)
}

/// `W D^{-1}` with the column of an isolated node set to `e_i`.
fn dense_column_walk(w: &Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let n = w.nrows();
    let d = dense_degrees(w);
    let mut m = Array2::zeros((n, n));
    let mut isolated = vec![false; n];
    for j in 0..n {
        if d[j] == 0.0 {
            isolated[j] = true;
            continue;
        }
        for i in 0..n {
            m[[i, j]] = w[[i, j]] / d[j];
        }
    }
    (m, isolated)
}

pub fn dense_walk(w: &Array2<f64>) -> Array2<f64> {
    dense_residual(w, 1.0)
}

pub fn dense_residual(w: &Array2<f64>, alpha: f64) -> Array2<f64> {
    let n = w.nrows();
    let (m, isolated) = dense_column_walk(w);
    let mut out = (Array2::eye(n) + m * alpha) / (alpha + 1.0);
    for (i, &iso) in isolated.iter().enumerate() {
        if iso {
            out.column_mut(i).fill(0.0);
            out[[i, i]] = 1.0;
        }
    }
    out
}

pub fn matrix_power(m: &Array2<f64>, t: usize) -> Array2<f64> {
    let mut out = Array2::eye(m.nrows());
    for _ in 0..t {
        out = out.dot(m);
    }
    out
}

pub fn dense_wavelet(p: &Array2<f64>, k: usize) -> Array2<f64> {
    if k == 0 {
        Array2::eye(p.nrows()) - p
    } else {
        matrix_power(p, 1 << (k - 1)) - matrix_power(p, 1 << k)
    }
}

pub fn dense_scattering(p: &Array2<f64>, path: &[usize], x: &Array2<f64>) -> Array2<f64> {
    let mut out = dense_wavelet(p, path[0]).dot(x);
    for &k in &path[1..] {
        out = dense_wavelet(p, k).dot(&out.mapv(f64::abs));
    }
    out
}

pub struct DenseOps {
    pub a: Array2<f64>,
    pub p: Array2<f64>,
    pub res: Array2<f64>,
}

impl DenseOps {
    pub fn new(n: usize, edges: &[(usize, usize, f64)], alpha: f64) -> Self {
        let w = dense_weights(n, edges);
        Self {
            a: dense_adjacency(&w),
            p: dense_walk(&w),
            res: dense_residual(&w, alpha),
        }
    }
}

pub fn dense_channels(
    ops: &DenseOps,
    hbar: &Array2<f64>,
    config: &ModelConfig,
) -> Vec<Array2<f64>> {
    let mut out = Vec::new();
    for i in 1..=config.gcn_channels {
        out.push(matrix_power(&ops.a, i).dot(hbar));
    }
    for path in &config.paths {
        let u = dense_scattering(&ops.p, path.orders(), hbar);
        out.push(u.mapv(|v| v.abs().powf(config.q)));
    }
    out
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

/// Output of one head plus the per-channel weights `alpha[c][node]`.
pub fn dense_head(
    ops: &DenseOps,
    x: &Array2<f64>,
    theta: &Array2<f64>,
    a: &Array2<f64>,
    config: &ModelConfig,
) -> (Array2<f64>, Vec<Vec<f64>>) {
    let hbar = x.dot(theta);
    let d = theta.ncols();
    let channels = dense_channels(ops, &hbar, config);
    let a_self = a.column(0).slice(ndarray::s![..d]).to_owned();
    let a_chan = a.column(0).slice(ndarray::s![d..]).to_owned();
    let base = hbar.dot(&a_self);
    let scores: Vec<Array1<f64>> = channels
        .iter()
        .map(|ch| (&base + &ch.dot(&a_chan)).mapv(|v| leaky(v, config.leaky_slope)))
        .collect();
    let n = x.nrows();
    let c = channels.len();
    let mut alpha = vec![vec![0.0; n]; c];
    for i in 0..n {
        let m = scores
            .iter()
            .map(|s| s[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s[i] - m).exp()).sum();
        for ch in 0..c {
            alpha[ch][i] = (scores[ch][i] - m).exp() / z;
        }
    }
    let mut total = Array2::<f64>::zeros(hbar.raw_dim());
    for (ch, mat) in channels.iter().enumerate() {
        for (i, &a) in alpha[ch].iter().enumerate() {
            total.row_mut(i).scaled_add(a, &mat.row(i));
        }
    }
    (total.mapv(|v| v.max(0.0) / c as f64), alpha)
}

pub fn dense_gsan(
    ops: &DenseOps,
    x: &Array2<f64>,
    params: &GsanParams,
    config: &ModelConfig,
) -> Array2<f64> {
    let outs: Vec<Array2<f64>> = params
        .heads
        .iter()
        .map(|h| dense_head(ops, x, &h.theta, &h.attention, config).0)
        .collect();
    let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
    let joined = ndarray::concatenate(Axis(1), &views).unwrap();
    let mut hidden = ops.res.dot(&joined).dot(&params.residual_weight);
    if let Some(b) = &params.residual_bias {
        hidden += b;
    }
    let mut logits = hidden.dot(&params.output_weight);
    if let Some(b) = &params.output_bias {
        logits += b;
    }
    logits
}

pub fn dense_gcn(ops: &DenseOps, x: &Array2<f64>, params: &GcnParams) -> Array2<f64> {
    let mut hidden = ops.a.dot(&x.dot(&params.hidden_weight));
    if let Some(b) = &params.hidden_bias {
        hidden += b;
    }
    let hidden = hidden.mapv(|v| v.max(0.0));
    let mut logits = ops.a.dot(&hidden.dot(&params.output_weight));
    if let Some(b) = &params.output_bias {
        logits += b;
    }
    logits
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
