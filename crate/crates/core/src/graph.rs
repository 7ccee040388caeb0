//! Weighted undirected graphs and the constant propagation operators built
//! from them.
//!
//! Every operator is stored in compressed-row form ([`SparseOperator`]) and
//! applied to dense feature matrices with a fixed summation order, so repeated
//! applications are bitwise reproducible.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::error::{mismatch, GsanError, Result};

/// Dense node-feature matrix, one row per node.
pub type FeatureMatrix = Array2<f64>;

/// Rows times columns below which `apply` stays on the calling thread.
const PARALLEL_THRESHOLD: usize = 1 << 16;

/// Undirected graph with strictly positive edge weights and no self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    // Symmetric weight matrix W.
    weights: SparseOperator,
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Number of undirected edges (each `{i, j}` counted once).
    pub fn num_edges(&self) -> usize {
        self.weights.nnz() / 2
    }

    /// The symmetric weight matrix `W`.
    pub fn weights(&self) -> &SparseOperator {
        &self.weights
    }

    /// Undirected edges as `(i, j, w)` with `i < j`, in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.weights.triplets().filter(|&(i, j, _)| i < j)
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.n {
            return Err(mismatch("permutation length", self.n, perm.len()));
        }
        let edges: Vec<_> = self
            .edges()
            .map(|(i, j, w)| (perm[i], perm[j], w))
            .collect();
        build_graph(self.n, &edges)
    }
}

/// Degree vector `d[i] = sum_j W[i, j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeVector(pub Array1<f64>);

impl DegreeVector {
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("contiguous")
    }
}

/// Square sparse matrix in compressed-row form.
///
/// Column indices inside each row are strictly increasing, which rules out
/// duplicate entries and fixes the summation order of [`SparseOperator::apply`].
#[derive(Debug, Clone)]
pub struct SparseOperator {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    transpose: OnceLock<Box<SparseOperator>>,
}

impl PartialEq for SparseOperator {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
            && self.values == other.values
    }
}

impl SparseOperator {
    pub fn identity(n: usize) -> Self {
        Self::from_csr_unchecked(n, (0..=n).collect(), (0..n).collect(), vec![1.0; n])
    }

    /// Builds an operator from `(row, col, value)` triplets in any order.
    ///
    /// Duplicate coordinates are rejected rather than summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        for &(i, j, _) in &sorted {
            for idx in [i, j] {
                if idx >= n {
                    return Err(GsanError::IndexOutOfRange {
                        index: idx,
                        bound: n,
                    });
                }
            }
        }
        sorted.sort_by_key(|a| (a.0, a.1));
        for pair in sorted.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(GsanError::InvalidArgument(format!(
                    "duplicate operator entry ({}, {})",
                    pair[0].0, pair[0].1
                )));
            }
        }
        let mut row_ptr = vec![0usize; n + 1];
        for &(i, _, _) in &sorted {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = sorted.iter().map(|t| t.1).collect();
        let values = sorted.iter().map(|t| t.2).collect();
        Ok(Self::from_csr_unchecked(n, row_ptr, col_idx, values))
    }

    fn from_csr_unchecked(
        n: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(row_ptr.len(), n + 1);
        debug_assert_eq!(col_idx.len(), values.len());
        Self {
            n,
            row_ptr,
            col_idx,
            values,
            transpose: OnceLock::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[range.clone()], &self.values[range])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.n, self.n));
        for (i, j, v) in self.triplets() {
            dense[[i, j]] = v;
        }
        dense
    }

    pub fn row_sums(&self) -> Array1<f64> {
        Array1::from_iter((0..self.n).map(|i| self.row(i).1.iter().sum::<f64>()))
    }

    pub fn column_sums(&self) -> Array1<f64> {
        let mut sums = Array1::zeros(self.n);
        for (_, j, v) in self.triplets() {
            sums[j] += v;
        }
        sums
    }

    pub fn is_symmetric(&self) -> bool {
        self.triplets().all(|(i, j, v)| self.get(j, i) == v)
    }

    /// The transposed operator, computed once and cached.
    pub fn transpose(&self) -> &SparseOperator {
        self.transpose.get_or_init(|| {
            let mut counts = vec![0usize; self.n + 1];
            for &j in &self.col_idx {
                counts[j + 1] += 1;
            }
            for i in 0..self.n {
                counts[i + 1] += counts[i];
            }
            let row_ptr = counts.clone();
            let mut next = counts;
            let mut col_idx = vec![0usize; self.nnz()];
            let mut values = vec![0.0; self.nnz()];
            // Rows are visited in increasing order, so each transposed row
            // receives its columns already sorted.
            for (i, j, v) in self.triplets() {
                let slot = next[j];
                col_idx[slot] = i;
                values[slot] = v;
                next[j] += 1;
            }
            Box::new(Self::from_csr_unchecked(self.n, row_ptr, col_idx, values))
        })
    }

    /// Sparse-dense product `self * x`.
    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.nrows() != self.n {
            return Err(mismatch("sparse apply rows", self.n, x.nrows()));
        }
        let mut out = Array2::zeros(x.raw_dim());
        if let Some(xs) = x.as_slice() {
            let width = x.ncols();
            let fill = |(i, out_row): (usize, &mut [f64])| {
                let (cols, vals) = self.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    let src = &xs[j * width..(j + 1) * width];
                    for (o, &s) in out_row.iter_mut().zip(src) {
                        *o += v * s;
                    }
                }
            };
            let os = out.as_slice_mut().expect("fresh array is contiguous");
            if width == 0 {
                return Ok(out);
            }
            if x.len() >= PARALLEL_THRESHOLD {
                os.par_chunks_mut(width).enumerate().for_each(fill);
            } else {
                os.chunks_mut(width).enumerate().for_each(fill);
            }
            return Ok(out);
        }
        let fill = |(i, mut out_row): (usize, ndarray::ArrayViewMut1<f64>)| {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out_row.scaled_add(v, &x.row(j));
            }
        };
        if x.len() >= PARALLEL_THRESHOLD {
            out.axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(fill);
        } else {
            out.axis_iter_mut(Axis(0)).enumerate().for_each(fill);
        }
        Ok(out)
    }

    /// `self^t * x` by `t` successive applications.
    pub fn apply_power(&self, t: usize, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if t == 0 {
            return Err(GsanError::InvalidArgument(
                "operator power must be at least 1".into(),
            ));
        }
        let mut out = self.apply(x)?;
        for _ in 1..t {
            out = self.apply(&out)?;
        }
        Ok(out)
    }
}

/// Builds a symmetric graph on `n` nodes from an edge list.
///
/// Each undirected edge may be listed once or in both directions; repeated
/// listings must agree on the weight.
pub fn build_graph(n: usize, edge_list: &[(usize, usize, f64)]) -> Result<Graph> {
    let mut canonical: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(i, j, w) in edge_list {
        for idx in [i, j] {
            if idx >= n {
                return Err(GsanError::IndexOutOfRange {
                    index: idx,
                    bound: n,
                });
            }
        }
        if i == j {
            return Err(GsanError::SelfLoop(i));
        }
        if !(w > 0.0) || !w.is_finite() {
            return Err(GsanError::NonPositiveWeight { i, j, weight: w });
        }
        let key = (i.min(j), i.max(j));
        match canonical.get(&key) {
            Some(&prev) if prev != w => {
                return Err(GsanError::ConflictingDuplicateEdge {
                    i: key.0,
                    j: key.1,
                    first: prev,
                    second: w,
                })
            }
            Some(_) => {}
            None => {
                canonical.insert(key, w);
            }
        }
    }
    let triplets: Vec<_> = canonical
        .iter()
        .flat_map(|(&(i, j), &w)| [(i, j, w), (j, i, w)])
        .collect();
    Ok(Graph {
        n,
        weights: SparseOperator::from_triplets(n, &triplets)?,
    })
}

pub fn degrees(g: &Graph) -> DegreeVector {
    DegreeVector(g.weights.row_sums())
}

/// Self-loop augmented symmetric normalization
/// `A = (D + I)^{-1/2} (W + I) (D + I)^{-1/2}`.
pub fn normalized_adjacency(g: &Graph) -> SparseOperator {
    let d = degrees(g);
    let scale: Vec<f64> = d.0.iter().map(|&di| (di + 1.0).sqrt()).collect();
    let mut triplets = Vec::with_capacity(g.weights.nnz() + g.n);
    for (i, di) in d.0.iter().enumerate() {
        triplets.push((i, i, 1.0 / (di + 1.0)));
    }
    for (i, j, w) in g.weights.triplets() {
        // scale[i] * scale[j] commutes exactly, so A[i, j] == A[j, i] bitwise.
        triplets.push((i, j, w / (scale[i] * scale[j])));
    }
    SparseOperator::from_triplets(g.n, &triplets).expect("valid by construction")
}

/// `diag_weight * I + off_weight * W D^{-1}`, with the column of an isolated
/// node replaced by `e_i` so the result stays column-stochastic.
fn column_normalized_mix(g: &Graph, diag_weight: f64, off_weight: f64) -> SparseOperator {
    let d = degrees(g);
    let mut triplets = Vec::with_capacity(g.weights.nnz() + g.n);
    for (i, &di) in d.0.iter().enumerate() {
        let diag = if di > 0.0 { diag_weight } else { 1.0 };
        triplets.push((i, i, diag));
    }
    if off_weight != 0.0 {
        for (i, j, w) in g.weights.triplets() {
            triplets.push((i, j, off_weight * (w / d.0[j])));
        }
    }
    SparseOperator::from_triplets(g.n, &triplets).expect("valid by construction")
}

/// Lazy random walk `P = 1/2 (I + W D^{-1})`.
pub fn lazy_random_walk(g: &Graph) -> SparseOperator {
    column_normalized_mix(g, 0.5, 0.5)
}

/// Residual low-pass filter `A_res(alpha) = (I + alpha W D^{-1}) / (alpha + 1)`.
pub fn residual_operator(g: &Graph, alpha: f64) -> Result<SparseOperator> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(GsanError::NegativeAlpha(alpha));
    }
    Ok(column_normalized_mix(
        g,
        1.0 / (alpha + 1.0),
        alpha / (alpha + 1.0),
    ))
}

pub fn apply(op: &SparseOperator, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    op.apply(x)
}

pub fn apply_power(op: &SparseOperator, t: usize, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    op.apply_power(t, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn edge() -> Graph {
        build_graph(2, &[(0, 1, 1.0)]).unwrap()
    }

    fn path3() -> Graph {
        build_graph(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap()
    }

    #[test]
    fn single_edge_is_symmetrized() {
        let g = edge();
        assert_eq!(g.weights().get(0, 1), 1.0);
        assert_eq!(g.weights().get(1, 0), 1.0);
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn both_directions_deduplicate() {
        let g = build_graph(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert_eq!(g, edge());
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            build_graph(2, &[(0, 0, 1.0)]),
            Err(GsanError::SelfLoop(0))
        ));
        assert!(matches!(
            build_graph(2, &[(0, 1, 0.0)]),
            Err(GsanError::NonPositiveWeight { .. })
        ));
        assert!(matches!(
            build_graph(2, &[(0, 2, 1.0)]),
            Err(GsanError::IndexOutOfRange { index: 2, bound: 2 })
        ));
        assert!(matches!(
            build_graph(2, &[(0, 1, 1.0), (1, 0, 2.0)]),
            Err(GsanError::ConflictingDuplicateEdge { .. })
        ));
    }

    #[test]
    fn degree_examples() {
        assert_eq!(degrees(&edge()).0, array![1.0, 1.0]);
        assert_eq!(degrees(&path3()).0, array![1.0, 2.0, 1.0]);
        let empty = build_graph(3, &[]).unwrap();
        assert_eq!(degrees(&empty).0, array![0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalized_adjacency_examples() {
        let a = normalized_adjacency(&edge()).to_dense();
        assert_abs_diff_eq!(a, array![[0.5, 0.5], [0.5, 0.5]], epsilon = 1e-15);

        let a = normalized_adjacency(&path3());
        assert_abs_diff_eq!(
            a.get(0, 1),
            1.0 / (2f64.sqrt() * 3f64.sqrt()),
            epsilon = 1e-15
        );
        assert_eq!(a.get(1, 1), 1.0 / 3.0);
        assert!(a.is_symmetric());

        let isolated = build_graph(3, &[(0, 1, 1.0)]).unwrap();
        let a = normalized_adjacency(&isolated);
        assert_eq!(a.row(2), (&[2usize][..], &[1.0][..]));
    }

    #[test]
    fn lazy_walk_examples() {
        let p = lazy_random_walk(&edge()).to_dense();
        assert_abs_diff_eq!(p, array![[0.5, 0.5], [0.5, 0.5]], epsilon = 1e-15);

        let p = lazy_random_walk(&path3()).to_dense();
        let expected = array![[0.5, 0.25, 0.0], [0.5, 0.5, 0.5], [0.0, 0.25, 0.5]];
        assert_abs_diff_eq!(p, expected, epsilon = 1e-15);
    }

    #[test]
    fn isolated_node_column_is_unit_vector() {
        let g = build_graph(3, &[(0, 1, 2.0)]).unwrap();
        let p = lazy_random_walk(&g);
        assert_eq!(p.get(2, 2), 1.0);
        for s in p.column_sums() {
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
        let r = residual_operator(&g, 0.7).unwrap();
        assert_eq!(r.get(2, 2), 1.0);
    }

    #[test]
    fn residual_examples() {
        let g = path3();
        assert_eq!(
            residual_operator(&g, 0.0).unwrap(),
            SparseOperator::identity(3)
        );
        let r = residual_operator(&edge(), 1.0).unwrap().to_dense();
        assert_abs_diff_eq!(r, array![[0.5, 0.5], [0.5, 0.5]], epsilon = 1e-15);
        for s in residual_operator(&g, 0.5).unwrap().column_sums() {
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
        assert!(matches!(
            residual_operator(&g, -0.1),
            Err(GsanError::NegativeAlpha(_))
        ));
    }

    #[test]
    fn apply_examples() {
        let x = array![[1.0, -2.0], [3.0, 4.0], [0.5, 0.25]];
        assert_eq!(SparseOperator::identity(3).apply(&x).unwrap(), x);

        let p = lazy_random_walk(&edge());
        assert_eq!(
            p.apply(&array![[1.0], [0.0]]).unwrap(),
            array![[0.5], [0.5]]
        );
        assert_eq!(
            p.apply(&Array2::zeros((2, 3))).unwrap(),
            Array2::<f64>::zeros((2, 3))
        );
        assert!(matches!(
            p.apply(&Array2::zeros((3, 1))),
            Err(GsanError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn apply_power_examples() {
        let p = lazy_random_walk(&edge());
        let x = array![[1.0, 2.0], [3.0, 5.0]];
        assert_eq!(p.apply_power(1, &x).unwrap(), p.apply(&x).unwrap());
        let sq = p.apply_power(2, &Array2::eye(2)).unwrap();
        assert_abs_diff_eq!(sq, array![[0.5, 0.5], [0.5, 0.5]], epsilon = 1e-15);
        assert!(p.apply_power(0, &x).is_err());
    }

    #[test]
    fn transpose_matches_dense() {
        let p = lazy_random_walk(&path3());
        assert_eq!(p.transpose().to_dense(), p.to_dense().t().to_owned());
    }
}
