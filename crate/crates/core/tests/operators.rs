mod common;

use common::*;
use gsan_core::graph::{
    build_graph, degrees, lazy_random_walk, normalized_adjacency, residual_operator, SparseOperator,
};
use gsan_core::scattering::{
    channel_bank, scattering_apply, wavelet_apply, ScatteringPath, WaveletBank,
};
use gsan_core::GsanError;
use ndarray::{array, Array2, Axis};
use proptest::prelude::*;
use std::sync::Arc;

fn path3() -> gsan_core::graph::Graph {
    build_graph(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap()
}

#[test]
fn path_graph_degrees_and_operators() {
    let g = path3();
    assert_eq!(degrees(&g).as_slice(), &[1.0, 2.0, 1.0]);
    let a = normalized_adjacency(&g);
    assert_eq!(a.get(0, 1), 1.0 / (2f64.sqrt() * 3f64.sqrt()));
    let p = lazy_random_walk(&g).to_dense();
    let expected = array![[0.5, 0.25, 0.0], [0.5, 0.5, 0.5], [0.0, 0.25, 0.5]];
    assert!(max_abs_diff(&p, &expected) < 1e-15);
}

#[test]
fn duplicate_listing_and_self_loop() {
    let once = build_graph(2, &[(0, 1, 1.0)]).unwrap();
    let twice = build_graph(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
    assert_eq!(once, twice);
    assert!(matches!(
        build_graph(1, &[(0, 0, 1.0)]),
        Err(GsanError::SelfLoop(0))
    ));
    assert!(matches!(
        build_graph(2, &[(0, 1, 1.0), (1, 0, 2.0)]),
        Err(GsanError::ConflictingDuplicateEdge { .. })
    ));
}

#[test]
fn apply_power_matches_dense_powers_on_six_nodes() {
    let mut r = rng(11);
    for _ in 0..20 {
        let (g, edges) = random_graph(&mut r, 6, 0.5);
        let p = lazy_random_walk(&g);
        let dense = dense_walk(&dense_weights(6, &edges));
        let x = random_matrix(&mut r, 6, 3);
        for t in 1..=8 {
            let got = p.apply_power(t, &x).unwrap();
            let want = matrix_power(&dense, t).dot(&x);
            assert!(max_abs_diff(&got, &want) < 1e-12, "t = {t}");
        }
    }
}

#[test]
fn path_zero_one_matches_dense_composition() {
    let g = path3();
    let bank = WaveletBank::from_graph(&g, 2);
    let x = array![[0.0], [1.0], [0.0]];
    let got = scattering_apply(&bank, &ScatteringPath::new(vec![0, 1]).unwrap(), &x).unwrap();
    let p = dense_walk(&dense_weights(3, &[(0, 1, 1.0), (1, 2, 1.0)]));
    let want = dense_wavelet(&p, 1).dot(&dense_wavelet(&p, 0).dot(&x).mapv(f64::abs));
    assert!(max_abs_diff(&got, &want) < 1e-15);
}

#[test]
fn order_out_of_range_is_rejected() {
    let bank = WaveletBank::from_graph(&path3(), 2);
    let x = Array2::zeros((3, 1));
    assert!(matches!(
        wavelet_apply(&bank, 3, &x),
        Err(GsanError::OrderOutOfRange { order: 3, max: 2 })
    ));
}

#[test]
fn non_stochastic_walk_is_rejected() {
    let op = SparseOperator::from_triplets(2, &[(0, 0, 0.5), (1, 1, 1.0)]).unwrap();
    assert!(WaveletBank::new(Arc::new(op), 1).is_err());
}

fn graph_strategy(max_n: usize) -> impl Strategy<Value = (usize, Edges, u64)> {
    (1..=max_n, any::<u64>()).prop_map(|(n, seed)| {
        let mut r = rng(seed);
        let p = r_density(&mut r);
        (n, random_edges(&mut r, n, p), seed)
    })
}

fn r_density(r: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::Rng;
    r.random_range(0.0..0.6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn telescoping_wavelet_sum((n, edges, seed) in graph_strategy(50), k in 0usize..=4) {
        let g = build_graph(n, &edges).unwrap();
        let bank = WaveletBank::from_graph(&g, k);
        let x = random_matrix(&mut rng(seed ^ 1), n, 3);
        let mut total = Array2::zeros(x.raw_dim());
        for j in 0..=k {
            total += &wavelet_apply(&bank, j, &x).unwrap();
        }
        let far = bank.walk().apply_power(1 << k, &x).unwrap();
        prop_assert!(max_abs_diff(&total, &(&x - &far)) < 1e-10);
    }

    #[test]
    fn wavelet_columns_sum_to_zero((n, edges, seed) in graph_strategy(40), k in 0usize..=4) {
        let g = build_graph(n, &edges).unwrap();
        let bank = WaveletBank::from_graph(&g, 4);
        let x = random_matrix(&mut rng(seed ^ 2), n, 2);
        let sums = wavelet_apply(&bank, k, &x).unwrap().sum_axis(Axis(0));
        prop_assert!(sums.iter().all(|s| s.abs() < 1e-10));
    }

    #[test]
    fn walk_and_residual_are_column_stochastic(
        (n, edges, _seed) in graph_strategy(50),
        alpha in 0.0f64..5.0,
    ) {
        let g = build_graph(n, &edges).unwrap();
        let p = lazy_random_walk(&g);
        for s in p.column_sums() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        for i in 0..n {
            prop_assert!(p.get(i, i) >= 0.5);
        }
        for s in residual_operator(&g, alpha).unwrap().column_sums() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacency_is_exactly_symmetric((n, edges, _seed) in graph_strategy(50)) {
        let a = normalized_adjacency(&build_graph(n, &edges).unwrap());
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a.get(i, j).to_bits(), a.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn sparse_operators_match_dense_references(
        (n, edges, seed) in graph_strategy(50),
        alpha in 0.0f64..3.0,
    ) {
        let g = build_graph(n, &edges).unwrap();
        let w = dense_weights(n, &edges);
        let x = random_matrix(&mut rng(seed ^ 3), n, 4);
        let pairs = [
            (normalized_adjacency(&g), dense_adjacency(&w)),
            (lazy_random_walk(&g), dense_walk(&w)),
            (residual_operator(&g, alpha).unwrap(), dense_residual(&w, alpha)),
        ];
        for (sparse, dense) in &pairs {
            prop_assert!(max_abs_diff(&sparse.apply(&x).unwrap(), &dense.dot(&x)) < 1e-12);
        }
    }

    #[test]
    fn operators_commute_with_relabeling((n, edges, seed) in graph_strategy(30)) {
        let g = build_graph(n, &edges).unwrap();
        let mut r = rng(seed ^ 4);
        let perm = random_permutation(&mut r, n);
        let gp = g.permute(&perm).unwrap();
        let x = random_matrix(&mut r, n, 2);
        let xp = permute_rows(&x, &perm);
        let builders: [fn(&gsan_core::graph::Graph) -> SparseOperator; 2] =
            [normalized_adjacency, lazy_random_walk];
        for build in builders {
            let direct = permute_rows(&build(&g).apply(&x).unwrap(), &perm);
            let relabeled = build(&gp).apply(&xp).unwrap();
            prop_assert!(max_abs_diff(&direct, &relabeled) < 1e-12);
        }
    }

    #[test]
    fn channel_bank_matches_dense_oracle((n, edges, seed) in graph_strategy(20), q in 0.5f64..5.0) {
        let g = build_graph(n, &edges).unwrap();
        let bank = WaveletBank::from_graph(&g, 3);
        let a = normalized_adjacency(&g);
        let hbar = random_matrix(&mut rng(seed ^ 5), n, 3);
        let paths = vec![
            ScatteringPath::first_order(1),
            ScatteringPath::first_order(3),
            ScatteringPath::new(vec![0, 2]).unwrap(),
        ];
        let got = channel_bank(&bank, &a, &hbar, 3, &paths, q).unwrap();
        let config = gsan_core::model::ModelConfig {
            q,
            paths: paths.clone(),
            ..Default::default()
        };
        let want = dense_channels(&DenseOps::new(n, &edges, 0.5), &hbar, &config);
        prop_assert_eq!(got.len(), 6);
        for (i, (g_ch, w_ch)) in got.iter().zip(&want).enumerate() {
            prop_assert!(max_abs_diff(g_ch, w_ch) < 1e-10);
            if i < 3 {
                prop_assert_eq!(g_ch, &a.apply_power(i + 1, &hbar).unwrap());
            } else {
                prop_assert!(g_ch.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
