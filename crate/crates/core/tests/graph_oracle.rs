//! KNN construction and max-relative aggregation against brute-force oracles.

use proptest::prelude::*;
use vig_unet::graph::{head_split_update, knn_graph, knn_graph_between, mr_aggregate, NodeFeatures, UpdateHeads};
use vig_unet::tensor::{conv2d, ConvGeometry, ConvParams, RngState, Tensor};

/// Same arithmetic as the library: left-to-right sum of squared differences.
fn dist(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += (x - y) * (x - y);
    }
    s
}

/// Full sort of every other node by `(distance, index)`, self prepended.
fn knn_oracle(rows: &[Vec<f32>], k: usize) -> Vec<Vec<u32>> {
    let n = rows.len();
    (0..n)
        .map(|i| {
            let mut others: Vec<(f32, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(&rows[i], &rows[j]), j)).collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            std::iter::once(i as u32)
                .chain(others.iter().take(k.min(n) - 1).map(|&(_, j)| j as u32))
                .collect()
        })
        .collect()
}

fn between_oracle(queries: &[Vec<f32>], cands: &[Vec<f32>], k: usize) -> Vec<Vec<u32>> {
    queries
        .iter()
        .map(|q| {
            let mut all: Vec<(f32, usize)> = cands.iter().enumerate().map(|(j, c)| (dist(q, c), j)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.iter().take(k.min(cands.len())).map(|&(_, j)| j as u32).collect()
        })
        .collect()
}

/// Per-node loop: `[x_i, max_j (x_j - x_i)]`.
fn aggregate_oracle(rows: &[Vec<f32>], graph: &[Vec<u32>]) -> Vec<f32> {
    let mut out = Vec::new();
    for (i, nb) in graph.iter().enumerate() {
        out.extend_from_slice(&rows[i]);
        for c in 0..rows[i].len() {
            let mut best = f32::NEG_INFINITY;
            for &j in nb {
                best = best.max(rows[j as usize][c] - rows[i][c]);
            }
            out.push(best);
        }
    }
    out
}

fn random_rows(rng: &mut RngState, n: usize, d: usize, quantized: bool) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| {
                    if quantized {
                        // a coarse grid forces many exact distance ties
                        rng.below(3) as f32
                    } else {
                        rng.uniform_range(-2.0, 2.0) as f32
                    }
                })
                .collect()
        })
        .collect()
}

fn features(rows: &[Vec<f32>]) -> NodeFeatures {
    NodeFeatures::from_rows(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

#[test]
fn two_hundred_random_instances() {
    let mut rng = RngState::new(2024);
    for case in 0..200 {
        let n = 1 + rng.below(64);
        let d = 1 + rng.below(8);
        let k = 1 + rng.below(12);
        let rows = random_rows(&mut rng, n, d, case % 4 == 0);
        let f = features(&rows);
        let g = knn_graph(&f, k).unwrap();
        let oracle = knn_oracle(&rows, k);
        assert_eq!(g.k_effective(), k.min(n), "case {case}");
        for (i, row) in oracle.iter().enumerate() {
            assert_eq!(g.row(i), row.as_slice(), "case {case} node {i}");
        }
        let agg = mr_aggregate(&f, &g).unwrap();
        assert_eq!(agg.shape(), &[n, 2 * d]);
        assert_eq!(agg.data(), aggregate_oracle(&rows, &oracle).as_slice(), "case {case}");

        let m = 1 + rng.below(16);
        let cands = random_rows(&mut rng, m, d, case % 4 == 0);
        let gb = knn_graph_between(&f, &features(&cands), k).unwrap();
        for (i, row) in between_oracle(&rows, &cands, k).iter().enumerate() {
            assert_eq!(gb.row(i), row.as_slice(), "case {case} between node {i}");
        }
    }
}

#[test]
fn heads_match_grouped_pointwise_conv() {
    let mut rng = RngState::new(5);
    for heads in [1, 2, 4] {
        let (n, cin, cout) = (10, 8, 8);
        let w = Tensor::from_fn(vec![cout, cin / heads, 1, 1], |_| rng.uniform_range(-1.0, 1.0) as f32);
        let b = Tensor::from_fn(vec![cout], |_| rng.uniform_range(-1.0, 1.0) as f32);
        let agg = Tensor::from_fn(vec![n, cin], |_| rng.uniform_range(-1.0, 1.0) as f32);
        let via_heads = head_split_update(&agg, &UpdateHeads::from_grouped_conv(&w, &b, heads).unwrap()).unwrap();
        // same data as a [1, cin, n, 1] feature map
        let map = Tensor::from_fn(vec![1, cin, n, 1], |i| agg.data()[(i % n) * cin + i / n]);
        let p = ConvParams::with_geometry(w, b, ConvGeometry::new(1, 0).grouped(heads)).unwrap();
        let y = conv2d(&map, &p).unwrap();
        for i in 0..n {
            for o in 0..cout {
                let a = via_heads.data()[i * cout + o];
                let c = y.data()[o * n + i];
                assert!((a - c).abs() < 1e-5, "heads {heads}: {a} vs {c}");
            }
        }
    }
}

proptest! {
    /// Relabelling the nodes relabels the graph and permutes the aggregate.
    #[test]
    fn permutation_equivariance(seed in 0u64..10_000, n in 2usize..24, d in 1usize..6, k in 1usize..8) {
        let mut rng = RngState::new(seed);
        let rows = random_rows(&mut rng, n, d, false);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        // node p holds original node perm[p]
        let permuted: Vec<Vec<f32>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let mut inverse = vec![0; n];
        for (p, &i) in perm.iter().enumerate() {
            inverse[i] = p;
        }
        let g = knn_graph(&features(&rows), k).unwrap();
        let gp = knn_graph(&features(&permuted), k).unwrap();
        for p in 0..n {
            let mapped: Vec<u32> = g.row(perm[p]).iter().map(|&j| inverse[j as usize] as u32).collect();
            prop_assert_eq!(gp.row(p), mapped.as_slice());
        }
        let a = mr_aggregate(&features(&rows), &g).unwrap();
        let ap = mr_aggregate(&features(&permuted), &gp).unwrap();
        for p in 0..n {
            prop_assert_eq!(&ap.data()[p * 2 * d..(p + 1) * 2 * d], &a.data()[perm[p] * 2 * d..(perm[p] + 1) * 2 * d]);
        }
    }

    /// Self loop first, no duplicates, max-relative term never negative.
    #[test]
    fn structural_invariants(seed in 0u64..10_000, n in 1usize..40, d in 1usize..8, k in 1usize..12) {
        let mut rng = RngState::new(seed);
        let rows = random_rows(&mut rng, n, d, seed % 2 == 0);
        let f = features(&rows);
        let g = knn_graph(&f, k).unwrap();
        for i in 0..n {
            let row = g.row(i);
            prop_assert_eq!(row[0] as usize, i);
            let mut sorted = row.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), row.len());
        }
        let agg = mr_aggregate(&f, &g).unwrap();
        for i in 0..n {
            prop_assert!(agg.data()[i * 2 * d + d..(i + 1) * 2 * d].iter().all(|&v| v >= 0.0));
        }
    }
}
