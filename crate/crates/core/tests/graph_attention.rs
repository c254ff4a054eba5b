mod common;

use common::*;
use dgamil_core::aggregator::{AggregatorConfig, DualAggregator, SpatialGraph};
use dgamil_core::autograd::Tape;
use dgamil_core::gat::{build_graph_cosine, AttentionGraph, EdgeMode, GatBlock, GatConfig, GatLayer};
use dgamil_core::nn::Ctx;
use dgamil_core::params::ParamStore;
use dgamil_core::{Error, Tensor};
use proptest::prelude::*;

#[test]
fn layer_matches_dense_transcription_on_a_star_and_a_path() {
    let cfg = GatConfig { heads: 3, head_dim: Some(2), ..Default::default() };
    for edges in [vec![(0, 1), (0, 2), (0, 3)], vec![(0, 1), (1, 2), (2, 3)]] {
        let nb = neighborhoods(4, &edges);
        let graph = AttentionGraph::from_neighbors(nb.clone());
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "g", 5, &cfg, &mut r);
        let h = random_tensor(&[4, 5], &mut r);
        let mut ctx = Ctx::new(&store, false);
        let hv = ctx.tape.constant(h.clone());
        let out = layer.forward(&mut ctx, hv, &graph).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|i| h.row(i).to_vec()).collect();
        let (_, dense) = dense_gat(
            &rows,
            store.get(layer.proj).data(),
            store.get(layer.att_target).data(),
            store.get(layer.att_source).data(),
            3,
            2,
            0.2,
            &nb,
        );
        let got = ctx.value(out);
        for i in 0..4 {
            for c in 0..6 {
                assert!((got.data()[i * 6 + c] - dense[i][c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn uniform_attention_when_all_features_agree() {
    let cfg = GatConfig { heads: 2, ..Default::default() };
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "g", 4, &cfg, &mut rng(1));
    let graph = AttentionGraph::complete(3);
    let mut ctx = Ctx::new(&store, false);
    let h = ctx.tape.constant(Tensor::new([3, 4], [0.5, -1.0, 2.0, 0.25].repeat(3)));
    let alpha = layer.scores(&mut ctx, h, &graph).unwrap();
    assert!(ctx.value(alpha).data().iter().all(|a| (a - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn node_count_mismatch_is_a_shape_error() {
    let mut store = ParamStore::new();
    let block = GatBlock::new(&mut store, "b", 4, &GatConfig { heads: 2, ..Default::default() }, &mut rng(2)).unwrap();
    let mut ctx = Ctx::new(&store, false);
    let x = ctx.tape.constant(Tensor::zeros([3, 4]));
    assert!(matches!(block.forward(&mut ctx, x, &AttentionGraph::complete(4)), Err(Error::Shape { .. })));
    let y = ctx.tape.constant(Tensor::zeros([4, 5]));
    assert!(matches!(block.forward(&mut ctx, y, &AttentionGraph::complete(4)), Err(Error::Shape { .. })));
}

#[test]
fn cosine_graph_picks_extreme_similarities() {
    let feats: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![-1.0, 0.2]];
    let refs: Vec<&[f64]> = feats.iter().map(|v| v.as_slice()).collect();
    let low = build_graph_cosine(&refs, 1, EdgeMode::LowestSimilarity);
    assert_eq!(low.neighbors(0), &[0, 3]);
    let high = build_graph_cosine(&refs, 1, EdgeMode::HighestSimilarity);
    assert_eq!(high.neighbors(0), &[0, 1]);
    let clamped = build_graph_cosine(&refs, 10, EdgeMode::LowestSimilarity);
    assert!((0..4).all(|i| clamped.neighbors(i).len() == 4));
}

#[test]
fn grid_graph_is_four_connected_with_self_loops() {
    let g = AttentionGraph::grid(2, 3);
    assert_eq!(g.node_count(), 6);
    let mut corner = g.neighbors(0).to_vec();
    corner.sort();
    assert_eq!(corner, vec![0, 1, 3]);
    let mut middle = g.neighbors(1).to_vec();
    middle.sort();
    assert_eq!(middle, vec![0, 1, 2, 4]);
}

#[test]
fn grid_and_cosine_spatial_graphs_both_yield_simplex_maps() {
    for graph in [SpatialGraph::Cosine, SpatialGraph::Grid] {
        let cfg = AggregatorConfig {
            spatial: GatConfig { heads: 2, n_edges: 3, ..Default::default() },
            instance: GatConfig { heads: 2, n_edges: 2, ..Default::default() },
            spatial_graph: graph,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let agg = DualAggregator::new(&mut store, "aggregator", 4, &cfg, &mut rng(3)).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let e = ctx.tape.constant(random_tensor(&[2 * 3, 4, 2, 3], &mut rng(4)));
        let out = agg.forward(&mut ctx, e, 3).unwrap();
        assert_eq!(ctx.value(out.z).shape(), &[2, 4]);
        for chunk in ctx.value(out.spatial_maps).data().chunks(6) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for chunk in ctx.value(out.instance_scores).data().chunks(3) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn connected_graph_counts() {
    // labelled connected graphs on 1..=5 nodes
    let counts: Vec<usize> = (1..=5).map(|n| connected_graphs(n).len()).collect();
    assert_eq!(counts, vec![1, 1, 4, 38, 728]);
}

proptest! {
    #[test]
    fn segment_softmax_is_a_simplex(values in proptest::collection::vec(-30.0f64..30.0, 1..40), seg in 1usize..5) {
        let n = values.len() - values.len() % seg;
        prop_assume!(n > 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([n], values[..n].to_vec()));
        let s = tape.segment_softmax(x, seg);
        for chunk in tape.value(s).data().chunks(seg) {
            prop_assert!(chunk.iter().all(|&v| v >= 0.0));
            prop_assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_softmax_commutes_with_permutation(values in proptest::collection::vec(-10.0f64..10.0, 2..12), rot in 1usize..11) {
        let n = values.len();
        let rotated: Vec<f64> = (0..n).map(|i| values[(i + rot) % n]).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new([n], values.clone()));
        let b = tape.constant(Tensor::new([n], rotated));
        let sa = tape.segment_softmax(a, n);
        let sb = tape.segment_softmax(b, n);
        for i in 0..n {
            prop_assert_eq!(tape.value(sb).data()[i].to_bits(), tape.value(sa).data()[(i + rot) % n].to_bits());
        }
    }

    #[test]
    fn edge_softmax_rows_sum_to_one(seed in 0u64..500) {
        let mut r = rng(seed);
        let n = 2 + (seed as usize % 5);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| random_tensor(&[3], &mut r).into_data()).collect();
        let refs: Vec<&[f64]> = feats.iter().map(|v| v.as_slice()).collect();
        let g = build_graph_cosine(&refs, 2, EdgeMode::LowestSimilarity);
        let mut tape = Tape::new();
        let logits = tape.constant(random_tensor(&[g.edge_count(), 2], &mut r));
        let a = tape.edge_softmax(logits, &g);
        let av = tape.value(a);
        for i in 0..n {
            for k in 0..2 {
                let s: f64 = (g.offsets()[i]..g.offsets()[i + 1]).map(|e| av.data()[e * 2 + k]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
