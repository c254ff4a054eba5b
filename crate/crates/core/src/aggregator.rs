//! Dual graph-attention MIL aggregation: spatial positions to an instance
//! vector, then instance vectors to a bag vector with contribution scores.

use std::sync::Once;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::gat::{build_block_graphs, AttentionGraph, GatBlock, GatConfig};
use crate::nn::{fc_init, Ctx, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialGraph {
    /// Same cosine-similarity construction as the instance graph.
    #[default]
    Cosine,
    /// 4-neighbourhood on the feature-map grid.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub spatial: GatConfig,
    pub instance: GatConfig,
    pub spatial_graph: SpatialGraph,
    /// `false` replaces the spatial aggregator by global average pooling.
    pub use_spatial: bool,
    /// `false` replaces the instance aggregator by the mean over instances.
    pub use_instance: bool,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            spatial: GatConfig::default(),
            instance: GatConfig::default(),
            spatial_graph: SpatialGraph::Cosine,
            use_spatial: true,
            use_instance: true,
        }
    }
}

/// GAT block, linear reduction to one score per position, softmax over positions.
#[derive(Clone, Debug)]
pub struct SpatialAggregator {
    pub block: GatBlock,
    pub score: Linear,
}

impl SpatialAggregator {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &GatConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let block = GatBlock::new(store, &format!("{name}.gat"), channels, cfg, rng)?;
        let w = block.width();
        let score = Linear::new(store, &format!("{name}.score"), w, 1, true, fc_init(w), rng);
        Ok(Self { block, score })
    }

    /// `rows [n·p, C]` holds `n` instances of `p` positions each. Returns the
    /// pooled vectors `[n, C]` and the score maps `[n·p]`.
    pub fn forward(&self, ctx: &mut Ctx, rows: Var, p: usize, graph: &AttentionGraph) -> Result<(Var, Var)> {
        let h = self.block.forward(ctx, rows, graph)?;
        let logits = self.score.forward(ctx, h);
        let len = ctx.value(logits).dim(0);
        let logits = ctx.tape.reshape(logits, &[len]);
        let maps = ctx.tape.segment_softmax(logits, p);
        let pooled = ctx.tape.segment_weighted_sum(maps, rows, p);
        Ok((pooled, maps))
    }
}

/// GAT block, `w · GAT(g_i)` logits, softmax over the instances of a bag.
#[derive(Clone, Debug)]
pub struct InstanceAggregator {
    pub block: GatBlock,
    pub w: Linear,
}

impl InstanceAggregator {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &GatConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let block = GatBlock::new(store, &format!("{name}.gat"), channels, cfg, rng)?;
        let width = block.width();
        let w = Linear::new(store, &format!("{name}.w"), width, 1, false, fc_init(width), rng);
        Ok(Self { block, w })
    }

    /// `g [b·k, C]` to bag vectors `z [b, C]` and scores `[b·k]`.
    pub fn forward(&self, ctx: &mut Ctx, g: Var, k: usize, graph: &AttentionGraph) -> Result<(Var, Var)> {
        let h = self.block.forward(ctx, g, graph)?;
        let logits = self.w.forward(ctx, h);
        let len = ctx.value(logits).dim(0);
        let logits = ctx.tape.reshape(logits, &[len]);
        let s = ctx.tape.segment_softmax(logits, k);
        let z = ctx.tape.segment_weighted_sum(s, g, k);
        Ok((z, s))
    }
}

pub struct AggregateOutput {
    /// Bag vectors `[b, C]`.
    pub z: Var,
    /// Instance scores `[b·k]`, a simplex per bag.
    pub instance_scores: Var,
    /// Spatial score maps `[b·k·p]`, a simplex per instance.
    pub spatial_maps: Var,
    /// Pooled instance vectors `[b·k, C]`.
    pub instance_features: Var,
}

#[derive(Clone, Debug)]
pub struct DualAggregator {
    pub cfg: AggregatorConfig,
    pub channels: usize,
    pub spatial: Option<SpatialAggregator>,
    pub instance: Option<InstanceAggregator>,
}

static SINGLE_INSTANCE: Once = Once::new();

impl DualAggregator {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &AggregatorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let spatial = cfg
            .use_spatial
            .then(|| SpatialAggregator::new(store, &format!("{name}.spatial"), channels, &cfg.spatial, rng))
            .transpose()?;
        let instance = cfg
            .use_instance
            .then(|| InstanceAggregator::new(store, &format!("{name}.instance"), channels, &cfg.instance, rng))
            .transpose()?;
        Ok(Self { cfg: cfg.clone(), channels, spatial, instance })
    }

    /// Spatial stage on position rows `[n·p, C]`.
    pub fn spatial_aggregate(&self, ctx: &mut Ctx, rows: Var, p: usize, grid: [usize; 2]) -> Result<(Var, Var)> {
        let n = ctx.value(rows).dim(0) / p;
        match &self.spatial {
            Some(agg) => {
                let graph = match self.cfg.spatial_graph {
                    SpatialGraph::Cosine => {
                        build_block_graphs(ctx.value(rows).data(), self.channels, p, self.cfg.spatial.n_edges, self.cfg.spatial.edge_mode)
                    }
                    SpatialGraph::Grid => {
                        let one = AttentionGraph::grid(grid[0], grid[1]);
                        AttentionGraph::disjoint_union(&vec![one; n])
                    }
                };
                agg.forward(ctx, rows, p, &graph)
            }
            None => {
                let maps = ctx.tape.constant(Tensor::full([n * p], 1.0 / p as f64));
                let pooled = ctx.tape.segment_weighted_sum(maps, rows, p);
                Ok((pooled, maps))
            }
        }
    }

    /// Instance stage on instance vectors `[b·k, C]`.
    pub fn instance_aggregate(&self, ctx: &mut Ctx, g: Var, k: usize) -> Result<(Var, Var)> {
        if k == 1 {
            SINGLE_INSTANCE.call_once(|| log::warn!("bag of one instance: scores are trivially 1"));
        }
        let n = ctx.value(g).dim(0);
        match &self.instance {
            Some(agg) => {
                let graph = build_block_graphs(ctx.value(g).data(), self.channels, k, self.cfg.instance.n_edges, self.cfg.instance.edge_mode);
                agg.forward(ctx, g, k, &graph)
            }
            None => {
                let s = ctx.tape.constant(Tensor::full([n], 1.0 / k as f64));
                let z = ctx.tape.segment_weighted_sum(s, g, k);
                Ok((z, s))
            }
        }
    }

    /// Feature maps `[b·k, C, h, w]` to bag vectors.
    pub fn forward(&self, ctx: &mut Ctx, e: Var, k: usize) -> Result<AggregateOutput> {
        let shape = ctx.value(e).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.channels || k == 0 || !shape[0].is_multiple_of(k) {
            return Err(Error::shape(format!("[b*{k}, {}, h, w]", self.channels), shape));
        }
        let (h, w) = (shape[2], shape[3]);
        let rows = ctx.tape.nchw_to_rows(e);
        let (g, spatial_maps) = self.spatial_aggregate(ctx, rows, h * w, [h, w])?;
        let (z, instance_scores) = self.instance_aggregate(ctx, g, k)?;
        Ok(AggregateOutput { z, instance_scores, spatial_maps, instance_features: g })
    }

    /// Zeroes both score heads, reducing the aggregator to average pooling.
    pub fn zero_score_heads(&self, store: &mut ParamStore) {
        if let Some(s) = &self.spatial {
            *store.get_mut(s.score.weight) = Tensor::zeros(store.get(s.score.weight).shape());
            if let Some(b) = s.score.bias {
                *store.get_mut(b) = Tensor::zeros([1]);
            }
        }
        if let Some(i) = &self.instance {
            *store.get_mut(i.w.weight) = Tensor::zeros(store.get(i.w.weight).shape());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> AggregatorConfig {
        let g = GatConfig { heads: 2, n_edges: 2, ..Default::default() };
        AggregatorConfig { spatial: g.clone(), instance: g, ..Default::default() }
    }

    #[test]
    fn hand_set_spatial_scores_pool_by_weighted_sum() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, false);
        let rows = ctx.tape.constant(Tensor::new([4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let maps = ctx.tape.constant(Tensor::new([4], vec![0.1, 0.2, 0.3, 0.4]));
        let g = ctx.tape.segment_weighted_sum(maps, rows, 4);
        let got = ctx.value(g).data().to_vec();
        assert!((got[0] - (0.1 + 0.6 + 1.5 + 2.8)).abs() < 1e-12);
        assert!((got[1] - (0.2 + 0.8 + 1.8 + 3.2)).abs() < 1e-12);
    }

    #[test]
    fn identical_instances_get_uniform_scores() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let agg = DualAggregator::new(&mut store, "agg", 4, &small_cfg(), &mut rng).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let one: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let e = ctx.tape.constant(Tensor::new([3, 4, 2, 2], [one.clone(), one.clone(), one].concat()));
        let out = agg.forward(&mut ctx, e, 3).unwrap();
        for &s in ctx.value(out.instance_scores).data() {
            assert!((s - 1.0 / 3.0).abs() < 1e-12);
        }
        let z = ctx.value(out.z).data().to_vec();
        let g0 = ctx.value(out.instance_features).row(0).to_vec();
        for (a, b) in z.iter().zip(&g0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ablated_aggregator_has_no_parameters_and_averages() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AggregatorConfig { use_spatial: false, use_instance: false, ..small_cfg() };
        let agg = DualAggregator::new(&mut store, "agg", 2, &cfg, &mut rng).unwrap();
        assert_eq!(store.len(), 0);
        let mut ctx = Ctx::new(&store, false);
        let e = ctx.tape.constant(Tensor::new([2, 2, 1, 2], vec![1.0, 3.0, 10.0, 20.0, 5.0, 7.0, 30.0, 40.0]));
        let out = agg.forward(&mut ctx, e, 2).unwrap();
        assert_eq!(ctx.value(out.z).data(), &[4.0, 25.0]);
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let agg = DualAggregator::new(&mut store, "agg", 4, &small_cfg(), &mut rng).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let e = ctx.tape.constant(Tensor::zeros([2, 3, 2, 2]));
        assert!(matches!(agg.forward(&mut ctx, e, 2), Err(Error::Shape { .. })));
    }
}
