//! Multi-head graph attention: per-edge scores, neighbourhood aggregation and
//! the residual/LayerNorm/feed-forward block wrapped around them.

mod graph;

use std::rc::Rc;

pub use graph::{build_block_graphs, build_graph_cosine, AttentionGraph, EdgeMode};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{fc_init, Ctx, LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatConfig {
    pub heads: usize,
    /// Per-head width; `None` splits the input width evenly across heads.
    pub head_dim: Option<usize>,
    pub negative_slope: f64,
    /// Incoming similarity-selected edges per node (self-loop not counted).
    pub n_edges: usize,
    pub edge_mode: EdgeMode,
    /// Feed-forward hidden width as a multiple of the block width.
    pub ffn_mult: usize,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            head_dim: None,
            negative_slope: 0.2,
            n_edges: 8,
            edge_mode: EdgeMode::LowestSimilarity,
            ffn_mult: 2,
        }
    }
}

impl GatConfig {
    pub fn validate(&self, in_dim: usize) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::config("GAT needs at least one head"));
        }
        if self.head_dim.is_none() && !in_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "feature width {in_dim} is not divisible by {} heads; set head_dim explicitly",
                self.heads
            )));
        }
        if self.head_dim == Some(0) || self.ffn_mult == 0 {
            return Err(Error::config("GAT widths must be positive"));
        }
        Ok(())
    }

    pub fn head_dim_for(&self, in_dim: usize) -> usize {
        self.head_dim.unwrap_or(in_dim / self.heads)
    }
}

/// One multi-head graph attention layer: `v^k = W^k h`, edge scores
/// `LeakyReLU(a^k · [v_i^k ‖ v_j^k])`, softmax over each target's incoming
/// edges, heads concatenated.
#[derive(Clone, Debug)]
pub struct GatLayer {
    /// All head projections stacked: `[heads * head_dim, in_dim]`.
    pub proj: ParamId,
    /// Target half of every `a^k`: `[heads, head_dim]`.
    pub att_target: ParamId,
    /// Source half of every `a^k`: `[heads, head_dim]`.
    pub att_source: ParamId,
    pub heads: usize,
    pub head_dim: usize,
    pub negative_slope: f64,
}

impl GatLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, cfg: &GatConfig, rng: &mut ChaCha8Rng) -> Self {
        let dk = cfg.head_dim_for(in_dim);
        let width = cfg.heads * dk;
        let att_init = Init::XavierNormal { fan_in: 2 * dk, fan_out: 1 };
        Self {
            proj: store.add_param(
                &format!("{name}.proj"),
                Init::XavierNormal { fan_in: in_dim, fan_out: dk }.tensor(&[width, in_dim], rng),
            ),
            att_target: store.add_param(&format!("{name}.att_target"), att_init.tensor(&[cfg.heads, dk], rng)),
            att_source: store.add_param(&format!("{name}.att_source"), att_init.tensor(&[cfg.heads, dk], rng)),
            heads: cfg.heads,
            head_dim: dk,
            negative_slope: cfg.negative_slope,
        }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Projected node features `v = h Wᵀ`, `[n, heads * head_dim]`.
    pub fn project(&self, ctx: &mut Ctx, h: Var) -> Var {
        let w = ctx.param(self.proj);
        ctx.tape.linear(h, w, None)
    }

    /// Attention coefficients `[edges, heads]` from projected features.
    pub fn scores_from_projected(&self, ctx: &mut Ctx, v: Var, graph: &AttentionGraph) -> Var {
        let at = ctx.param(self.att_target);
        let asrc = ctx.param(self.att_source);
        let left = ctx.tape.headwise_dot(v, at);
        let right = ctx.tape.headwise_dot(v, asrc);
        let lt = ctx.tape.gather_rows(left, Rc::new(graph.targets()));
        let rs = ctx.tape.gather_rows(right, Rc::new(graph.sources().to_vec()));
        let logits = ctx.tape.add(lt, rs);
        let logits = ctx.tape.leaky_relu(logits, self.negative_slope);
        ctx.tape.edge_softmax(logits, graph)
    }

    /// Per-head attention coefficients for node features `h [n, in_dim]`.
    pub fn scores(&self, ctx: &mut Ctx, h: Var, graph: &AttentionGraph) -> Result<Var> {
        check_nodes(ctx, h, graph)?;
        let v = self.project(ctx, h);
        Ok(self.scores_from_projected(ctx, v, graph))
    }

    /// `h̃_i = ‖_k Σ_{j∈N_i} α^k_{ij} v_j^k` given precomputed coefficients.
    pub fn aggregate(&self, ctx: &mut Ctx, h: Var, alpha: Var, graph: &AttentionGraph) -> Result<Var> {
        check_nodes(ctx, h, graph)?;
        let ashape = ctx.value(alpha).shape().to_vec();
        if ashape != [graph.edge_count(), self.heads] {
            return Err(Error::shape([graph.edge_count(), self.heads], ashape));
        }
        let v = self.project(ctx, h);
        Ok(ctx.tape.gat_aggregate(alpha, v, graph))
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var, graph: &AttentionGraph) -> Result<Var> {
        check_nodes(ctx, h, graph)?;
        let v = self.project(ctx, h);
        let alpha = self.scores_from_projected(ctx, v, graph);
        Ok(ctx.tape.gat_aggregate(alpha, v, graph))
    }
}

fn check_nodes(ctx: &Ctx, h: Var, graph: &AttentionGraph) -> Result<()> {
    let shape = ctx.value(h).shape();
    if shape.len() != 2 || shape[0] != graph.node_count() {
        return Err(Error::shape(format!("[{}, d]", graph.node_count()), shape));
    }
    Ok(())
}

/// `out = LN(skip(x) + GAT(x))`, then `LN(out + FFN(out))`.
#[derive(Clone, Debug)]
pub struct GatBlock {
    pub attn: GatLayer,
    /// Learned projection on the residual path when input and output widths differ.
    pub skip: Option<Linear>,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
    pub in_dim: usize,
}

impl GatBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, cfg: &GatConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate(in_dim)?;
        let attn = GatLayer::new(store, &format!("{name}.attn"), in_dim, cfg, rng);
        let width = attn.width();
        let skip = (width != in_dim)
            .then(|| Linear::new(store, &format!("{name}.skip"), in_dim, width, false, fc_init(in_dim), rng));
        let hidden = cfg.ffn_mult * width;
        Ok(Self {
            attn,
            skip,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), width, hidden, true, fc_init(width), rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), hidden, width, true, fc_init(hidden), rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            in_dim,
        })
    }

    pub fn width(&self) -> usize {
        self.attn.width()
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, graph: &AttentionGraph) -> Result<Var> {
        let width = ctx.value(x).shape().get(1).copied().unwrap_or(0);
        if width != self.in_dim {
            return Err(Error::shape(format!("[n, {}]", self.in_dim), ctx.value(x).shape()));
        }
        let attn = self.attn.forward(ctx, x, graph)?;
        let skip = match &self.skip {
            Some(p) => p.forward(ctx, x),
            None => x,
        };
        let h = ctx.tape.add(skip, attn);
        let h = self.norm1.forward(ctx, h);
        let f = self.ffn_in.forward(ctx, h);
        let f = ctx.tape.relu(f);
        let f = self.ffn_out.forward(ctx, f);
        let out = ctx.tape.add(h, f);
        Ok(self.norm2.forward(ctx, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn uniform_rows(alpha: &Tensor, graph: &AttentionGraph) {
        for i in 0..graph.node_count() {
            let deg = graph.neighbors(i).len() as f64;
            for r in graph.offsets()[i]..graph.offsets()[i + 1] {
                for k in 0..alpha.dim(1) {
                    assert!((alpha.data()[r * alpha.dim(1) + k] - 1.0 / deg).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_attention_vector_gives_uniform_coefficients() {
        let mut store = ParamStore::new();
        let cfg = GatConfig { heads: 2, ..Default::default() };
        let layer = GatLayer::new(&mut store, "g", 4, &cfg, &mut rng(1));
        store.set("g.att_target", Tensor::zeros([2, 2])).unwrap();
        store.set("g.att_source", Tensor::zeros([2, 2])).unwrap();
        let graph = AttentionGraph::from_neighbors(vec![vec![0, 1, 2], vec![1], vec![2, 0]]);
        let mut ctx = Ctx::new(&store, false);
        let h = ctx.tape.constant(crate::params::sample_normal(&[3, 4], 1.0, &mut rng(2)));
        let a = layer.scores(&mut ctx, h, &graph).unwrap();
        uniform_rows(ctx.value(a), &graph);
    }

    #[test]
    fn one_hot_alpha_copies_source() {
        let mut store = ParamStore::new();
        let cfg = GatConfig { heads: 1, ..Default::default() };
        let layer = GatLayer::new(&mut store, "g", 3, &cfg, &mut rng(3));
        let graph = AttentionGraph::from_neighbors(vec![vec![0, 1], vec![1, 0]]);
        let mut ctx = Ctx::new(&store, false);
        let h = ctx.tape.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]));
        let alpha = ctx.tape.constant(Tensor::new([4, 1], vec![0.0, 1.0, 0.0, 1.0]));
        let out = layer.aggregate(&mut ctx, h, alpha, &graph).unwrap();
        let v = layer.project(&mut ctx, h);
        let (out, v) = (ctx.value(out).clone(), ctx.value(v).clone());
        assert_eq!(out.row(0), v.row(1));
        assert_eq!(out.row(1), v.row(0));
    }

    #[test]
    fn aggregate_rejects_wrong_alpha_shape() {
        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "g", 2, &GatConfig { heads: 2, ..Default::default() }, &mut rng(4));
        let graph = AttentionGraph::complete(2);
        let mut ctx = Ctx::new(&store, false);
        let h = ctx.tape.constant(Tensor::zeros([2, 2]));
        let alpha = ctx.tape.constant(Tensor::zeros([4, 1]));
        assert!(matches!(layer.aggregate(&mut ctx, h, alpha, &graph), Err(Error::Shape { .. })));
    }

    #[test]
    fn zeroed_branches_reduce_block_to_double_layer_norm() {
        let mut store = ParamStore::new();
        let cfg = GatConfig { heads: 2, ..Default::default() };
        let block = GatBlock::new(&mut store, "b", 4, &cfg, &mut rng(5)).unwrap();
        store.set("b.attn.proj", Tensor::zeros([4, 4])).unwrap();
        store.set("b.ffn_out.weight", Tensor::zeros([4, 8])).unwrap();
        let x = crate::params::sample_normal(&[5, 4], 2.0, &mut rng(6));
        let graph = AttentionGraph::complete(5);
        let mut ctx = Ctx::new(&store, false);
        let xv = ctx.tape.constant(x);
        let out = block.forward(&mut ctx, xv, &graph).unwrap();
        let ln1 = block.norm1.forward(&mut ctx, xv);
        let ln2 = block.norm2.forward(&mut ctx, ln1);
        assert!(ctx.value(out).max_abs_diff(ctx.value(ln2)) < 1e-12);
    }

    #[test]
    fn skip_projection_when_widths_differ() {
        let mut store = ParamStore::new();
        let cfg = GatConfig { heads: 2, head_dim: Some(3), ..Default::default() };
        let block = GatBlock::new(&mut store, "b", 4, &cfg, &mut rng(7)).unwrap();
        assert!(block.skip.is_some());
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.tape.constant(Tensor::full([3, 4], 0.5));
        let out = block.forward(&mut ctx, x, &AttentionGraph::complete(3)).unwrap();
        assert_eq!(ctx.value(out).shape(), &[3, 6]);
        let bad = ctx.tape.constant(Tensor::zeros([3, 5]));
        assert!(block.forward(&mut ctx, bad, &AttentionGraph::complete(3)).is_err());
    }

    #[test]
    fn indivisible_width_is_a_config_error() {
        let mut store = ParamStore::new();
        assert!(GatBlock::new(&mut store, "b", 6, &GatConfig::default(), &mut rng(8)).is_err());
    }
}
