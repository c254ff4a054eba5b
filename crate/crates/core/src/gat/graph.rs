//! Directed attention graphs and cosine-similarity edge selection.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::cosine;

/// Which end of the similarity ranking supplies a node's incoming edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeMode {
    #[serde(rename = "lowest")]
    LowestSimilarity,
    #[serde(rename = "highest")]
    HighestSimilarity,
}

impl EdgeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeMode::LowestSimilarity => "lowest",
            EdgeMode::HighestSimilarity => "highest",
        }
    }
}

impl std::str::FromStr for EdgeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lowest" => Ok(EdgeMode::LowestSimilarity),
            "highest" => Ok(EdgeMode::HighestSimilarity),
            other => Err(format!("unknown edge mode {other:?} (expected lowest|highest)")),
        }
    }
}

/// Incoming-edge lists in CSR form: the sources flowing into target `i` are
/// `sources[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGraph {
    offsets: Vec<usize>,
    sources: Vec<usize>,
}

impl AttentionGraph {
    /// Builds from per-target neighbor lists. Duplicates are removed and a
    /// self-loop is added to any node that would otherwise have no incoming edge.
    pub fn from_neighbors(neighbors: Vec<Vec<usize>>) -> Self {
        let n = neighbors.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut sources = Vec::new();
        offsets.push(0);
        for (i, mut list) in neighbors.into_iter().enumerate() {
            let mut seen = std::collections::HashSet::new();
            list.retain(|&j| {
                assert!(j < n, "edge source {j} out of range for {n} nodes");
                seen.insert(j)
            });
            if list.is_empty() {
                list.push(i);
            }
            sources.extend(list);
            offsets.push(sources.len());
        }
        Self { offsets, sources }
    }

    /// Complete graph including self-loops.
    pub fn complete(n: usize) -> Self {
        Self::from_neighbors((0..n).map(|i| std::iter::once(i).chain((0..n).filter(|&j| j != i)).collect()).collect())
    }

    /// 4-neighbour lattice over a row-major `h x w` grid, with self-loops.
    pub fn grid(h: usize, w: usize) -> Self {
        let mut nb = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut list = vec![y * w + x];
                if y > 0 {
                    list.push((y - 1) * w + x);
                }
                if y + 1 < h {
                    list.push((y + 1) * w + x);
                }
                if x > 0 {
                    list.push(y * w + x - 1);
                }
                if x + 1 < w {
                    list.push(y * w + x + 1);
                }
                nb.push(list);
            }
        }
        Self::from_neighbors(nb)
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.sources.len()
    }

    pub fn neighbors(&self, target: usize) -> &[usize] {
        &self.sources[self.offsets[target]..self.offsets[target + 1]]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    /// Target node of every edge, in edge order.
    pub fn targets(&self) -> Vec<usize> {
        (0..self.node_count()).flat_map(|i| std::iter::repeat_n(i, self.offsets[i + 1] - self.offsets[i])).collect()
    }

    /// `(target, source)` pairs in edge order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.node_count()).flat_map(move |i| self.neighbors(i).iter().map(move |&j| (i, j)))
    }

    pub fn has_edge(&self, target: usize, source: usize) -> bool {
        self.neighbors(target).contains(&source)
    }

    /// Disjoint union; node ids of the k-th graph are offset by the sizes of the previous ones.
    pub fn disjoint_union(graphs: &[AttentionGraph]) -> Self {
        let mut offsets = vec![0];
        let mut sources = Vec::new();
        let mut base = 0;
        for g in graphs {
            for i in 0..g.node_count() {
                sources.extend(g.neighbors(i).iter().map(|j| j + base));
                offsets.push(sources.len());
            }
            base += g.node_count();
        }
        Self { offsets, sources }
    }
}

/// Selects, for every node, incoming edges from the `n_edges` other nodes with
/// the lowest (or highest) cosine similarity; ties go to the smaller index.
/// A self-loop is always included and `n_edges` is clamped to `len - 1`.
pub fn build_graph_cosine(features: &[&[f64]], n_edges: usize, mode: EdgeMode) -> AttentionGraph {
    let n = features.len();
    if n <= 1 {
        if n == 1 {
            warn!("cosine graph over a single node: self-loop only");
        }
        return AttentionGraph::from_neighbors(vec![vec![0]; n]);
    }
    let k = n_edges.min(n - 1);
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine(features[i], features[j]);
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    let neighbors = (0..n)
        .map(|i| {
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            cand.sort_by(|&a, &b| {
                let (sa, sb) = (sim[i * n + a], sim[i * n + b]);
                let ord = match mode {
                    EdgeMode::LowestSimilarity => sa.total_cmp(&sb),
                    EdgeMode::HighestSimilarity => sb.total_cmp(&sa),
                };
                ord.then(a.cmp(&b))
            });
            let mut list = vec![i];
            list.extend_from_slice(&cand[..k]);
            list
        })
        .collect();
    AttentionGraph::from_neighbors(neighbors)
}

/// Builds one cosine graph per consecutive block of `block` rows of a `[n, d]`
/// row-major buffer and returns their disjoint union.
pub fn build_block_graphs(rows: &[f64], d: usize, block: usize, n_edges: usize, mode: EdgeMode) -> AttentionGraph {
    let n = rows.len() / d;
    assert_eq!(n % block, 0, "rows not divisible into blocks of {block}");
    let graphs: Vec<AttentionGraph> = (0..n / block)
        .map(|b| {
            let feats: Vec<&[f64]> = (0..block).map(|i| &rows[(b * block + i) * d..(b * block + i + 1) * d]).collect();
            build_graph_cosine(&feats, n_edges, mode)
        })
        .collect();
    AttentionGraph::disjoint_union(&graphs)
}
