#![allow(dead_code)]

use dgamil_core::autograd::{Tape, Var};
use dgamil_core::backbone::BackboneConfig;
use dgamil_core::bagging::Bag;
use dgamil_core::model::ModelConfig;
use dgamil_core::nn::Ctx;
use dgamil_core::params::{EntryKind, ParamStore};
use dgamil_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Central-difference check of a scalar built by `f` from the trainable
/// tensors of `store` and the constant `inputs`. Relative error per entry is
/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn fd_check(store: &ParamStore, inputs: &[Tensor], train: bool, f: impl Fn(&mut Ctx, &[Var]) -> Var) -> FdReport {
    let eval = |s: &ParamStore, ins: &[Tensor]| -> f64 {
        let mut ctx = Ctx::new(s, train);
        let vars: Vec<Var> = ins.iter().map(|t| ctx.tape.constant(t.clone())).collect();
        let r = f(&mut ctx, &vars);
        ctx.value(r).item()
    };
    let mut ctx = Ctx::new(store, train);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.constant(t.clone())).collect();
    let root = f(&mut ctx, &vars);
    let grads = ctx.tape.backward(root);

    let mut report = FdReport { max_rel: 0.0, worst: String::new(), checked: 0 };
    let mut note = |label: String, a: f64, n: f64| {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        report.checked += 1;
        if rel > report.max_rel || !rel.is_finite() {
            report.max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst = format!("{label}: analytic {a:e} numeric {n:e}");
        }
    };

    for id in store.param_ids().collect::<Vec<_>>() {
        if store.kind(id) != EntryKind::Param {
            continue;
        }
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in 0..store.get(id).len() {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[i] += FD_STEP;
            let up = eval(&s, inputs);
            s.get_mut(id).data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&s, inputs);
            note(format!("{}[{i}]", store.name(id)), analytic.data()[i], (up - down) / (2.0 * FD_STEP));
        }
    }
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let mut ins = inputs.to_vec();
            ins[k].data_mut()[i] += FD_STEP;
            let up = eval(store, &ins);
            ins[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(store, &ins);
            note(format!("input{k}[{i}]"), analytic.data()[i], (up - down) / (2.0 * FD_STEP));
        }
    }
    report
}

/// Scalar probe `Σ c ⊙ x` with fixed random coefficients, so every output
/// entry contributes a distinct weight to the checked gradient.
pub fn probe(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = rng(seed);
    let c = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let c = tape.constant(c);
    let y = tape.mul(x, c);
    tape.sum(y)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Literal multi-head graph attention on dense matrices. `proj` is
/// `[heads·dk, d]` (rows of `W^k` stacked), `a_t`/`a_s` are the target and
/// source halves of each `a^k`. Returns `alpha[k][i][j]` (zero off the
/// neighborhood) and the concatenated head outputs `[n][heads·dk]`.
pub fn dense_gat(
    h: &[Vec<f64>],
    proj: &[f64],
    a_t: &[f64],
    a_s: &[f64],
    heads: usize,
    dk: usize,
    slope: f64,
    neighbors: &[Vec<usize>],
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let n = h.len();
    let d = h[0].len();
    let leaky = |x: f64| if x > 0.0 { x } else { slope * x };
    let mut alpha = vec![vec![vec![0.0; n]; n]; heads];
    let mut out = vec![vec![0.0; heads * dk]; n];
    for k in 0..heads {
        // v_i^k = W^k h_i
        let v: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..dk).map(|r| (0..d).map(|c| proj[(k * dk + r) * d + c] * h[i][c]).sum()).collect())
            .collect();
        for i in 0..n {
            // e_ij = LeakyReLU(a^k · [v_i || v_j])
            let mut e = vec![f64::NEG_INFINITY; n];
            for &j in &neighbors[i] {
                let mut s = 0.0;
                for r in 0..dk {
                    s += a_t[k * dk + r] * v[i][r];
                }
                for r in 0..dk {
                    s += a_s[k * dk + r] * v[j][r];
                }
                e[j] = leaky(s);
            }
            let m = neighbors[i].iter().map(|&j| e[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = neighbors[i].iter().map(|&j| (e[j] - m).exp()).sum();
            for &j in &neighbors[i] {
                alpha[k][i][j] = (e[j] - m).exp() / z;
            }
            for r in 0..dk {
                out[i][k * dk + r] = neighbors[i].iter().map(|&j| alpha[k][i][j] * v[j][r]).sum();
            }
        }
    }
    (alpha, out)
}

/// Every connected simple undirected graph on `n` labelled nodes, as edge lists.
pub fn connected_graphs(n: usize) -> Vec<Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut out = Vec::new();
    for mask in 0u32..(1 << pairs.len()) {
        let edges: Vec<(usize, usize)> = pairs.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &e)| e).collect();
        let mut comp: Vec<usize> = (0..n).collect();
        fn root(c: &mut [usize], x: usize) -> usize {
            let mut x = x;
            while c[x] != x {
                c[x] = c[c[x]];
                x = c[x];
            }
            x
        }
        for &(a, b) in &edges {
            let (ra, rb) = (root(&mut comp, a), root(&mut comp, b));
            comp[ra] = rb;
        }
        let r0 = root(&mut comp, 0);
        if (0..n).all(|i| root(&mut comp, i) == r0) {
            out.push(edges);
        }
    }
    out
}

/// Neighborhoods (self included) of an undirected edge list.
pub fn neighborhoods(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut nb: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for &(a, b) in edges {
        nb[a].push(b);
        nb[b].push(a);
    }
    nb
}

/// A model small enough for exhaustive checks: 8×8 instances, two stages.
pub fn tiny_model_cfg(k: usize) -> ModelConfig {
    let mut cfg = ModelConfig {
        backbone: BackboneConfig { channels: vec![4, 8], blocks_per_stage: 1, in_channels: 3, post_blocks: 1 },
        bag_size: k,
        input_size: [8, 8],
        head_hidden: 6,
        ..Default::default()
    };
    cfg.aggregator.spatial.heads = 2;
    cfg.aggregator.instance.heads = 2;
    cfg.aggregator.spatial.n_edges = 2;
    cfg.aggregator.instance.n_edges = 3;
    cfg
}

/// A bag of iid uniform slices with no planted signal.
pub fn random_bag(k: usize, m: usize, size: [usize; 2], age: f64, id: u64, rng: &mut ChaCha8Rng) -> Bag {
    let [h, w] = size;
    let plane = h * w;
    Bag {
        data: (0..k * m * plane).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        k,
        m,
        height: h,
        width: w,
        age,
        subject_id: id,
        instance_ranges: (0..k).map(|j| (j * m, (j + 1) * m)).collect(),
        signal_instances: None,
    }
}
