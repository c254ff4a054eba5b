//! Decoupling of backbone features into age and structure parts, the
//! preliminary age head, and the decoupling losses.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::nn::{fc_init, Conv2d, Ctx, RegressionHead};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// `Ψ`: 1×1 conv, ReLU, 1×1 conv, per-position linear map.
#[derive(Clone, Debug)]
pub struct Decoupler {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc: Conv2d,
}

impl Decoupler {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let kaiming = Init::KaimingNormal { fan_in: channels };
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 1, true, kaiming, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 1, true, kaiming, rng),
            fc: Conv2d::new(store, &format!("{name}.fc"), channels, channels, 1, true, fc_init(channels), rng),
        }
    }

    /// Returns `(e_age, e_stru)` with `e_stru = Ψ(e)` and `e_age = e − e_stru`.
    pub fn forward(&self, ctx: &mut Ctx, e: Var) -> (Var, Var) {
        let h = self.conv1.forward(ctx, e);
        let h = ctx.tape.relu(h);
        let h = self.conv2.forward(ctx, h);
        let stru = self.fc.forward(ctx, h);
        let age = ctx.tape.sub(e, stru);
        (age, stru)
    }
}

/// `φ`: global average pooling per instance, mean over the bag, then an MLP.
#[derive(Clone, Debug)]
pub struct PreliminaryHead {
    pub mlp: RegressionHead,
}

impl PreliminaryHead {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, mean_age: f64, rng: &mut ChaCha8Rng) -> Self {
        Self { mlp: RegressionHead::new(store, name, channels, hidden, mean_age, rng) }
    }

    /// `e_age [b·k, C, h, w]` to `[b]`.
    pub fn forward(&self, ctx: &mut Ctx, e_age: Var, k: usize) -> Var {
        let pooled = bag_average(&mut ctx.tape, e_age, k);
        self.mlp.forward(ctx, pooled)
    }
}

/// Spatial average per instance then mean over each bag: `[b·k, C, h, w]` to `[b, C]`.
pub fn bag_average(tape: &mut Tape, e: Var, k: usize) -> Var {
    let shape = tape.value(e).shape().to_vec();
    let (n, p) = (shape[0], shape[2] * shape[3]);
    let rows = tape.nchw_to_rows(e);
    let sw = tape.constant(Tensor::full([n * p], 1.0 / p as f64));
    let g = tape.segment_weighted_sum(sw, rows, p);
    let iw = tape.constant(Tensor::full([n], 1.0 / k as f64));
    tape.segment_weighted_sum(iw, g, k)
}

pub fn loss_mse0(tape: &mut Tape, y0: Var, ages: &[f64]) -> Var {
    tape.mse(y0, ages)
}

/// One partner per batch element, uniform over the whole batch (self included).
pub fn draw_partners(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// `−(1/N) Σ_i (1/K) Σ_j 1{i≠k_i} cos(e_{i,j}, e_{k_i,j})` over flattened
/// per-instance maps. `e_stru` is `[N·K, ...]` with bags contiguous.
pub fn loss_decp1(tape: &mut Tape, e_stru: Var, k: usize, partners: &[usize]) -> Var {
    let n = partners.len();
    if n < 2 {
        log::warn!("structure-similarity loss needs at least two bags; contributing 0");
        return tape.constant(Tensor::scalar(0.0));
    }
    let shape = tape.value(e_stru).shape().to_vec();
    assert_eq!(shape[0], n * k, "loss_decp1: expected {n}x{k} instances");
    let d = tape.value(e_stru).len() / shape[0];
    let flat = tape.reshape(e_stru, &[n * k, d]);
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (i, &p) in partners.iter().enumerate() {
        if i != p {
            for j in 0..k {
                left.push(i * k + j);
                right.push(p * k + j);
            }
        }
    }
    if left.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let a = tape.gather_rows(flat, Rc::new(left));
    let b = tape.gather_rows(flat, Rc::new(right));
    let cos = tape.cosine_rows(a, b);
    let total = tape.sum(cos);
    tape.scale(total, -1.0 / (n * k) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decp2Pairing {
    /// Each bag's structure vector against its own age vector.
    #[default]
    SameIndex,
    /// Against the age vector of a randomly drawn bag.
    RandomPartner,
}

/// `(1/N) Σ_i cos(z_stru_i, z_age_{π(i)})`, or of the squared cosine.
/// `partners` is used only for [`Decp2Pairing::RandomPartner`].
pub fn loss_decp2(tape: &mut Tape, z_stru: Var, z_age: Var, pairing: Decp2Pairing, partners: &[usize], squared: bool) -> Var {
    let z_age = match pairing {
        Decp2Pairing::SameIndex => z_age,
        Decp2Pairing::RandomPartner => tape.gather_rows(z_age, Rc::new(partners.to_vec())),
    };
    let cos = tape.cosine_rows(z_stru, z_age);
    let cos = if squared { tape.mul(cos, cos) } else { cos };
    tape.mean(cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_last_layer_passes_features_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Decoupler::new(&mut store, "psi", 3, &mut rng);
        *store.get_mut(d.fc.weight) = Tensor::zeros([3, 3, 1, 1]);
        let mut ctx = Ctx::new(&store, false);
        let e = ctx.tape.constant(crate::params::sample_normal(&[2, 3, 2, 2], 1.0, &mut rng));
        let (age, stru) = d.forward(&mut ctx, e);
        assert_eq!(ctx.value(age), ctx.value(e));
        assert!(ctx.value(stru).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse0_arithmetic() {
        let mut tape = Tape::new();
        let y0 = tape.constant(Tensor::new([2], vec![1.0, 3.0]));
        let l = loss_mse0(&mut tape, y0, &[2.0, 5.0]);
        assert_eq!(tape.value(l).item(), 2.5);
    }

    #[test]
    fn decp1_identical_and_orthogonal() {
        let mut tape = Tape::new();
        let same = tape.constant(Tensor::full([4, 3], 0.7));
        let l = loss_decp1(&mut tape, same, 2, &[1, 0]);
        assert!((tape.value(l).item() + 1.0).abs() < 1e-12);
        let orth = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let l = loss_decp1(&mut tape, orth, 1, &[1, 0]);
        assert_eq!(tape.value(l).item(), 0.0);
        let single = tape.constant(Tensor::full([1, 3], 1.0));
        let l = loss_decp1(&mut tape, single, 1, &[0]);
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn decp2_signs() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new([1, 2], vec![1.0, 2.0]));
        let b = tape.constant(Tensor::new([1, 2], vec![-1.0, -2.0]));
        let l = loss_decp2(&mut tape, a, b, Decp2Pairing::SameIndex, &[], false);
        assert!((tape.value(l).item() + 1.0).abs() < 1e-12);
        let l = loss_decp2(&mut tape, a, b, Decp2Pairing::SameIndex, &[], true);
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
        let l = loss_decp2(&mut tape, a, a, Decp2Pairing::SameIndex, &[], false);
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
    }
}
