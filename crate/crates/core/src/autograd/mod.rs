//! Reverse-mode automatic differentiation on a per-forward tape.
//!
//! Each forward pass records nodes onto a fresh [`Tape`]. Parameters enter as
//! leaves (one leaf per [`ParamId`] per tape, so shared weights accumulate
//! gradient from every use). [`Tape::backward`] walks the nodes in reverse.

mod conv;
mod graph_ops;
mod norm;

pub use norm::{BatchStats, NORM_EPS};

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// `(grad_out, out_value, input_values) -> grad per input`.
type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.of(*v))
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value, inputs: inputs.iter().map(|v| v.0).collect(), backward });
        Var(self.nodes.len() - 1)
    }

    fn op(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        backward: impl Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        self.push(value, inputs, Some(Box::new(backward)))
    }

    /// Leaf without gradient tracking semantics (gradient is still recorded).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, &[], None)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), &[], None);
        self.params.insert(id, v);
        v
    }

    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(f) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let parts = f(&g, &node.value, &inputs);
            debug_assert_eq!(parts.len(), node.inputs.len());
            for (&j, part) in node.inputs.iter().zip(parts) {
                let Some(part) = part else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&part),
                    slot @ None => *slot = Some(part),
                }
            }
            grads[i] = Some(g);
        }
        Grads { grads, params: self.params.clone() }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect());
        self.op(out, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect());
        self.op(out, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect());
        self.op(out, &[a, b], |g, _, ins| {
            let ga = g.data().iter().zip(ins[1].data()).map(|(g, y)| g * y).collect();
            let gb = g.data().iter().zip(ins[0].data()).map(|(g, x)| g * x).collect();
            vec![Some(Tensor::new(g.shape(), ga)), Some(Tensor::new(g.shape(), gb))]
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.op(out, &[a], move |g, _, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.op(out, &[a], move |g, _, ins| {
            let d = g
                .data()
                .iter()
                .zip(ins[0].data())
                .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                .collect();
            vec![Some(Tensor::new(g.shape(), d))]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let in_shape = self.value(a).shape().to_vec();
        let out = self.value(a).clone().reshaped(shape);
        self.op(out, &[a], move |g, _, _| vec![Some(g.clone().reshaped(in_shape.clone()))])
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.op(out, &[a], |g, _, ins| vec![Some(Tensor::full(ins[0].shape(), g.item()))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error against a fixed target; returns a `[1]` tensor.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Var {
        let p = self.value(pred);
        assert_eq!(p.len(), target.len(), "mse length mismatch");
        let n = target.len() as f64;
        let diff: Vec<f64> = p.data().iter().zip(target).map(|(a, b)| a - b).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        self.op(Tensor::scalar(loss), &[pred], move |g, _, ins| {
            let s = 2.0 * g.item() / n;
            vec![Some(Tensor::new(ins[0].shape(), diff.iter().map(|d| s * d).collect()))]
        })
    }

    /// Weighted sum of `[1]`-shaped scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            assert_eq!(self.value(v).len(), 1, "weighted_sum takes scalars");
            total += w * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        self.op(Tensor::scalar(total), &vars, move |g, _, _| {
            weights.iter().map(|w| Some(Tensor::scalar(w * g.item()))).collect()
        })
    }

    // ---- dense -------------------------------------------------------------

    /// `x [n, in] · wᵀ [in, out] (+ b [out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.ndim(), 2, "linear input must be 2-D, got {:?}", xv.shape());
        let (n, din) = (xv.dim(0), xv.dim(1));
        let dout = wv.dim(0);
        assert_eq!(wv.shape(), &[dout, din], "linear weight shape");
        let mut out = vec![0.0; n * dout];
        gemm(n, din, dout, 1.0, xv.data(), din, 1, wv.data(), 1, din, 0.0, &mut out);
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), &[dout], "linear bias shape");
            for row in out.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            inputs.push(b);
        }
        let has_bias = b.is_some();
        self.op(Tensor::new([n, dout], out), &inputs, move |g, _, ins| {
            let (xv, wv) = (ins[0], ins[1]);
            let mut dx = vec![0.0; n * din];
            gemm(n, dout, din, 1.0, g.data(), dout, 1, wv.data(), din, 1, 0.0, &mut dx);
            let mut dw = vec![0.0; dout * din];
            gemm(dout, n, din, 1.0, g.data(), 1, dout, xv.data(), din, 1, 0.0, &mut dw);
            let mut grads = vec![Some(Tensor::new([n, din], dx)), Some(Tensor::new([dout, din], dw))];
            if has_bias {
                let mut db = vec![0.0; dout];
                for row in g.data().chunks(dout) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                grads.push(Some(Tensor::new([dout], db)));
            }
            grads
        })
    }

    /// Row-wise cosine similarity of two `[n, d]` tensors, giving `[n]`.
    ///
    /// A row pair involving a zero vector has similarity 0 and zero gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "cosine_rows shape mismatch");
        let n = av.dim(0);
        let d = av.len() / n.max(1);
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = cosine(&av.data()[i * d..(i + 1) * d], &bv.data()[i * d..(i + 1) * d]);
        }
        let shape = av.shape().to_vec();
        self.op(Tensor::new([n], out), &[a, b], move |g, out, ins| {
            let (av, bv) = (ins[0].data(), ins[1].data());
            let mut ga = vec![0.0; n * d];
            let mut gb = vec![0.0; n * d];
            for i in 0..n {
                let (x, y) = (&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]);
                let nx = norm(x);
                let ny = norm(y);
                if nx == 0.0 || ny == 0.0 {
                    continue;
                }
                let c = out.data()[i];
                let gi = g.data()[i];
                for t in 0..d {
                    ga[i * d + t] = gi * (y[t] / (nx * ny) - c * x[t] / (nx * nx));
                    gb[i * d + t] = gi * (x[t] / (nx * ny) - c * y[t] / (ny * ny));
                }
            }
            vec![Some(Tensor::new(shape.clone(), ga)), Some(Tensor::new(shape.clone(), gb))]
        })
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / (nx * ny)
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central-difference gradient checking against the tape.

    use super::*;

    /// Checks d(f)/d(inputs) for every input tensor. `f` builds a scalar from leaves.
    pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars);
        let grads = tape.backward(root);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.of(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for idx in 0..t.len() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, u)| {
                            let mut u = u.clone();
                            if j == k {
                                u.data_mut()[idx] += delta;
                            }
                            tape.constant(u)
                        })
                        .collect();
                    let r = f(&mut tape, &vars);
                    tape.value(r).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[idx];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
                assert!(err < tol, "input {k}[{idx}]: analytic {a} vs numeric {numeric} (rel {err})");
            }
        }
    }
}
