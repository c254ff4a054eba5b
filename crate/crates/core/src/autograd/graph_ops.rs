//! Sparse message-passing and segment pooling ops.

use std::rc::Rc;

use super::{Tape, Var};
use crate::gat::AttentionGraph;
use crate::tensor::Tensor;

impl Tape {
    /// Selects rows of a `[n, c]` tensor; backward scatters and adds.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.dim(0), xv.len() / xv.dim(0).max(1));
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let m = idx.len();
        self.op(Tensor::new([m, c], out), &[x], move |g, _, _| {
            let mut dx = vec![0.0; n * c];
            for (r, &i) in idx.iter().enumerate() {
                for t in 0..c {
                    dx[i * c + t] += g.data()[r * c + t];
                }
            }
            vec![Some(Tensor::new([n, c], dx))]
        })
    }

    /// Per-head dot products: `v [n, H*dk]`, `a [H, dk]` gives `[n, H]`.
    pub fn headwise_dot(&mut self, v: Var, a: Var) -> Var {
        let (vv, av) = (self.value(v), self.value(a));
        let (heads, dk) = (av.dim(0), av.dim(1));
        let n = vv.dim(0);
        assert_eq!(vv.dim(1), heads * dk, "headwise_dot width");
        let mut out = vec![0.0; n * heads];
        for i in 0..n {
            for k in 0..heads {
                let row = &vv.data()[i * heads * dk + k * dk..i * heads * dk + (k + 1) * dk];
                out[i * heads + k] = row.iter().zip(&av.data()[k * dk..(k + 1) * dk]).map(|(x, y)| x * y).sum();
            }
        }
        self.op(Tensor::new([n, heads], out), &[v, a], move |g, _, ins| {
            let (vd, ad) = (ins[0].data(), ins[1].data());
            let mut dv = vec![0.0; n * heads * dk];
            let mut da = vec![0.0; heads * dk];
            for i in 0..n {
                for k in 0..heads {
                    let gv = g.data()[i * heads + k];
                    for t in 0..dk {
                        let p = i * heads * dk + k * dk + t;
                        dv[p] = gv * ad[k * dk + t];
                        da[k * dk + t] += gv * vd[p];
                    }
                }
            }
            vec![Some(Tensor::new([n, heads * dk], dv)), Some(Tensor::new([heads, dk], da))]
        })
    }

    /// Softmax of edge logits `[E, H]` over each target's incoming edges, per head.
    pub fn edge_softmax(&mut self, logits: Var, graph: &AttentionGraph) -> Var {
        let lv = self.value(logits);
        let (e, heads) = (lv.dim(0), lv.dim(1));
        assert_eq!(e, graph.edge_count(), "edge_softmax: logits rows vs edges");
        let offsets = Rc::new(graph.offsets().to_vec());
        let mut out = vec![0.0; e * heads];
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            for k in 0..heads {
                let m = (lo..hi).map(|r| lv.data()[r * heads + k]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in lo..hi {
                    let ex = (lv.data()[r * heads + k] - m).exp();
                    out[r * heads + k] = ex;
                    z += ex;
                }
                for r in lo..hi {
                    out[r * heads + k] /= z;
                }
            }
        }
        self.op(Tensor::new([e, heads], out), &[logits], move |g, out, _| {
            let mut dl = vec![0.0; e * heads];
            for w in offsets.windows(2) {
                for k in 0..heads {
                    let dot: f64 = (w[0]..w[1]).map(|r| g.data()[r * heads + k] * out.data()[r * heads + k]).sum();
                    for r in w[0]..w[1] {
                        dl[r * heads + k] = out.data()[r * heads + k] * (g.data()[r * heads + k] - dot);
                    }
                }
            }
            vec![Some(Tensor::new([e, heads], dl))]
        })
    }

    /// `out[i, head k] = Σ_{edges j→i} alpha[e, k] · v[j, head k]`; `v` is `[n, H*dk]`.
    pub fn gat_aggregate(&mut self, alpha: Var, v: Var, graph: &AttentionGraph) -> Var {
        let (alv, vv) = (self.value(alpha), self.value(v));
        let (e, heads) = (alv.dim(0), alv.dim(1));
        let (n, width) = (vv.dim(0), vv.dim(1));
        assert_eq!(e, graph.edge_count(), "gat_aggregate: alpha rows vs edges");
        assert_eq!(n, graph.node_count(), "gat_aggregate: node count");
        assert_eq!(width % heads, 0, "gat_aggregate: width not divisible by heads");
        let dk = width / heads;
        let offsets = Rc::new(graph.offsets().to_vec());
        let sources = Rc::new(graph.sources().to_vec());
        let mut out = vec![0.0; n * width];
        for i in 0..n {
            for r in offsets[i]..offsets[i + 1] {
                let j = sources[r];
                for k in 0..heads {
                    let a = alv.data()[r * heads + k];
                    for t in 0..dk {
                        out[i * width + k * dk + t] += a * vv.data()[j * width + k * dk + t];
                    }
                }
            }
        }
        self.op(Tensor::new([n, width], out), &[alpha, v], move |g, _, ins| {
            let (ad, vd) = (ins[0].data(), ins[1].data());
            let mut da = vec![0.0; e * heads];
            let mut dv = vec![0.0; n * width];
            for i in 0..n {
                for r in offsets[i]..offsets[i + 1] {
                    let j = sources[r];
                    for k in 0..heads {
                        let mut acc = 0.0;
                        let a = ad[r * heads + k];
                        for t in 0..dk {
                            let gv = g.data()[i * width + k * dk + t];
                            acc += gv * vd[j * width + k * dk + t];
                            dv[j * width + k * dk + t] += a * gv;
                        }
                        da[r * heads + k] = acc;
                    }
                }
            }
            vec![Some(Tensor::new([e, heads], da)), Some(Tensor::new([n, width], dv))]
        })
    }

    /// Softmax within consecutive blocks of `seg` entries of a flat score vector.
    ///
    /// The normaliser sums the exponentials in sorted order, so permuting a
    /// block permutes its output bit for bit.
    pub fn segment_softmax(&mut self, x: Var, seg: usize) -> Var {
        let xv = self.value(x);
        let n = xv.len();
        assert!(seg > 0 && n.is_multiple_of(seg), "segment_softmax: {n} entries not divisible by {seg}");
        let mut out = vec![0.0; n];
        let mut sorted = Vec::with_capacity(seg);
        for (o, s) in out.chunks_mut(seg).zip(xv.data().chunks(seg)) {
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (oi, si) in o.iter_mut().zip(s) {
                *oi = (si - m).exp();
            }
            sorted.clear();
            sorted.extend_from_slice(o);
            sorted.sort_by(f64::total_cmp);
            let z: f64 = sorted.iter().sum();
            o.iter_mut().for_each(|v| *v /= z);
        }
        self.op(Tensor::new([n], out), &[x], move |g, out, ins| {
            let mut dx = vec![0.0; n];
            for ((d, gs), os) in dx.chunks_mut(seg).zip(g.data().chunks(seg)).zip(out.data().chunks(seg)) {
                let dot: f64 = gs.iter().zip(os).map(|(a, b)| a * b).sum();
                for ((di, gi), oi) in d.iter_mut().zip(gs).zip(os) {
                    *di = oi * (gi - dot);
                }
            }
            vec![Some(Tensor::new(ins[0].shape(), dx))]
        })
    }

    /// Weighted sum of rows within consecutive blocks: `w [n]`, `x [n, d]` gives `[n/seg, d]`.
    ///
    /// Accumulates in row order starting from zero.
    pub fn segment_weighted_sum(&mut self, w: Var, x: Var, seg: usize) -> Var {
        let (wv, xv) = (self.value(w), self.value(x));
        let n = xv.dim(0);
        let d = xv.len() / n.max(1);
        assert_eq!(wv.len(), n, "segment_weighted_sum: weight count");
        assert!(seg > 0 && n % seg == 0, "segment_weighted_sum: {n} rows not divisible by {seg}");
        let groups = n / seg;
        let mut out = vec![0.0; groups * d];
        for gi in 0..groups {
            let dst = &mut out[gi * d..(gi + 1) * d];
            for r in gi * seg..(gi + 1) * seg {
                let wr = wv.data()[r];
                for (o, xv) in dst.iter_mut().zip(&xv.data()[r * d..(r + 1) * d]) {
                    *o += wr * xv;
                }
            }
        }
        self.op(Tensor::new([groups, d], out), &[w, x], move |g, _, ins| {
            let (wd, xd) = (ins[0].data(), ins[1].data());
            let mut dw = vec![0.0; n];
            let mut dx = vec![0.0; n * d];
            for r in 0..n {
                let gr = &g.data()[(r / seg) * d..(r / seg + 1) * d];
                dw[r] = gr.iter().zip(&xd[r * d..(r + 1) * d]).map(|(a, b)| a * b).sum();
                for (dxi, gv) in dx[r * d..(r + 1) * d].iter_mut().zip(gr) {
                    *dxi = wd[r] * gv;
                }
            }
            vec![Some(Tensor::new(ins[0].shape(), dw)), Some(Tensor::new(ins[1].shape(), dx))]
        })
    }
}
