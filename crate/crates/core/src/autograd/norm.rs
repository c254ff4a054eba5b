use super::{Tape, Var};
use crate::tensor::Tensor;

/// Batch statistics observed by a training-mode batch norm; used to update running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

pub const NORM_EPS: f64 = 1e-5;

impl Tape {
    /// Batch normalization over `[N, C, H, W]` with per-batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for img in 0..n {
            for ch in 0..c {
                let plane = &xv.data()[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                mean[ch] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for img in 0..n {
            for ch in 0..c {
                let plane = &xv.data()[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                for p in base..base + hw {
                    xhat[p] = (xv.data()[p] - mean[ch]) * inv_std[ch];
                    out[p] = g[ch] * xhat[p] + b[ch];
                }
            }
        }
        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let stats = BatchStats { mean: mean.clone(), var: var.iter().map(|v| v * unbiased).collect() };
        let shape = xv.shape().to_vec();
        let v = self.op(Tensor::new(shape.clone(), out), &[x, gamma, beta], move |gr, _, ins| {
            let gam = ins[1].data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * hw;
                    for p in base..base + hw {
                        dgamma[ch] += gr.data()[p] * xhat[p];
                        dbeta[ch] += gr.data()[p];
                    }
                }
            }
            let mut dx = vec![0.0; gr.len()];
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * hw;
                    let k = gam[ch] * inv_std[ch];
                    let (mg, mgx) = (dbeta[ch] / count, dgamma[ch] / count);
                    for p in base..base + hw {
                        dx[p] = k * (gr.data()[p] - mg - xhat[p] * mgx);
                    }
                }
            }
            vec![
                Some(Tensor::new(shape.clone(), dx)),
                Some(Tensor::new([c], dgamma)),
                Some(Tensor::new([c], dbeta)),
            ]
        });
        (v, stats)
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[f64], running_var: &[f64]) -> Var {
        let xv = self.value(x);
        let (c, hw) = (xv.dim(1), xv.dim(2) * xv.dim(3));
        let n = xv.dim(0);
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mean = running_mean.to_vec();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                for p in base..base + hw {
                    out[p] = g[ch] * (xv.data()[p] - mean[ch]) * inv_std[ch] + b[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.op(Tensor::new(shape.clone(), out), &[x, gamma, beta], move |gr, _, ins| {
            let (xd, gam) = (ins[0].data(), ins[1].data());
            let mut dx = vec![0.0; gr.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * hw;
                    for p in base..base + hw {
                        let gv = gr.data()[p];
                        dx[p] = gv * gam[ch] * inv_std[ch];
                        dgamma[ch] += gv * (xd[p] - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gv;
                    }
                }
            }
            vec![
                Some(Tensor::new(shape.clone(), dx)),
                Some(Tensor::new([c], dgamma)),
                Some(Tensor::new([c], dbeta)),
            ]
        })
    }

    /// Layer normalization over the last axis of a `[n, d]` tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 2, "layer_norm expects [n, d]");
        let (n, d) = (xv.dim(0), xv.dim(1));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), d, "layer_norm gamma width");
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            inv_std[i] = 1.0 / (var + NORM_EPS).sqrt();
            for t in 0..d {
                xhat[i * d + t] = (row[t] - mean) * inv_std[i];
                out[i * d + t] = g[t] * xhat[i * d + t] + b[t];
            }
        }
        self.op(Tensor::new([n, d], out), &[x, gamma, beta], move |gr, _, ins| {
            let gam = ins[1].data();
            let mut dx = vec![0.0; n * d];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for i in 0..n {
                let mut mg = 0.0;
                let mut mgx = 0.0;
                for t in 0..d {
                    let gv = gr.data()[i * d + t];
                    dgamma[t] += gv * xhat[i * d + t];
                    dbeta[t] += gv;
                    let gh = gv * gam[t];
                    mg += gh;
                    mgx += gh * xhat[i * d + t];
                }
                mg /= d as f64;
                mgx /= d as f64;
                for t in 0..d {
                    let gh = gr.data()[i * d + t] * gam[t];
                    dx[i * d + t] = inv_std[i] * (gh - mg - xhat[i * d + t] * mgx);
                }
            }
            vec![Some(Tensor::new([n, d], dx)), Some(Tensor::new([d], dgamma)), Some(Tensor::new([d], dbeta))]
        })
    }
}
