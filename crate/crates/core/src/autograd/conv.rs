//! Convolution, pooling and layout ops over `[N, C, H, W]` tensors.

use super::{Tape, Var};
use crate::tensor::{gemm, Tensor};

/// Unfolds one `[C, H, W]` image into `[C*k*k, H*W]` columns for a stride-1 conv.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &img[ci * hw + sy as usize * w..ci * hw + (sy as usize + 1) * w];
                    for (x, o) in out_row.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - pad as isize;
                        *o = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, img: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            img[base + sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Stride-1 "same" convolution. `w: [O, C, k, k]` with odd `k`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ndim(), 4, "conv2d input must be NCHW, got {:?}", xv.shape());
        let (n, c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (o, k) = (wv.dim(0), wv.dim(2));
        assert_eq!(wv.shape(), &[o, c, k, k], "conv2d weight shape for {c} input channels");
        assert!(k % 2 == 1, "conv2d kernel must be odd");
        let pad = k / 2;
        let (hw, ckk) = (h * wd, c * k * k);
        let mut out = vec![0.0; n * o * hw];
        let mut col = vec![0.0; if k == 1 { 0 } else { ckk * hw }];
        for img in 0..n {
            let src = &xv.data()[img * c * hw..(img + 1) * c * hw];
            let cols: &[f64] = if k == 1 {
                src
            } else {
                im2col(src, c, h, wd, k, pad, &mut col);
                &col
            };
            gemm(o, ckk, hw, 1.0, wv.data(), ckk, 1, cols, hw, 1, 0.0, &mut out[img * o * hw..(img + 1) * o * hw]);
        }
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), o, "conv2d bias length");
            for img in 0..n {
                for (oc, bb) in bv.iter().enumerate() {
                    let base = (img * o + oc) * hw;
                    out[base..base + hw].iter_mut().for_each(|v| *v += bb);
                }
            }
            inputs.push(b);
        }
        let has_bias = b.is_some();
        self.op(Tensor::new([n, o, h, wd], out), &inputs, move |g, _, ins| {
            let (xv, wv) = (ins[0], ins[1]);
            let mut dx = vec![0.0; n * c * hw];
            let mut dw = vec![0.0; o * ckk];
            let mut col = vec![0.0; if k == 1 { 0 } else { ckk * hw }];
            let mut dcol = vec![0.0; ckk * hw];
            for img in 0..n {
                let src = &xv.data()[img * c * hw..(img + 1) * c * hw];
                let gi = &g.data()[img * o * hw..(img + 1) * o * hw];
                let cols: &[f64] = if k == 1 {
                    src
                } else {
                    im2col(src, c, h, wd, k, pad, &mut col);
                    &col
                };
                // dW += dY · colsᵀ
                gemm(o, hw, ckk, 1.0, gi, hw, 1, cols, 1, hw, 1.0, &mut dw);
                // dcols = Wᵀ · dY
                let dst = &mut dx[img * c * hw..(img + 1) * c * hw];
                if k == 1 {
                    gemm(ckk, o, hw, 1.0, wv.data(), 1, ckk, gi, hw, 1, 0.0, dst);
                } else {
                    gemm(ckk, o, hw, 1.0, wv.data(), 1, ckk, gi, hw, 1, 0.0, &mut dcol);
                    col2im(&dcol, c, h, wd, k, pad, dst);
                }
            }
            let mut grads = vec![Some(Tensor::new([n, c, h, wd], dx)), Some(Tensor::new([o, c, k, k], dw))];
            if has_bias {
                let mut db = vec![0.0; o];
                for img in 0..n {
                    for (oc, d) in db.iter_mut().enumerate() {
                        let base = (img * o + oc) * hw;
                        *d += g.data()[base..base + hw].iter().sum::<f64>();
                    }
                }
                grads.push(Some(Tensor::new([o], db)));
            }
            grads
        })
    }

    /// 2x2 max pooling with stride 2; spatial sizes must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        let d = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + y * ow + xx;
                    out[o] = d[best];
                    arg[o] = best;
                }
            }
        }
        let in_len = xv.len();
        self.op(Tensor::new([n, c, oh, ow], out), &[x], move |g, _, _| {
            let mut dx = vec![0.0; in_len];
            for (gv, &a) in g.data().iter().zip(&arg) {
                dx[a] += gv;
            }
            vec![Some(Tensor::new([n, c, h, w], dx))]
        })
    }

    /// `[N, C, H, W]` to `[N*H*W, C]`: one row per spatial position.
    pub fn nchw_to_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let hw = h * w;
        let mut out = vec![0.0; xv.len()];
        for img in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(img * hw + p) * c + ch] = xv.data()[(img * c + ch) * hw + p];
                }
            }
        }
        self.op(Tensor::new([n * hw, c], out), &[x], move |g, _, _| {
            let mut dx = vec![0.0; n * c * hw];
            for img in 0..n {
                for ch in 0..c {
                    for p in 0..hw {
                        dx[(img * c + ch) * hw + p] = g.data()[(img * hw + p) * c + ch];
                    }
                }
            }
            vec![Some(Tensor::new([n, c, h, w], dx))]
        })
    }
}
