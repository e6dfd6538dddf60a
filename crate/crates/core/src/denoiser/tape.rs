//! Reverse-mode differentiation over the fixed set of U-Net ops.

use super::kernels::{col2im, gemm, gemm_f64, im2col, sigmoid, softmax_rows_f64, ConvGeom};
use super::Tensor;

const GN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// `(mean, 1/std)` per batch item and group
        stats: Vec<(f32, f32)>,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddChannel {
        x: Var,
        t: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Upsample {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f32>,
        scale: f32,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Records forward values; `backward` returns parameter gradients.
pub(crate) struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0] {
            Node {
                op: Op::Param(i), ..
            } => &self.params[*i],
            Node { value: Some(t), .. } => t,
            _ => unreachable!("every non-param node stores its value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let (n, cin, h, wd) = xt.nchw();
        let (cout, k) = (wt.shape()[0], wt.shape()[2]);
        debug_assert_eq!(wt.shape()[1], cin);
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let hw = ho * wo;
        let kk = geom.col_rows();
        let bias = self.value(b).data();
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kk * hw]
        };
        for bi in 0..n {
            let xi = &xt.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let src: &[f32] = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, geom, &mut cols);
                &cols
            };
            let dst = &mut out.data_mut()[bi * cout * hw..(bi + 1) * cout * hw];
            for (co, plane) in dst.chunks_exact_mut(hw).enumerate() {
                plane.fill(bias[co]);
            }
            gemm(
                cout,
                kk,
                hw,
                wt.data(),
                (kk as isize, 1),
                src,
                (hw as isize, 1),
                1.0,
                dst,
            );
        }
        self.push(out, Op::Conv { x, w, b, geom })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xt = self.value(x);
        let (n, c, h, w) = xt.nchw();
        let cg = c / groups;
        let m = cg * h * w;
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(xt.shape());
        let mut stats = Vec::with_capacity(n * groups);
        for bi in 0..n {
            for gi in 0..groups {
                let off = (bi * c + gi * cg) * h * w;
                let seg = &xt.data()[off..off + m];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
                let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
                let (mean, rstd) = (mean as f32, 1.0 / (var as f32 + GN_EPS).sqrt());
                stats.push((mean, rstd));
                let dst = &mut out.data_mut()[off..off + m];
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let (s, o) = (g[ch] * rstd, bt[ch]);
                    let r = ci * h * w..(ci + 1) * h * w;
                    for (d, &v) in dst[r.clone()].iter_mut().zip(&seg[r]) {
                        *d = (v - mean) * s + o;
                    }
                }
            }
        }
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Silu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b })
    }

    /// `x[n, c, :, :] += t[n, c]`.
    pub fn add_channel(&mut self, x: Var, t: Var) -> Var {
        let mut out = self.value(x).clone();
        let (n, c, h, w) = out.nchw();
        let tv = self.value(t).data();
        for (i, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
            let add = tv[(i / c) * c + i % c];
            plane.iter_mut().for_each(|v| *v += add);
        }
        debug_assert_eq!(tv.len(), n * c);
        self.push(out, Op::AddChannel { x, t })
    }

    /// `x[n, i] · w[o, i]^T + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (n, i) = (xt.shape()[0], xt.shape()[1]);
        let o = wt.shape()[0];
        let mut out = Tensor::zeros(&[n, o]);
        for row in out.data_mut().chunks_exact_mut(o) {
            row.copy_from_slice(bt.data());
        }
        gemm(
            n,
            i,
            o,
            xt.data(),
            (i as isize, 1),
            wt.data(),
            (1, i as isize),
            1.0,
            out.data_mut(),
        );
        self.push(out, Op::Linear { x, w, b })
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        let (n, ca, h, w) = at.nchw();
        let cb = bt.nchw().1;
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for bi in 0..n {
            data.extend_from_slice(&at.data()[bi * ca * h * w..(bi + 1) * ca * h * w]);
            data.extend_from_slice(&bt.data()[bi * cb * h * w..(bi + 1) * cb * h * w]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], data).expect("sizes add up");
        self.push(out, Op::Concat { a, b })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (n, c, h, w) = xt.nchw();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for (src, dst) in xt
            .data()
            .chunks_exact(h * w)
            .zip(out.data_mut().chunks_exact_mut(4 * h * w))
        {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample { x })
    }

    /// Single-head attention over pixels; `q`, `k`, `v` are `[n, d, h, w]`.
    /// Output is `[n, d, h, w]` with `out[:, i] = Σ_j softmax(q_i·k_j·scale) v_j`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (n, d, h, w) = qt.nchw();
        let t = h * w;
        let mut probs = vec![0.0; n * t * t];
        let mut out = Tensor::zeros(qt.shape());
        // The forward core runs in f64 so that external f64 attention
        // kernels substituted through a hook agree with it to f32 rounding.
        let mut s = vec![0.0f64; t * t];
        let mut o = vec![0.0f64; d * t];
        for bi in 0..n {
            let r = bi * d * t..(bi + 1) * d * t;
            let widen = |x: &Tensor| -> Vec<f64> {
                x.data()[r.clone()].iter().map(|&v| v as f64).collect()
            };
            let (qb, kb, vb) = (widen(qt), widen(kt), widen(vt));
            // S = Q^T K
            gemm_f64(t, d, t, &qb, (1, t as isize), &kb, (t as isize, 1), &mut s);
            s.iter_mut().for_each(|x| *x *= scale);
            softmax_rows_f64(&mut s, t);
            // O = V P^T
            gemm_f64(d, t, t, &vb, (t as isize, 1), &s, (1, t as isize), &mut o);
            for (dst, &src) in probs[bi * t * t..(bi + 1) * t * t].iter_mut().zip(&s) {
                *dst = src as f32;
            }
            for (dst, &src) in out.data_mut()[r].iter_mut().zip(&o) {
                *dst = src as f32;
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale: scale as f32,
            },
        )
    }

    /// Reverse pass from `out` seeded with `grad`. Returns one gradient per
    /// parameter (zeros for parameters not on the path).
    pub fn backward(&self, out: Var, grad: Tensor) -> Vec<Tensor> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(grad);
        let mut param_grads: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(i) => param_grads[*i].add_assign(&g),
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = self.conv_backward(*x, *w, *geom, &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let (dx, dg, db) = self.group_norm_backward(*x, *gamma, *groups, stats, &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Silu { x } => {
                    let xt = self.value(*x);
                    let data = xt
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| {
                            let s = sigmoid(v);
                            gv * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(xt.shape().to_vec(), data).unwrap(),
                    );
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddChannel { x, t } => {
                    let (_, c, h, w) = g.nchw();
                    let mut dt = Tensor::zeros(self.value(*t).shape());
                    for (i, plane) in g.data().chunks_exact(h * w).enumerate() {
                        dt.data_mut()[(i / c) * c + i % c] += plane.iter().sum::<f32>();
                    }
                    accumulate(&mut grads, *t, dt);
                    accumulate(&mut grads, *x, g);
                }
                Op::Linear { x, w, b } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (n, i) = (xt.shape()[0], xt.shape()[1]);
                    let o = wt.shape()[0];
                    let mut dx = Tensor::zeros(xt.shape());
                    gemm(
                        n,
                        o,
                        i,
                        g.data(),
                        (o as isize, 1),
                        wt.data(),
                        (i as isize, 1),
                        0.0,
                        dx.data_mut(),
                    );
                    let mut dw = Tensor::zeros(wt.shape());
                    gemm(
                        o,
                        n,
                        i,
                        g.data(),
                        (1, o as isize),
                        xt.data(),
                        (i as isize, 1),
                        0.0,
                        dw.data_mut(),
                    );
                    let mut db = Tensor::zeros(&[o]);
                    for row in g.data().chunks_exact(o) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Concat { a, b } => {
                    let (n, ca, h, w) = self.value(*a).nchw();
                    let cb = self.value(*b).nchw().1;
                    let (sa, sb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(n * sa);
                    let mut dbv = Vec::with_capacity(n * sb);
                    for chunk in g.data().chunks_exact(sa + sb) {
                        da.extend_from_slice(&chunk[..sa]);
                        dbv.extend_from_slice(&chunk[sa..]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![n, ca, h, w], da).unwrap());
                    accumulate(&mut grads, *b, Tensor::new(vec![n, cb, h, w], dbv).unwrap());
                }
                Op::Upsample { x } => {
                    let xt = self.value(*x);
                    let (_, _, h, w) = xt.nchw();
                    let mut dx = Tensor::zeros(xt.shape());
                    for (src, dst) in g
                        .data()
                        .chunks_exact(4 * h * w)
                        .zip(dx.data_mut().chunks_exact_mut(h * w))
                    {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    probs,
                    scale,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, probs, *scale, &g);
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
            }
        }
        param_grads
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        geom: ConvGeom,
        g: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, cin, h, wd) = xt.nchw();
        let (_, cout, ho, wo) = g.nchw();
        let hw = ho * wo;
        let kk = geom.col_rows();
        let mut dx = Tensor::zeros(xt.shape());
        let mut dw = Tensor::zeros(wt.shape());
        let mut db = Tensor::zeros(&[cout]);
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { kk * hw }];
        let mut dcols = vec![0.0; kk * hw];
        let isz = cin * h * wd;
        for bi in 0..n {
            let gi = &g.data()[bi * cout * hw..(bi + 1) * cout * hw];
            for (co, plane) in gi.chunks_exact(hw).enumerate() {
                db.data_mut()[co] += plane.iter().sum::<f32>();
            }
            let xi = &xt.data()[bi * isz..(bi + 1) * isz];
            let src: &[f32] = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, geom, &mut cols);
                &cols
            };
            // dW += dY · cols^T
            gemm(
                cout,
                hw,
                kk,
                gi,
                (hw as isize, 1),
                src,
                (1, hw as isize),
                1.0,
                dw.data_mut(),
            );
            // dcols = W^T · dY
            let dxi = &mut dx.data_mut()[bi * isz..(bi + 1) * isz];
            if geom.is_pointwise() {
                gemm(
                    kk,
                    cout,
                    hw,
                    wt.data(),
                    (1, kk as isize),
                    gi,
                    (hw as isize, 1),
                    0.0,
                    dxi,
                );
            } else {
                gemm(
                    kk,
                    cout,
                    hw,
                    wt.data(),
                    (1, kk as isize),
                    gi,
                    (hw as isize, 1),
                    0.0,
                    &mut dcols,
                );
                col2im(&dcols, geom, dxi);
            }
        }
        (dx, dw, db)
    }

    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        groups: usize,
        stats: &[(f32, f32)],
        g: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let xt = self.value(x);
        let gam = self.value(gamma).data();
        let (n, c, h, w) = xt.nchw();
        let cg = c / groups;
        let hw = h * w;
        let m = (cg * hw) as f32;
        let mut dx = Tensor::zeros(xt.shape());
        let mut dgam = Tensor::zeros(&[c]);
        let mut dbeta = Tensor::zeros(&[c]);
        for bi in 0..n {
            for gi in 0..groups {
                let (mean, rstd) = stats[bi * groups + gi];
                let off = (bi * c + gi * cg) * hw;
                let (mut sum_dxhat, mut sum_dxhat_xhat) = (0.0f32, 0.0f32);
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let r = off + ci * hw..off + (ci + 1) * hw;
                    let (mut dgc, mut dbc) = (0.0, 0.0);
                    for (&xv, &gv) in xt.data()[r.clone()].iter().zip(&g.data()[r]) {
                        let xhat = (xv - mean) * rstd;
                        dgc += gv * xhat;
                        dbc += gv;
                        let dxhat = gv * gam[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    dgam.data_mut()[ch] += dgc;
                    dbeta.data_mut()[ch] += dbc;
                }
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let r = off + ci * hw..off + (ci + 1) * hw;
                    let xs = &xt.data()[r.clone()];
                    let gs = &g.data()[r.clone()];
                    for ((d, &xv), &gv) in dx.data_mut()[r].iter_mut().zip(xs).zip(gs) {
                        let xhat = (xv - mean) * rstd;
                        let dxhat = gv * gam[ch];
                        *d = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
        }
        (dx, dgam, dbeta)
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        probs: &[f32],
        scale: f32,
        g: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (n, d, h, w) = qt.nchw();
        let t = h * w;
        let mut dq = Tensor::zeros(qt.shape());
        let mut dk = Tensor::zeros(kt.shape());
        let mut dv = Tensor::zeros(vt.shape());
        let mut dp = vec![0.0; t * t];
        for bi in 0..n {
            let r = bi * d * t..(bi + 1) * d * t;
            let p = &probs[bi * t * t..(bi + 1) * t * t];
            let go = &g.data()[r.clone()];
            // dV = dO · P
            gemm(
                d,
                t,
                t,
                go,
                (t as isize, 1),
                p,
                (t as isize, 1),
                0.0,
                &mut dv.data_mut()[r.clone()],
            );
            // dP = dO^T · V
            gemm(
                t,
                d,
                t,
                go,
                (1, t as isize),
                &vt.data()[r.clone()],
                (t as isize, 1),
                0.0,
                &mut dp,
            );
            // dS = P ∘ (dP - rowsum(dP ∘ P)), folded with the logit scale
            for (prow, dprow) in p.chunks_exact(t).zip(dp.chunks_exact_mut(t)) {
                let dot: f32 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                for (ds, &pv) in dprow.iter_mut().zip(prow) {
                    *ds = pv * (*ds - dot) * scale;
                }
            }
            // dQ = K · dS^T, dK = Q · dS
            gemm(
                d,
                t,
                t,
                &kt.data()[r.clone()],
                (t as isize, 1),
                &dp,
                (1, t as isize),
                0.0,
                &mut dq.data_mut()[r.clone()],
            );
            gemm(
                d,
                t,
                t,
                &qt.data()[r.clone()],
                (t as isize, 1),
                &dp,
                (t as isize, 1),
                0.0,
                &mut dk.data_mut()[r],
            );
        }
        (dq, dk, dv)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
