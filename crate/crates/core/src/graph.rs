//! Reverse-mode automatic differentiation on a flat tape.
//!
//! [`Graph`] evaluates eagerly: each op computes its value when appended, so
//! the tape doubles as the forward pass. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every node; callers pick out the
//! slots they care about (parameter leaves) and ignore the rest. That is how
//! the alternating encoder/decoder game implements its stop-gradients: both
//! halves differentiate the full graph, each optimizer applies only its own
//! parameter subset.
//!
//! Convolution backward recomputes its im2col buffer instead of caching it,
//! trading FLOPs for a much smaller tape.
//!
//! Reductions (`kl_per_n`, `sq_sum_per_n`, `cos_sim_per_n`, `mean_all`)
//! produce one value per leading-dimension sample, accumulate in `f64`
//! regardless of `F`, and run in a fixed element order, which keeps training
//! runs bitwise-reproducible.

use rayon::prelude::*;

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Silu { x: NodeId },
    Sigmoid { x: NodeId },
    Upsample2 { x: NodeId },
    Reshape { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Reparam { mu: NodeId, logvar: NodeId, eps: NodeId },
    KlPerN { mu: NodeId, logvar: NodeId },
    SqSumPerN { a: NodeId, b: NodeId, scale: f64 },
    CosSimPerN { a: NodeId, b: NodeId },
    ExpScaleEw { x: NodeId, alpha: f64 },
    Lincomb { terms: Vec<(NodeId, f64)> },
    MeanAll { x: NodeId },
}

struct Node<F> {
    op: Op,
    value: Tensor<F>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Gradient slots produced by [`Graph::backward`], indexed by `NodeId`.
pub struct Grads<F> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.slots[id.0].as_ref()
    }
}

const COS_EPS: f64 = 1e-12;

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<F>) -> NodeId {
        self.push(Op::Leaf, t)
    }

    /// Copies a node's value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.push(Op::Leaf, v)
    }

    /// 2-D convolution, NCHW, square stride/zero-padding.
    /// `x`: `[N, Cin, H, W]`, `w`: `[Cout, Cin, kh, kw]`, `b`: `[Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout,Cin,kh,kw], got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?} weight {ws:?}");
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;
        let m = ho * wo;

        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        {
            let xdat = self.value(x).data();
            let wdat = self.value(w).data();
            let bdat = self.value(b).data();
            // Samples are independent; each worker unfolds and multiplies its
            // own image (disjoint output slices, so order cannot matter).
            out.data_mut()
                .par_chunks_mut(cout * m)
                .enumerate()
                .for_each_init(
                    || vec![F::ZERO; k * m],
                    |buf, (ni, odat)| {
                    im2col(
                        &xdat[ni * cin * h * wd..(ni + 1) * cin * h * wd],
                        cin, h, wd, kh, kw, stride, pad, ho, wo, buf,
                    );
                    unsafe {
                        F::gemm(
                            cout, k, m, F::ONE,
                            wdat.as_ptr(), k as isize, 1,
                            buf.as_ptr(), m as isize, 1,
                            F::ZERO,
                            odat.as_mut_ptr(), m as isize, 1,
                        );
                    }
                    for c in 0..cout {
                        for v in &mut odat[c * m..(c + 1) * m] {
                            *v += bdat[c];
                        }
                    }
                },
                );
        }
        self.push(Op::Conv2d { x, w, b, stride, pad }, out)
    }

    /// Fully connected layer. `x`: `[N, In]`, `w`: `[Out, In]`, `b`: `[Out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        assert_eq!(xs.len(), 2, "linear input must be [N,In], got {xs:?}");
        assert_eq!(xs[1], ws[1], "linear dim mismatch: input {xs:?} weight {ws:?}");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, dout]);
        unsafe {
            F::gemm(
                n, din, dout, F::ONE,
                self.value(x).data().as_ptr(), din as isize, 1,
                self.value(w).data().as_ptr(), 1, din as isize,
                F::ZERO,
                out.data_mut().as_mut_ptr(), dout as isize, 1,
            );
        }
        let bdat = self.value(b).data().to_vec();
        for ni in 0..n {
            for (o, bv) in out.data_mut()[ni * dout..(ni + 1) * dout].iter_mut().zip(&bdat) {
                *o += *bv;
            }
        }
        self.push(Op::Linear { x, w, b }, out)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        let mut out = v.clone();
        for o in out.data_mut() {
            let s = F::ONE / (F::ONE + (-*o).exp());
            *o = *o * s;
        }
        self.push(Op::Silu { x }, out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = F::ONE / (F::ONE + (-*o).exp());
        }
        self.push(Op::Sigmoid { x }, out)
    }

    /// Nearest-neighbor 2x spatial upsampling of an NCHW tensor.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "upsample2 input must be NCHW, got {xs:?}");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for nc in 0..n * c {
                let s0 = nc * h * w;
                let d0 = nc * 4 * h * w;
                for y in 0..h {
                    for x_ in 0..w {
                        let v = src[s0 + y * w + x_];
                        let d = d0 + 2 * y * 2 * w + 2 * x_;
                        dst[d] = v;
                        dst[d + 1] = v;
                        dst[d + 2 * w] = v;
                        dst[d + 2 * w + 1] = v;
                    }
                }
            }
        }
        self.push(Op::Upsample2 { x }, out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let out = self.value(x).clone().reshaped(shape);
        self.push(Op::Reshape { x }, out)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let (flo, fhi) = (F::from_f64(lo), F::from_f64(hi));
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            if *o < flo {
                *o = flo;
            } else if *o > fhi {
                *o = fhi;
            }
        }
        self.push(Op::Clamp { x, lo, hi }, out)
    }

    /// `z = mu + exp(0.5 * logvar) * eps`. `eps` is treated as a constant
    /// (no gradient flows into it).
    pub fn reparam(&mut self, mu: NodeId, logvar: NodeId, eps: NodeId) -> NodeId {
        assert_eq!(self.value(mu).shape(), self.value(logvar).shape());
        assert_eq!(self.value(mu).shape(), self.value(eps).shape());
        let half = F::from_f64(0.5);
        let mut out = self.value(mu).clone();
        let lv = self.value(logvar).data();
        let ep = self.value(eps).data();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += (half * lv[i]).exp() * ep[i];
        }
        self.push(Op::Reparam { mu, logvar, eps }, out)
    }

    /// Per-sample KL(N(mu, e^logvar) || N(0, I)): `[N, D] -> [N]`,
    /// `0.5 * sum_d(mu^2 + e^lv - 1 - lv)`.
    pub fn kl_per_n(&mut self, mu: NodeId, logvar: NodeId) -> NodeId {
        let shape = self.value(mu).shape().to_vec();
        assert_eq!(shape, self.value(logvar).shape().to_vec());
        assert_eq!(shape.len(), 2, "kl_per_n expects [N,D], got {shape:?}");
        let (n, d) = (shape[0], shape[1]);
        let mut out = Tensor::zeros(&[n]);
        let mv = self.value(mu).data();
        let lv = self.value(logvar).data();
        for ni in 0..n {
            let mut acc = 0.0f64;
            for i in ni * d..(ni + 1) * d {
                let (m, l) = (mv[i].to_f64(), lv[i].to_f64());
                acc += m * m + l.exp() - 1.0 - l;
            }
            out.data_mut()[ni] = F::from_f64(0.5 * acc);
        }
        self.push(Op::KlPerN { mu, logvar }, out)
    }

    /// Per-sample scaled squared-difference sum: `[N, ...] -> [N]`,
    /// `scale * sum_rest (a - b)^2`.
    pub fn sq_sum_per_n(&mut self, a: NodeId, b: NodeId, scale: f64) -> NodeId {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape, self.value(b).shape().to_vec(), "sq_sum_per_n shape mismatch");
        let n = shape[0];
        let per = self.value(a).numel() / n;
        let mut out = Tensor::zeros(&[n]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for ni in 0..n {
            let mut acc = 0.0f64;
            for i in ni * per..(ni + 1) * per {
                let d = av[i].to_f64() - bv[i].to_f64();
                acc += d * d;
            }
            out.data_mut()[ni] = F::from_f64(scale * acc);
        }
        self.push(Op::SqSumPerN { a, b, scale }, out)
    }

    /// Per-sample cosine similarity of flattened features: `[N, ...] -> [N]`.
    /// Degenerate inputs (either norm below 1e-6) yield 0 with zero gradient.
    pub fn cos_sim_per_n(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape, self.value(b).shape().to_vec(), "cos_sim_per_n shape mismatch");
        let n = shape[0];
        let per = self.value(a).numel() / n;
        let mut out = Tensor::zeros(&[n]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for ni in 0..n {
            let (dot, na2, nb2) = dot_norms(&av[ni * per..(ni + 1) * per], &bv[ni * per..(ni + 1) * per]);
            let den = (na2 * nb2).sqrt();
            out.data_mut()[ni] = if den < COS_EPS { F::ZERO } else { F::from_f64(dot / den) };
        }
        self.push(Op::CosSimPerN { a, b }, out)
    }

    /// Elementwise `(1/alpha) * exp(alpha * x)`.
    pub fn exp_scale(&mut self, x: NodeId, alpha: f64) -> NodeId {
        assert!(alpha > 0.0, "exp_scale needs alpha > 0");
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = F::from_f64((alpha * o.to_f64()).exp() / alpha);
        }
        self.push(Op::ExpScaleEw { x, alpha }, out)
    }

    /// Elementwise linear combination of same-shape nodes plus a constant.
    pub fn lincomb(&mut self, terms: &[(NodeId, f64)], bias: f64) -> NodeId {
        assert!(!terms.is_empty());
        let shape = self.value(terms[0].0).shape().to_vec();
        for (t, _) in terms {
            assert_eq!(self.value(*t).shape(), &shape[..], "lincomb shape mismatch");
        }
        let mut out = Tensor::zeros(&shape);
        for (t, c) in terms {
            let cf = F::from_f64(*c);
            let src = self.value(*t).data();
            for (o, s) in out.data_mut().iter_mut().zip(src) {
                *o += cf * *s;
            }
        }
        let bf = F::from_f64(bias);
        for o in out.data_mut() {
            *o += bf;
        }
        self.push(Op::Lincomb { terms: terms.to_vec() }, out)
    }

    /// Mean over all elements, producing a rank-0 tensor.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let mean = self.value(x).sum_f64() / n as f64;
        self.push(Op::MeanAll { x }, Tensor::scalar(F::from_f64(mean)))
    }

    /// Reverse pass from `out` (must be a single-element node). Returns a
    /// gradient slot for every node reachable backward from `out`.
    pub fn backward(&self, out: NodeId) -> Grads<F> {
        assert_eq!(self.value(out).numel(), 1, "backward needs a scalar output");
        let mut slots: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[out.0] = Some(Tensor::from_vec(
            self.value(out).shape(),
            vec![F::ONE; 1],
        ));

        for i in (0..=out.0).rev() {
            let g = match slots[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    slots[i] = Some(g); // keep for the caller
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = self.conv2d_backward(*x, *w, &g, *stride, *pad);
                    accumulate(&mut slots, *x, dx);
                    accumulate(&mut slots, *w, dw);
                    accumulate(&mut slots, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = self.linear_backward(*x, *w, &g);
                    accumulate(&mut slots, *x, dx);
                    accumulate(&mut slots, *w, dw);
                    accumulate(&mut slots, *b, db);
                }
                Op::Silu { x } => {
                    let mut dx = g;
                    for (d, xv) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        let s = F::ONE / (F::ONE + (-*xv).exp());
                        *d = *d * (s * (F::ONE + *xv * (F::ONE - s)));
                    }
                    accumulate(&mut slots, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let y = self.nodes[i].value.data();
                    let mut dx = g;
                    for (d, yv) in dx.data_mut().iter_mut().zip(y) {
                        *d = *d * (*yv * (F::ONE - *yv));
                    }
                    accumulate(&mut slots, *x, dx);
                }
                Op::Upsample2 { x } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let mut dx = Tensor::zeros(&xs);
                    let gd = g.data();
                    for nc in 0..n * c {
                        let d0 = nc * h * w;
                        let s0 = nc * 4 * h * w;
                        for y in 0..h {
                            for x_ in 0..w {
                                let s = s0 + 2 * y * 2 * w + 2 * x_;
                                dx.data_mut()[d0 + y * w + x_] =
                                    gd[s] + gd[s + 1] + gd[s + 2 * w] + gd[s + 2 * w + 1];
                            }
                        }
                    }
                    accumulate(&mut slots, *x, dx);
                }
                Op::Reshape { x } => {
                    let dx = g.reshaped(self.value(*x).shape());
                    accumulate(&mut slots, *x, dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let (flo, fhi) = (F::from_f64(*lo), F::from_f64(*hi));
                    let mut dx = g;
                    for (d, xv) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if !(*xv > flo && *xv < fhi) {
                            *d = F::ZERO;
                        }
                    }
                    accumulate(&mut slots, *x, dx);
                }
                Op::Reparam { mu, logvar, eps } => {
                    let half = F::from_f64(0.5);
                    let lv = self.value(*logvar).data();
                    let ep = self.value(*eps).data();
                    let mut dlv = g.clone();
                    for (idx, d) in dlv.data_mut().iter_mut().enumerate() {
                        *d = *d * half * (half * lv[idx]).exp() * ep[idx];
                    }
                    accumulate(&mut slots, *logvar, dlv);
                    accumulate(&mut slots, *mu, g);
                }
                Op::KlPerN { mu, logvar } => {
                    let (n, d) = {
                        let s = self.value(*mu).shape();
                        (s[0], s[1])
                    };
                    let mv = self.value(*mu).data();
                    let lv = self.value(*logvar).data();
                    let mut dmu = Tensor::zeros(&[n, d]);
                    let mut dlv = Tensor::zeros(&[n, d]);
                    let half = F::from_f64(0.5);
                    for ni in 0..n {
                        let gn = g.data()[ni];
                        for idx in ni * d..(ni + 1) * d {
                            dmu.data_mut()[idx] = gn * mv[idx];
                            dlv.data_mut()[idx] = gn * half * (lv[idx].exp() - F::ONE);
                        }
                    }
                    accumulate(&mut slots, *mu, dmu);
                    accumulate(&mut slots, *logvar, dlv);
                }
                Op::SqSumPerN { a, b, scale } => {
                    let shape = self.value(*a).shape().to_vec();
                    let n = shape[0];
                    let per = self.value(*a).numel() / n;
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let mut da = Tensor::zeros(&shape);
                    let mut db = Tensor::zeros(&shape);
                    let two_scale = F::from_f64(2.0 * scale);
                    for ni in 0..n {
                        let gn = g.data()[ni];
                        for idx in ni * per..(ni + 1) * per {
                            let diff = av[idx] - bv[idx];
                            let v = gn * two_scale * diff;
                            da.data_mut()[idx] = v;
                            db.data_mut()[idx] = -v;
                        }
                    }
                    accumulate(&mut slots, *a, da);
                    accumulate(&mut slots, *b, db);
                }
                Op::CosSimPerN { a, b } => {
                    let shape = self.value(*a).shape().to_vec();
                    let n = shape[0];
                    let per = self.value(*a).numel() / n;
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let mut da = Tensor::zeros(&shape);
                    let mut db = Tensor::zeros(&shape);
                    for ni in 0..n {
                        let gn = g.data()[ni].to_f64();
                        let sa = &av[ni * per..(ni + 1) * per];
                        let sb = &bv[ni * per..(ni + 1) * per];
                        let (dot, na2, nb2) = dot_norms(sa, sb);
                        let den = (na2 * nb2).sqrt();
                        if den < COS_EPS {
                            continue;
                        }
                        let c = dot / den;
                        for j in 0..per {
                            let (aj, bj) = (sa[j].to_f64(), sb[j].to_f64());
                            da.data_mut()[ni * per + j] =
                                F::from_f64(gn * (bj / den - c * aj / na2));
                            db.data_mut()[ni * per + j] =
                                F::from_f64(gn * (aj / den - c * bj / nb2));
                        }
                    }
                    accumulate(&mut slots, *a, da);
                    accumulate(&mut slots, *b, db);
                }
                Op::ExpScaleEw { x, alpha } => {
                    let mut dx = g;
                    for (d, xv) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *d = *d * F::from_f64((alpha * xv.to_f64()).exp());
                    }
                    accumulate(&mut slots, *x, dx);
                }
                Op::Lincomb { terms } => {
                    for (t, c) in terms {
                        let cf = F::from_f64(*c);
                        let mut dt = g.clone();
                        for d in dt.data_mut() {
                            *d = *d * cf;
                        }
                        accumulate(&mut slots, *t, dt);
                    }
                }
                Op::MeanAll { x } => {
                    let n = self.value(*x).numel();
                    let gv = g.data()[0] * F::from_f64(1.0 / n as f64);
                    let dx = Tensor::from_vec(
                        self.value(*x).shape(),
                        vec![gv; n],
                    );
                    accumulate(&mut slots, *x, dx);
                }
            }
        }
        Grads { slots }
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        g: &Tensor<F>,
        stride: usize,
        pad: usize,
    ) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (cin, h, wd) = (xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let gs = g.shape();
        let (ho, wo) = (gs[2], gs[3]);
        let k = cin * kh * kw;
        let m = ho * wo;

        let mut dx = Tensor::zeros(&xs);
        let mut dw = Tensor::zeros(&ws);
        let mut db = Tensor::zeros(&[cout]);

        // Parallel over samples: each worker recomputes its im2col buffer and
        // produces private dW/db partials plus a disjoint dX slice; partials
        // are then summed serially in sample order so the result does not
        // depend on thread scheduling.
        let xdat = self.value(x).data();
        let wdat = self.value(w).data();
        let gdat = g.data();
        let partials: Vec<(Vec<F>, Vec<F>)> = dx
            .data_mut()
            .par_chunks_mut(cin * h * wd)
            .enumerate()
            .map_init(
                || (vec![F::ZERO; k * m], vec![F::ZERO; k * m]),
                |(buf, dbuf), (ni, dx_slice)| {
                let mut dw_local = vec![F::ZERO; cout * k];
                let mut db_local = vec![F::ZERO; cout];
                im2col(
                    &xdat[ni * cin * h * wd..(ni + 1) * cin * h * wd],
                    cin, h, wd, kh, kw, stride, pad, ho, wo, buf,
                );
                let gslice = &gdat[ni * cout * m..(ni + 1) * cout * m];
                unsafe {
                    // dW_local = dOut * buf^T
                    F::gemm(
                        cout, m, k, F::ONE,
                        gslice.as_ptr(), m as isize, 1,
                        buf.as_ptr(), 1, m as isize,
                        F::ZERO,
                        dw_local.as_mut_ptr(), k as isize, 1,
                    );
                    // dBuf = W^T * dOut
                    F::gemm(
                        k, cout, m, F::ONE,
                        wdat.as_ptr(), 1, k as isize,
                        gslice.as_ptr(), m as isize, 1,
                        F::ZERO,
                        dbuf.as_mut_ptr(), m as isize, 1,
                    );
                }
                for c in 0..cout {
                    let mut acc = F::ZERO;
                    for v in &gslice[c * m..(c + 1) * m] {
                        acc += *v;
                    }
                    db_local[c] = acc;
                }
                col2im_add(dbuf, dx_slice, cin, h, wd, kh, kw, stride, pad, ho, wo);
                (dw_local, db_local)
            },
            )
            .collect();
        for (dw_local, db_local) in partials {
            for (d, v) in dw.data_mut().iter_mut().zip(&dw_local) {
                *d += *v;
            }
            for (d, v) in db.data_mut().iter_mut().zip(&db_local) {
                *d += *v;
            }
        }
        (dx, dw, db)
    }

    fn linear_backward(&self, x: NodeId, w: NodeId, g: &Tensor<F>) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut dx = Tensor::zeros(&xs);
        let mut dw = Tensor::zeros(&ws);
        let mut db = Tensor::zeros(&[dout]);
        unsafe {
            // dX = dY * W
            F::gemm(
                n, dout, din, F::ONE,
                g.data().as_ptr(), dout as isize, 1,
                self.value(w).data().as_ptr(), din as isize, 1,
                F::ZERO,
                dx.data_mut().as_mut_ptr(), din as isize, 1,
            );
            // dW = dY^T * X
            F::gemm(
                dout, n, din, F::ONE,
                g.data().as_ptr(), 1, dout as isize,
                self.value(x).data().as_ptr(), din as isize, 1,
                F::ZERO,
                dw.data_mut().as_mut_ptr(), din as isize, 1,
            );
        }
        for ni in 0..n {
            for (dbv, gv) in db.data_mut().iter_mut().zip(&g.data()[ni * dout..(ni + 1) * dout]) {
                *dbv += *gv;
            }
        }
        (dx, dw, db)
    }
}

fn dot_norms<F: Scalar>(a: &[F], b: &[F]) -> (f64, f64, f64) {
    let (mut dot, mut na2, mut nb2) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..a.len() {
        let (av, bv) = (a[i].to_f64(), b[i].to_f64());
        dot += av * bv;
        na2 += av * av;
        nb2 += bv * bv;
    }
    (dot, na2, nb2)
}

fn accumulate<F: Scalar>(slots: &mut [Option<Tensor<F>>], id: NodeId, t: Tensor<F>) {
    match &mut slots[id.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), t.shape());
            for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += *v;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

/// Unfolds one image `[Cin, H, W]` into `[Cin*kh*kw, Ho*Wo]` (row-major),
/// zero-filling out-of-bounds taps.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &[F],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    buf: &mut [F],
) {
    let m = ho * wo;
    for c in 0..cin {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                let out = &mut buf[row * m..(row + 1) * m];
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        out[oy * wo..(oy + 1) * wo].fill(F::ZERO);
                        continue;
                    }
                    let base = c * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        out[oy * wo + ox] = if ix < 0 || ix >= w as isize {
                            F::ZERO
                        } else {
                            x[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds the unfolded gradient back onto the
/// image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_add<F: Scalar>(
    buf: &[F],
    dx: &mut [F],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let m = ho * wo;
    for c in 0..cin {
        for dy in 0..kh {
            for dxk in 0..kw {
                let row = (c * kh + dy) * kw + dxk;
                let src = &buf[row * m..(row + 1) * m];
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = c * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + dxk) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
