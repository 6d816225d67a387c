//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Nodes that
//! do not depend on a tracked leaf carry no backward closure, so data-only
//! computations cost nothing extra. Shape mismatches inside an op are
//! programming errors and panic; public module entry points validate shapes
//! and return [`crate::Error::Dimension`] instead.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{gemm_rm, Array, Real};

type BackwardFn<T> = Box<dyn Fn(&Array<T>, &mut GradSink<'_, T>)>;

struct Node<T: Real> {
    value: Rc<Array<T>>,
    tracked: bool,
    leaf: bool,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a, T: Real> {
    grads: &'a mut [Option<Array<T>>],
    tracked: &'a [bool],
    shapes: &'a [Vec<usize>],
}

impl<T: Real> GradSink<'_, T> {
    #[inline]
    pub fn wants(&self, id: usize) -> bool {
        self.tracked[id]
    }

    /// Mutable gradient buffer for node `id`, zero-initialised on first use.
    pub fn slot(&mut self, id: usize) -> &mut Array<T> {
        let shape = &self.shapes[id];
        self.grads[id].get_or_insert_with(|| Array::zeros(shape))
    }

    pub fn add(&mut self, id: usize, g: Array<T>) {
        if !self.tracked[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients of tracked leaves after [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Array<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Array<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is wanted (parameters, inputs under test).
    pub fn leaf(&self, value: Array<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Rc::new(value),
            tracked: true,
            leaf: true,
            backward: None,
        })
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Array<T>) -> Var<'_, T> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Array<T>>) -> Var<'_, T> {
        self.push_node(Node {
            value,
            tracked: false,
            leaf: true,
            backward: None,
        })
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn is_tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Array<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Record an op result. The closure is kept only if a parent is tracked.
    pub(crate) fn record<F>(&self, value: Array<T>, parents: &[usize], backward: F) -> Var<'_, T>
    where
        F: Fn(&Array<T>, &mut GradSink<'_, T>) + 'static,
    {
        self.record_rc(Rc::new(value), parents, backward)
    }

    pub(crate) fn record_rc<F>(
        &self,
        value: Rc<Array<T>>,
        parents: &[usize],
        backward: F,
    ) -> Var<'_, T>
    where
        F: Fn(&Array<T>, &mut GradSink<'_, T>) + 'static,
    {
        let tracked = parents.iter().any(|&p| self.is_tracked(p));
        self.push_node(Node {
            value,
            tracked,
            leaf: false,
            backward: if tracked {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward needs a scalar loss"
        );
        let tracked: Vec<bool> = nodes.iter().map(|n| n.tracked).collect();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Array<T>>> = (0..nodes.len()).map(|_| None).collect();
        if tracked[loss.id] {
            grads[loss.id] = Some(Array::full(nodes[loss.id].value.shape(), T::ONE));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if node.leaf {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Some(bw) = &node.backward {
                let mut sink = GradSink {
                    grads: &mut grads,
                    tracked: &tracked,
                    shapes: &shapes,
                };
                bw(&g, &mut sink);
            }
        }
        Gradients { grads }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Array<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.is_tracked(self.id)
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Self {
        self.tape.constant_rc(self.value())
    }

    fn unary(
        self,
        out: Array<T>,
        bw: impl Fn(&Array<T>, &Array<T>, &Array<T>) -> Array<T> + 'static,
    ) -> Self {
        // bw(grad_out, input, output) -> grad_in
        let x = self.value();
        let id = self.id;
        let out = Rc::new(out);
        let out_c = out.clone();
        self.tape.record_rc(out, &[id], move |g, sink| {
            if sink.wants(id) {
                sink.add(id, bw(g, &x, &out_c));
            }
        })
    }

    // ---- elementwise binary -------------------------------------------------

    fn check_same(&self, o: &Self, op: &str) -> (Rc<Array<T>>, Rc<Array<T>>) {
        let a = self.value();
        let b = o.value();
        assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
        (a, b)
    }

    pub fn add(self, o: Self) -> Self {
        let (a, b) = self.check_same(&o, "add");
        let (ia, ib) = (self.id, o.id);
        self.tape
            .record(a.zip_map(&b, |x, y| x + y), &[ia, ib], move |g, s| {
                if s.wants(ia) {
                    s.add(ia, g.clone());
                }
                if s.wants(ib) {
                    s.add(ib, g.clone());
                }
            })
    }

    pub fn sub(self, o: Self) -> Self {
        let (a, b) = self.check_same(&o, "sub");
        let (ia, ib) = (self.id, o.id);
        self.tape
            .record(a.zip_map(&b, |x, y| x - y), &[ia, ib], move |g, s| {
                if s.wants(ia) {
                    s.add(ia, g.clone());
                }
                if s.wants(ib) {
                    s.add(ib, g.map(|v| -v));
                }
            })
    }

    pub fn mul(self, o: Self) -> Self {
        let (a, b) = self.check_same(&o, "mul");
        let (ia, ib) = (self.id, o.id);
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.record(out, &[ia, ib], move |g, s| {
            if s.wants(ia) {
                s.add(ia, g.zip_map(&b, |gv, y| gv * y));
            }
            if s.wants(ib) {
                s.add(ib, g.zip_map(&a, |gv, x| gv * x));
            }
        })
    }

    pub fn div(self, o: Self) -> Self {
        let (a, b) = self.check_same(&o, "div");
        let (ia, ib) = (self.id, o.id);
        let out = a.zip_map(&b, |x, y| x / y);
        self.tape.record(out, &[ia, ib], move |g, s| {
            if s.wants(ia) {
                s.add(ia, g.zip_map(&b, |gv, y| gv / y));
            }
            if s.wants(ib) {
                let mut gb = g.zip_map(&a, |gv, x| gv * x);
                for (v, &y) in gb.data_mut().iter_mut().zip(b.data()) {
                    *v = -*v / (y * y);
                }
                s.add(ib, gb);
            }
        })
    }

    // ---- elementwise unary --------------------------------------------------

    pub fn neg(self) -> Self {
        self.scale(-T::ONE)
    }

    pub fn scale(self, c: T) -> Self {
        let out = self.value().map(|v| v * c);
        self.unary(out, move |g, _, _| g.map(|v| v * c))
    }

    pub fn add_scalar(self, c: T) -> Self {
        let out = self.value().map(|v| v + c);
        self.unary(out, |g, _, _| g.clone())
    }

    pub fn abs(self) -> Self {
        let out = self.value().map(|v| v.abs());
        self.unary(out, |g, x, _| {
            g.zip_map(x, |gv, xv| {
                if xv > T::ZERO {
                    gv
                } else if xv < T::ZERO {
                    -gv
                } else {
                    T::ZERO
                }
            })
        })
    }

    pub fn square(self) -> Self {
        let out = self.value().map(|v| v * v);
        self.unary(out, |g, x, _| g.zip_map(x, |gv, xv| T::c(2.0) * gv * xv))
    }

    pub fn ln(self) -> Self {
        let out = self.value().map(|v| v.ln());
        self.unary(out, |g, x, _| g.zip_map(x, |gv, xv| gv / xv))
    }

    pub fn tanh(self) -> Self {
        let out = self.value().map(|v| v.tanh());
        self.unary(out, |g, _, y| {
            g.zip_map(y, |gv, yv| gv * (T::ONE - yv * yv))
        })
    }

    pub fn relu(self) -> Self {
        self.leaky_relu(T::ZERO)
    }

    pub fn leaky_relu(self, slope: T) -> Self {
        let out = self
            .value()
            .map(|v| if v > T::ZERO { v } else { v * slope });
        self.unary(out, move |g, x, _| {
            g.zip_map(x, |gv, xv| if xv > T::ZERO { gv } else { gv * slope })
        })
    }

    /// Clamp into `[lo, hi]`; gradient flows only where the input was inside.
    pub fn clamp(self, lo: T, hi: T) -> Self {
        let out = self.value().map(|v| v.max(lo).min(hi));
        self.unary(out, move |g, x, _| {
            g.zip_map(x, |gv, xv| if xv >= lo && xv <= hi { gv } else { T::ZERO })
        })
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let id = self.id;
        self.tape
            .record(Array::scalar(x.sum()), &[id], move |g, s| {
                if s.wants(id) {
                    s.add(id, Array::full(&shape, g.item()));
                }
            })
    }

    pub fn mean(self) -> Self {
        let n = T::c(self.value().len() as f64);
        self.sum().scale(T::ONE / n)
    }

    // ---- shape --------------------------------------------------------------

    pub fn reshape(self, shape: &[usize]) -> Self {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape).expect("reshape");
        let id = self.id;
        self.tape.record(out, &[id], move |g, s| {
            if s.wants(id) {
                s.add(id, g.clone().reshape(&old).expect("reshape"));
            }
        })
    }

    pub fn transpose2(self) -> Self {
        let out = self.value().transpose2().expect("transpose2 on 2-D");
        let id = self.id;
        self.tape.record(out, &[id], move |g, s| {
            if s.wants(id) {
                s.add(id, g.transpose2().expect("2-D"));
            }
        })
    }

    /// Concatenate 4-D vars along the channel axis.
    pub fn concat_channels(parts: &[Self]) -> Self {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<Rc<Array<T>>> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = vals[0].dims4().expect("4-D");
        let chans: Vec<usize> = vals
            .iter()
            .map(|v| {
                let (n2, c, h2, w2) = v.dims4().expect("4-D");
                assert!(
                    n2 == n && h2 == h && w2 == w,
                    "concat_channels: shape mismatch"
                );
                c
            })
            .collect();
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Array::zeros(&[n, ctot, h, w]);
        for b in 0..n {
            let mut off = 0;
            for (v, &c) in vals.iter().zip(&chans) {
                let src = &v.data()[b * c * hw..(b + 1) * c * hw];
                out.data_mut()[(b * ctot + off) * hw..(b * ctot + off + c) * hw]
                    .copy_from_slice(src);
                off += c;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ids_c = ids.clone();
        tape.record(out, &ids, move |g, s| {
            let mut off = 0;
            for (&id, &c) in ids_c.iter().zip(&chans) {
                if s.wants(id) {
                    let mut gi = Array::zeros(&[n, c, h, w]);
                    for b in 0..n {
                        gi.data_mut()[b * c * hw..(b + 1) * c * hw].copy_from_slice(
                            &g.data()[(b * ctot + off) * hw..(b * ctot + off + c) * hw],
                        );
                    }
                    s.add(id, gi);
                }
                off += c;
            }
        })
    }

    // ---- matrix -------------------------------------------------------------

    /// `op(a) · op(b)` on 2-D vars, `op` transposing when the flag is set.
    pub fn matmul_t(self, o: Self, ta: bool, tb: bool) -> Self {
        let a = self.value();
        let b = o.value();
        let (ar, ac) = a.dims2().expect("2-D");
        let (br, bc) = b.dims2().expect("2-D");
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let mut out = Array::zeros(&[m, n]);
        gemm_rm(m, k, n, a.data(), ta, b.data(), tb, out.data_mut(), false);
        let (ia, ib) = (self.id, o.id);
        self.tape.record(out, &[ia, ib], move |g, s| {
            if s.wants(ia) {
                let ga = s.slot(ia);
                if ta {
                    gemm_rm(k, n, m, b.data(), tb, g.data(), true, ga.data_mut(), true);
                } else {
                    gemm_rm(m, n, k, g.data(), false, b.data(), !tb, ga.data_mut(), true);
                }
            }
            if s.wants(ib) {
                let gb = s.slot(ib);
                if tb {
                    gemm_rm(n, m, k, g.data(), true, a.data(), ta, gb.data_mut(), true);
                } else {
                    gemm_rm(k, m, n, a.data(), !ta, g.data(), false, gb.data_mut(), true);
                }
            }
        })
    }

    pub fn matmul(self, o: Self) -> Self {
        self.matmul_t(o, false, false)
    }

    /// Row-wise softmax of `inv_temp · m` on a 2-D var.
    pub fn row_softmax(self, inv_temp: T) -> Self {
        let x = self.value();
        let (r, k) = x.dims2().expect("2-D");
        let mut out = Array::zeros(&[r, k]);
        for i in 0..r {
            let row = &x.data()[i * k..(i + 1) * k];
            let o = &mut out.data_mut()[i * k..(i + 1) * k];
            let mx = row
                .iter()
                .fold(row[0] * inv_temp, |m, &v| m.max(v * inv_temp));
            let mut z = T::ZERO;
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v * inv_temp - mx).exp();
                z += *ov;
            }
            for ov in o.iter_mut() {
                *ov /= z;
            }
        }
        let out = Rc::new(out);
        let y = out.clone();
        let id = self.id;
        self.tape.record_rc(out, &[id], move |g, s| {
            if !s.wants(id) {
                return;
            }
            let gx = s.slot(id);
            for i in 0..r {
                let yr = &y.data()[i * k..(i + 1) * k];
                let gr = &g.data()[i * k..(i + 1) * k];
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((dst, &yv), &gv) in
                    gx.data_mut()[i * k..(i + 1) * k].iter_mut().zip(yr).zip(gr)
                {
                    *dst += inv_temp * yv * (gv - dot);
                }
            }
        })
    }

    /// Cosine similarity between the columns of `self` (C×P) and `o` (C×Q):
    /// `m[i,j] = <a_i, b_j> / (|a_i|·|b_j| + eps)`, clamped to `[-1, 1]`.
    pub fn cosine_corr(self, o: Self, eps: T) -> Self {
        let a = self.value();
        let b = o.value();
        let (c, p) = a.dims2().expect("2-D");
        let (c2, q) = b.dims2().expect("2-D");
        assert_eq!(c, c2, "cosine_corr: channel mismatch");
        let col_norms = |m: &Array<T>, cols: usize| -> Vec<T> {
            let mut n = vec![T::ZERO; cols];
            for ch in 0..c {
                for (j, nv) in n.iter_mut().enumerate() {
                    let v = m.data()[ch * cols + j];
                    *nv += v * v;
                }
            }
            n.into_iter().map(|v| v.sqrt()).collect()
        };
        let na = col_norms(&a, p);
        let nb = col_norms(&b, q);
        let mut dot = Array::zeros(&[p, q]);
        gemm_rm(
            p,
            c,
            q,
            a.data(),
            true,
            b.data(),
            false,
            dot.data_mut(),
            false,
        );
        let mut out = Array::zeros(&[p, q]);
        for i in 0..p {
            for j in 0..q {
                let v = dot.data()[i * q + j] / (na[i] * nb[j] + eps);
                out.data_mut()[i * q + j] = v.max(-T::ONE).min(T::ONE);
            }
        }
        let (ia, ib) = (self.id, o.id);
        self.tape.record(out, &[ia, ib], move |g, s| {
            let want_a = s.wants(ia);
            let want_b = s.wants(ib);
            if !want_a && !want_b {
                return;
            }
            // g1 = g / den ; h = g * dot / den^2 (zero where the clamp bit)
            let mut g1 = Array::zeros(&[p, q]);
            let mut h = Array::zeros(&[p, q]);
            for i in 0..p {
                for j in 0..q {
                    let den = na[i] * nb[j] + eps;
                    let d = dot.data()[i * q + j];
                    let raw = d / den;
                    if raw < -T::ONE || raw > T::ONE {
                        continue;
                    }
                    let gv = g.data()[i * q + j];
                    g1.data_mut()[i * q + j] = gv / den;
                    h.data_mut()[i * q + j] = gv * d / (den * den);
                }
            }
            if want_a {
                let mut coef = vec![T::ZERO; p];
                for (i, cv) in coef.iter_mut().enumerate() {
                    if na[i] > T::ZERO {
                        let acc: T = (0..q).map(|j| h.data()[i * q + j] * nb[j]).sum();
                        *cv = acc / na[i];
                    }
                }
                let ga = s.slot(ia);
                gemm_rm(
                    c,
                    q,
                    p,
                    b.data(),
                    false,
                    g1.data(),
                    true,
                    ga.data_mut(),
                    true,
                );
                for ch in 0..c {
                    for i in 0..p {
                        ga.data_mut()[ch * p + i] -= a.data()[ch * p + i] * coef[i];
                    }
                }
            }
            if want_b {
                let mut coef = vec![T::ZERO; q];
                for (j, cv) in coef.iter_mut().enumerate() {
                    if nb[j] > T::ZERO {
                        let acc: T = (0..p).map(|i| h.data()[i * q + j] * na[i]).sum();
                        *cv = acc / nb[j];
                    }
                }
                let gb = s.slot(ib);
                gemm_rm(
                    c,
                    p,
                    q,
                    a.data(),
                    false,
                    g1.data(),
                    false,
                    gb.data_mut(),
                    true,
                );
                for ch in 0..c {
                    for j in 0..q {
                        gb.data_mut()[ch * q + j] -= b.data()[ch * q + j] * coef[j];
                    }
                }
            }
        })
    }

    // ---- spatial ------------------------------------------------------------

    /// 2-D convolution (cross-correlation) with zero padding.
    pub fn conv2d(self, weight: Self, bias: Option<Self>, stride: usize, pad: usize) -> Self {
        let x = self.value();
        let w = weight.value();
        let (n, cin, h, wd) = x.dims4().expect("conv2d input 4-D");
        let (cout, cin2, kh, kw) = w.dims4().expect("conv2d weight 4-D");
        assert_eq!(
            cin, cin2,
            "conv2d: input has {cin} channels, weight expects {cin2}"
        );
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d: kernel larger than input"
        );
        let geo = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let kdim = cin * kh * kw;
        let howo = geo.ho * geo.wo;
        let mut out = Array::zeros(&[n, cout, geo.ho, geo.wo]);
        let mut cols = vec![T::ZERO; if geo.is_pointwise() { 0 } else { kdim * howo }];
        let bvals = bias.map(|b| b.value());
        for b in 0..n {
            let xin = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
            let src: &[T] = if geo.is_pointwise() {
                xin
            } else {
                im2col(xin, &geo, &mut cols);
                &cols
            };
            let o = &mut out.data_mut()[b * cout * howo..(b + 1) * cout * howo];
            gemm_rm(cout, kdim, howo, w.data(), false, src, false, o, false);
            if let Some(bv) = &bvals {
                for co in 0..cout {
                    let bb = bv.data()[co];
                    o[co * howo..(co + 1) * howo]
                        .iter_mut()
                        .for_each(|v| *v += bb);
                }
            }
        }
        let (ix, iw) = (self.id, weight.id);
        let ib = bias.map(|b| b.id);
        let mut parents = vec![ix, iw];
        parents.extend(ib);
        self.tape.record(out, &parents, move |g, s| {
            let want_x = s.wants(ix);
            let want_w = s.wants(iw);
            let mut cols = vec![T::ZERO; if geo.is_pointwise() { 0 } else { kdim * howo }];
            let mut gcols = vec![T::ZERO; if want_x { kdim * howo } else { 0 }];
            for b in 0..n {
                let gout = &g.data()[b * cout * howo..(b + 1) * cout * howo];
                if want_w {
                    let xin = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
                    let src: &[T] = if geo.is_pointwise() {
                        xin
                    } else {
                        im2col(xin, &geo, &mut cols);
                        &cols
                    };
                    let gw = s.slot(iw);
                    gemm_rm(
                        cout,
                        howo,
                        kdim,
                        gout,
                        false,
                        src,
                        true,
                        gw.data_mut(),
                        true,
                    );
                }
                if want_x {
                    if geo.is_pointwise() {
                        let gx = s.slot(ix);
                        let dst = &mut gx.data_mut()[b * cin * h * wd..(b + 1) * cin * h * wd];
                        gemm_rm(kdim, cout, howo, w.data(), true, gout, false, dst, true);
                    } else {
                        gemm_rm(
                            kdim,
                            cout,
                            howo,
                            w.data(),
                            true,
                            gout,
                            false,
                            &mut gcols,
                            false,
                        );
                        let gx = s.slot(ix);
                        let dst = &mut gx.data_mut()[b * cin * h * wd..(b + 1) * cin * h * wd];
                        col2im(&gcols, &geo, dst);
                    }
                }
                if let Some(ib) = ib {
                    if s.wants(ib) {
                        let gb = s.slot(ib);
                        for co in 0..cout {
                            let acc: T = gout[co * howo..(co + 1) * howo].iter().copied().sum();
                            gb.data_mut()[co] += acc;
                        }
                    }
                }
            }
        })
    }

    /// Per-sample, per-channel normalisation to zero mean and unit variance.
    pub fn instance_norm(self, eps: T) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("instance_norm 4-D");
        let hw = h * w;
        let inv_hw = T::ONE / T::c(hw as f64);
        let mut out = Array::zeros(&[n, c, h, w]);
        let mut inv_std = vec![T::ZERO; n * c];
        for pl in 0..n * c {
            let src = &x.data()[pl * hw..(pl + 1) * hw];
            let mean = src.iter().copied().sum::<T>() * inv_hw;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let is = T::ONE / (var + eps).sqrt();
            inv_std[pl] = is;
            for (o, &v) in out.data_mut()[pl * hw..(pl + 1) * hw].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        let out = Rc::new(out);
        let y = out.clone();
        let id = self.id;
        self.tape.record_rc(out, &[id], move |g, s| {
            if !s.wants(id) {
                return;
            }
            let gx = s.slot(id);
            for pl in 0..n * c {
                let gy = &g.data()[pl * hw..(pl + 1) * hw];
                let yy = &y.data()[pl * hw..(pl + 1) * hw];
                let mg = gy.iter().copied().sum::<T>() * inv_hw;
                let mgy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
                let is = inv_std[pl];
                for ((dst, &gv), &yv) in gx.data_mut()[pl * hw..(pl + 1) * hw]
                    .iter_mut()
                    .zip(gy)
                    .zip(yy)
                {
                    *dst += is * (gv - mg - yv * mgy);
                }
            }
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest2(self) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("4-D");
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = Array::zeros(&[n, c, h2, w2]);
        for pl in 0..n * c {
            let src = &x.data()[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out.data_mut()[pl * h2 * w2..(pl + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let id = self.id;
        self.tape.record(out, &[id], move |g, s| {
            if !s.wants(id) {
                return;
            }
            let gx = s.slot(id);
            for pl in 0..n * c {
                let gs = &g.data()[pl * h2 * w2..(pl + 1) * h2 * w2];
                let dst = &mut gx.data_mut()[pl * h * w..(pl + 1) * h * w];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[(y / 2) * w + xx / 2] += gs[y * w2 + xx];
                    }
                }
            }
        })
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(self) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("4-D");
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (h2, w2) = (h / 2, w / 2);
        let q = T::c(0.25);
        let mut out = Array::zeros(&[n, c, h2, w2]);
        for pl in 0..n * c {
            let src = &x.data()[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out.data_mut()[pl * h2 * w2..(pl + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * w2 + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
                }
            }
        }
        let id = self.id;
        self.tape.record(out, &[id], move |g, s| {
            if !s.wants(id) {
                return;
            }
            let gx = s.slot(id);
            for pl in 0..n * c {
                let gs = &g.data()[pl * h2 * w2..(pl + 1) * h2 * w2];
                let dst = &mut gx.data_mut()[pl * h * w..(pl + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] += gs[(y / 2) * w2 + xx / 2] * q;
                    }
                }
            }
        })
    }

    /// Separable linear resampling of every plane: `Y = A_rows · X · A_colsᵀ`.
    pub fn separable(self, rows: Rc<Array<T>>, cols: Rc<Array<T>>) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("4-D");
        let (ho, h2) = rows.dims2().expect("2-D");
        let (wo, w2) = cols.dims2().expect("2-D");
        assert!(
            h == h2 && w == w2,
            "separable: operator {ho}x{h2}/{wo}x{w2} vs plane {h}x{w}"
        );
        let mut out = Array::zeros(&[n, c, ho, wo]);
        let mut tmp = vec![T::ZERO; h * wo];
        for pl in 0..n * c {
            let src = &x.data()[pl * h * w..(pl + 1) * h * w];
            gemm_rm(h, w, wo, src, false, cols.data(), true, &mut tmp, false);
            let dst = &mut out.data_mut()[pl * ho * wo..(pl + 1) * ho * wo];
            gemm_rm(ho, h, wo, rows.data(), false, &tmp, false, dst, false);
        }
        let id = self.id;
        self.tape.record(out, &[id], move |g, s| {
            if !s.wants(id) {
                return;
            }
            let mut tmp = vec![T::ZERO; h * wo];
            let gx = s.slot(id);
            for pl in 0..n * c {
                let gs = &g.data()[pl * ho * wo..(pl + 1) * ho * wo];
                gemm_rm(h, ho, wo, rows.data(), true, gs, false, &mut tmp, false);
                let dst = &mut gx.data_mut()[pl * h * w..(pl + 1) * h * w];
                gemm_rm(h, wo, w, &tmp, false, cols.data(), false, dst, true);
            }
        })
    }

    /// Forward difference along width; the last column is zero.
    pub fn diff_x(self) -> Self {
        self.forward_diff(false)
    }

    /// Forward difference along height; the last row is zero.
    pub fn diff_y(self) -> Self {
        self.forward_diff(true)
    }

    fn forward_diff(self, along_rows: bool) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("4-D");
        let (step, valid): (usize, Box<dyn Fn(usize, usize) -> bool>) = if along_rows {
            (w, Box::new(move |y, _| y + 1 < h))
        } else {
            (1, Box::new(move |_, xx| xx + 1 < w))
        };
        let mut out = Array::zeros(&[n, c, h, w]);
        for pl in 0..n * c {
            let off = pl * h * w;
            for y in 0..h {
                for xx in 0..w {
                    if valid(y, xx) {
                        let i = off + y * w + xx;
                        out.data_mut()[i] = x.data()[i + step] - x.data()[i];
                    }
                }
            }
        }
        let id = self.id;
        self.tape.record(out, &[id], move |g, s| {
            if !s.wants(id) {
                return;
            }
            let gx = s.slot(id);
            for pl in 0..n * c {
                let off = pl * h * w;
                for y in 0..h {
                    for xx in 0..w {
                        let ok = if along_rows { y + 1 < h } else { xx + 1 < w };
                        if ok {
                            let i = off + y * w + xx;
                            let gv = g.data()[i];
                            gx.data_mut()[i] -= gv;
                            gx.data_mut()[i + step] += gv;
                        }
                    }
                }
            }
        })
    }
}

macro_rules! var_binop {
    ($tr:ident, $m:ident) => {
        impl<'t, T: Real> std::ops::$tr for Var<'t, T> {
            type Output = Var<'t, T>;
            fn $m(self, rhs: Self) -> Self::Output {
                Var::$m(self, rhs)
            }
        }
    };
}
var_binop!(Add, add);
var_binop!(Sub, sub);
var_binop!(Mul, mul);
var_binop!(Div, div);

impl<'t, T: Real> std::ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output range `[lo, hi)` of `ox` whose input column `ox*stride + kj - pad` is in bounds.
    fn valid_range(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride;
        // ox*s + k >= pad  ->  ox >= ceil((pad - k) / s)
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(s)
        };
        // ox*s + k - pad <= in_len - 1  ->  ox <= (in_len - 1 + pad - k) / s
        let hi = if in_len + self.pad < k + 1 {
            0
        } else {
            ((in_len - 1 + self.pad - k) / s + 1).min(out_len)
        };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let howo = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ki, g.ho, g.h);
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * howo..(row + 1) * howo];
                let (xlo, xhi) = g.valid_range(kj, g.wo, g.w);
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        drow.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let srow = &plane[iy * g.w..(iy + 1) * g.w];
                    drow[..xlo].iter_mut().for_each(|v| *v = T::ZERO);
                    drow[xhi..].iter_mut().for_each(|v| *v = T::ZERO);
                    if g.stride == 1 {
                        let start = xlo + kj - g.pad;
                        drow[xlo..xhi].copy_from_slice(&srow[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = srow[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let howo = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ki, g.ho, g.h);
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * howo..(row + 1) * howo];
                let (xlo, xhi) = g.valid_range(kj, g.wo, g.w);
                if xlo >= xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        drow[ox * g.stride + kj - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}
