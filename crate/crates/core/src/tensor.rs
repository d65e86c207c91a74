//! Reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Tape`] records one node per differentiable op. Tensors are cheap
//! handles (shape + shared data + optional node id); constants stay off the
//! tape entirely, so inference and data generation pay no autodiff overhead.

use std::rc::Rc;

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<[f64]>,
    id: Option<NodeId>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn id(&self) -> Option<NodeId> {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a 2-d tensor");
        self.shape[1]
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!(self.len(), 1, "scalar() on tensor of len {}", self.len());
        self.data[0]
    }

    /// Reinterpret the shape; the data (and tape node) are shared.
    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape {:?} -> {:?}",
            self.shape,
            shape
        );
        Tensor { shape, data: self.data.clone(), id: self.id }
    }

    /// Detach from the tape: same values, no gradient flow.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), id: None }
    }

    pub fn constant(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor { shape, data: data.into(), id: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::constant(vec![0.0; n], shape)
    }

    pub fn assert_finite(&self, what: &str) {
        for (i, v) in self.data.iter().enumerate() {
            assert!(v.is_finite(), "non-finite value {v} at index {i} in {what}");
        }
    }
}

pub type BackFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct Node {
    len: usize,
    back: Option<BackFn>,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl GradStore {
    /// Accumulate a full-size gradient contribution into node `id`.
    /// `None` targets (constants) are ignored.
    pub fn accum(&mut self, id: Option<NodeId>, contrib: &[f64]) {
        let Some(id) = id else { return };
        debug_assert_eq!(contrib.len(), self.lens[id]);
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    /// Mutable access for ops that accumulate in place (rasterizer).
    pub fn accum_with(&mut self, id: Option<NodeId>, f: impl FnOnce(&mut [f64])) {
        let Some(id) = id else { return };
        let g = self.grads[id].get_or_insert_with(|| vec![0.0; self.lens[id]]);
        f(g);
    }

    pub fn get(&self, id: Option<NodeId>) -> Option<&[f64]> {
        self.grads[id?].as_deref()
    }
}

/// Single-owner record of the computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf: gradients are collected for it during backward.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = self.nodes.len();
        self.nodes.push(Node { len: data.len(), back: None });
        Tensor { shape, data: data.into(), id: Some(id) }
    }

    /// Record an op with a custom backward. Returns a tracked tensor.
    pub fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, back: BackFn) -> Tensor {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = self.nodes.len();
        self.nodes.push(Node { len: data.len(), back: Some(back) });
        Tensor { shape, data: data.into(), id: Some(id) }
    }

    fn emit(&mut self, data: Vec<f64>, shape: Vec<usize>, tracked: bool, back: impl FnOnce() -> BackFn) -> Tensor {
        if tracked {
            self.push(data, shape, back())
        } else {
            Tensor::constant(data, shape)
        }
    }

    /// Reverse sweep from a scalar root. Nodes are processed in reverse id
    /// order, which is a valid reverse topological order by construction.
    pub fn backward(&self, root: &Tensor) -> GradStore {
        let rid = root.id.expect("backward root must be on the tape");
        assert_eq!(root.len(), 1, "backward root must be scalar");
        let mut gs = GradStore {
            grads: self.nodes.iter().map(|_| None).collect(),
            lens: self.nodes.iter().map(|n| n.len).collect(),
        };
        gs.grads[rid] = Some(vec![1.0]);
        for id in (0..=rid).rev() {
            if gs.grads[id].is_some() {
                if let Some(back) = &self.nodes[id].back {
                    let g = gs.grads[id].take().unwrap();
                    back(&g, &mut gs);
                    gs.grads[id] = Some(g);
                }
            }
        }
        gs
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "add shape mismatch {:?} vs {:?}", a.shape, b.shape);
        let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
        let (ia, ib) = (a.id, b.id);
        self.emit(data, a.shape.clone(), ia.is_some() || ib.is_some(), || {
            Box::new(move |g, gs| {
                gs.accum(ia, g);
                gs.accum(ib, g);
            })
        })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "sub shape mismatch {:?} vs {:?}", a.shape, b.shape);
        let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x - y).collect();
        let (ia, ib) = (a.id, b.id);
        self.emit(data, a.shape.clone(), ia.is_some() || ib.is_some(), || {
            Box::new(move |g, gs| {
                gs.accum(ia, g);
                if ib.is_some() {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    gs.accum(ib, &neg);
                }
            })
        })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "mul shape mismatch {:?} vs {:?}", a.shape, b.shape);
        let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
        let (ia, ib) = (a.id, b.id);
        let (da, db) = (a.data.clone(), b.data.clone());
        self.emit(data, a.shape.clone(), ia.is_some() || ib.is_some(), || {
            Box::new(move |g, gs| {
                if ia.is_some() {
                    let c: Vec<f64> = g.iter().zip(db.iter()).map(|(gi, y)| gi * y).collect();
                    gs.accum(ia, &c);
                }
                if ib.is_some() {
                    let c: Vec<f64> = g.iter().zip(da.iter()).map(|(gi, x)| gi * x).collect();
                    gs.accum(ib, &c);
                }
            })
        })
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data.iter().map(|x| x * c).collect();
        let ia = a.id;
        self.emit(data, a.shape.clone(), ia.is_some(), || {
            Box::new(move |g, gs| {
                let v: Vec<f64> = g.iter().map(|x| x * c).collect();
                gs.accum(ia, &v);
            })
        })
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data.iter().map(|x| x + c).collect();
        let ia = a.id;
        self.emit(data, a.shape.clone(), ia.is_some(), || {
            Box::new(move |g, gs| gs.accum(ia, g))
        })
    }

    fn unary(
        &mut self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        // derivative as a function of (x, y=f(x))
        dfdx: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let out: Vec<f64> = a.data.iter().map(|&x| f(x)).collect();
        let ia = a.id;
        let xin = a.data.clone();
        let yout: Rc<[f64]> = out.clone().into();
        self.emit(out, a.shape.clone(), ia.is_some(), || {
            Box::new(move |g, gs| {
                let c: Vec<f64> = g
                    .iter()
                    .zip(xin.iter().zip(yout.iter()))
                    .map(|(gi, (&x, &y))| gi * dfdx(x, y))
                    .collect();
                gs.accum(ia, &c);
            })
        })
    }

    pub fn tanh(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, a: &Tensor) -> Tensor {
        // log(1+e^x), stable both directions
        self.unary(
            a,
            |x| if x > 30.0 { x } else { x.exp().ln_1p() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn gelu(&mut self, a: &Tensor) -> Tensor {
        const S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const K: f64 = 0.044715;
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (S * (x + K * x * x * x)).tanh()),
            |x, _| {
                let u = S * (x + K * x * x * x);
                let t = u.tanh();
                let du = S * (1.0 + 3.0 * K * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn abs(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn square(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn ln(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let s = tree_sum(&a.data);
        let ia = a.id;
        let n = a.len();
        self.emit(vec![s], vec![1], ia.is_some(), || {
            Box::new(move |g, gs| {
                let c = vec![g[0]; n];
                gs.accum(ia, &c);
            })
        })
    }

    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let n = a.len() as f64;
        let s = self.sum(a);
        self.scale(&s, 1.0 / n)
    }

    /// Mean over the last axis: [R, C] -> [R, 1].
    pub fn row_mean(&mut self, a: &Tensor) -> Tensor {
        let (r, c) = (a.rows(), a.cols());
        let data: Vec<f64> = (0..r)
            .map(|i| a.data[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let ia = a.id;
        self.emit(data, vec![r, 1], ia.is_some(), || {
            Box::new(move |g, gs| {
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let gi = g[i] / c as f64;
                    for j in 0..c {
                        out[i * c + j] = gi;
                    }
                }
                gs.accum(ia, &out);
            })
        })
    }

    /// Subtract a per-row column vector: [R, C] - [R, 1].
    pub fn sub_colvec(&mut self, a: &Tensor, v: &Tensor) -> Tensor {
        let (r, c) = (a.rows(), a.cols());
        assert_eq!(v.shape(), &[r, 1]);
        let data: Vec<f64> = (0..r * c).map(|i| a.data[i] - v.data[i / c]).collect();
        let (ia, iv) = (a.id, v.id);
        self.emit(data, a.shape.clone(), ia.is_some() || iv.is_some(), || {
            Box::new(move |g, gs| {
                gs.accum(ia, g);
                if iv.is_some() {
                    let mut gv = vec![0.0; r];
                    for i in 0..r {
                        gv[i] = -g[i * c..(i + 1) * c].iter().sum::<f64>();
                    }
                    gs.accum(iv, &gv);
                }
            })
        })
    }

    // ---- broadcast over rows ----

    /// x[R,C] + b[C] (bias add).
    pub fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Tensor {
        let (r, c) = (x.rows(), x.cols());
        assert_eq!(b.len(), c, "add_bias: {:?} + len-{}", x.shape, b.len());
        let data: Vec<f64> = (0..r * c).map(|i| x.data[i] + b.data[i % c]).collect();
        let (ix, ib) = (x.id, b.id);
        self.emit(data, x.shape.clone(), ix.is_some() || ib.is_some(), || {
            Box::new(move |g, gs| {
                gs.accum(ix, g);
                if ib.is_some() {
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                    gs.accum(ib, &gb);
                }
            })
        })
    }

    /// x[R,C] * s[C] (per-column scale broadcast over rows).
    pub fn mul_bias(&mut self, x: &Tensor, s: &Tensor) -> Tensor {
        let (r, c) = (x.rows(), x.cols());
        assert_eq!(s.len(), c, "mul_bias: {:?} * len-{}", x.shape, s.len());
        let data: Vec<f64> = (0..r * c).map(|i| x.data[i] * s.data[i % c]).collect();
        let (ix, is) = (x.id, s.id);
        let (dx, ds) = (x.data.clone(), s.data.clone());
        self.emit(data, x.shape.clone(), ix.is_some() || is.is_some(), || {
            Box::new(move |g, gs| {
                if ix.is_some() {
                    let c0: Vec<f64> = (0..r * c).map(|i| g[i] * ds[i % c]).collect();
                    gs.accum(ix, &c0);
                }
                if is.is_some() {
                    let mut gsv = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gsv[j] += g[i * c + j] * dx[i * c + j];
                        }
                    }
                    gs.accum(is, &gsv);
                }
            })
        })
    }

    // ---- matmul ----

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.matmul_impl(a, b, false, false)
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.matmul_impl(a, b, false, true)
    }

    /// aᵀ · b
    pub fn matmul_tn(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.matmul_impl(a, b, true, false)
    }

    fn matmul_impl(&mut self, a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert_eq!(a.shape.len(), 2, "matmul lhs must be 2-d");
        assert_eq!(b.shape.len(), 2, "matmul rhs must be 2-d");
        let (m, ka) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
        let (kb, n) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
        assert_eq!(
            ka, kb,
            "matmul inner dim mismatch: lhs {:?}{} rhs {:?}{}",
            a.shape,
            if ta { "ᵀ" } else { "" },
            b.shape,
            if tb { "ᵀ" } else { "" }
        );
        let k = ka;
        let data = gemm(m, k, n, &a.data, stride2(a.cols(), ta), &b.data, stride2(b.cols(), tb));
        let (ia, ib) = (a.id, b.id);
        let (da, db) = (a.data.clone(), b.data.clone());
        let (ash, bsh) = (a.shape.clone(), b.shape.clone());
        self.emit(data, vec![m, n], ia.is_some() || ib.is_some(), || {
            Box::new(move |g, gs| {
                // dC has shape m×n. Compute dA, dB in their stored layouts.
                if ia.is_some() {
                    let ga = if ta {
                        // A stored k×m: dA = Bᵀ·dCᵀ (if tb), else B·dCᵀ
                        if tb {
                            gemm(k, n, m, &db, (1, k as isize), g, (1, n as isize))
                        } else {
                            gemm(k, n, m, &db, (n as isize, 1), g, (1, n as isize))
                        }
                    } else {
                        // A stored m×k: dA = dC·B (if tb), else dC·Bᵀ
                        if tb {
                            gemm(m, n, k, g, (n as isize, 1), &db, (k as isize, 1))
                        } else {
                            gemm(m, n, k, g, (n as isize, 1), &db, (1, n as isize))
                        }
                    };
                    debug_assert_eq!(ga.len(), ash.iter().product::<usize>());
                    gs.accum(ia, &ga);
                }
                if ib.is_some() {
                    let gb = if tb {
                        // B stored n×k: dB = dCᵀ · A (if !ta) else dCᵀ·Aᵀ
                        if ta {
                            gemm(n, m, k, g, (1, n as isize), &da, (1, m as isize))
                        } else {
                            gemm(n, m, k, g, (1, n as isize), &da, (k as isize, 1))
                        }
                    } else {
                        // B stored k×n: dB = Aᵀ · dC (if !ta) else A·dC
                        if ta {
                            gemm(k, m, n, &da, (m as isize, 1), g, (n as isize, 1))
                        } else {
                            gemm(k, m, n, &da, (1, k as isize), g, (n as isize, 1))
                        }
                    };
                    debug_assert_eq!(gb.len(), bsh.iter().product::<usize>());
                    gs.accum(ib, &gb);
                }
            })
        })
    }

    // ---- softmax / layernorm ----

    /// Row softmax over the last axis with optional per-column key mask
    /// (masked columns get exactly zero weight). Max-subtraction for
    /// stability.
    pub fn softmax_masked(&mut self, x: &Tensor, mask: Option<&[bool]>) -> Tensor {
        let (r, c) = (x.rows(), x.cols());
        if let Some(m) = mask {
            assert_eq!(m.len(), c, "mask length must equal column count");
            assert!(m.iter().any(|&keep| keep), "softmax mask excludes every column");
        }
        let keep = |j: usize| mask.map_or(true, |m| m[j]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x.data[i * c..(i + 1) * c];
            let mx = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let ix = x.id;
        let y: Rc<[f64]> = out.clone().into();
        self.emit(out, x.shape.clone(), ix.is_some(), || {
            Box::new(move |g, gs| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let yi = &y[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yi[j] * (gi[j] - dot);
                    }
                }
                gs.accum(ix, &gx);
            })
        })
    }

    pub fn softmax(&mut self, x: &Tensor) -> Tensor {
        self.softmax_masked(x, None)
    }

    /// Fused scaled-dot-product attention: softmax(q kᵀ · scale) v with an
    /// optional key mask. Equivalent to composing matmul_nt, scale,
    /// softmax_masked and matmul, but the score matrix is recomputed in
    /// blocks during the backward pass instead of living on the tape, so
    /// memory stays O(block · keys) for arbitrarily long sequences.
    pub fn attention(
        &mut self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&[bool]>,
        scale: f64,
    ) -> Tensor {
        let (sq, d) = (q.rows(), q.cols());
        let (sk, dv) = (v.rows(), v.cols());
        assert_eq!(k.shape(), &[sk, d], "attention: k shape");
        if let Some(m) = mask {
            assert_eq!(m.len(), sk, "attention: mask length");
            assert!(m.iter().any(|&keep| keep), "attention: mask excludes every key");
        }
        const BLOCK: usize = 256;
        let mask_owned: Option<Vec<bool>> = mask.map(|m| m.to_vec());
        let softmax_block = move |qd: &[f64], kd: &[f64], r0: usize, rows: usize, m: &Option<Vec<bool>>| -> Vec<f64> {
            let mut s = gemm(rows, d, sk, &qd[r0 * d..(r0 + rows) * d], (d as isize, 1), kd, (1, d as isize));
            for row in s.chunks_mut(sk) {
                let mut mx = f64::NEG_INFINITY;
                for (j, val) in row.iter_mut().enumerate() {
                    *val *= scale;
                    if m.as_ref().map_or(true, |mm| mm[j]) {
                        mx = mx.max(*val);
                    }
                }
                let mut z = 0.0;
                for (j, val) in row.iter_mut().enumerate() {
                    if m.as_ref().map_or(true, |mm| mm[j]) {
                        *val = (*val - mx).exp();
                        z += *val;
                    } else {
                        *val = 0.0;
                    }
                }
                for val in row.iter_mut() {
                    *val /= z;
                }
            }
            s
        };
        let (qd, kd, vd) = (q.data.clone(), k.data.clone(), v.data.clone());
        let mut out = vec![0.0; sq * dv];
        let mut r0 = 0;
        while r0 < sq {
            let rows = BLOCK.min(sq - r0);
            let y = softmax_block(&qd, &kd, r0, rows, &mask_owned);
            let o = gemm(rows, sk, dv, &y, (sk as isize, 1), &vd, (dv as isize, 1));
            out[r0 * dv..(r0 + rows) * dv].copy_from_slice(&o);
            r0 += rows;
        }
        let (iq, ik, iv) = (q.id, k.id, v.id);
        self.emit(out, vec![sq, dv], iq.is_some() || ik.is_some() || iv.is_some(), || {
            Box::new(move |g, gs| {
                let mut dq = vec![0.0; sq * d];
                let mut dk = vec![0.0; sk * d];
                let mut dvv = vec![0.0; sk * dv];
                let mut r0 = 0;
                while r0 < sq {
                    let rows = BLOCK.min(sq - r0);
                    let y = softmax_block(&qd, &kd, r0, rows, &mask_owned);
                    let gb = &g[r0 * dv..(r0 + rows) * dv];
                    let dvb = gemm(sk, rows, dv, &y, (1, sk as isize), gb, (dv as isize, 1));
                    for (a, b) in dvv.iter_mut().zip(dvb) {
                        *a += b;
                    }
                    let dy = gemm(rows, dv, sk, gb, (dv as isize, 1), &vd, (1, dv as isize));
                    let mut ds = vec![0.0; rows * sk];
                    for i in 0..rows {
                        let yi = &y[i * sk..(i + 1) * sk];
                        let dyi = &dy[i * sk..(i + 1) * sk];
                        let dot: f64 = yi.iter().zip(dyi).map(|(a, b)| a * b).sum();
                        for j in 0..sk {
                            ds[i * sk + j] = yi[j] * (dyi[j] - dot) * scale;
                        }
                    }
                    let dqb = gemm(rows, sk, d, &ds, (sk as isize, 1), &kd, (d as isize, 1));
                    dq[r0 * d..(r0 + rows) * d].copy_from_slice(&dqb);
                    let dkb = gemm(
                        sk,
                        rows,
                        d,
                        &ds,
                        (1, sk as isize),
                        &qd[r0 * d..(r0 + rows) * d],
                        (d as isize, 1),
                    );
                    for (a, b) in dk.iter_mut().zip(dkb) {
                        *a += b;
                    }
                    r0 += rows;
                }
                gs.accum(iq, &dq);
                gs.accum(ik, &dk);
                gs.accum(iv, &dvv);
            })
        })
    }

    /// Per-row layer normalization followed by affine (gamma, beta over the
    /// last axis).
    pub fn layernorm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let (r, c) = (x.rows(), x.cols());
        assert_eq!(gamma.len(), c);
        assert_eq!(beta.len(), c);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &x.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let out: Vec<f64> =
            (0..r * c).map(|i| xhat[i] * gamma.data[i % c] + beta.data[i % c]).collect();
        let (ix, ig, ib) = (x.id, gamma.id, beta.id);
        let dg = gamma.data.clone();
        let xhat: Rc<[f64]> = xhat.into();
        let inv_std: Rc<[f64]> = inv_std.into();
        self.emit(out, x.shape.clone(), ix.is_some() || ig.is_some() || ib.is_some(), || {
            Box::new(move |g, gs| {
                if ib.is_some() {
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                    gs.accum(ib, &gb);
                }
                if ig.is_some() {
                    let mut gg = vec![0.0; c];
                    for i in 0..r * c {
                        gg[i % c] += g[i] * xhat[i];
                    }
                    gs.accum(ig, &gg);
                }
                if ix.is_some() {
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        // dl/dxhat
                        let gh: Vec<f64> =
                            (0..c).map(|j| g[i * c + j] * dg[j]).collect();
                        let xh = &xhat[i * c..(i + 1) * c];
                        let m1: f64 = gh.iter().sum::<f64>() / c as f64;
                        let m2: f64 = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] = inv_std[i] * (gh[j] - m1 - xh[j] * m2);
                        }
                    }
                    gs.accum(ix, &gx);
                }
            })
        })
    }

    /// Row-wise L2 normalization (unit quaternions and the like).
    pub fn normalize_rows(&mut self, x: &Tensor, eps: f64) -> Tensor {
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &x.data[i * c..(i + 1) * c];
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let ix = x.id;
        let y: Rc<[f64]> = out.clone().into();
        let norms: Rc<[f64]> = norms.into();
        self.emit(out, x.shape.clone(), ix.is_some(), || {
            Box::new(move |g, gs| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let yi = &y[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = (gi[j] - yi[j] * dot) / norms[i];
                    }
                }
                gs.accum(ix, &gx);
            })
        })
    }

    // ---- indexing / assembly ----

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Tensor {
        let (r, c) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows index {i} out of {r}");
            data.extend_from_slice(&x.data[i * c..(i + 1) * c]);
        }
        let ix = x.id;
        let idx: Rc<[usize]> = idx.into();
        self.emit(data, vec![idx.len(), c], ix.is_some(), || {
            Box::new(move |g, gs| {
                let mut gx = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[k * c + j];
                    }
                }
                gs.accum(ix, &gx);
            })
        })
    }

    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let c = parts[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols(), c, "concat_rows column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows();
        }
        let ids: Vec<(Option<NodeId>, usize)> = parts.iter().map(|p| (p.id, p.len())).collect();
        let tracked = ids.iter().any(|(i, _)| i.is_some());
        self.emit(data, vec![rows, c], tracked, || {
            Box::new(move |g, gs| {
                let mut off = 0;
                for &(id, len) in &ids {
                    gs.accum(id, &g[off..off + len]);
                    off += len;
                }
            })
        })
    }

    /// Contiguous row slice [start, start+len).
    pub fn narrow_rows(&mut self, x: &Tensor, start: usize, len: usize) -> Tensor {
        let (r, c) = (x.rows(), x.cols());
        assert!(start + len <= r);
        let data = x.data[start * c..(start + len) * c].to_vec();
        let ix = x.id;
        self.emit(data, vec![len, c], ix.is_some(), || {
            Box::new(move |g, gs| {
                let mut gx = vec![0.0; r * c];
                gx[start * c..(start + len) * c].copy_from_slice(g);
                gs.accum(ix, &gx);
            })
        })
    }

    /// Column slice [start, start+len) of a 2-d tensor.
    pub fn slice_cols(&mut self, x: &Tensor, start: usize, len: usize) -> Tensor {
        let (r, c) = (x.rows(), x.cols());
        assert!(start + len <= c);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.data[i * c + start..i * c + start + len]);
        }
        let ix = x.id;
        self.emit(data, vec![r, len], ix.is_some(), || {
            Box::new(move |g, gs| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                gs.accum(ix, &gx);
            })
        })
    }

    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let r = parts[0].rows();
        let ctot: usize = parts.iter().map(|p| p.cols()).sum();
        for p in parts {
            assert_eq!(p.rows(), r, "concat_cols row mismatch");
        }
        let mut data = Vec::with_capacity(r * ctot);
        for i in 0..r {
            for p in parts {
                let c = p.cols();
                data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
            }
        }
        let ids: Vec<(Option<NodeId>, usize)> = parts.iter().map(|p| (p.id, p.cols())).collect();
        let tracked = ids.iter().any(|(i, _)| i.is_some());
        self.emit(data, vec![r, ctot], tracked, || {
            Box::new(move |g, gs| {
                for (pi, &(id, c)) in ids.iter().enumerate() {
                    if id.is_none() {
                        continue;
                    }
                    let off: usize = ids[..pi].iter().map(|&(_, cc)| cc).sum();
                    let mut gp = vec![0.0; r * c];
                    for i in 0..r {
                        gp[i * c..(i + 1) * c]
                            .copy_from_slice(&g[i * ctot + off..i * ctot + off + c]);
                    }
                    gs.accum(id, &gp);
                }
            })
        })
    }

    /// Row-wise max over index buckets; gradient routes to the argmax.
    /// `buckets[k]` lists the input rows pooled into output row k.
    pub fn pool_rows_max(&mut self, x: &Tensor, buckets: &[Vec<usize>]) -> Tensor {
        let c = x.cols();
        let r_in = x.rows();
        let mut data = vec![f64::NEG_INFINITY; buckets.len() * c];
        let mut argmax = vec![0usize; buckets.len() * c];
        for (k, bucket) in buckets.iter().enumerate() {
            assert!(!bucket.is_empty(), "empty pool bucket {k}");
            for &i in bucket {
                assert!(i < r_in);
                for j in 0..c {
                    let v = x.data[i * c + j];
                    if v > data[k * c + j] {
                        data[k * c + j] = v;
                        argmax[k * c + j] = i;
                    }
                }
            }
        }
        let ix = x.id;
        let argmax: Rc<[usize]> = argmax.into();
        let rows_out = buckets.len();
        self.emit(data, vec![rows_out, c], ix.is_some(), || {
            Box::new(move |g, gs| {
                let mut gx = vec![0.0; r_in * c];
                for k in 0..rows_out {
                    for j in 0..c {
                        gx[argmax[k * c + j] * c + j] += g[k * c + j];
                    }
                }
                gs.accum(ix, &gx);
            })
        })
    }
}

fn stride2(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

/// m×k · k×n with explicit strides on both operands; returns row-major m×n.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize)) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Fixed-order pairwise sum; deterministic and more accurate than a naive
/// left fold.
pub fn tree_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => tree_sum(&v[..n / 2]) + tree_sum(&v[n / 2..]),
    }
}
