//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants or entries of a [`ParamSet`]; [`Tape::backward`] walks the tape in
//! reverse and sums gradients into a [`Grads`] buffer keyed by [`ParamId`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a trainable tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }
}

/// Gradient accumulators shaped like a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    values: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self { values: params.values.iter().map(|v| Tensor::zeros(v.rows(), v.cols())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn zero(&mut self) {
        self.values.iter_mut().for_each(|g| g.fill(T::zero()));
    }

    /// Elementwise `self += other`; used for the ordered shard reduction.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op<T> {
    Const,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Gather { table: Var, rows: Vec<usize> },
    Composite { rgb: Var, sigma: Var, deltas: Vec<T>, samples_per_ray: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Leaf bound to a trainable tensor.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Param(id), true)
    }

    /// Leaf holding a parameter's current value but excluded from differentiation.
    pub fn frozen(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        self.constant(params.get(id).clone())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let g = self.requires_grad(a);
        self.push(value, op, g)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(va.rows(), va.cols(), data);
        let g = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, op, g)
    }

    /// `x · w + b` with `x: n×in`, `w: in×out`, `b: 1×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = self.value(x).matmul(self.value(w));
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), [1, out.cols()], "bias shape");
            for r in 0..out.rows() {
                for (o, &bv) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o = *o + bv;
                }
            }
        }
        let g = self.requires_grad(x)
            || self.requires_grad(w)
            || b.is_some_and(|b| self.requires_grad(b));
        self.push(out, Op::Affine { x, w, b }, g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `log(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, T::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, T::cos, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |v| v + s, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = T::from_f64_lossy(self.value(a).sum_f64());
        let g = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = T::from_f64_lossy(v.sum_f64() / v.len().max(1) as f64);
        let g = self.requires_grad(a);
        self.push(Tensor::scalar(m), Op::Mean(a), g)
    }

    /// Column-wise concatenation of equally tall operands.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat row mismatch");
            let w = v.cols();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + w].copy_from_slice(v.row(r));
            }
            offset += w;
        }
        let g = parts.iter().any(|&p| self.requires_grad(p));
        self.push(out, Op::Concat(parts.to_vec()), g)
    }

    /// Selects `rows` of `table` (repetition allowed).
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(rows.len(), t.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        let g = self.requires_grad(table);
        self.push(out, Op::Gather { table, rows }, g)
    }

    /// Alpha-composites `samples_per_ray` consecutive samples per ray.
    ///
    /// `rgb` is `(rays·S)×3`, `sigma` is `(rays·S)×1` and `deltas` holds the
    /// interval length of every sample. Output is `rays×3` with black background.
    pub fn composite(&mut self, rgb: Var, sigma: Var, deltas: Vec<T>, samples_per_ray: usize) -> Var {
        let (c, s) = (self.value(rgb), self.value(sigma));
        assert_eq!(c.cols(), 3);
        assert_eq!(s.cols(), 1);
        assert_eq!(c.rows(), s.rows());
        assert_eq!(deltas.len(), s.rows());
        assert!(samples_per_ray > 0 && s.rows() % samples_per_ray == 0);
        let rays = s.rows() / samples_per_ray;
        let mut out = Tensor::zeros(rays, 3);
        for r in 0..rays {
            let mut trans = T::one();
            let mut acc = [T::zero(); 3];
            for i in r * samples_per_ray..(r + 1) * samples_per_ray {
                let e = (-(s.data()[i] * deltas[i])).exp();
                let w = trans * (T::one() - e);
                for (a, &cv) in acc.iter_mut().zip(c.row(i)) {
                    *a = *a + w * cv;
                }
                trans = trans * e;
            }
            out.row_mut(r).copy_from_slice(&acc);
        }
        let g = self.requires_grad(rgb) || self.requires_grad(sigma);
        self.push(out, Op::Composite { rgb, sigma, deltas, samples_per_ray }, g)
    }

    /// Backpropagates from the scalar `loss`, adding parameter gradients into `grads`.
    ///
    /// The tape is left intact, so calling this twice accumulates twice.
    pub fn backward(&self, loss: Var, grads: &mut Grads<T>) -> Result<()> {
        if loss.tape != self.id {
            return Err(Error::Usage("loss belongs to a different tape".into()));
        }
        let root = &self.nodes[loss.idx];
        if root.value.shape() != [1, 1] {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.needs_grad {
            return Err(Error::Usage("loss is detached from every trainable leaf".into()));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.idx).map(|_| None).collect();
        adj[loss.idx] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.idx).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads.get_mut(*id).add_assign(&g),
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, fan_in, fan_out) = (xv.rows(), xv.cols(), wv.cols());
                    if self.requires_grad(*x) {
                        let mut dx = Tensor::zeros(n, fan_in);
                        T::gemm(
                            n,
                            fan_out,
                            fan_in,
                            T::one(),
                            g.data(),
                            fan_out as isize,
                            1,
                            wv.data(),
                            1,
                            fan_out as isize,
                            T::zero(),
                            dx.data_mut(),
                            fan_in as isize,
                            1,
                        );
                        self.send(&mut adj, *x, dx);
                    }
                    if self.requires_grad(*w) {
                        let mut dw = Tensor::zeros(fan_in, fan_out);
                        T::gemm(
                            fan_in,
                            n,
                            fan_out,
                            T::one(),
                            xv.data(),
                            1,
                            fan_in as isize,
                            g.data(),
                            fan_out as isize,
                            1,
                            T::zero(),
                            dw.data_mut(),
                            fan_out as isize,
                            1,
                        );
                        self.send(&mut adj, *w, dw);
                    }
                    if let Some(b) = b.filter(|b| self.requires_grad(*b)) {
                        let mut acc = vec![0.0f64; fan_out];
                        for r in 0..n {
                            for (a, v) in acc.iter_mut().zip(g.row(r)) {
                                *a += v.as_f64();
                            }
                        }
                        self.send(&mut adj, b, Tensor::from_f64(1, fan_out, &acc));
                    }
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    let d = zip_map(&g, y, |gv, yv| if yv > T::zero() { gv } else { T::zero() });
                    self.send(&mut adj, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_map(&g, &node.value, |gv, y| gv * y * (T::one() - y));
                    self.send(&mut adj, *a, d);
                }
                Op::Softplus(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, x| gv * sigmoid(x));
                    self.send(&mut adj, *a, d);
                }
                Op::Sin(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, x| gv * x.cos());
                    self.send(&mut adj, *a, d);
                }
                Op::Cos(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, x| -gv * x.sin());
                    self.send(&mut adj, *a, d);
                }
                Op::Exp(a) => {
                    let d = zip_map(&g, &node.value, |gv, y| gv * y);
                    self.send(&mut adj, *a, d);
                }
                Op::Add(a, b) => {
                    self.send_if(&mut adj, *a, || g.clone());
                    self.send_if(&mut adj, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.send_if(&mut adj, *a, || g.clone());
                    self.send_if(&mut adj, *b, || g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    self.send_if(&mut adj, *a, || zip_map(&g, self.value(*b), |gv, bv| gv * bv));
                    self.send_if(&mut adj, *b, || zip_map(&g, self.value(*a), |gv, av| gv * av));
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.send(&mut adj, *a, g.map(|v| v * s));
                }
                Op::AddScalar(a) => self.send(&mut adj, *a, g),
                Op::Sum(a) | Op::Mean(a) => {
                    let src = self.value(*a);
                    let mut gv = g.get(0, 0);
                    if matches!(node.op, Op::Mean(_)) {
                        gv = gv / T::from_usize(src.len().max(1)).unwrap_or(T::one());
                    }
                    self.send(&mut adj, *a, Tensor::from_vec(src.rows(), src.cols(), vec![gv; src.len()]));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.requires_grad(p) {
                            let mut d = Tensor::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            self.send(&mut adj, p, d);
                        }
                        offset += w;
                    }
                }
                Op::Gather { table, rows } => {
                    let t = self.value(*table);
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (dv, &gv) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                            *dv = *dv + gv;
                        }
                    }
                    self.send(&mut adj, *table, d);
                }
                Op::Composite { rgb, sigma, deltas, samples_per_ray } => {
                    let (dc, ds) = composite_backward(
                        self.value(*rgb),
                        self.value(*sigma),
                        deltas,
                        *samples_per_ray,
                        &g,
                    );
                    self.send_if(&mut adj, *rgb, || dc);
                    self.send_if(&mut adj, *sigma, || ds);
                }
            }
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
        if !self.nodes[v.idx].needs_grad {
            return;
        }
        match &mut adj[v.idx] {
            Some(acc) => acc.add_assign(&d),
            slot @ None => *slot = Some(d),
        }
    }

    fn send_if(&self, adj: &mut [Option<Tensor<T>>], v: Var, d: impl FnOnce() -> Tensor<T>) {
        if self.nodes[v.idx].needs_grad {
            self.send(adj, v, d());
        }
    }
}

fn zip_map<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_vec(g.rows(), g.cols(), data)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    // log1p(exp(x)) without overflow for large x
    if x > T::from_f64_lossy(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Gradients of the composite op with respect to sample colors and densities.
fn composite_backward<T: Real>(
    rgb: &Tensor<T>,
    sigma: &Tensor<T>,
    deltas: &[T],
    spr: usize,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let n = sigma.rows();
    let mut dc = Tensor::zeros(n, 3);
    let mut ds = Tensor::zeros(n, 1);
    let mut trans_after = vec![T::zero(); spr];
    let mut weights = vec![T::zero(); spr];
    for r in 0..n / spr {
        let base = r * spr;
        let gr = g.row(r);
        let mut trans = T::one();
        for i in 0..spr {
            let e = (-(sigma.data()[base + i] * deltas[base + i])).exp();
            weights[i] = trans * (T::one() - e);
            trans = trans * e;
            trans_after[i] = trans;
        }
        // suffix holds Σ_{k>i} w_k c_k
        let mut suffix = [T::zero(); 3];
        for i in (0..spr).rev() {
            let c = rgb.row(base + i);
            let mut dsig = T::zero();
            for ch in 0..3 {
                dc.row_mut(base + i)[ch] = weights[i] * gr[ch];
                dsig = dsig + gr[ch] * (trans_after[i] * c[ch] - suffix[ch]);
            }
            ds.data_mut()[base + i] = dsig * deltas[base + i];
            for ch in 0..3 {
                suffix[ch] = suffix[ch] + weights[i] * c[ch];
            }
        }
    }
    (dc, ds)
}
