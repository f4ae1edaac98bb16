//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation appends a node holding its eagerly computed value. The
//! backward pass does not write raw gradients: it *emits new tape ops* for
//! each vector-Jacobian product, so a gradient is itself a differentiable
//! graph expression. Calling [`Graph::grad`] on the output of a previous
//! `grad` therefore yields correct higher-order derivatives, which is what
//! lets an unrolled inner training loop be differentiated end to end.

use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::kernels;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

// Some payload fields are only consumed when the value is computed at push
// time, but they stay in the variant so a node fully describes its op.
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Detach(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    /// 1 where input > 0 else 0 (or `slope`); piecewise constant, no gradient.
    Step(Var, f64),
    Broadcast(Var),
    SumTo(Var),
    SumAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Matmul(Var, Var),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterRows(Var, Rc<Vec<usize>>, usize),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvXGrad { gy: Var, w: Var, stride: usize, pad: usize, hw: (usize, usize) },
    ConvWGrad { x: Var, gy: Var, stride: usize, pad: usize, khw: (usize, usize) },
    AvgPool(Var, usize),
    AvgUnpool(Var, usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    /// True when some parameter is an ancestor; gates backward traversal.
    rg: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, rg: bool) -> Var {
        self.nodes.push(Node { value, op, rg });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].rg
    }

    /// Value of a node.
    pub fn val(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-d (or single-element) node as a scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        debug_assert_eq!(a.len(), 1, "scalar() on node with {} elements", a.len());
        *a.iter().next().expect("non-empty")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- leaves -----------------------------------------------------------

    /// Non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    /// Identity with the gradient path severed.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.push(v, Op::Detach(a), false)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = self.coerce_pair(a, b);
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = self.coerce_pair(a, b);
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = self.coerce_pair(a, b);
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a, c), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::MulScalar(a, c), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        let rg = self.rg(a);
        self.push(v, Op::Recip(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    fn step(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { slope });
        self.push(v, Op::Step(a, slope), false)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    // ---- shape ------------------------------------------------------------

    /// NumPy-style broadcast to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        if self.shape(a) == shape {
            return a;
        }
        let v = self.nodes[a.0]
            .value
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| {
                panic!(
                    "cannot broadcast {:?} to {:?}",
                    self.nodes[a.0].value.shape(),
                    shape
                )
            })
            .to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Broadcast(a), rg)
    }

    /// Sum-reduce to a broadcast-compatible smaller `shape` (adjoint of broadcast).
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Var {
        if self.shape(a) == shape {
            return a;
        }
        let v = sum_to_value(&self.nodes[a.0].value, shape);
        let rg = self.rg(a);
        self.push(v, Op::SumTo(a), rg)
    }

    /// Sum of all elements; 0-d result.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut target: Vec<usize> = self.shape(a).to_vec();
        for &ax in axes {
            target[ax] = 1;
        }
        self.sum_to(a, &target)
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        let n: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes(a, axes);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        if self.shape(a) == shape {
            return a;
        }
        let v = self.nodes[a.0]
            .value
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape to {:?}: {e}", shape));
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(a);
        self.push(v, Op::Permute(a, axes.to_vec()), rg)
    }

    /// 2-d matrix transpose.
    pub fn t(&mut self, a: Var) -> Var {
        self.permute(a, &[1, 0])
    }

    // ---- linear algebra ----------------------------------------------------

    /// [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let a2 = av
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs must be 2-d");
        let b2 = bv
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs must be 2-d");
        let v = a2.dot(&b2).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    /// Select rows of a 2-d matrix (duplicates allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.ndim(), 2, "gather_rows wants a matrix");
        let cols = av.shape()[1];
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[idx.len(), cols]));
        for (r, &i) in idx.iter().enumerate() {
            out.index_axis_mut(Axis(0), r)
                .assign(&av.index_axis(Axis(0), i));
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, idx), rg)
    }

    /// Scatter-add rows of `a` into a zero matrix with `rows` rows (adjoint of gather).
    pub fn scatter_rows(&mut self, a: Var, idx: Rc<Vec<usize>>, rows: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.shape()[0], idx.len(), "scatter_rows index length");
        let cols = av.shape()[1];
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[rows, cols]));
        for (r, &i) in idx.iter().enumerate() {
            let src = av.index_axis(Axis(0), r);
            let mut dst = out.index_axis_mut(Axis(0), i);
            dst += &src;
        }
        let rg = self.rg(a);
        self.push(out, Op::ScatterRows(a, idx, rows), rg)
    }

    // ---- convolution family -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let wv = as4(&self.nodes[w.0].value);
        let v = kernels::conv2d(&xv.view(), &wv.view(), stride, pad).into_dyn();
        let rg = self.rg(x) || self.rg(w);
        self.push(v, Op::Conv2d { x, w, stride, pad }, rg)
    }

    /// Adjoint of conv2d in its input; doubles as transposed convolution.
    /// `w` layout [Cout,Cin,kh,kw] maps Cout-channel input to Cin-channel output
    /// of spatial size `hw`.
    pub fn conv2d_input_grad(
        &mut self,
        gy: Var,
        w: Var,
        stride: usize,
        pad: usize,
        hw: (usize, usize),
    ) -> Var {
        let gv = as4(&self.nodes[gy.0].value);
        let wv = as4(&self.nodes[w.0].value);
        let v = kernels::conv2d_input_grad(&gv.view(), &wv.view(), stride, pad, hw.0, hw.1)
            .into_dyn();
        let rg = self.rg(gy) || self.rg(w);
        self.push(v, Op::ConvXGrad { gy, w, stride, pad, hw }, rg)
    }

    pub fn conv2d_weight_grad(
        &mut self,
        x: Var,
        gy: Var,
        stride: usize,
        pad: usize,
        khw: (usize, usize),
    ) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let gv = as4(&self.nodes[gy.0].value);
        let v = kernels::conv2d_weight_grad(&xv.view(), &gv.view(), stride, pad, khw.0, khw.1)
            .into_dyn();
        let rg = self.rg(x) || self.rg(gy);
        self.push(v, Op::ConvWGrad { x, gy, stride, pad, khw }, rg)
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let v = kernels::avg_pool2d(&xv.view(), k).into_dyn();
        let rg = self.rg(x);
        self.push(v, Op::AvgPool(x, k), rg)
    }

    pub fn avg_unpool2d(&mut self, x: Var, k: usize) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let v = kernels::avg_unpool2d(&xv.view(), k).into_dyn();
        let rg = self.rg(x);
        self.push(v, Op::AvgUnpool(x, k), rg)
    }

    // ---- autodiff -----------------------------------------------------------

    /// Gradients of scalar `y` with respect to each var in `wrt`.
    ///
    /// The returned vars live on the same tape and are differentiable in turn;
    /// vars unreachable from `y` get zero gradients of matching shape.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Vec<Var> {
        let limit = y.0;
        let mut cot: Vec<Option<Var>> = vec![None; limit + 1];
        let seed = {
            let shape = self.nodes[y.0].value.raw_dim();
            self.constant(ArrayD::ones(shape))
        };
        cot[y.0] = Some(seed);

        for id in (0..=limit).rev() {
            let Some(g) = cot[id] else { continue };
            if !self.nodes[id].rg {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf | Op::Detach(_) | Op::Step(_, _) => {}
                Op::Add(a, b) => {
                    self.accum(&mut cot, a, g);
                    self.accum(&mut cot, b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut cot, a, g);
                    if self.rg(b) {
                        let n = self.neg(g);
                        self.accum(&mut cot, b, n);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let da = self.mul(g, b);
                        self.accum(&mut cot, a, da);
                    }
                    if self.rg(b) {
                        let db = self.mul(g, a);
                        self.accum(&mut cot, b, db);
                    }
                }
                Op::Neg(a) => {
                    let da = self.neg(g);
                    self.accum(&mut cot, a, da);
                }
                Op::AddScalar(a, _) => self.accum(&mut cot, a, g),
                Op::MulScalar(a, c) => {
                    let da = self.mul_scalar(g, c);
                    self.accum(&mut cot, a, da);
                }
                Op::Exp(a) => {
                    let da = self.mul(g, Var(id));
                    self.accum(&mut cot, a, da);
                }
                Op::Ln(a) => {
                    let r = self.recip(a);
                    let da = self.mul(g, r);
                    self.accum(&mut cot, a, da);
                }
                Op::Sqrt(a) => {
                    let r = self.recip(Var(id));
                    let half = self.mul_scalar(r, 0.5);
                    let da = self.mul(g, half);
                    self.accum(&mut cot, a, da);
                }
                Op::Recip(a) => {
                    let sq = self.mul(Var(id), Var(id));
                    let m = self.mul(g, sq);
                    let da = self.neg(m);
                    self.accum(&mut cot, a, da);
                }
                Op::Tanh(a) => {
                    let sq = self.mul(Var(id), Var(id));
                    let neg = self.neg(sq);
                    let one_minus = self.add_scalar(neg, 1.0);
                    let da = self.mul(g, one_minus);
                    self.accum(&mut cot, a, da);
                }
                Op::Relu(a) => {
                    let m = self.step(a, 0.0);
                    let da = self.mul(g, m);
                    self.accum(&mut cot, a, da);
                }
                Op::LeakyRelu(a, slope) => {
                    let m = self.step(a, slope);
                    let da = self.mul(g, m);
                    self.accum(&mut cot, a, da);
                }
                Op::Broadcast(a) => {
                    let shape = self.shape(a).to_vec();
                    let da = self.sum_to(g, &shape);
                    self.accum(&mut cot, a, da);
                }
                Op::SumTo(a) | Op::SumAll(a) => {
                    let shape = self.shape(a).to_vec();
                    let da = self.broadcast_to(g, &shape);
                    self.accum(&mut cot, a, da);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(a).to_vec();
                    let da = self.reshape(g, &shape);
                    self.accum(&mut cot, a, da);
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let da = self.permute(g, &inv);
                    self.accum(&mut cot, a, da);
                }
                Op::Matmul(a, b) => {
                    if self.rg(a) {
                        let bt = self.t(b);
                        let da = self.matmul(g, bt);
                        self.accum(&mut cot, a, da);
                    }
                    if self.rg(b) {
                        let at = self.t(a);
                        let db = self.matmul(at, g);
                        self.accum(&mut cot, b, db);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let rows = self.shape(a)[0];
                    let da = self.scatter_rows(g, idx, rows);
                    self.accum(&mut cot, a, da);
                }
                Op::ScatterRows(a, idx, _) => {
                    let da = self.gather_rows(g, idx);
                    self.accum(&mut cot, a, da);
                }
                Op::Conv2d { x, w, stride, pad } => {
                    if self.rg(x) {
                        let hw = (self.shape(x)[2], self.shape(x)[3]);
                        let dx = self.conv2d_input_grad(g, w, stride, pad, hw);
                        self.accum(&mut cot, x, dx);
                    }
                    if self.rg(w) {
                        let khw = (self.shape(w)[2], self.shape(w)[3]);
                        let dw = self.conv2d_weight_grad(x, g, stride, pad, khw);
                        self.accum(&mut cot, w, dw);
                    }
                }
                Op::ConvXGrad { gy, w, stride, pad, .. } => {
                    if self.rg(gy) {
                        let dgy = self.conv2d(g, w, stride, pad);
                        self.accum(&mut cot, gy, dgy);
                    }
                    if self.rg(w) {
                        let khw = (self.shape(w)[2], self.shape(w)[3]);
                        let dw = self.conv2d_weight_grad(g, gy, stride, pad, khw);
                        self.accum(&mut cot, w, dw);
                    }
                }
                Op::ConvWGrad { x, gy, stride, pad, .. } => {
                    if self.rg(x) {
                        let hw = (self.shape(x)[2], self.shape(x)[3]);
                        let dx = self.conv2d_input_grad(gy, g, stride, pad, hw);
                        self.accum(&mut cot, x, dx);
                    }
                    if self.rg(gy) {
                        let dgy = self.conv2d(x, g, stride, pad);
                        self.accum(&mut cot, gy, dgy);
                    }
                }
                Op::AvgPool(x, k) => {
                    let dx = self.avg_unpool2d(g, k);
                    self.accum(&mut cot, x, dx);
                }
                Op::AvgUnpool(x, k) => {
                    let dx = self.avg_pool2d(g, k);
                    self.accum(&mut cot, x, dx);
                }
            }
        }

        wrt.iter()
            .map(|w| {
                cot.get(w.0).copied().flatten().unwrap_or_else(|| {
                    let shape = self.nodes[w.0].value.raw_dim();
                    self.constant(ArrayD::zeros(shape))
                })
            })
            .collect()
    }

    fn accum(&mut self, cot: &mut [Option<Var>], target: Var, g: Var) {
        if !self.rg(target) {
            return;
        }
        cot[target.0] = Some(match cot[target.0] {
            Some(prev) => self.add(prev, g),
            None => g,
        });
    }

    /// Insert broadcasts so binary elementwise ops see equal shapes.
    fn coerce_pair(&mut self, a: Var, b: Var) -> (Var, Var) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            return (a, b);
        }
        let target = broadcast_shape(&sa, &sb);
        let a2 = self.broadcast_to(a, &target);
        let b2 = self.broadcast_to(b, &target);
        (a2, b2)
    }
}

fn as4(a: &ArrayD<f64>) -> ndarray::Array4<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("expected a 4-d tensor")
        .to_owned()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Reduce `a` down to `shape` by summing broadcast axes.
fn sum_to_value(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut v = a.to_owned();
    while v.ndim() > shape.len() {
        v = v.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && v.shape()[ax] != 1 {
            let summed = v.sum_axis(Axis(ax));
            v = summed.insert_axis(Axis(ax));
        }
    }
    assert_eq!(v.shape(), shape, "sum_to target not broadcast-compatible");
    v
}
