//! Gradient tape.
//!
//! Every operation appends a node holding its output value and, while the
//! tape is recording and some input requires a gradient, the rule needed to
//! push gradients back to its inputs. [`Tape::backward`] walks the nodes in
//! reverse record order. With recording switched off, nodes keep only their
//! values, which is how frozen teacher passes and evaluation run.

use crate::error::{dim_err, Error, Result};

use super::kernels::{self, numel, Broadcast, ConvGeometry};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softplus(Var),
    Square(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    AvgPool2(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    LogSumExp(Var),
    Pick(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    ConcatLast(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that never records backward rules.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    /// Runs `f` with recording off, restoring the previous mode afterwards.
    pub fn without_recording<T>(&mut self, f: impl FnOnce(&mut Tape) -> T) -> T {
        let prev = self.recording;
        self.recording = false;
        let out = f(self);
        self.recording = prev;
        out
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a tensor as-is; it participates in differentiation iff it
    /// requires a gradient and the tape is recording.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.clear_grad();
        if !self.recording {
            t.set_requires_grad(false);
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf copied from `t`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient accumulated on `v` by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs = self.recording && inputs.iter().any(|&i| self.requires_grad(i));
        let value = Tensor::new(&shape, data)
            .expect("kernel output matches its shape")
            .with_requires_grad(needs);
        let op = if needs { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let plan = Broadcast::new(self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; numel(&plan.out)];
        plan.for_each(|o, ia, ib| out[o] = f(da[ia], db[ib]));
        Ok(self.push(plan.out.clone(), out, op(a, b), &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().map(|&v| f(v)).collect();
        self.push(shape, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log. Negative inputs are a domain error; `log(0)` is `-inf`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of negative value {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("sum over axis {} of shape {:?}", axis, shape));
        }
        let outer = numel(&shape[..axis]);
        let extent = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..extent {
                let base = (o * extent + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out_shape, out, Op::SumAxis(a, axis), &[a]))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        self.push(Vec::new(), vec![total], Op::SumAll(a), &[a])
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let total: f64 = self.data(a).iter().sum();
        Ok(self.push(Vec::new(), vec![total / n as f64], Op::MeanAll(a), &[a]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of shapes {:?} and {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err!("batched matmul of shapes {:?} and {:?}", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            kernels::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        Ok(self.push(vec![bs, m, n], out, Op::BatchMatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(dim_err!("transpose of rank-{} tensor", shape.len()));
        }
        let out = kernels::transpose_last2(&shape, self.data(a));
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape.swap(r - 2, r - 1);
        Ok(self.push(out_shape, out, Op::TransposeLast(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(dim_err!(
                "cannot reshape {:?} into {:?}",
                self.shape(a),
                shape
            ));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        let out = kernels::conv2d_forward(&g, self.data(x), self.data(w));
        Ok(self.push(
            vec![g.n, g.f, g.ho, g.wo],
            out,
            Op::Conv2d { x, w, stride, pad },
            &[x, w],
        ))
    }

    /// 2x2 average pooling with stride 2 over `[N, C, H, W]`.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
            return Err(dim_err!("2x2 average pooling of shape {:?}", shape));
        }
        let (out_shape, out) = kernels::avg_pool2_forward(&shape, self.data(a));
        Ok(self.push(out_shape, out, Op::AvgPool2(a), &[a]))
    }

    /// `softmax(a / tau)` over the last axis.
    pub fn softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let shape = self.shape(a).to_vec();
        let cols = last_extent(&shape)?;
        let out = kernels::softmax_rows(self.data(a), cols, tau);
        Ok(self.push(shape, out, Op::Softmax(a, tau), &[a]))
    }

    /// `log softmax(a / tau)` over the last axis.
    pub fn log_softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let shape = self.shape(a).to_vec();
        let cols = last_extent(&shape)?;
        let out = kernels::log_softmax_rows(self.data(a), cols, tau);
        Ok(self.push(shape, out, Op::LogSoftmax(a, tau), &[a]))
    }

    /// `log sum exp` over the last axis, which is removed.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = last_extent(&shape)?;
        if cols == 0 {
            return Err(dim_err!("logsumexp over an empty axis, shape {:?}", shape));
        }
        let out = kernels::logsumexp_rows(self.data(a), cols);
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.push(out_shape, out, Op::LogSumExp(a), &[a]))
    }

    /// Picks one entry per row along the last axis; the axis is removed.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = last_extent(&shape)?;
        let rows = numel(&shape[..shape.len() - 1]);
        if index.len() != rows {
            return Err(dim_err!(
                "pick needs {} indices for shape {:?}, got {}",
                rows,
                shape,
                index.len()
            ));
        }
        if let Some((row, &bad)) = index.iter().enumerate().find(|(_, &i)| i >= cols) {
            return Err(Error::Data(format!(
                "index {bad} at row {row} out of range for {cols} columns"
            )));
        }
        let src = self.data(a);
        let out = index
            .iter()
            .enumerate()
            .map(|(r, &i)| src[r * cols + i])
            .collect();
        Ok(self.push(
            shape[..shape.len() - 1].to_vec(),
            out,
            Op::Pick(a, index.to_vec()),
            &[a],
        ))
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = kernels::select_rows(self.value(a), rows)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::SelectRows(a, rows.to_vec()), &[a]))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = kernels::concat_last(&values)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Reverse pass from a one-element `loss`. Gradients land on every node
    /// that requires one and are readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let out = nodes[i].value.data();
        // Accumulates into the gradient buffer of `v` if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].value.requires_grad() {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let plan = Broadcast::new(shp(*a), shp(*b)).expect("validated in forward");
                acc(*a, &mut |ga| plan.for_each(|o, ia, _| ga[ia] += g[o]));
                acc(*b, &mut |gb| plan.for_each(|o, _, ib| gb[ib] += sign * g[o]));
            }
            Op::Mul(a, b) => {
                let plan = Broadcast::new(shp(*a), shp(*b)).expect("validated in forward");
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| plan.for_each(|o, ia, ib| ga[ia] += g[o] * vb[ib]));
                acc(*b, &mut |gb| plan.for_each(|o, ia, ib| gb[ib] += g[o] * va[ia]));
            }
            Op::Div(a, b) => {
                let plan = Broadcast::new(shp(*a), shp(*b)).expect("validated in forward");
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| plan.for_each(|o, ia, ib| ga[ia] += g[o] / vb[ib]));
                acc(*b, &mut |gb| {
                    plan.for_each(|o, ia, ib| gb[ib] -= g[o] * va[ia] / (vb[ib] * vb[ib]))
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += c * gi;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }),
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        if va[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * out[k];
                }
            }),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] / va[k];
                    }
                })
            }
            Op::Sqrt(a) => acc(*a, &mut |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * 0.5 / out[k];
                }
            }),
            Op::Softplus(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * kernels::sigmoid(va[k]);
                    }
                })
            }
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += 2.0 * g[k] * va[k];
                    }
                })
            }
            Op::SumAxis(a, axis) => {
                let shape = shp(*a);
                let outer = numel(&shape[..*axis]);
                let extent = shape[*axis];
                let inner = numel(&shape[axis + 1..]);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for k in 0..extent {
                            let base = (o * extent + k) * inner;
                            for j in 0..inner {
                                ga[base + j] += g[o * inner + j];
                            }
                        }
                    }
                })
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanAll(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| kernels::gemm(m, n, k, g, false, vb, true, ga, 1.0));
                acc(*b, &mut |gb| kernels::gemm(k, m, n, va, true, g, false, gb, 1.0));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..bs {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &vb[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bs {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &va[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            1.0,
                        );
                    }
                });
            }
            Op::TransposeLast(a) => {
                let s = shp(i_var(i));
                let back = kernels::transpose_last2(s, g);
                acc(*a, &mut |ga| {
                    for (d, &gi) in ga.iter_mut().zip(&back) {
                        *d += gi;
                    }
                })
            }
            Op::Conv2d { x, w, stride, pad } => {
                let geo = ConvGeometry::new(shp(*x), shp(*w), *stride, *pad)
                    .expect("validated in forward");
                let need_x = nodes[x.0].value.requires_grad();
                let need_w = nodes[w.0].value.requires_grad();
                let mut dx = need_x.then(|| vec![0.0; nodes[x.0].value.len()]);
                let mut dw = need_w.then(|| vec![0.0; nodes[w.0].value.len()]);
                kernels::conv2d_backward(
                    &geo,
                    val(*x),
                    val(*w),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    acc(*x, &mut |gx| add_into(gx, &dx));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |gw| add_into(gw, &dw));
                }
            }
            Op::AvgPool2(a) => {
                let s = shp(*a);
                acc(*a, &mut |ga| kernels::avg_pool2_backward(s, g, ga))
            }
            Op::Softmax(a, tau) => {
                let cols = *shp(*a).last().unwrap_or(&1);
                acc(*a, &mut |ga| {
                    if cols == 0 {
                        return;
                    }
                    for ((gr, yr), dr) in g
                        .chunks_exact(cols)
                        .zip(out.chunks_exact(cols))
                        .zip(ga.chunks_exact_mut(cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..cols {
                            dr[k] += yr[k] * (gr[k] - dot) / tau;
                        }
                    }
                })
            }
            Op::LogSoftmax(a, tau) => {
                let cols = *shp(*a).last().unwrap_or(&1);
                acc(*a, &mut |ga| {
                    if cols == 0 {
                        return;
                    }
                    for ((gr, yr), dr) in g
                        .chunks_exact(cols)
                        .zip(out.chunks_exact(cols))
                        .zip(ga.chunks_exact_mut(cols))
                    {
                        let total: f64 = gr.iter().sum();
                        for k in 0..cols {
                            dr[k] += (gr[k] - yr[k].exp() * total) / tau;
                        }
                    }
                })
            }
            Op::LogSumExp(a) => {
                let cols = *shp(*a).last().unwrap_or(&1);
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for (r, (xr, dr)) in va
                        .chunks_exact(cols)
                        .zip(ga.chunks_exact_mut(cols))
                        .enumerate()
                    {
                        for k in 0..cols {
                            dr[k] += g[r] * (xr[k] - out[r]).exp();
                        }
                    }
                })
            }
            Op::Pick(a, index) => {
                let cols = *shp(*a).last().unwrap_or(&1);
                acc(*a, &mut |ga| {
                    for (r, &c) in index.iter().enumerate() {
                        ga[r * cols + c] += g[r];
                    }
                })
            }
            Op::SelectRows(a, rows) => {
                let row_len = numel(&shp(*a)[1..]);
                acc(*a, &mut |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..row_len {
                            ga[r * row_len + j] += g[k * row_len + j];
                        }
                    }
                })
            }
            Op::ConcatLast(parts) => {
                let out_shape = shp(i_var(i));
                let r = out_shape.len();
                let total_w = out_shape[r - 1];
                let rows = numel(&out_shape[..r - 1]);
                let mut offset = 0;
                for &p in parts {
                    let w = shp(p)[r - 1];
                    acc(p, &mut |gp| {
                        for row in 0..rows {
                            for j in 0..w {
                                gp[row * w + j] += g[row * total_w + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
        }
    }
}

fn i_var(i: usize) -> Var {
    Var(i)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

fn last_extent(shape: &[usize]) -> Result<usize> {
    shape
        .last()
        .copied()
        .ok_or_else(|| dim_err!("operation over the last axis of a rank-0 tensor"))
}
