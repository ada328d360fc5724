use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
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
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    Mean { input: Var, axes: Vec<usize> },
    SumAll(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat { inputs: Vec<Var>, axis: usize },
    LogSoftmax(Var),
    Reshape(Var),
    L2Normalize { input: Var, group: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass worth of recorded operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order; `backward` walks it once in reverse. A graph supports
/// exactly one `backward` call.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    check_finite: bool,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it required one.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that rejects any op producing NaN or infinity.
    pub fn checked() -> Self {
        Self {
            check_finite: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.check_finite {
            value.check_finite(name)?;
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.record("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.record("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.record("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| x * c);
        self.record("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| x + c);
        self.record("add_scalar", v, Op::AddScalar(a), &[a])
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        self.record("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// Adds `bias` (shape = trailing axis of `a`) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data.chunks_mut(b.len()) {
            row.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
        self.record("add_bias", v, Op::AddBias(a, bias), &[a, bias])
    }

    /// 2-D convolution of `input[N,C,H,W]` with `weight[O,C,KH,KW]` plus `bias[O]`,
    /// zero padding `pad` on every border.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(weight), stride, pad)?;
        if self.shape(bias) != [geom.o] {
            return Err(Error::shape("conv2d", self.shape(weight), self.shape(bias)));
        }
        let out = kernels::conv2d(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let v = Tensor::new(vec![geom.n, geom.o, geom.oh, geom.ow], out)?;
        self.record(
            "conv2d",
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        self.record("relu", v, Op::Relu(a), &[a])
    }

    /// Mean over `axes`; reduced axes are removed from the shape.
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = kernels::mean_axes(self.value(a), axes)?;
        let axes = kernels::validate_axes("mean", self.shape(a), axes)?;
        self.record("mean", v, Op::Mean { input: a, axes }, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.record("sum", v, Op::SumAll(a), &[a])
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = kernels::slice(self.value(a), axis, start, end)?;
        self.record("slice", v, Op::Slice { input: a, axis, start }, &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let v = kernels::concat(&parts, axis)?;
        self.record(
            "concat",
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = *t
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("log_softmax", "scalar input"))?;
        if cols == 0 {
            return Err(Error::invalid("log_softmax", "empty class axis"));
        }
        let v = Tensor {
            shape: t.shape().to_vec(),
            data: kernels::log_softmax(t.data(), cols),
        };
        self.record("log_softmax", v, Op::LogSoftmax(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.record("reshape", v, Op::Reshape(a), &[a])
    }

    /// Scales each block of trailing axes `from..` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var, from: usize) -> Result<Var> {
        let shape = self.shape(a);
        if from > shape.len() {
            return Err(Error::invalid("l2_normalize", format!("axis {from} out of range")));
        }
        let group: usize = shape[from..].iter().product();
        if group == 0 {
            return Err(Error::invalid("l2_normalize", "empty group"));
        }
        let v = Tensor {
            shape: shape.to_vec(),
            data: kernels::l2_normalize(self.value(a).data(), group),
        };
        self.record("l2_normalize", v, Op::L2Normalize { input: a, group }, &[a])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every trainable leaf receives a gradient (exactly zero when it does
    /// not influence `loss`). Calling this a second time on the same graph is
    /// an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward("graph already differentiated; re-run the forward pass".into()));
        }
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Backward(format!("unknown variable {}", loss.0)))?;
        if !node.value.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward("loss does not depend on any trainable leaf".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            // Interior adjoints are not part of the result.
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g.unwrap_or_else(|| vec![0.0; node.value.numel()]),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).zip(vb).for_each(|((x, gy), bv)| *x += gy * bv)
                });
                acc(*b, &mut |s| {
                    s.iter_mut().zip(g).zip(va).for_each(|((x, gy), av)| *x += gy * av)
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| kernels::matmul_bt_acc(g, vb, s, m, n, k));
                acc(*b, &mut |s| kernels::matmul_at_acc(va, g, s, m, k, n));
            }
            Op::AddBias(a, bias) => {
                acc(*a, &mut |s| add_into(s, g));
                let n = nodes[bias.0].value.numel();
                acc(*bias, &mut |s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let want = |v: &Var| nodes[v.0].requires_grad;
                let mut dx = want(input).then(|| vec![0.0; x.len()]);
                let mut dw = want(weight).then(|| vec![0.0; w.len()]);
                let mut db = want(bias).then(|| vec![0.0; geom.o]);
                kernels::conv2d_backward(x, w, g, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(d) = dx {
                    acc(*input, &mut |s| add_into(s, &d));
                }
                if let Some(d) = dw {
                    acc(*weight, &mut |s| add_into(s, &d));
                }
                if let Some(d) = db {
                    acc(*bias, &mut |s| add_into(s, &d));
                }
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(va)
                        .for_each(|((x, gy), av)| if *av > 0.0 { *x += gy })
                });
            }
            Op::Mean { input, axes } => {
                let shape = nodes[input.0].value.shape();
                acc(*input, &mut |s| kernels::mean_axes_backward(shape, axes, g, s));
            }
            Op::SumAll(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Slice { input, axis, start } => {
                let shape = nodes[input.0].value.shape();
                acc(*input, &mut |s| kernels::slice_backward(shape, *axis, *start, g, s));
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for v in inputs {
                    let shape = nodes[v.0].value.shape();
                    let len = shape[*axis];
                    let out_shape = nodes[idx].value.shape();
                    let part = slice_raw(g, out_shape, *axis, offset, offset + len);
                    acc(*v, &mut |s| add_into(s, &part));
                    offset += len;
                }
            }
            Op::LogSoftmax(a) => {
                let y = nodes[idx].value.data();
                let cols = *nodes[idx].value.shape().last().unwrap_or(&1);
                acc(*a, &mut |s| kernels::log_softmax_backward(y, g, cols, s));
            }
            Op::L2Normalize { input, group } => {
                let x = val(*input);
                acc(*input, &mut |s| kernels::l2_normalize_backward(x, g, *group, s));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn slice_raw(data: &[f64], shape: &[usize], axis: usize, start: usize, end: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        out.extend_from_slice(&data[(o * dim + start) * inner..(o * dim + end) * inner]);
    }
    out
}
