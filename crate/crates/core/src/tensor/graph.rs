use super::kernels::{self, MatView};
use super::{numel, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Affine { x: Var, scale: f64 },
    MatMul(Var, Var),
    Conv1d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
    },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    L2Norm { x: Var, axis: usize },
    Reshape(Var),
    Squash { x: Var, eps: f64 },
    Embedding { table: Var, indices: Vec<usize> },
    BatchedMatVec { w: Var, u: Var },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only populated on leaves.
    grad: Option<Vec<f64>>,
}

/// Append-only tape of primitive ops. Nodes are stored in creation order,
/// which is a valid topological order since every op's inputs already exist.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`. Vars pointing past
    /// the new end become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a leaf that copies `t`, honoring its `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Adds a leaf that always participates in differentiation.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Adds a non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "item() on non-scalar node {:?}", n.shape);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Adds the gradient accumulated on leaf `v` into `target`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: op_name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; numel(&out_shape)];
            let stra = kernels::broadcast_strides(&sa, &out_shape);
            let strb = kernels::broadcast_strides(&sb, &out_shape);
            kernels::for_each_broadcast(&out_shape, &stra, &strb, |o, i, j| out[o] = f(va[i], vb[j]));
            out
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out_shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).iter().map(|v| scale * v + shift).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Affine { x, scale }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            self.value(a),
            MatView::dense(m, k),
            self.value(b),
            MatView::dense(k, n),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Valid convolution of `input[L × Cin]` with `kernels[K × Cin × Cout]`
    /// plus `bias[Cout]`.
    pub fn conv1d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernels), self.shape(bias));
        if si.len() != 2 || sk.len() != 3 || sk[1] != si[1] || sb != [sk[2]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: si.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv1d",
                msg: "stride must be positive".into(),
            });
        }
        let (len, cin, k, cout) = (si[0], si[1], sk[0], sk[2]);
        if len < k {
            return Err(TensorError::SequenceTooShort { len, window: k });
        }
        let out = kernels::conv1d_forward(
            self.value(input),
            len,
            cin,
            self.value(kernels),
            k,
            cout,
            self.value(bias),
            stride,
        );
        let out_len = kernels::conv1d_out_len(len, k, stride);
        let rg = self.rg(&[input, kernels, bias]);
        Ok(self.push(
            vec![out_len, cout],
            out,
            Op::Conv1d {
                input,
                kernels,
                bias,
                stride,
            },
            rg,
        ))
    }

    /// Max pooling along axis 0 of `x[L × C]`, stride equal to `window`.
    /// Trailing rows that do not fill a window are dropped.
    pub fn max_pool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || window == 0 {
            return Err(TensorError::Invalid {
                op: "max_pool1d",
                msg: format!("expected rank-2 input and positive window, got {s:?} / {window}"),
            });
        }
        let (len, ch) = (s[0], s[1]);
        if len < window {
            return Err(TensorError::SequenceTooShort { len, window });
        }
        let (out, argmax) = kernels::maxpool1d(self.value(x), len, ch, window);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len / window, ch], out, Op::MaxPool1d { x, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 }).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Sigmoid(x), rg)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange {
                op,
                axis,
                rank: s.len(),
            });
        }
        Ok(kernels::split_axis(s, axis))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("softmax", x, axis)?;
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| v[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (v[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x, axis }, rg))
    }

    fn reduce(&mut self, op_name: &'static str, x: Var, axis: usize, f: impl Fn(&[f64]) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (outer, n, inner) = self.check_axis(op_name, x, axis)?;
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = v[o * n * inner + j * inner + i];
                }
                out.push(f(&buf));
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        Ok((shape, out))
    }

    /// Sum over `axis`; the axis is removed from the result shape.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce("sum", x, axis, |b| b.iter().sum())?;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Sum { x, axis }, rg))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce("mean", x, axis, |b| b.iter().sum::<f64>() / b.len() as f64)?;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Mean { x, axis }, rg))
    }

    /// Euclidean norm over `axis`.
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce("l2_norm", x, axis, |b| b.iter().map(|v| v * v).sum::<f64>().sqrt())?;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::L2Norm { x, axis }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![total], Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if numel(new_shape) != numel(s) {
            return Err(TensorError::ElementCount {
                from: s.to_vec(),
                to: new_shape.to_vec(),
                from_len: numel(s),
                to_len: numel(new_shape),
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(new_shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Capsule squashing over the last axis:
    /// `v = |s|² / (1 + |s|²) · s / sqrt(|s|² + eps)`.
    pub fn squash(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        let d = *s.last().ok_or(TensorError::AxisOutOfRange {
            op: "squash",
            axis: 0,
            rank: 0,
        })?;
        let v = self.value(x);
        let mut out = Vec::with_capacity(v.len());
        if d > 0 {
            for cap in v.chunks_exact(d) {
                let q: f64 = cap.iter().map(|c| c * c).sum();
                let h = squash_factor(q, eps);
                out.extend(cap.iter().map(|c| h * c));
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(s.to_vec(), out, Op::Squash { x, eps }, rg))
    }

    /// Row lookup: output row `t` is `table[indices[t]]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("table must be rank 2, got {s:?}"),
            });
        }
        let (rows, dim) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![indices.len(), dim],
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row matrix-vector product: `w[N × J × O × I]` applied to
    /// `u[N × I]` gives `out[n, j] = w[n, j] · u[n]`, shape `[N × J × O]`.
    pub fn batched_matvec(&mut self, w: Var, u: Var) -> Result<Var> {
        let (sw, su) = (self.shape(w), self.shape(u));
        if sw.len() != 4 || su.len() != 2 || sw[0] != su[0] || sw[3] != su[1] {
            return Err(TensorError::ShapeMismatch {
                op: "batched_matvec",
                lhs: sw.to_vec(),
                rhs: su.to_vec(),
            });
        }
        let (n, j, o, i) = (sw[0], sw[1], sw[2], sw[3]);
        let (wv, uv) = (self.value(w), self.value(u));
        let mut out = vec![0.0; n * j * o];
        for r in 0..n {
            let ur = &uv[r * i..(r + 1) * i];
            for (row, slot) in wv[r * j * o * i..(r + 1) * j * o * i]
                .chunks_exact(i)
                .zip(&mut out[r * j * o..(r + 1) * j * o])
            {
                *slot = row.iter().zip(ur).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(&[w, u]);
        Ok(self.push(vec![n, j, o], out, Op::BatchedMatVec { w, u }, rg))
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against fixed
    /// targets, computed from the logits for stability.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let out = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - y * z + (-z.abs()).exp().ln_1p())
            .collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            self.shape(logits).to_vec(),
            out,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to every
    /// reachable differentiable leaf; repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: ln.shape.clone(),
            });
        }
        if !ln.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let out_shape = &node.shape;
                let stra = kernels::broadcast_strides(&nodes[a.0].shape, out_shape);
                let strb = kernels::broadcast_strides(&nodes[b.0].shape, out_shape);
                let (da, db): (fn(f64, f64) -> f64, fn(f64, f64) -> f64) = match node.op {
                    Op::Add(..) => (|_, _| 1.0, |_, _| 1.0),
                    Op::Sub(..) => (|_, _| 1.0, |_, _| -1.0),
                    Op::Mul(..) => (|_, y| y, |x, _| x),
                    _ => (|_, y| 1.0 / y, |x, y| -x / (y * y)),
                };
                acc(a, &mut |ga| {
                    kernels::for_each_broadcast(out_shape, &stra, &strb, |o, i, j| {
                        ga[i] += g[o] * da(va[i], vb[j]);
                    })
                });
                acc(b, &mut |gb| {
                    kernels::for_each_broadcast(out_shape, &stra, &strb, |o, i, j| {
                        gb[j] += g[o] * db(va[i], vb[j]);
                    })
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += scale * d));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gv = MatView::dense(m, n);
                acc(*a, &mut |ga| {
                    kernels::gemm(g, gv, &nodes[b.0].value, MatView::dense(k, n).t(), ga, 1.0)
                });
                acc(*b, &mut |gb| {
                    kernels::gemm(&nodes[a.0].value, MatView::dense(m, k).t(), g, gv, gb, 1.0)
                });
            }
            Op::Conv1d {
                input,
                kernels: kern,
                bias,
                stride,
            } => {
                let (si, sk) = (&nodes[input.0].shape, &nodes[kern.0].shape);
                let (len, cin, k, cout) = (si[0], si[1], sk[0], sk[2]);
                let vin = &nodes[input.0].value;
                let vk = &nodes[kern.0].value;
                acc(*input, &mut |gi| {
                    kernels::conv1d_backward(vin, len, cin, vk, k, cout, *stride, g, Some(gi), None, None)
                });
                acc(*kern, &mut |gk| {
                    kernels::conv1d_backward(vin, len, cin, vk, k, cout, *stride, g, None, Some(gk), None)
                });
                acc(*bias, &mut |gb| {
                    kernels::conv1d_backward(vin, len, cin, vk, k, cout, *stride, g, None, None, Some(gb))
                });
            }
            Op::MaxPool1d { x, argmax } => {
                acc(*x, &mut |gx| {
                    for (&src, d) in argmax.iter().zip(g) {
                        gx[src] += d;
                    }
                });
            }
            Op::Relu(x) => {
                let vx = &nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((a, &v), d) in gx.iter_mut().zip(vx).zip(g) {
                        if v > 0.0 {
                            *a += d;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for ((a, &y), d) in gx.iter_mut().zip(y).zip(g) {
                        *a += d * y * (1.0 - y);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = kernels::split_axis(&node.shape, *axis);
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } | Op::L2Norm { x, axis } => {
                let (outer, n, inner) = kernels::split_axis(&nodes[x.0].shape, *axis);
                let vx = &nodes[x.0].value;
                let y = &node.value;
                let op = &node.op;
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            for j in 0..n {
                                let at = o * n * inner + j * inner + i;
                                gx[at] += match op {
                                    Op::Sum { .. } => g[r],
                                    Op::Mean { .. } => g[r] / n as f64,
                                    _ if y[r] > 0.0 => g[r] * vx[at] / y[r],
                                    _ => 0.0,
                                };
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += d));
            }
            Op::Squash { x, eps } => {
                let d = *node.shape.last().unwrap();
                let vx = &nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((s, gs), up) in vx.chunks_exact(d).zip(gx.chunks_exact_mut(d)).zip(g.chunks_exact(d)) {
                        let q: f64 = s.iter().map(|c| c * c).sum();
                        let h = squash_factor(q, *eps);
                        let dh = squash_factor_derivative(q, *eps);
                        let dot: f64 = s.iter().zip(up).map(|(a, b)| a * b).sum();
                        for ((o, &sv), &u) in gs.iter_mut().zip(s).zip(up) {
                            *o += h * u + 2.0 * dh * dot * sv;
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let dim = nodes[table.0].shape[1];
                acc(*table, &mut |gt| {
                    for (t, &row) in indices.iter().enumerate() {
                        gt[row * dim..(row + 1) * dim]
                            .iter_mut()
                            .zip(&g[t * dim..(t + 1) * dim])
                            .for_each(|(a, d)| *a += d);
                    }
                });
            }
            Op::BatchedMatVec { w, u } => {
                let sw = &nodes[w.0].shape;
                let (n, j, o, i) = (sw[0], sw[1], sw[2], sw[3]);
                let (vw, vu) = (&nodes[w.0].value, &nodes[u.0].value);
                acc(*w, &mut |gw| {
                    for r in 0..n {
                        let ur = &vu[r * i..(r + 1) * i];
                        for (row_idx, row) in gw[r * j * o * i..(r + 1) * j * o * i].chunks_exact_mut(i).enumerate() {
                            let d = g[r * j * o + row_idx];
                            row.iter_mut().zip(ur).for_each(|(a, b)| *a += d * b);
                        }
                    }
                });
                acc(*u, &mut |gu| {
                    for r in 0..n {
                        let gur = &mut gu[r * i..(r + 1) * i];
                        for (row_idx, row) in vw[r * j * o * i..(r + 1) * j * o * i].chunks_exact(i).enumerate() {
                            let d = g[r * j * o + row_idx];
                            gur.iter_mut().zip(row).for_each(|(a, b)| *a += d * b);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = &nodes[logits.0].value;
                acc(*logits, &mut |gz| {
                    for (((a, &z), &y), d) in gz.iter_mut().zip(z).zip(targets).zip(g) {
                        *a += d * (kernels::sigmoid(z) - y);
                    }
                });
            }
        }
    }
}

/// `h(q) = q / ((1 + q) sqrt(q + eps))`, the scale applied to a capsule with
/// squared norm `q`.
fn squash_factor(q: f64, eps: f64) -> f64 {
    q / ((1.0 + q) * (q + eps).sqrt())
}

fn squash_factor_derivative(q: f64, eps: f64) -> f64 {
    let r = (q + eps).sqrt();
    1.0 / ((1.0 + q) * (1.0 + q) * r) - q / (2.0 * (1.0 + q) * r * r * r)
}
