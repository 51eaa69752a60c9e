//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every op appends a node holding its output value; nodes only reference
//! earlier nodes, so the node vector is already in topological order and a
//! single reverse sweep propagates gradients. Tensors are 2-D (`rows × cols`)
//! unless stated otherwise; vectors are treated as a single row.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module (fused losses).
pub trait CustomOp {
    /// `grad_inputs[k]` is zero-initialized with the length of `inputs[k]`.
    fn backward(&self, inputs: &[&[f64]], grad_out: &[f64], grad_inputs: &mut [Vec<f64>]);
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AffineScalar { x: Var, scale: Var, shift: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d { x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    RangeMax { x: Var, argmax: Vec<Option<usize>> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    RowMean(Var),
    Sum(Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomOp> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// The computation record: values of every executed op plus enough context
/// to run one reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf; gradients are tracked iff it requires grad.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad(),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        dims2(&self.nodes[v.0].shape).0
    }

    pub fn cols(&self, v: Var) -> usize {
        dims2(&self.nodes[v.0].shape).1
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, k), &[a])
    }

    /// `x[t, c] + bias[c]` for a `T×C` input and a length-`C` bias.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x));
        if self.value(bias).len() != cols {
            return Err(Error::shape(
                "add_bias",
                format!("bias of {} for {cols} columns", self.value(bias).len()),
            ));
        }
        let b = self.value(bias);
        let xv = self.value(x);
        let mut v = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            v.extend(xv[r * cols..(r + 1) * cols].iter().zip(b).map(|(a, b)| a + b));
        }
        Ok(self.push(self.shape(x).to_vec(), v, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x * scale + shift` with single-element `scale` and `shift`.
    pub fn affine_scalar(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        if self.value(scale).len() != 1 || self.value(shift).len() != 1 {
            return Err(Error::shape("affine_scalar", "scale and shift must be scalars"));
        }
        let (a, b) = (self.scalar(scale), self.scalar(shift));
        let v = self.value(x).iter().map(|x| x * a + b).collect();
        Ok(self.push(
            self.shape(x).to_vec(),
            v,
            Op::AffineScalar { x, scale, shift },
            &[x, scale, shift],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}×{k} · {k2}×{n}")));
        }
        let v = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = dims2(self.shape(a));
        let av = self.value(a);
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                v[j * m + i] = av[i * n + j];
            }
        }
        self.push(vec![n, m], v, Op::Transpose(a), &[a])
    }

    /// 1-D convolution over time. `x` is `T×Cin`, `w` is `K×Cin×Cout`,
    /// `bias` has `Cout` elements. Output is `T'×Cout` with
    /// `T' = (T + 2·padding − K) / stride + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (t, cin) = dims2(self.shape(x));
        let ws = self.shape(w);
        if ws.len() != 3 {
            return Err(Error::shape("conv1d", format!("weights must be K×Cin×Cout, got {ws:?}")));
        }
        let (k, wcin, cout) = (ws[0], ws[1], ws[2]);
        if wcin != cin {
            return Err(Error::shape(
                "conv1d",
                format!("input has {cin} channels, weights expect {wcin} (weights {ws:?})"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv1d stride must be positive".into()));
        }
        if k > t + 2 * padding {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {k} exceeds padded length {}", t + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias of {} for {cout} output channels", self.value(b).len()),
                ));
            }
        }
        let tout = (t + 2 * padding - k) / stride + 1;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; tout * cout];
        if let Some(b) = bias {
            let bv = self.value(b);
            for o in 0..tout {
                out[o * cout..(o + 1) * cout].copy_from_slice(bv);
            }
        }
        for o in 0..tout {
            let orow = &mut out[o * cout..(o + 1) * cout];
            for kk in 0..k {
                let pos = (o * stride + kk) as isize - padding as isize;
                if pos < 0 || pos as usize >= t {
                    continue;
                }
                let xrow = &xv[pos as usize * cin..(pos as usize + 1) * cin];
                for (ci, &xval) in xrow.iter().enumerate() {
                    if xval == 0.0 {
                        continue;
                    }
                    let wrow = &wv[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                    for (acc, wval) in orow.iter_mut().zip(wrow) {
                        *acc += xval * wval;
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            vec![tout, cout],
            out,
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    /// Row-wise layer normalization. Rows whose entries are all equal
    /// normalize to exactly zero.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (rows, cols) = dims2(self.shape(x));
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias must have {cols} elements"),
            ));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let inv = if row.iter().all(|v| *v == row[0]) {
                // constant row: leave xhat at zero
                1.0 / eps.sqrt()
            } else {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for c in 0..cols {
                    xhat[r * cols + c] = (row[c] - mean) * inv;
                }
                inv
            };
            rstd[r] = inv;
            for c in 0..cols {
                out[r * cols + c] = xhat[r * cols + c] * g[c] + b[c];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|&v| if v <= 0.0 { 0.0 } else { v }).collect();
        self.push(self.shape(x).to_vec(), v, Op::Relu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|&v| softplus(v)).collect();
        self.push(self.shape(x).to_vec(), v, Op::Softplus(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), v, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last axis of each row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x));
        let xv = self.value(x);
        if xv.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_into(&xv[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x), &[x]))
    }

    /// Temporal max pooling of a `T×C` input. Ties route the subgradient to
    /// the first maximal position.
    pub fn max_pool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (t, c) = dims2(self.shape(x));
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument("max_pool1d window and stride must be positive".into()));
        }
        if window > t {
            return Err(Error::shape("max_pool1d", format!("window {window} exceeds length {t}")));
        }
        let tout = (t - window) / stride + 1;
        let xv = self.value(x);
        let mut out = vec![0.0; tout * c];
        let mut argmax = vec![0; tout * c];
        for o in 0..tout {
            for ch in 0..c {
                let mut best = o * stride;
                for p in o * stride + 1..o * stride + window {
                    if xv[p * c + ch] > xv[best * c + ch] {
                        best = p;
                    }
                }
                out[o * c + ch] = xv[best * c + ch];
                argmax[o * c + ch] = best;
            }
        }
        Ok(self.push(vec![tout, c], out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// For each half-open row range `[a, b)`, the channelwise max of `x` over
    /// those rows; an empty range yields a zero row. Output is `R×C`.
    pub fn range_max(&mut self, x: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let (t, c) = dims2(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![0.0; ranges.len() * c];
        let mut argmax = vec![None; ranges.len() * c];
        for (r, &(a, b)) in ranges.iter().enumerate() {
            if b > t || a > b {
                return Err(Error::shape("range_max", format!("range [{a}, {b}) outside 0..{t}")));
            }
            if a == b {
                continue;
            }
            for ch in 0..c {
                let mut best = a;
                for p in a + 1..b {
                    if xv[p * c + ch] > xv[best * c + ch] {
                        best = p;
                    }
                }
                out[r * c + ch] = xv[best * c + ch];
                argmax[r * c + ch] = Some(best);
            }
        }
        Ok(self.push(vec![ranges.len(), c], out, Op::RangeMax { x, argmax }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.rows(p)).unwrap_or(0);
        if parts.iter().any(|&p| self.rows(p) != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.cols(p)).unwrap_or(0);
        if parts.iter().any(|&p| self.cols(p) != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / cols.max(1);
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x));
        if start > end || end > rows {
            return Err(Error::shape("slice_rows", format!("[{start}, {end}) of {rows} rows")));
        }
        let v = self.value(x)[start * cols..end * cols].to_vec();
        Ok(self.push(vec![end - start, cols], v, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x));
        if start > end || end > cols {
            return Err(Error::shape("slice_cols", format!("[{start}, {end}) of {cols} columns")));
        }
        let xv = self.value(x);
        let mut v = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            v.extend_from_slice(&xv[r * cols + start..r * cols + end]);
        }
        Ok(self.push(vec![rows, end - start], v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x));
        let xv = self.value(x);
        let mut v = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape("gather_rows", format!("index {i} of {rows} rows")));
            }
            v.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            vec![indices.len(), cols],
            v,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// Channelwise mean: `T×C → T×1`.
    pub fn row_mean(&mut self, x: Var) -> Var {
        let (rows, cols) = dims2(self.shape(x));
        let xv = self.value(x);
        let v = (0..rows)
            .map(|r| xv[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64)
            .collect();
        self.push(vec![rows, 1], v, Op::RowMean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Appends an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        rule: Box<dyn CustomOp>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape("custom", "value length does not match shape"));
        }
        Ok(self.push(
            shape,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to whatever
    /// the nodes already hold; call [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * k)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let cols = self.value(*b).len();
                acc(*b, &mut |gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % cols] += gv;
                    }
                });
            }
            Op::AffineScalar { x, scale, shift } => {
                let a = self.scalar(*scale);
                let xv = self.value(*x);
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * a));
                acc(*scale, &mut |gs| gs[0] += g.iter().zip(xv).map(|(gv, xv)| gv * xv).sum::<f64>());
                acc(*shift, &mut |gs| gs[0] += g.iter().sum::<f64>());
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.cols(*b);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    // ga += g · bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // gb += aᵀ · g
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aval = av[i * k + p];
                            if aval == 0.0 {
                                continue;
                            }
                            for (d, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aval * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(self.shape(*a));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let (t, cin) = dims2(self.shape(*x));
                let ws = self.shape(*w);
                let (k, cout) = (ws[0], ws[2]);
                let tout = node.shape[0];
                let (xv, wv) = (self.value(*x), self.value(*w));
                let pos_of = |o: usize, kk: usize| -> Option<usize> {
                    let p = (o * stride + kk) as isize - *padding as isize;
                    (p >= 0 && (p as usize) < t).then_some(p as usize)
                };
                if needs(*x) {
                    acc(*x, &mut |gx| {
                        for o in 0..tout {
                            let grow = &g[o * cout..(o + 1) * cout];
                            for kk in 0..k {
                                let Some(p) = pos_of(o, kk) else { continue };
                                for ci in 0..cin {
                                    let wrow = &wv[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                                    gx[p * cin + ci] +=
                                        grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    });
                }
                acc(*w, &mut |gw| {
                    for o in 0..tout {
                        let grow = &g[o * cout..(o + 1) * cout];
                        for kk in 0..k {
                            let Some(p) = pos_of(o, kk) else { continue };
                            for ci in 0..cin {
                                let xval = xv[p * cin + ci];
                                if xval == 0.0 {
                                    continue;
                                }
                                let dst = &mut gw[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                                for (d, gv) in dst.iter_mut().zip(grow) {
                                    *d += xval * gv;
                                }
                            }
                        }
                    }
                });
                if let Some(b) = bias {
                    acc(*b, &mut |gb| {
                        for o in 0..tout {
                            add_into(gb, &g[o * cout..(o + 1) * cout]);
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = dims2(&node.shape);
                let gv = self.value(*gain);
                acc(*x, &mut |gx| {
                    let mut gh = vec![0.0; cols];
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gh[c] = g[r * cols + c] * gv[c];
                        }
                        let s1: f64 = gh.iter().sum();
                        let s2: f64 = gh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let n = cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] += rstd[r] / n * (n * gh[c] - s1 - xh[c] * s2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (i, gv) in g.iter().enumerate() {
                        gg[i % cols] += gv * xhat[i];
                    }
                });
                acc(*bias, &mut |gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % cols] += gv;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (rows, cols) = dims2(&node.shape);
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                let c = node.shape[1];
                acc(*x, &mut |gx| {
                    for (i, &src) in argmax.iter().enumerate() {
                        gx[src * c + i % c] += g[i];
                    }
                });
            }
            Op::RangeMax { x, argmax } => {
                let c = node.shape[1];
                acc(*x, &mut |gx| {
                    for (i, src) in argmax.iter().enumerate() {
                        if let Some(src) = src {
                            gx[src * c + i % c] += g[i];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.cols(p);
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + offset..r * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.cols(*x);
                acc(*x, &mut |gx| add_into(&mut gx[start * cols..start * cols + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let cols = self.cols(*x);
                let (rows, width) = (node.shape[0], node.shape[1]);
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * cols + start..r * cols + start + width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                });
            }
            Op::GatherRows { x, indices } => {
                let cols = self.cols(*x);
                acc(*x, &mut |gx| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gx[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::RowMean(x) => {
                let cols = self.cols(*x);
                acc(*x, &mut |gx| {
                    for (i, d) in gx.iter_mut().enumerate() {
                        *d += g[i / cols] / cols as f64;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Custom { inputs, rule } => {
                let ins: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v)).collect();
                let mut gin: Vec<Vec<f64>> = ins.iter().map(|v| vec![0.0; v.len()]).collect();
                rule.backward(&ins, g, &mut gin);
                for (&v, gi) in inputs.iter().zip(&gin) {
                    acc(v, &mut |gv| add_into(gv, gi));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aval = a[i * k + p];
            if aval == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aval * bv;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
