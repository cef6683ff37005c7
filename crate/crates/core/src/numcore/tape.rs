//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! information to push gradients back to its inputs. [`Tape::backward`]
//! replays the nodes in reverse order.

use crate::error::{Error, Result};

use super::tensor::{gemm, Layout, MatmulDims, Tensor};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul(Var, Var, MatmulDims),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    DivScalar(Var, Var),
    SoftmaxLast(Var),
    SoftmaxCols(Var),
    RowNormalize(Var, Vec<f64>),
    ClampNeg(Var),
    Relu(Var),
    EluPlusOne(Var),
    PowRelu(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SumAxis0(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation so gradients can be replayed backwards.
///
/// Leaves created with `requires_grad = true` accumulate gradients across
/// calls to [`Tape::backward`] until [`Tape::zero_grad`] clears them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    /// Matrix product; 3-D operands are multiplied batch by batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = MatmulDims::resolve(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        dims.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(dims.out_shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b, dims), rg))
    }

    /// `a · bᵀ` for 2-D operands sharing their column count.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Transposed,
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.unary(x, value, Op::Transpose(x)))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a length-c vector to every row of an r×c matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x).to_vec(), self.shape(row).to_vec());
        if sx.len() != 2 || sr != [sx[1]] {
            return Err(Error::dim("add_row", &sx, &sr));
        }
        let mut value = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(sx[1]) {
            chunk.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.unary(x, value, Op::Scale(x, factor))
    }

    /// Elementwise product with a constant tensor (masks, fixed weights).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim("mul_const", self.shape(x), c.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        Ok(self.unary(x, value, Op::MulConst(x, c)))
    }

    /// Divides every element by a single-element tensor.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("div_scalar", self.shape(x), self.shape(s)));
        }
        let d = self.value(s).data()[0];
        let value = self.value(x).map(|v| v / d);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::DivScalar(x, s), rg))
    }

    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_last();
        self.unary(x, value, Op::SoftmaxLast(x))
    }

    /// Softmax down each column of a 2-D tensor.
    pub fn softmax_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?.softmax_last().transpose()?;
        Ok(self.unary(x, t, Op::SoftmaxCols(x)))
    }

    /// Divides each row by its own sum plus `eps`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(Error::dim("row_normalize", v.shape(), &[0, 0]));
        }
        let c = v.cols();
        let mut out = v.clone();
        let mut sums = Vec::with_capacity(v.rows());
        for row in out.data_mut().chunks_mut(c) {
            let s: f64 = row.iter().sum::<f64>() + eps;
            row.iter_mut().for_each(|a| *a /= s);
            sums.push(s);
        }
        Ok(self.unary(x, out, Op::RowNormalize(x, sums)))
    }

    /// Replaces negative entries with `fill`; the replaced cells pass no gradient.
    pub fn clamp_negative(&mut self, x: Var, fill: f64) -> Var {
        let value = self.value(x).map(|v| if v < 0.0 { fill } else { v });
        self.unary(x, value, Op::ClampNeg(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    pub fn elu_plus_one(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > 0.0 { v + 1.0 } else { v.exp() });
        self.unary(x, value, Op::EluPlusOne(x))
    }

    /// `max(x, 0)^p` elementwise.
    pub fn pow_relu(&mut self, x: Var, p: f64) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > 0.0 { v.powf(p) } else { 0.0 });
        self.unary(x, value, Op::PowRelu(x, p))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            let u = GELU_C * (v + GELU_K * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        self.unary(x, value, Op::Gelu(x))
    }

    /// Row-wise layer normalization with affine scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(Error::dim("layer_norm", &sx, self.shape(gamma)));
        }
        let c = sx[1];
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = self.value(x).data().to_vec();
        let mut rstd = Vec::with_capacity(sx[0]);
        let mut out = vec![0.0; xhat.len()];
        for (row, orow) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * r;
                orow[j] = *v * g[j] + b[j];
            }
            rstd.push(r);
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Columns `[start, start + len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || start + len > sx[1] {
            return Err(Error::dim("slice_cols", &sx, &[start, len]));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(sx[0] * len);
        for r in 0..sx[0] {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![sx[0], len], data)?;
        Ok(self.unary(x, value, Op::SliceCols { x, start }))
    }

    /// Concatenates 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.shape(*first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(*first), s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Column sums of a 2-D tensor, as a vector.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::dim("sum_axis0", &sx, &[0, 0]));
        }
        let mut out = vec![0.0; sx[1]];
        for row in self.value(x).data().chunks(sx[1]) {
            out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        Ok(self.unary(x, Tensor::vector(out), Op::SumAxis0(x)))
    }

    /// Sum of all entries as a single-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Populates gradients of every `requires_grad` leaf with ∂loss/∂leaf,
    /// adding to whatever previous passes accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.leaf_grads[i];
                match slot {
                    Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        // Adds `f`'s contribution into the gradient buffer of `v` when it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b, d) => {
                let (m, k, n) = (d.m, d.k, d.n);
                for bi in 0..d.batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let va = &val(*a)[bi * m * k..(bi + 1) * m * k];
                    let vb = &val(*b)[bi * k * n..(bi + 1) * k * n];
                    acc(*a, &mut |ga| {
                        let ga = &mut ga[bi * m * k..(bi + 1) * m * k];
                        gemm(m, n, k, gc, Layout::Normal, vb, Layout::Transposed, ga, 1.0);
                    });
                    acc(*b, &mut |gb| {
                        let gb = &mut gb[bi * k * n..(bi + 1) * k * n];
                        gemm(k, m, n, va, Layout::Transposed, gc, Layout::Normal, gb, 1.0);
                    });
                }
            }
            Op::MatMulNt(a, b) => {
                let sa = nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = nodes[b.0].value.shape()[0];
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    gemm(m, n, k, g, Layout::Normal, vb, Layout::Normal, ga, 1.0)
                });
                acc(*b, &mut |gb| {
                    gemm(n, m, k, g, Layout::Transposed, va, Layout::Normal, gb, 1.0)
                });
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(va) {
                        *x += gy * av;
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let c = node.value.cols();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(x, f) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += f * b));
            }
            Op::MulConst(x, c) => {
                acc(*x, &mut |gx| {
                    for ((a, gy), cv) in gx.iter_mut().zip(g).zip(c.data()) {
                        *a += gy * cv;
                    }
                });
            }
            Op::DivScalar(x, s) => {
                let d = val(*s)[0];
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b / d));
                let vx = val(*x);
                let dot: f64 = g.iter().zip(vx).map(|(a, b)| a * b).sum();
                acc(*s, &mut |gs| gs[0] -= dot / (d * d));
            }
            Op::SoftmaxLast(x) => {
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxCols(x) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for j in 0..c {
                        let dot: f64 = (0..r).map(|i| g[i * c + j] * y[i * c + j]).sum();
                        for i in 0..r {
                            gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                });
            }
            Op::RowNormalize(x, sums) => {
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for (((gxr, gr), yr), s) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(y.chunks(c))
                        .zip(sums)
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += (gr[j] - dot) / s;
                        }
                    }
                });
            }
            Op::ClampNeg(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, gy), xv) in gx.iter_mut().zip(g).zip(vx) {
                        if *xv >= 0.0 {
                            *a += gy;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, gy), xv) in gx.iter_mut().zip(g).zip(vx) {
                        if *xv > 0.0 {
                            *a += gy;
                        }
                    }
                });
            }
            Op::EluPlusOne(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for (((a, gy), xv), yv) in gx.iter_mut().zip(g).zip(vx).zip(y) {
                        *a += if *xv > 0.0 { *gy } else { gy * yv };
                    }
                });
            }
            Op::PowRelu(x, p) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, gy), xv) in gx.iter_mut().zip(g).zip(vx) {
                        if *xv > 0.0 {
                            *a += gy * p * xv.powf(p - 1.0);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, gy), &v) in gx.iter_mut().zip(g).zip(vx) {
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *a += gy * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gm = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(c) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; c];
                    for (((gxr, gr), xr), r) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .zip(rstd)
                    {
                        for j in 0..c {
                            dxhat[j] = gr[j] * gm[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx =
                            dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gxr[j] += r * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for (gxr, gr) in gx.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut gxr[*start..*start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].value.cols();
                    acc(*p, &mut |gp| {
                        for (gpr, gr) in gp.chunks_mut(c).zip(g.chunks(total)) {
                            add_into(gpr, &gr[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SumAxis0(x) => {
                let c = node.value.len();
                acc(*x, &mut |gx| {
                    for gxr in gx.chunks_mut(c) {
                        add_into(gxr, g);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let c = tape.constant(Tensor::vector(vec![5.0, 6.0]));
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 6.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn shape_errors_surface() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.matmul_nt(a, b).is_err());
        assert!(tape.slice_cols(a, 2, 2).is_err());
    }
}
