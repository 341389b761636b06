//! Reverse-mode differentiation over coarse matrix operations.
//!
//! A [`Graph`] records every operation as it is evaluated. [`Graph::backward`]
//! walks the record in reverse and accumulates vector-Jacobian products into
//! the leaves that were registered as parameters. Constants never receive
//! gradients and operations that only touch constants skip their backward work.

use std::sync::Arc;

use crate::autodiff::tensor::{gemm, RowMap, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_SLOPE: f64 = 1.702;

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Scale { a: Var, k: f64 },
    AddScalar { a: Var },
    Sin { a: Var },
    Abs { a: Var },
    Square { a: Var },
    /// `dy/du`, stored when the input requires a gradient.
    Finer { a: Var, deriv: Option<Tensor> },
    QuickGelu { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    MeanRows { a: Var },
    SumCols { a: Var },
    NormalizeRows { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    SoftmaxRows { a: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Gather { x: Var, index: Arc<Vec<usize>> },
    RowMap { x: Var, map: Arc<RowMap> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Sin { .. } => "sin",
            Op::Abs { .. } => "abs",
            Op::Square { .. } => "square",
            Op::Finer { .. } => "finer",
            Op::QuickGelu { .. } => "quick_gelu",
            Op::SumAll { .. } => "sum",
            Op::MeanAll { .. } => "mean",
            Op::MeanRows { .. } => "mean_rows",
            Op::SumCols { .. } => "sum_cols",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Gather { .. } => "gather",
            Op::RowMap { .. } => "row_map",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Recording of a differentiable computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_non_finite: Option<(usize, &'static str)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    /// Fails with the first operation that produced a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((index, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(index)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant leaf sharing storage with the caller (frozen weights).
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Leaf, false)
    }

    fn expect_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `x · wᵀ + b` with `x: n×in`, `w: out×in`, `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fan_in) = self.shape(x);
        let (out, w_in) = self.shape(w);
        if fan_in != w_in {
            return Err(Error::shape("linear", format!("input {n}x{fan_in}, weight {out}x{w_in}")));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, out) {
                return Err(Error::shape("linear", format!("bias {:?}, expected 1x{out}", self.shape(b))));
            }
        }
        let mut y = Tensor::zeros(n, out);
        {
            let xv = self.value(x);
            let wv = self.value(w);
            gemm(
                n,
                fan_in,
                out,
                xv.data(),
                (fan_in as isize, 1),
                wv.data(),
                (1, fan_in as isize),
                y.data_mut(),
                false,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            for row in y.data_mut().chunks_mut(out) {
                for (v, bb) in row.iter_mut().zip(&bias) {
                    *v += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    /// `a · b` with `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut y = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            y.data_mut(),
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::MatMul { a, b }, rg))
    }

    /// `a · bᵀ` with `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut y = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            y.data_mut(),
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::MatMulNt { a, b }, rg))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.rows(), av.cols(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        Tensor::new(av.rows(), av.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("add", a, b)?;
        let y = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("sub", a, b)?;
        let y = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("mul", a, b)?;
        let y = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("div", a, b)?;
        let y = self.zip_with(a, b, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Div { a, b }, rg))
    }

    fn broadcast_row(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let (_, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(Error::shape(op, format!("row {:?} for {c} columns", self.shape(row))));
        }
        Ok(c)
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.broadcast_row("add_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut y = self.value(x).clone();
        for chunk in y.data_mut().chunks_mut(c) {
            chunk.iter_mut().zip(&r).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(y, Op::AddRow { x, row }, rg))
    }

    /// Multiplies every row of `x` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.broadcast_row("mul_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut y = self.value(x).clone();
        for chunk in y.data_mut().chunks_mut(c) {
            chunk.iter_mut().zip(&r).for_each(|(v, b)| *v *= b);
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(y, Op::MulRow { x, row }, rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let y = self.map(a, |x| x * k);
        let rg = self.rg(a);
        self.push(y, Op::Scale { a, k }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let y = self.map(a, |x| x + k);
        let rg = self.rg(a);
        self.push(y, Op::AddScalar { a }, rg)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let y = self.map(a, f64::sin);
        let rg = self.rg(a);
        self.push(y, Op::Sin { a }, rg)
    }

    /// Elementwise `|a|`; the derivative at exactly zero is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let y = self.map(a, f64::abs);
        let rg = self.rg(a);
        self.push(y, Op::Abs { a }, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.map(a, |x| x * x);
        let rg = self.rg(a);
        self.push(y, Op::Square { a }, rg)
    }

    /// Variable-periodic activation `sin(ω·(|u|+1)·u)` applied elementwise.
    pub fn finer(&mut self, a: Var, omega: f64) -> Var {
        let rg = self.rg(a);
        if !rg {
            let y = self.map(a, |u| (omega * (u.abs() + 1.0) * u).sin());
            return self.push(y, Op::Finer { a, deriv: None }, false);
        }
        let av = self.value(a);
        let mut y = Vec::with_capacity(av.len());
        let mut d = Vec::with_capacity(av.len());
        for &u in av.data() {
            let (s, c) = (omega * (u.abs() + 1.0) * u).sin_cos();
            y.push(s);
            // d/du (|u|+1)u = 2|u| + 1
            d.push(c * omega * (2.0 * u.abs() + 1.0));
        }
        let (rows, cols) = av.shape();
        let y = Tensor::new(rows, cols, y).expect("same shape");
        let deriv = Tensor::new(rows, cols, d).expect("same shape");
        self.push(y, Op::Finer { a, deriv: Some(deriv) }, true)
    }

    /// `x · σ(1.702x)`.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let y = self.map(a, |x| x * sigmoid(GELU_SLOPE * x));
        let rg = self.rg(a);
        self.push(y, Op::QuickGelu { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll { a }, rg)
    }

    /// Column means: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (r, c) = v.shape();
        let mut out = vec![0.0; c];
        for row in v.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(a);
        self.push(Tensor::row_vector(out), Op::MeanRows { a }, rg)
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (r, c) = v.shape();
        let out: Vec<f64> = v.data().chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        let y = Tensor::new(r, 1, out).expect("shape");
        let rg = self.rg(a);
        self.push(y, Op::SumCols { a }, rg)
    }

    /// Projects every row onto the unit sphere.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut y = self.value(a).clone();
        let c = y.cols();
        for row in y.data_mut().chunks_mut(c.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(a);
        self.push(y, Op::NormalizeRows { a }, rg)
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (`1×c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.broadcast_row("layer_norm", x, gamma)?;
        self.broadcast_row("layer_norm", x, beta)?;
        let xv = self.value(x);
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in xhat.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut y = xhat.clone();
        for row in y.data_mut().chunks_mut(c) {
            for ((v, gg), bb) in row.iter_mut().zip(&g).zip(&b) {
                *v = *v * gg + bb;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            y,
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

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut y = self.value(a).clone();
        let c = y.cols();
        for row in y.data_mut().chunks_mut(c.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(a);
        self.push(y, Op::SoftmaxRows { a }, rg)
    }

    /// Columns `start..start+len` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let y = Tensor::new(r, len, data)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::shape("concat_cols", "no parts"))?;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let y = Tensor::new(r, total, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            y,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::shape("concat_rows", "no parts"))?;
        if parts.iter().any(|&p| self.shape(p).1 != c) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            r += self.shape(p).0;
        }
        let y = Tensor::new(r, c, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            y,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Reads flat positions of `x` into a new `rows×cols` tensor.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if index.len() != rows * cols {
            return Err(Error::shape("gather", "index length does not match output shape"));
        }
        if index.iter().any(|&i| i >= xv.len()) {
            return Err(Error::shape("gather", "index out of bounds"));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let y = Tensor::new(rows, cols, data)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Gather { x, index }, rg))
    }

    /// Applies a sparse linear map to the rows of `x`.
    pub fn row_map(&mut self, x: Var, map: Arc<RowMap>) -> Result<Var> {
        let y = map.apply(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::RowMap { x, map }, rg))
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            self.propagate(node, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.rg(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(g),
        }
    }

    fn elementwise(&self, a: Var, gy: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().zip(gy.data()).map(|(&x, &g)| f(x, g)).collect();
        Tensor::new(av.rows(), av.cols(), data).expect("same shape")
    }

    fn elementwise_with(&self, gy: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = gy.data().iter().zip(other.data()).map(|(&g, &o)| f(g, o)).collect();
        Tensor::new(gy.rows(), gy.cols(), data).expect("same shape")
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, fan_in) = self.shape(*x);
                let out = self.shape(*w).0;
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(n, fan_in);
                    gemm(
                        n,
                        out,
                        fan_in,
                        gy.data(),
                        (out as isize, 1),
                        self.value(*w).data(),
                        (fan_in as isize, 1),
                        gx.data_mut(),
                        false,
                    );
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*w) {
                    let mut gw = Tensor::zeros(out, fan_in);
                    gemm(
                        out,
                        n,
                        fan_in,
                        gy.data(),
                        (1, out as isize),
                        self.value(*x).data(),
                        (fan_in as isize, 1),
                        gw.data_mut(),
                        false,
                    );
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; out];
                        for row in gy.data().chunks(out) {
                            gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        }
                        self.accumulate(grads, *b, Tensor::row_vector(gb));
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.rg(*a) {
                    // ga = gy · bᵀ
                    let mut ga = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        gy.data(),
                        (n as isize, 1),
                        self.value(*b).data(),
                        (1, n as isize),
                        ga.data_mut(),
                        false,
                    );
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    // gb = aᵀ · gy
                    let mut gb = Tensor::zeros(k, n);
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        (1, k as isize),
                        gy.data(),
                        (n as isize, 1),
                        gb.data_mut(),
                        false,
                    );
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                if self.rg(*a) {
                    // ga = gy · b
                    let mut ga = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        gy.data(),
                        (n as isize, 1),
                        self.value(*b).data(),
                        (k as isize, 1),
                        ga.data_mut(),
                        false,
                    );
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    // gb = gyᵀ · a
                    let mut gb = Tensor::zeros(n, k);
                    gemm(
                        n,
                        m,
                        k,
                        gy.data(),
                        (1, n as isize),
                        self.value(*a).data(),
                        (k as isize, 1),
                        gb.data_mut(),
                        false,
                    );
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gy.clone());
                if self.rg(*b) {
                    let neg = self.elementwise(*b, gy, |_, g| -g);
                    self.accumulate(grads, *b, neg);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let g = self.elementwise(*b, gy, |y, g| y * g);
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = self.elementwise(*a, gy, |x, g| x * g);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Div { a, b } => {
                if self.rg(*a) {
                    let g = self.elementwise(*b, gy, |y, g| g / y);
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let data = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .zip(gy.data())
                        .map(|((x, y), g)| -g * x / (y * y))
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(bv.rows(), bv.cols(), data).expect("shape"));
                }
            }
            Op::AddRow { x, row } => {
                self.accumulate(grads, *x, gy.clone());
                if self.rg(*row) {
                    let c = gy.cols();
                    let mut g = vec![0.0; c];
                    for r in gy.data().chunks(c) {
                        g.iter_mut().zip(r).for_each(|(s, v)| *s += v);
                    }
                    self.accumulate(grads, *row, Tensor::row_vector(g));
                }
            }
            Op::MulRow { x, row } => {
                let c = gy.cols();
                let rv = self.value(*row).data();
                if self.rg(*x) {
                    let mut g = gy.clone();
                    for chunk in g.data_mut().chunks_mut(c) {
                        chunk.iter_mut().zip(rv).for_each(|(v, s)| *v *= s);
                    }
                    self.accumulate(grads, *x, g);
                }
                if self.rg(*row) {
                    let mut g = vec![0.0; c];
                    for (gr, xr) in gy.data().chunks(c).zip(self.value(*x).data().chunks(c)) {
                        for ((s, gv), xv) in g.iter_mut().zip(gr).zip(xr) {
                            *s += gv * xv;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::row_vector(g));
                }
            }
            Op::Scale { a, k } => {
                let g = self.elementwise(*a, gy, |_, g| g * k);
                self.accumulate(grads, *a, g);
            }
            Op::AddScalar { a } => self.accumulate(grads, *a, gy.clone()),
            Op::Sin { a } => {
                let g = self.elementwise(*a, gy, |x, g| g * x.cos());
                self.accumulate(grads, *a, g);
            }
            Op::Abs { a } => {
                let g = self.elementwise(*a, gy, |x, g| g * sign(x));
                self.accumulate(grads, *a, g);
            }
            Op::Square { a } => {
                let g = self.elementwise(*a, gy, |x, g| 2.0 * x * g);
                self.accumulate(grads, *a, g);
            }
            Op::Finer { a, deriv } => {
                let d = deriv.as_ref().expect("finer derivative recorded for gradient inputs");
                let g = self.elementwise_with(gy, d, |g, d| g * d);
                self.accumulate(grads, *a, g);
            }
            Op::QuickGelu { a } => {
                let g = self.elementwise(*a, gy, |x, g| {
                    let s = sigmoid(GELU_SLOPE * x);
                    g * (s + GELU_SLOPE * x * s * (1.0 - s))
                });
                self.accumulate(grads, *a, g);
            }
            Op::SumAll { a } => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(r, c, gy.item()));
            }
            Op::MeanAll { a } => {
                let (r, c) = self.shape(*a);
                let scale = gy.item() / (r * c) as f64;
                self.accumulate(grads, *a, Tensor::full(r, c, scale));
            }
            Op::MeanRows { a } => {
                let (r, c) = self.shape(*a);
                let mut g = Tensor::zeros(r, c);
                for row in g.data_mut().chunks_mut(c) {
                    row.iter_mut()
                        .zip(gy.data())
                        .for_each(|(v, s)| *v = s / r as f64);
                }
                self.accumulate(grads, *a, g);
            }
            Op::SumCols { a } => {
                let (r, c) = self.shape(*a);
                let mut g = Tensor::zeros(r, c);
                for (row, s) in g.data_mut().chunks_mut(c.max(1)).zip(gy.data()) {
                    row.iter_mut().for_each(|v| *v = *s);
                }
                self.accumulate(grads, *a, g);
            }
            Op::NormalizeRows { a } => {
                let xv = self.value(*a);
                let yv = &node.value;
                let c = xv.cols();
                let mut g = Tensor::zeros(xv.rows(), c);
                for r in 0..xv.rows() {
                    let x = xv.row(r);
                    let y = yv.row(r);
                    let gr = gy.row(r);
                    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dst = &mut g.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] = (gr[j] - y[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = xhat.cols();
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let mut g = vec![0.0; c];
                    for (gr, hr) in gy.data().chunks(c).zip(xhat.data().chunks(c)) {
                        for ((s, a), b) in g.iter_mut().zip(gr).zip(hr) {
                            *s += a * b;
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::row_vector(g));
                }
                if self.rg(*beta) {
                    let mut g = vec![0.0; c];
                    for gr in gy.data().chunks(c) {
                        g.iter_mut().zip(gr).for_each(|(s, v)| *s += v);
                    }
                    self.accumulate(grads, *beta, Tensor::row_vector(g));
                }
                if self.rg(*x) {
                    let mut g = Tensor::zeros(xhat.rows(), c);
                    for r in 0..xhat.rows() {
                        let h = xhat.row(r);
                        let gr = gy.row(r);
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let dst = &mut g.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            dst[j] = rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, g);
                }
            }
            Op::SoftmaxRows { a } => {
                let yv = &node.value;
                let c = yv.cols();
                let mut g = Tensor::zeros(yv.rows(), c);
                for r in 0..yv.rows() {
                    let y = yv.row(r);
                    let gr = gy.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dst = &mut g.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let len = gy.cols();
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    g.data_mut()[i * c + start..i * c + start + len].copy_from_slice(gy.row(i));
                }
                self.accumulate(grads, *x, g);
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(r * c);
                        for i in 0..r {
                            data.extend_from_slice(&gy.row(i)[at..at + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(r, c, data).expect("shape"));
                    }
                    at += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.rg(p) {
                        let data = gy.data()[at * c..(at + r) * c].to_vec();
                        self.accumulate(grads, p, Tensor::new(r, c, data).expect("shape"));
                    }
                    at += r;
                }
            }
            Op::Gather { x, index } => {
                let (r, c) = self.shape(*x);
                let mut g = Tensor::zeros(r, c);
                for (&i, v) in index.iter().zip(gy.data()) {
                    g.data_mut()[i] += v;
                }
                self.accumulate(grads, *x, g);
            }
            Op::RowMap { x, map } => {
                self.accumulate(grads, *x, map.apply_transpose(gy));
            }
        }
    }
}

/// Sign with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
