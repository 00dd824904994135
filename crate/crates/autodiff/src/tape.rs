use std::sync::Arc;

use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::{Error, Real, Result, Tensor};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    Shift(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<F> },
    Gather { table: Var, indices: Vec<usize> },
    Pick { x: Var, indices: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a dynamic computation graph in execution order.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// `None` when `var` does not require a gradient or the loss does not
    /// depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.shared_leaf(Arc::new(value), requires_grad)
    }

    /// A leaf sharing storage with the caller, e.g. a model parameter.
    pub fn shared_leaf(&mut self, value: Arc<Tensor<F>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nn(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`, the attention score product.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nt(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, &[self.shape(a), self.shape(b)]));
        }
        let out = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(out, op, &[a, b]))
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

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let cols = self.value(a).cols();
        if self.value(row).numel() != cols {
            return Err(Error::shape(name, &[self.shape(a), self.shape(row)]));
        }
        let r = self.value(row).data();
        let mut out = (*self.nodes[a.0].value).clone();
        for chunk in out.data_mut().chunks_mut(cols.max(1)) {
            for (x, &y) in chunk.iter_mut().zip(r) {
                *x = f(*x, y);
            }
        }
        Ok(out)
    }

    /// Adds a length-`cols` vector to every row of `a` (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row of `a` elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        Ok(self.push(out, Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::Shift(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (k, c) = (F::lit(GELU_K), F::lit(GELU_C));
        let half = F::lit(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (F::one() + (k * (x + c * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(F::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(F::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(F::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = (*self.nodes[a.0].value).clone();
        let cols = out.cols().max(1);
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = (*self.nodes[a.0].value).clone();
        let cols = out.cols().max(1);
        for row in out.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance, without affine.
    pub fn layer_norm(&mut self, a: Var, eps: F) -> Var {
        let mut out = (*self.nodes[a.0].value).clone();
        let cols = out.cols().max(1);
        let n = F::from_usize(cols).expect("width");
        let mut inv_std = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Embedding lookup: output row `i` is `table[indices[i]]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), cols, out)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    /// Selects `a[i, indices[i]]` for every row, giving an `rows × 1` column.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if indices.len() != rows {
            return Err(Error::shape("pick", &[t.shape(), &[indices.len()]]));
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &c) in indices.iter().enumerate() {
            if c >= cols {
                return Err(Error::Index {
                    op: "pick",
                    index: c,
                    bound: cols,
                });
            }
            out.push(t.get(r, c));
        }
        let out = Tensor::matrix(rows, 1, out)?;
        Ok(self.push(
            out,
            Op::Pick {
                x: a,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Invalid("concat_rows of nothing".into()));
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                let shapes: Vec<&[usize]> = parts.iter().map(|&v| self.shape(v)).collect();
                return Err(Error::shape("concat_rows", &shapes));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Invalid("concat_cols of nothing".into()));
        };
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&v| self.shape(v)).collect();
            return Err(Error::shape("concat_cols", &shapes));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(Error::shape("slice_rows", &[t.shape(), &[start, len]]));
        }
        let c = t.cols();
        let out = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x: a, start }, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(Error::shape("slice_cols", &[t.shape(), &[start, len]]));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(t.rows(), len, data)?;
        Ok(self.push(out, Op::SliceCols { x: a, start }, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = F::from_usize(t.numel().max(1)).expect("count");
        let out = Tensor::scalar(t.sum() / n);
        self.push(out, Op::Mean(a), &[a])
    }

    /// Reverse pass from a scalar `loss`. Returns the gradient of every leaf
    /// that requires one and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => {
                    Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` if `v` does not
/// require a gradient.
fn slot<'a, F: Real>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

fn add_into<F: Real>(dst: &mut [F], src: impl IntoIterator<Item = F>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop<F: Real>(nodes: &[Node<F>], i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let out = &nodes[i].value;
    let val = |v: Var| -> &Tensor<F> { &nodes[v.0].value };
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm_nt(m, n, k, g, val(*b).data(), ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm_tn(m, k, n, val(*a).data(), g, gb);
            }
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).rows();
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm_nn(m, n, k, g, val(*b).data(), ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm_tn(m, n, k, g, val(*a).data(), gb);
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g.iter().copied());
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                add_into(gb, g.iter().copied());
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g.iter().copied());
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                add_into(gb, g.iter().map(|&x| -x));
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y));
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                add_into(gb, g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y));
            }
        }
        Op::AddRow(a, row) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g.iter().copied());
            }
            let cols = val(*a).cols().max(1);
            if let Some(gr) = slot(nodes, grads, *row) {
                for chunk in g.chunks(cols) {
                    add_into(gr, chunk.iter().copied());
                }
            }
        }
        Op::MulRow(a, row) => {
            let cols = val(*a).cols().max(1);
            let r = val(*row).data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (dst, chunk) in ga.chunks_mut(cols).zip(g.chunks(cols)) {
                    add_into(dst, chunk.iter().zip(r).map(|(&x, &y)| x * y));
                }
            }
            if let Some(gr) = slot(nodes, grads, *row) {
                for (chunk, xa) in g.chunks(cols).zip(val(*a).data().chunks(cols)) {
                    add_into(gr, chunk.iter().zip(xa).map(|(&x, &y)| x * y));
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g.iter().map(|&x| x * *s));
            }
        }
        Op::Shift(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g.iter().copied());
            }
        }
        Op::Gelu(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let (k, c) = (F::lit(GELU_K), F::lit(GELU_C));
                let half = F::lit(0.5);
                let three = F::lit(3.0);
                add_into(
                    ga,
                    g.iter().zip(val(*a).data()).map(|(&gy, &x)| {
                        let t = (k * (x + c * x * x * x)).tanh();
                        let d = half * (F::one() + t)
                            + half * x * (F::one() - t * t) * k * (F::one() + three * c * x * x);
                        gy * d
                    }),
                );
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(
                    ga,
                    g.iter()
                        .zip(out.data())
                        .map(|(&gy, &y)| gy * (F::one() - y * y)),
                );
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(
                    ga,
                    g.iter()
                        .zip(out.data())
                        .map(|(&gy, &y)| gy * y * (F::one() - y)),
                );
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g.iter().zip(out.data()).map(|(&gy, &y)| gy * y));
            }
        }
        Op::Log(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g.iter().zip(val(*a).data()).map(|(&gy, &x)| gy / x));
            }
        }
        Op::Square(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let two = F::lit(2.0);
                add_into(
                    ga,
                    g.iter().zip(val(*a).data()).map(|(&gy, &x)| two * gy * x),
                );
            }
        }
        Op::Softmax(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let cols = out.cols().max(1);
                for ((dst, gy), y) in ga
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let inner: F = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    add_into(dst, gy.iter().zip(y).map(|(&gi, &yi)| yi * (gi - inner)));
                }
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let cols = out.cols().max(1);
                for ((dst, gy), y) in ga
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let total: F = gy.iter().copied().sum();
                    add_into(
                        dst,
                        gy.iter().zip(y).map(|(&gi, &yi)| gi - yi.exp() * total),
                    );
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let cols = out.cols().max(1);
                let n = F::from_usize(cols).expect("width");
                for (((dst, gy), y), &is) in gx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                    .zip(inv_std)
                {
                    let mean_g = gy.iter().copied().sum::<F>() / n;
                    let mean_gy = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<F>() / n;
                    add_into(
                        dst,
                        gy.iter()
                            .zip(y)
                            .map(|(&gi, &yi)| is * (gi - mean_g - yi * mean_gy)),
                    );
                }
            }
        }
        Op::Gather { table, indices } => {
            if let Some(gt) = slot(nodes, grads, *table) {
                let cols = val(*table).cols();
                for (r, &idx) in indices.iter().enumerate() {
                    add_into(
                        &mut gt[idx * cols..(idx + 1) * cols],
                        g[r * cols..(r + 1) * cols].iter().copied(),
                    );
                }
            }
        }
        Op::Pick { x, indices } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let cols = val(*x).cols();
                for (r, &c) in indices.iter().enumerate() {
                    gx[r * cols + c] += g[r];
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).numel();
                if let Some(gp) = slot(nodes, grads, *p) {
                    add_into(gp, g[offset..offset + n].iter().copied());
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total_cols = out.cols();
            let mut col = 0;
            for p in parts {
                let pc = val(*p).cols();
                if let Some(gp) = slot(nodes, grads, *p) {
                    for (r, dst) in gp.chunks_mut(pc.max(1)).enumerate() {
                        let src = &g[r * total_cols + col..r * total_cols + col + pc];
                        add_into(dst, src.iter().copied());
                    }
                }
                col += pc;
            }
        }
        Op::SliceRows { x, start } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let c = val(*x).cols();
                add_into(&mut gx[start * c..start * c + g.len()], g.iter().copied());
            }
        }
        Op::SliceCols { x, start } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let xc = val(*x).cols();
                let len = out.cols();
                for (r, chunk) in g.chunks(len.max(1)).enumerate() {
                    add_into(
                        &mut gx[r * xc + start..r * xc + start + len],
                        chunk.iter().copied(),
                    );
                }
            }
        }
        Op::Transpose(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                // out is c×r; ga is r×c.
                let (r, c) = (out.cols(), out.rows());
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let gy = g[0];
                for x in ga.iter_mut() {
                    *x += gy;
                }
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let n = F::from_usize(ga.len().max(1)).expect("count");
                let gy = g[0] / n;
                for x in ga.iter_mut() {
                    *x += gy;
                }
            }
        }
    }
}
