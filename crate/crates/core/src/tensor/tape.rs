//! Reverse-mode tape. Every op appends a node holding its forward value and
//! enough saved state to run its adjoint; `backward` walks the tape once in
//! reverse.

use crate::error::{Error, Result};
use crate::geometry;

use super::{ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    AddRow { a: usize, bias: usize },
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    ConcatCols(Vec<usize>),
    SliceCols { a: usize, start: usize },
    Reshape(usize),
    RowSoftmax(usize),
    Relu(usize),
    Sigmoid(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GatherRows { a: usize, rows: Vec<usize> },
    PickNegLog { p: usize, index: usize, active: bool },
    BoxLoss { pred: usize, grad: [T; 4] },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-writer recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_visits: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf or parameter node; `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_visits: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes whose adjoint was propagated by the last `backward`.
    pub fn backward_visits(&self) -> usize {
        self.backward_visits
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free input whose gradient is reported by `backward`.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a named parameter from `store` onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let value = store.get_index(idx).value.clone();
        Ok(self.push(value, Op::Param(idx), true))
    }

    /// `a·b`, or `a·bᵀ` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() > 2 || tb.shape().len() > 2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k) = ta.dims2();
        let (br, bc) = tb.dims2();
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            ta.data(),
            k as isize,
            1,
            tb.data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            needs,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a.0, b.0), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a.0, b.0), needs))
    }

    /// Adds a `[1, cols]` (or `[cols]`) bias to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (rows, cols) = ta.dims2();
        if tb.len() != cols || tb.dims2().0 != 1 {
            return Err(shape_err("add_row", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            for (x, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(tb.data()) {
                *x = *x + b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(value, Op::AddRow { a: a.0, bias: bias.0 }, needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * c).collect())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Scale(a.0, c), needs))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.0), needs))
    }

    /// Concatenation along the last (column) dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let rows = self.value(*first).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            if t.shape().len() > 2 || t.dims2().0 != rows {
                return Err(shape_err("concat_cols", self.value(*first).shape(), t.shape()));
            }
            widths.push(t.dims2().1);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), needs))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        if start + len > cols || ta.shape().len() > 2 {
            return Err(shape_err("slice_cols", ta.shape(), &[start, start + len]));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let needs = self.needs(a);
        let value = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(value, Op::SliceCols { a: a.0, start }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() {
            return Err(shape_err("reshape", ta.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), ta.data().to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a.0), needs))
    }

    /// Softmax over each row, stabilized by max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::RowSoftmax(a.0), needs))
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())?;
        let needs = self.needs(a);
        Ok(self.push(value, op, needs))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a.0), |x| x.max(T::zero()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a.0), sigmoid)
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        for g in [gamma, beta] {
            if self.value(g).len() != cols {
                return Err(shape_err("layer_norm", tx.shape(), self.value(g).shape()));
            }
        }
        let n = T::from_f64(cols as f64);
        let (tg, tb) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(rows * cols);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let xh = (row[c] - mean) * inv;
                xhat.push(xh);
                out.push(xh * tg[c] + tb[c]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (n, cols) = ta.dims2();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("gather_rows", ta.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(ta.row(r));
        }
        let value = Tensor::new(vec![rows.len(), cols], data)?;
        let needs = self.needs(a);
        Ok(self.push(
            value,
            Op::GatherRows {
                a: a.0,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    /// `-ln(max(p[index], floor))` as a `[1]` scalar.
    pub fn pick_neg_log(&mut self, p: Var, index: usize, floor: T) -> Result<Var> {
        let tp = self.value(p);
        if index >= tp.len() {
            return Err(shape_err("pick_neg_log", tp.shape(), &[index]));
        }
        let pr = tp.data()[index];
        let active = pr > floor;
        let value = Tensor::scalar(-(pr.max(floor)).ln());
        let needs = self.needs(p);
        Ok(self.push(value, Op::PickNegLog { p: p.0, index, active }, needs))
    }

    /// `1 - GIoU(pred, target)` for a 4-element center-format `pred`.
    pub fn giou_loss(&mut self, pred: Var, target: [f64; 4]) -> Result<Var> {
        let p = self.box4(pred, "giou_loss")?;
        let t = target.map(T::from_f64);
        let (g, grad) = geometry::giou_with_grad(p, t);
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(T::one() - g),
            Op::BoxLoss {
                pred: pred.0,
                grad: grad.map(|v| -v),
            },
            needs,
        ))
    }

    /// `Σ|pred - target|` over the 4 coordinates.
    pub fn l1_loss(&mut self, pred: Var, target: [f64; 4]) -> Result<Var> {
        let p = self.box4(pred, "l1_loss")?;
        let mut total = T::zero();
        let mut grad = [T::zero(); 4];
        for k in 0..4 {
            let d = p[k] - T::from_f64(target[k]);
            total = total + d.abs();
            grad[k] = if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
        }
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(total), Op::BoxLoss { pred: pred.0, grad }, needs))
    }

    fn box4(&self, v: Var, op: &'static str) -> Result<[T; 4]> {
        let t = self.value(v);
        if t.len() != 4 {
            return Err(shape_err(op, t.shape(), &[4]));
        }
        let d = t.data();
        Ok([d[0], d[1], d[2], d[3]])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                left: self.value(loss).shape().to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        self.backward_visits = 0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_visits += 1;
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::MatMul { a, b, trans_b } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k) = ta.dims2();
                    let n = node.value.dims2().1;
                    if self.nodes[*a].needs_grad {
                        // dA = dC · B_effᵀ
                        let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                        let ga = accumulate(&mut grads[*a], m * k);
                        T::gemm(m, n, k, T::one(), &g, n as isize, 1, tb.data(), rs, cs, T::one(), ga, k as isize, 1);
                    }
                    if self.nodes[*b].needs_grad {
                        let gb = accumulate(&mut grads[*b], k * n);
                        if *trans_b {
                            // d(bᵀ) = Aᵀ·dC, so db = dCᵀ·A  (n × k)
                            T::gemm(n, m, k, T::one(), &g, 1, n as isize, ta.data(), k as isize, 1, T::one(), gb, k as isize, 1);
                        } else {
                            T::gemm(k, m, n, T::one(), ta.data(), 1, k as isize, &g, n as isize, 1, T::one(), gb, n as isize, 1);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for p in [*a, *b] {
                        if self.nodes[p].needs_grad {
                            let gp = accumulate(&mut grads[p], g.len());
                            gp.iter_mut().zip(&g).for_each(|(x, &d)| *x = *x + d);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (p, other) in [(*a, *b), (*b, *a)] {
                        if self.nodes[p].needs_grad {
                            let ov = self.nodes[other].value.data();
                            let gp = accumulate(&mut grads[p], g.len());
                            for ((x, &d), &o) in gp.iter_mut().zip(&g).zip(ov) {
                                *x = *x + d * o;
                            }
                        }
                    }
                }
                Op::AddRow { a, bias } => {
                    if self.nodes[*a].needs_grad {
                        let ga = accumulate(&mut grads[*a], g.len());
                        ga.iter_mut().zip(&g).for_each(|(x, &d)| *x = *x + d);
                    }
                    if self.nodes[*bias].needs_grad {
                        let cols = self.nodes[*bias].value.len();
                        let gb = accumulate(&mut grads[*bias], cols);
                        for row in g.chunks(cols) {
                            gb.iter_mut().zip(row).for_each(|(x, &d)| *x = *x + d);
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let ga = accumulate(&mut grads[*a], g.len());
                    ga.iter_mut().zip(&g).for_each(|(x, &d)| *x = *x + d * *c);
                }
                Op::Sum(a) => {
                    let len = self.nodes[*a].value.len();
                    let ga = accumulate(&mut grads[*a], len);
                    ga.iter_mut().for_each(|x| *x = *x + g[0]);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = node.value.dims2();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.dims2().1;
                        if self.nodes[p].needs_grad {
                            let gp = accumulate(&mut grads[p], rows * w);
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(x, &d)| *x = *x + d);
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (rows, cols) = self.nodes[*a].value.dims2();
                    let w = node.value.dims2().1;
                    let ga = accumulate(&mut grads[*a], rows * cols);
                    for r in 0..rows {
                        let dst = &mut ga[r * cols + start..r * cols + start + w];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(x, &d)| *x = *x + d);
                    }
                }
                Op::Reshape(a) => {
                    let ga = accumulate(&mut grads[*a], g.len());
                    ga.iter_mut().zip(&g).for_each(|(x, &d)| *x = *x + d);
                }
                Op::RowSoftmax(a) => {
                    let (rows, cols) = node.value.dims2();
                    let y = node.value.data();
                    let ga = accumulate(&mut grads[*a], rows * cols);
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&yv, &gv)| s + yv * gv);
                        for ((x, &yv), &gv) in ga[span].iter_mut().zip(yr).zip(gr) {
                            *x = *x + yv * (gv - dot);
                        }
                    }
                }
                Op::Relu(a) => {
                    let y = node.value.data();
                    let ga = accumulate(&mut grads[*a], g.len());
                    for ((x, &d), &yv) in ga.iter_mut().zip(&g).zip(y) {
                        if yv > T::zero() {
                            *x = *x + d;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = accumulate(&mut grads[*a], g.len());
                    for ((x, &d), &yv) in ga.iter_mut().zip(&g).zip(y) {
                        *x = *x + d * yv * (T::one() - yv);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = node.value.dims2();
                    let gam = self.nodes[*gamma].value.data();
                    if self.nodes[*gamma].needs_grad {
                        let gg = accumulate(&mut grads[*gamma], cols);
                        for (i, (&d, &xh)) in g.iter().zip(xhat).enumerate() {
                            gg[i % cols] = gg[i % cols] + d * xh;
                        }
                    }
                    if self.nodes[*beta].needs_grad {
                        let gb = accumulate(&mut grads[*beta], cols);
                        for (i, &d) in g.iter().enumerate() {
                            gb[i % cols] = gb[i % cols] + d;
                        }
                    }
                    if self.nodes[*x].needs_grad {
                        let n = T::from_f64(cols as f64);
                        let gx = accumulate(&mut grads[*x], rows * cols);
                        let mut dxhat = vec![T::zero(); cols];
                        for r in 0..rows {
                            let span = r * cols..(r + 1) * cols;
                            let xh = &xhat[span.clone()];
                            for c in 0..cols {
                                dxhat[c] = g[r * cols + c] * gam[c];
                            }
                            let sum_d = dxhat.iter().fold(T::zero(), |s, &v| s + v);
                            let sum_dx = dxhat.iter().zip(xh).fold(T::zero(), |s, (&d, &h)| s + d * h);
                            let scale = inv_std[r] / n;
                            for (c, out) in gx[span].iter_mut().enumerate() {
                                *out = *out + scale * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                            }
                        }
                    }
                }
                Op::GatherRows { a, rows } => {
                    let (n, cols) = self.nodes[*a].value.dims2();
                    let ga = accumulate(&mut grads[*a], n * cols);
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut ga[r * cols..(r + 1) * cols];
                        dst.iter_mut().zip(&g[i * cols..(i + 1) * cols]).for_each(|(x, &d)| *x = *x + d);
                    }
                }
                Op::PickNegLog { p, index, active } => {
                    let len = self.nodes[*p].value.len();
                    let pr = self.nodes[*p].value.data()[*index];
                    let gp = accumulate(&mut grads[*p], len);
                    if *active {
                        gp[*index] = gp[*index] - g[0] / pr;
                    }
                }
                Op::BoxLoss { pred, grad } => {
                    let gp = accumulate(&mut grads[*pred], 4);
                    for k in 0..4 {
                        gp[k] = gp[k] + g[0] * grad[k];
                    }
                }
            }
        }
        Ok(Grads { grads })
    }

    /// Adds every parameter gradient in `grads` into `store`.
    pub fn accumulate_param_grads(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(idx), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                store.accumulate_grad(*idx, g);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.row_softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul_and_sigmoid() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3));
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[1], &[3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let a = tape.variable(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn linear_chain_visits_each_node_once() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[1, 2], &[0.3, -0.7]));
        let mut cur = x;
        for _ in 0..10 {
            cur = tape.scale(cur, 1.5).unwrap();
        }
        let loss = tape.sum(cur).unwrap();
        // dangling nodes after the loss are never visited
        let _ = tape.relu(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(tape.backward_visits(), 12);
        let expect = 1.5f64.powi(10);
        for &g in grads.get(x).unwrap() {
            assert!((g - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let mut row = [1000.0f64, 0.0];
        softmax_in_place(&mut row);
        assert!((row[0] - 1.0).abs() < 1e-12 && row[1] >= 0.0 && row[1] < 1e-12);
    }
}
