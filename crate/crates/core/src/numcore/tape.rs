use std::collections::HashMap;

use super::matrix::gemm;
use super::ops;
use super::{Gradients, Matrix, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Matrix),
    Borrowed(&'p Matrix),
}

impl Value<'_> {
    fn get(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Constant,
    Param(String),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    SubConst(Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Tanh(Var),
    Square(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Gru {
        gi: Var,
        gh: Var,
        h: Var,
        saved: Matrix,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    MixBilinear {
        q: Var,
        w: Var,
    },
    SumCols(Var),
    SumAll(Var),
    LogSoftmaxMasked {
        x: Var,
        mask: Vec<bool>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of the primitive operations of one forward evaluation.
///
/// Parameters are borrowed from a [`ParamStore`] and registered once per
/// tape, so a weight used at every step of an unrolled recurrence
/// accumulates its gradient in a single place. Nodes are appended in
/// evaluation order; [`Tape::backward`] walks them in reverse, visiting
/// each exactly once.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<String, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.nodes[v.0].value.get()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers (once) and returns the named parameter of `store`.
    pub fn param(&mut self, store: &'p ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?;
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Param(name.to_string()),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &inputs))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same(vb, what)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Matrix::new(va.rows(), va.cols(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "min", f64::min, Op::Min(a, b))
    }

    /// `x − c` for a constant `c` of the same shape.
    pub fn sub_const(&mut self, x: Var, c: &Matrix) -> Result<Var> {
        let vx = self.value(x);
        vx.check_same(c, "sub_const")?;
        let data = vx.data().iter().zip(c.data()).map(|(a, b)| a - b).collect();
        let out = Matrix::new(vx.rows(), vx.cols(), data)?;
        Ok(self.push(out, Op::SubConst(x), &[x]))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Matrix) -> Result<Var> {
        let vx = self.value(x);
        vx.check_same(&c, "mul_const")?;
        let data = vx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Matrix::new(vx.rows(), vx.cols(), data)?;
        Ok(self.push(out, Op::MulConst(x, c), &[x]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Fused gated recurrent update; see [`ops::gru_cell`].
    pub fn gru(&mut self, gi: Var, gh: Var, h: Var) -> Result<Var> {
        let (out, saved) = ops::gru_cell(self.value(gi), self.value(gh), self.value(h))?;
        Ok(self.push(out, Op::Gru { gi, gh, h, saved }, &[gi, gh, h]))
    }

    /// Picks column `idx[r]` of every row `r`, giving a `rows×1` column.
    pub fn gather_cols(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        if idx.len() != vx.rows() || idx.iter().any(|&c| c >= vx.cols()) {
            return Err(Error::shape("gather_cols: index out of range"));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| vx.get(r, c)).collect();
        let out = Matrix::new(vx.rows(), 1, data)?;
        Ok(self.push(out, Op::GatherCols { x, idx }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshape(rows, cols)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Matrix::vstack(&mats)?;
        let inputs = parts.clone();
        Ok(self.push(out, Op::ConcatRows(parts), &inputs))
    }

    /// Per-row bilinear mixing: `q` is `R×N`, `w` is `R×(N·E)` holding one
    /// `N×E` weight matrix per row; the result is `R×E` with
    /// `out[r,e] = Σₙ q[r,n]·w[r,n·E+e]`.
    pub fn mix_bilinear(&mut self, q: Var, w: Var) -> Result<Var> {
        let (vq, vw) = (self.value(q), self.value(w));
        let (rows, n) = vq.shape();
        if vw.rows() != rows || n == 0 || vw.cols() % n != 0 {
            return Err(Error::shape(format!(
                "mix_bilinear: q {}x{} with w {}x{}",
                rows,
                n,
                vw.rows(),
                vw.cols()
            )));
        }
        let embed = vw.cols() / n;
        let mut out = Matrix::zeros(rows, embed);
        for r in 0..rows {
            let (qr, wr) = (vq.row(r), vw.row(r));
            let o = out.row_mut(r);
            for (i, &qi) in qr.iter().enumerate() {
                for (e, oe) in o.iter_mut().enumerate() {
                    *oe += qi * wr[i * embed + e];
                }
            }
        }
        Ok(self.push(out, Op::MixBilinear { q, w }, &[q, w]))
    }

    /// Row sums as a `rows×1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data: Vec<f64> = (0..vx.rows()).map(|r| vx.row(r).iter().sum()).collect();
        let out = Matrix::new(vx.rows(), 1, data).expect("column shape");
        self.push(out, Op::SumCols(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Matrix::row_vector(&[self.value(x).sum()]);
        self.push(out, Op::SumAll(x), &[x])
    }

    /// Row-wise log-softmax over the legal entries of `mask`
    /// (row-major, same shape as `x`). Illegal entries are reported as 0 and
    /// receive no gradient.
    pub fn log_softmax_masked(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(Error::shape("log_softmax_masked: mask length"));
        }
        let cols = vx.cols();
        let mut out = Matrix::zeros(vx.rows(), cols);
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let legal = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(legal)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(
                    "log_softmax_masked: row without legal entries",
                ));
            }
            let lse = max
                + row
                    .iter()
                    .zip(legal)
                    .filter(|(_, &ok)| ok)
                    .map(|(&v, _)| (v - max).exp())
                    .sum::<f64>()
                    .ln();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                if legal[c] {
                    *o = row[c] - lse;
                }
            }
        }
        Ok(self.push(out, Op::LogSoftmaxMasked { x, mask }, &[x]))
    }

    /// Reverse pass from a scalar `loss` node seeded with `1`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with(loss, 1.0)
    }

    /// Reverse pass from a scalar `loss` node seeded with `seed`.
    ///
    /// Returns `∂loss/∂θ` for every parameter the loss depends on.
    pub fn backward_with(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::row_vector(&[seed]));
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, delta: Matrix| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&delta).expect("gradient shape"),
                    slot => *slot = Some(delta),
                }
            };
            let needs = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => out.insert(name.clone(), g),
                Op::Linear { x, w, b } => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let (batch, inp, outw) = (vx.rows(), vx.cols(), vw.rows());
                    if needs(*x) {
                        let mut dx = Matrix::zeros(batch, inp);
                        gemm(
                            batch,
                            outw,
                            inp,
                            1.0,
                            (g.data(), outw, 1),
                            (vw.data(), inp, 1),
                            0.0,
                            (dx.data_mut(), inp, 1),
                        );
                        send(*x, dx);
                    }
                    if needs(*w) {
                        let mut dw = Matrix::zeros(outw, inp);
                        gemm(
                            outw,
                            batch,
                            inp,
                            1.0,
                            (g.data(), 1, outw),
                            (vx.data(), inp, 1),
                            0.0,
                            (dw.data_mut(), inp, 1),
                        );
                        send(*w, dw);
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            let mut db = Matrix::zeros(1, outw);
                            for r in 0..batch {
                                for (d, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                    *d += v;
                                }
                            }
                            send(*b, db);
                        }
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if needs(*a) {
                        send(*a, zip(&g, vb, |g, y| g * y));
                    }
                    if needs(*b) {
                        send(*b, zip(&g, va, |g, x| g * x));
                    }
                }
                Op::Min(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let pick_a: Vec<bool> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| x <= y)
                        .collect();
                    let mut ga = g.clone();
                    let mut gb = g;
                    for (i, &pa) in pick_a.iter().enumerate() {
                        if pa {
                            gb.data_mut()[i] = 0.0;
                        } else {
                            ga.data_mut()[i] = 0.0;
                        }
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::SubConst(x) => send(*x, g),
                Op::MulConst(x, c) => send(*x, zip(&g, c, |g, c| g * c)),
                Op::Scale(x, f) => send(*x, g.map(|v| v * f)),
                Op::Relu(x) => send(
                    *x,
                    zip(&g, self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 }),
                ),
                Op::Abs(x) => send(*x, zip(&g, self.value(*x), |g, x| g * sign(x))),
                Op::Exp(x) => send(*x, zip(&g, node.value.get(), |g, y| g * y)),
                Op::Tanh(x) => send(*x, zip(&g, node.value.get(), |g, y| g * (1.0 - y * y))),
                Op::Square(x) => send(*x, zip(&g, self.value(*x), |g, x| 2.0 * g * x)),
                Op::Clamp { x, lo, hi } => send(
                    *x,
                    zip(&g, self.value(*x), |g, x| {
                        if x >= *lo && x <= *hi {
                            g
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Gru { gi, gh, h, saved } => {
                    let (dgi, dgh, dh) = gru_backward(&g, self.value(*gh), self.value(*h), saved);
                    send(*gi, dgi);
                    send(*gh, dgh);
                    send(*h, dh);
                }
                Op::GatherCols { x, idx } => {
                    let vx = self.value(*x);
                    let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                    for (r, &c) in idx.iter().enumerate() {
                        dx.set(r, c, g.get(r, 0));
                    }
                    send(*x, dx);
                }
                Op::Reshape(x) => {
                    let (r, c) = self.value(*x).shape();
                    send(*x, g.reshape(r, c)?);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if needs(p) {
                            let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                            send(p, Matrix::new(rows, cols, slice)?);
                        }
                        offset += rows;
                    }
                }
                Op::MixBilinear { q, w } => {
                    let (vq, vw) = (self.value(*q), self.value(*w));
                    let (rows, n) = vq.shape();
                    let embed = vw.cols() / n;
                    let mut dq = Matrix::zeros(rows, n);
                    let mut dw = Matrix::zeros(rows, vw.cols());
                    for r in 0..rows {
                        let gr = g.row(r);
                        let (qr, wr) = (vq.row(r), vw.row(r));
                        for i in 0..n {
                            let wi = &wr[i * embed..(i + 1) * embed];
                            dq.row_mut(r)[i] = gr.iter().zip(wi).map(|(a, b)| a * b).sum();
                            let dwi = &mut dw.row_mut(r)[i * embed..(i + 1) * embed];
                            for (d, &ge) in dwi.iter_mut().zip(gr) {
                                *d = ge * qr[i];
                            }
                        }
                    }
                    send(*q, dq);
                    send(*w, dw);
                }
                Op::SumCols(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        dx.row_mut(r).fill(g.get(r, 0));
                    }
                    send(*x, dx);
                }
                Op::SumAll(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    send(*x, Matrix::filled(rows, cols, g.get(0, 0)));
                }
                Op::LogSoftmaxMasked { x, mask } => {
                    let y = node.value.get();
                    let cols = y.cols();
                    let mut dx = Matrix::zeros(y.rows(), cols);
                    for r in 0..y.rows() {
                        let legal = &mask[r * cols..(r + 1) * cols];
                        let gsum: f64 = g
                            .row(r)
                            .iter()
                            .zip(legal)
                            .filter(|(_, &ok)| ok)
                            .map(|(&v, _)| v)
                            .sum();
                        for c in 0..cols {
                            if legal[c] {
                                dx.row_mut(r)[c] = g.get(r, c) - y.get(r, c).exp() * gsum;
                            }
                        }
                    }
                    send(*x, dx);
                }
            }
        }
        Ok(out)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::new(a.rows(), a.cols(), data).expect("same shape")
}

fn gru_backward(g: &Matrix, gh: &Matrix, h: &Matrix, saved: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (batch, hidden) = h.shape();
    let mut dgi = Matrix::zeros(batch, 3 * hidden);
    let mut dgh = Matrix::zeros(batch, 3 * hidden);
    let mut dh = Matrix::zeros(batch, hidden);
    for row in 0..batch {
        let (gr, ghr, hr, sv) = (g.row(row), gh.row(row), h.row(row), saved.row(row));
        for j in 0..hidden {
            let (r, z, n) = (sv[j], sv[hidden + j], sv[2 * hidden + j]);
            let dout = gr[j];
            let dn = dout * (1.0 - z);
            let dz = dout * (hr[j] - n);
            let da_n = dn * (1.0 - n * n);
            let dr = da_n * ghr[2 * hidden + j];
            let da_z = dz * z * (1.0 - z);
            let da_r = dr * r * (1.0 - r);
            let gi_row = dgi.row_mut(row);
            gi_row[j] = da_r;
            gi_row[hidden + j] = da_z;
            gi_row[2 * hidden + j] = da_n;
            let gh_row = dgh.row_mut(row);
            gh_row[j] = da_r;
            gh_row[hidden + j] = da_z;
            gh_row[2 * hidden + j] = da_n * r;
            dh.row_mut(row)[j] = dout * z;
        }
    }
    (dgi, dgh, dh)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::identity(2));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let x = tape.constant(Matrix::row_vector(&[1.0, 2.0]));
        let y = tape.linear(x, w, None).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_of_linear_gives_column_sums() {
        // loss = Σ (W·x); ∂loss/∂x is the column sums of W.
        let mut store = ParamStore::new();
        store.insert("w", Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 5.0]]).unwrap());
        store.insert("x", Matrix::row_vector(&[0.3, -0.7]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.linear(x, w, None).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[4.0, 7.0]);
        // ∂loss/∂W[i,j] = x[j]
        assert_eq!(grads.get("w").unwrap().data(), &[0.3, -0.7, 0.3, -0.7]);
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::from_rows(&[&[0.5, -1.0]]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let x = tape.constant(Matrix::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]).unwrap());
        let y = tape.linear(x, w, None).unwrap();
        let y = tape.relu(y);
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum_all(sq);
        assert_eq!(tape.backward(loss).unwrap(), tape.backward(loss).unwrap());
    }

    #[test]
    fn constants_get_no_gradient() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[1.0]));
        let l = tape.sum_all(x);
        assert!(tape.backward(l).unwrap().is_empty());
        let _ = &store;
    }
}
