//! Tape-based reverse-mode differentiation over 2-D arrays.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Parameter leaves read the store in place; every primitive appends a node
//! holding its output value. [`backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because a
//! node can only reference nodes created before it.

use std::borrow::Cow;

use super::array::gemm;
use super::{sigmoid, Array, NumericError, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction used by [`Tape::segment_reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Min,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    BagMean(Var, Vec<Vec<usize>>),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Pick(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    SegmentReduce(Var, Vec<Vec<usize>>, Reduce, Vec<Option<usize>>),
}

struct Node<'a> {
    value: Cow<'a, Array>,
    op: Op,
}

/// Records one forward computation.
pub struct Tape<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node<'a>>,
}

#[cfg(test)]
thread_local! {
    /// Flips the tanh backward rule so the gradient checker can be shown to
    /// catch a broken derivative.
    pub(crate) static BREAK_TANH_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

fn check_matrix(op: &'static str, a: &Array) -> Result<(), NumericError> {
    if a.is_matrix() {
        Ok(())
    } else {
        Err(NumericError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: vec![],
        })
    }
}

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<(), NumericError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(NumericError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

impl<'a> Tape<'a> {
    /// A tape whose parameter leaves read from `store`.
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::with_capacity(64),
        }
    }

    /// A tape with constants only.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    /// Leaf that reads parameter `name` from the borrowed store.
    pub fn param(&mut self, name: &str) -> Result<Var, NumericError> {
        let store = self.store.ok_or_else(|| NumericError::UnknownParam(name.to_string()))?;
        let id = store
            .id(name)
            .ok_or_else(|| NumericError::UnknownParam(name.to_string()))?;
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value_at(id)),
            op: Op::Param(id),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (av, bv) = (self.value(a), self.value(b));
        check_matrix("matmul", av)?;
        check_matrix("matmul", bv)?;
        if av.cols() != bv.rows() {
            return Err(NumericError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let out = Array::matrix(m, n, out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op_name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Array::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_with("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// Adds a `[1, M]` bias row to every row of an `[N, M]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericError> {
        let (av, bv) = (self.value(a), self.value(bias));
        check_matrix("add_row", av)?;
        if bv.len() != av.cols() || !(bv.shape().len() == 2 && bv.rows() == 1) {
            return Err(NumericError::ShapeMismatch {
                op: "add_row",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        let cols = av.cols();
        for r in 0..av.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(out.cols(), cols);
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericError> {
        let av = self.value(a);
        check_matrix("softmax", av)?;
        let mut out = av.clone();
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            let src = row.to_vec();
            log_softmax_row(&src, row);
            row.iter_mut().for_each(|x| *x = x.exp());
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumericError> {
        let av = self.value(a);
        check_matrix("log_softmax", av)?;
        let mut out = av.clone();
        for r in 0..av.rows() {
            log_softmax_row(av.row(r), out.row_mut(r));
        }
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, indices: Vec<usize>) -> Result<Var, NumericError> {
        let tv = self.value(table);
        check_matrix("gather", tv)?;
        let cols = tv.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            if i >= tv.rows() {
                return Err(NumericError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    bound: tv.rows(),
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Array::matrix(indices.len(), cols, data)?;
        Ok(self.push(out, Op::Gather(table, indices)))
    }

    /// Output row `i` is the mean of the `table` rows listed in `bags[i]`; an
    /// empty bag yields a zero row.
    pub fn bag_mean(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var, NumericError> {
        let tv = self.value(table);
        check_matrix("bag_mean", tv)?;
        let cols = tv.cols();
        let mut out = Array::zeros(&[bags.len(), cols]);
        for (r, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let w = 1.0 / bag.len() as f64;
            let dst = out.row_mut(r);
            for &i in bag {
                if i >= tv.rows() {
                    return Err(NumericError::IndexOutOfRange {
                        op: "bag_mean",
                        index: i,
                        bound: tv.rows(),
                    });
                }
                for (o, x) in dst.iter_mut().zip(tv.row(i)) {
                    *o += w * x;
                }
            }
        }
        Ok(self.push(out, Op::BagMean(table, bags)))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = self.value(parts[0]);
        check_matrix("concat", first)?;
        let rows = first.rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if !pv.is_matrix() || pv.rows() != rows {
                return Err(NumericError::ShapeMismatch {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Array::matrix(rows, total, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len().max(1) as f64;
        let s: f64 = av.data().iter().sum();
        self.push(Array::scalar(s / n), Op::Mean(a))
    }

    /// `[N, M] -> [N, 1]` sums along each row.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, NumericError> {
        let av = self.value(a);
        check_matrix("row_sum", av)?;
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        Ok(self.push(Array::column(data), Op::RowSum(a)))
    }

    /// `[N, M] -> [N, 1]` picking column `cols[i]` from row `i`.
    pub fn pick(&mut self, a: Var, cols: Vec<usize>) -> Result<Var, NumericError> {
        let av = self.value(a);
        check_matrix("pick", av)?;
        if cols.len() != av.rows() {
            return Err(NumericError::ShapeMismatch {
                op: "pick",
                left: av.shape().to_vec(),
                right: vec![cols.len()],
            });
        }
        let mut data = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= av.cols() {
                return Err(NumericError::IndexOutOfRange {
                    op: "pick",
                    index: c,
                    bound: av.cols(),
                });
            }
            data.push(av.get(r, c));
        }
        Ok(self.push(Array::column(data), Op::Pick(a, cols)))
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var, NumericError> {
        let av = self.value(a);
        check_matrix("select_rows", av)?;
        let cols = av.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            if r >= av.rows() {
                return Err(NumericError::IndexOutOfRange {
                    op: "select_rows",
                    index: r,
                    bound: av.rows(),
                });
            }
            data.extend_from_slice(av.row(r));
        }
        let out = Array::matrix(rows.len(), cols, data)?;
        Ok(self.push(out, Op::SelectRows(a, rows)))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Reduces groups of rows of an `[N, 1]` column into an `[S, 1]` column.
    /// An empty group reduces to the vacuous value 1.0.
    pub fn segment_reduce(&mut self, a: Var, segments: Vec<Vec<usize>>, kind: Reduce) -> Result<Var, NumericError> {
        let av = self.value(a);
        if !av.is_matrix() || av.cols() != 1 {
            return Err(NumericError::ShapeMismatch {
                op: "segment_reduce",
                left: av.shape().to_vec(),
                right: vec![segments.len(), 1],
            });
        }
        let mut out = Vec::with_capacity(segments.len());
        let mut arg = Vec::with_capacity(segments.len());
        for seg in &segments {
            if let Some(&bad) = seg.iter().find(|&&i| i >= av.rows()) {
                return Err(NumericError::IndexOutOfRange {
                    op: "segment_reduce",
                    index: bad,
                    bound: av.rows(),
                });
            }
            if seg.is_empty() {
                out.push(1.0);
                arg.push(None);
                continue;
            }
            let d = av.data();
            match kind {
                Reduce::Mean => {
                    out.push(seg.iter().map(|&i| d[i]).sum::<f64>() / seg.len() as f64);
                    arg.push(None);
                }
                Reduce::Min | Reduce::Max => {
                    let mut best = seg[0];
                    for &i in &seg[1..] {
                        let better = match kind {
                            Reduce::Min => d[i] < d[best],
                            _ => d[i] > d[best],
                        };
                        if better {
                            best = i;
                        }
                    }
                    out.push(d[best]);
                    arg.push(Some(best));
                }
            }
        }
        Ok(self.push(Array::column(out), Op::SegmentReduce(a, segments, kind, arg)))
    }
}

/// Gradients of a scalar output with respect to the parameters of the store
/// the tape borrowed, indexed by parameter position.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) by_param: Vec<(usize, Array)>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Array)> {
        self.by_param.iter().map(|(i, a)| (*i, a))
    }
}

fn acc(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn acc_with(grads: &mut [Option<Array>], v: Var, shape: &[usize], f: impl FnOnce(&mut Array)) {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Array::zeros(shape));
    }
    f(slot.as_mut().expect("slot initialized"));
}

/// Reverse pass from a scalar node. Each node is visited exactly once.
pub fn backward(tape: &Tape<'_>, output: Var) -> Result<Gradients, NumericError> {
    let out_value = tape.value(output);
    if !out_value.is_scalar() {
        return Err(NumericError::NotScalar(out_value.shape().to_vec()));
    }
    let n = output.0 + 1;
    let mut grads: Vec<Option<Array>> = vec![None; n];
    grads[output.0] = Some(Array::filled(out_value.shape(), 1.0));
    let mut by_param: Vec<(usize, Array)> = Vec::new();

    for idx in (0..n).rev() {
        let Some(g) = grads[idx].take() else {
            continue;
        };
        let node = &tape.nodes[idx];
        let y = &*node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(pid) => {
                if let Some((_, existing)) = by_param.iter_mut().find(|(p, _)| p == pid) {
                    existing.add_assign(&g);
                } else {
                    by_param.push((*pid, g));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (tape.value(*a), tape.value(*b));
                let (m, k, nn) = (av.rows(), av.cols(), bv.cols());
                acc_with(&mut grads, *a, av.shape(), |ga| {
                    gemm(m, nn, k, g.data(), false, bv.data(), true, ga.data_mut(), true);
                });
                acc_with(&mut grads, *b, bv.shape(), |gb| {
                    gemm(k, m, nn, av.data(), true, g.data(), false, gb.data_mut(), true);
                });
            }
            Op::Add(a, b) => {
                acc(&mut grads, *a, g.clone());
                acc(&mut grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(&mut grads, *b, g.map(|x| -x));
                acc(&mut grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (tape.value(*a), tape.value(*b));
                let ga = zip(&g, bv, |x, y| x * y);
                let gb = zip(&g, av, |x, y| x * y);
                acc(&mut grads, *a, ga);
                acc(&mut grads, *b, gb);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (tape.value(*a), tape.value(*b));
                let mut ga = Array::zeros(av.shape());
                let mut gb = Array::zeros(bv.shape());
                for i in 0..g.len() {
                    // ties route the gradient to the first operand
                    if av.data()[i] <= bv.data()[i] {
                        ga.data_mut()[i] = g.data()[i];
                    } else {
                        gb.data_mut()[i] = g.data()[i];
                    }
                }
                acc(&mut grads, *a, ga);
                acc(&mut grads, *b, gb);
            }
            Op::AddRow(a, bias) => {
                let bv = tape.value(*bias);
                let mut gb = Array::zeros(bv.shape());
                for r in 0..g.rows() {
                    for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(&mut grads, *bias, gb);
                acc(&mut grads, *a, g);
            }
            Op::Affine(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
            Op::Sigmoid(a) => acc(&mut grads, *a, zip(&g, y, |gx, s| gx * s * (1.0 - s))),
            Op::Tanh(a) => {
                #[cfg(test)]
                let broken = BREAK_TANH_BACKWARD.with(|b| b.get());
                #[cfg(not(test))]
                let broken = false;
                let ga = if broken {
                    zip(&g, y, |gx, t| gx * (1.0 + t * t))
                } else {
                    zip(&g, y, |gx, t| gx * (1.0 - t * t))
                };
                acc(&mut grads, *a, ga)
            }
            Op::Exp(a) => acc(&mut grads, *a, zip(&g, y, |gx, e| gx * e)),
            Op::Log(a) => {
                let av = tape.value(*a);
                acc(&mut grads, *a, zip(&g, av, |gx, x| gx / x));
            }
            Op::Softmax(a) => {
                let mut ga = Array::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                acc(&mut grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = Array::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    for (o, (ly, q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = q - ly.exp() * gsum;
                    }
                }
                acc(&mut grads, *a, ga);
            }
            Op::Gather(table, indices) => {
                let tv = tape.value(*table);
                acc_with(&mut grads, *table, tv.shape(), |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, x) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::BagMean(table, bags) => {
                let tv = tape.value(*table);
                acc_with(&mut grads, *table, tv.shape(), |gt| {
                    for (r, bag) in bags.iter().enumerate() {
                        if bag.is_empty() {
                            continue;
                        }
                        let w = 1.0 / bag.len() as f64;
                        for &i in bag {
                            for (o, x) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                                *o += w * x;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = tape.value(p);
                    let cols = pv.cols();
                    let mut gp = Array::zeros(pv.shape());
                    for r in 0..pv.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    acc(&mut grads, p, gp);
                }
            }
            Op::Sum(a) => {
                let av = tape.value(*a);
                acc(&mut grads, *a, Array::filled(av.shape(), g.data()[0]));
            }
            Op::Mean(a) => {
                let av = tape.value(*a);
                let v = g.data()[0] / av.len().max(1) as f64;
                acc(&mut grads, *a, Array::filled(av.shape(), v));
            }
            Op::RowSum(a) => {
                let av = tape.value(*a);
                let mut ga = Array::zeros(av.shape());
                for r in 0..av.rows() {
                    let gv = g.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|x| *x = gv);
                }
                acc(&mut grads, *a, ga);
            }
            Op::Pick(a, cols) => {
                let av = tape.value(*a);
                acc_with(&mut grads, *a, av.shape(), |ga| {
                    let width = av.cols();
                    for (r, &c) in cols.iter().enumerate() {
                        ga.data_mut()[r * width + c] += g.data()[r];
                    }
                });
            }
            Op::SelectRows(a, rows) => {
                let av = tape.value(*a);
                acc_with(&mut grads, *a, av.shape(), |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = tape.value(*a);
                let ga = zip(&g, av, |gx, x| if x >= *lo && x <= *hi { gx } else { 0.0 });
                acc(&mut grads, *a, ga);
            }
            Op::SegmentReduce(a, segments, kind, arg) => {
                let av = tape.value(*a);
                acc_with(&mut grads, *a, av.shape(), |ga| {
                    for (s, seg) in segments.iter().enumerate() {
                        let gs = g.data()[s];
                        match kind {
                            Reduce::Mean => {
                                let w = gs / seg.len().max(1) as f64;
                                for &i in seg {
                                    ga.data_mut()[i] += w;
                                }
                            }
                            Reduce::Min | Reduce::Max => {
                                if let Some(i) = arg[s] {
                                    ga.data_mut()[i] += gs;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
    by_param.sort_by_key(|(p, _)| *p);
    Ok(Gradients { by_param })
}

fn zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data).expect("shapes agree")
}
