//! Reverse-mode differentiation over a dynamic tape with a fixed op set.
//!
//! Each forward op records its inputs and value; `backward` walks the tape
//! in reverse and accumulates parameter gradients into the store.

use super::optim::ParamStore;
use super::tensor::{NnError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    /// Constant input; no gradient flows out.
    Leaf,
    /// Store-backed parameter; gradients accumulate into the store slot.
    Param { slot: usize },
    MatMul,
    Add,
    /// x [n, m] + bias [m] broadcast over rows.
    AddBias,
    /// Elementwise product of same-shape tensors.
    Mul,
    /// x [n, m] scaled per-row by a column vector [n, 1].
    MulCol,
    Relu,
    LeakyRelu { slope: f64 },
    Sigmoid,
    Tanh,
    Ln,
    Softplus,
    /// mul * x + add, elementwise; only `mul` matters for the gradient.
    Affine { mul: f64 },
    Clamp { lo: f64, hi: f64 },
    ConcatCols { widths: Vec<usize> },
    ConcatRows { heights: Vec<usize> },
    GatherRows { idx: Vec<usize> },
    ScatterAddRows { idx: Vec<usize> },
    /// Softmax over rows of an [m, 1] tensor grouped by segment id.
    SegmentSoftmax { seg: Vec<usize> },
    /// out[r, :] += w * x[c, :] for each (r, c, w); the coefficients are
    /// constants of the graph structure.
    SparseMatmul { coeffs: Vec<(usize, usize, f64)> },
    MeanAll,
}

struct Entry {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        self.entries.push(Entry { op, inputs, value });
        Var(self.entries.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, vec![], t)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NnError> {
        let slot = store.slot(name)?;
        let value = store.param(slot).clone();
        Ok(self.push(Op::Param { slot }, vec![], value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul, vec![a.0, b.0], value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NnError::ShapeMismatch {
                context: "add",
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let mut value = ta.clone();
        value.add_assign(tb);
        Ok(self.push(Op::Add, vec![a.0, b.0], value))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (n, m) = (tx.rows(), tx.cols());
        if tb.numel() != m {
            return Err(NnError::ShapeMismatch {
                context: "add_bias",
                expected: vec![m],
                got: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += tb.data()[j];
            }
        }
        let value = Tensor::matrix(n, m, data)?;
        Ok(self.push(Op::AddBias, vec![x.0, bias.0], value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NnError::ShapeMismatch {
                context: "mul",
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(Op::Mul, vec![a.0, b.0], value))
    }

    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var, NnError> {
        let (tx, tc) = (self.value(x), self.value(col));
        let (n, m) = (tx.rows(), tx.cols());
        if tc.rows() != n || tc.cols() != 1 {
            return Err(NnError::ShapeMismatch {
                context: "mul_col",
                expected: vec![n, 1],
                got: tc.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let c = tc.data()[i];
            for j in 0..m {
                data.push(tx.at(i, j) * c);
            }
        }
        let value = Tensor::matrix(n, m, data)?;
        Ok(self.push(Op::MulCol, vec![x.0, col.0], value))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu, vec![x.0], value)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu { slope }, vec![x.0], value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid, vec![x.0], value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh, vec![x.0], value)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.push(Op::Ln, vec![x.0], value)
    }

    /// ln(1 + e^x), computed in its overflow-safe form.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.push(Op::Softplus, vec![x.0], value)
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let value = self.value(x).map(|v| mul * v + add);
        self.push(Op::Affine { mul }, vec![x.0], value)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp { lo, hi }, vec![x.0], value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                let t = self.value(*p);
                if t.rows() != n {
                    return Err(NnError::ShapeMismatch {
                        context: "concat_cols",
                        expected: vec![n],
                        got: vec![t.rows()],
                    });
                }
                data.extend_from_slice(t.row(i));
            }
        }
        let value = Tensor::matrix(n, total, data)?;
        Ok(self.push(
            Op::ConcatCols { widths },
            parts.iter().map(|p| p.0).collect(),
            value,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).cols();
        let heights: Vec<usize> = parts.iter().map(|p| self.value(*p).rows()).collect();
        let total: usize = heights.iter().sum();
        let mut data = Vec::with_capacity(total * m);
        for p in parts {
            let t = self.value(*p);
            if t.cols() != m && t.rows() > 0 {
                return Err(NnError::ShapeMismatch {
                    context: "concat_rows",
                    expected: vec![m],
                    got: vec![t.cols()],
                });
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(total, m, data)?;
        Ok(self.push(
            Op::ConcatRows { heights },
            parts.iter().map(|p| p.0).collect(),
            value,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NnError> {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(NnError::DanglingRow { row: i, rows: n });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(idx.len(), m, data)?;
        Ok(self.push(
            Op::GatherRows { idx: idx.to_vec() },
            vec![x.0],
            value,
        ))
    }

    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows_out: usize) -> Result<Var, NnError> {
        let t = self.value(x);
        let m = t.cols();
        if idx.len() != t.rows() {
            return Err(NnError::ShapeMismatch {
                context: "scatter_add_rows",
                expected: vec![t.rows()],
                got: vec![idx.len()],
            });
        }
        let mut data = vec![0.0; rows_out * m];
        for (r, &target) in idx.iter().enumerate() {
            if target >= rows_out {
                return Err(NnError::DanglingRow {
                    row: target,
                    rows: rows_out,
                });
            }
            for j in 0..m {
                data[target * m + j] += t.at(r, j);
            }
        }
        let value = Tensor::matrix(rows_out, m, data)?;
        Ok(self.push(
            Op::ScatterAddRows { idx: idx.to_vec() },
            vec![x.0],
            value,
        ))
    }

    /// Numerically-stable softmax over the rows of an [m, 1] tensor within
    /// each segment.
    pub fn segment_softmax(&mut self, logits: Var, seg: &[usize], n_segs: usize) -> Result<Var, NnError> {
        let t = self.value(logits);
        if t.cols() != 1 || t.rows() != seg.len() {
            return Err(NnError::ShapeMismatch {
                context: "segment_softmax",
                expected: vec![seg.len(), 1],
                got: t.shape().to_vec(),
            });
        }
        let mut max = vec![f64::NEG_INFINITY; n_segs];
        for (i, &s) in seg.iter().enumerate() {
            max[s] = max[s].max(t.data()[i]);
        }
        let mut exp = vec![0.0; seg.len()];
        let mut sums = vec![0.0; n_segs];
        for (i, &s) in seg.iter().enumerate() {
            let e = (t.data()[i] - max[s]).exp();
            exp[i] = e;
            sums[s] += e;
        }
        for (i, &s) in seg.iter().enumerate() {
            exp[i] /= sums[s];
        }
        let value = Tensor::matrix(seg.len(), 1, exp)?;
        Ok(self.push(
            Op::SegmentSoftmax { seg: seg.to_vec() },
            vec![logits.0],
            value,
        ))
    }

    pub fn sparse_matmul(
        &mut self,
        coeffs: &[(usize, usize, f64)],
        rows_out: usize,
        x: Var,
    ) -> Result<Var, NnError> {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        let mut data = vec![0.0; rows_out * m];
        for &(r, c, w) in coeffs {
            if r >= rows_out || c >= n {
                return Err(NnError::DanglingRow {
                    row: r.max(c),
                    rows: rows_out.max(n),
                });
            }
            for j in 0..m {
                data[r * m + j] += w * t.at(c, j);
            }
        }
        let value = Tensor::matrix(rows_out, m, data)?;
        Ok(self.push(
            Op::SparseMatmul {
                coeffs: coeffs.to_vec(),
            },
            vec![x.0],
            value,
        ))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel();
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / n as f64);
        self.push(Op::MeanAll, vec![x.0], value)
    }

    /// Seeds the scalar `loss` with gradient 1 and accumulates parameter
    /// gradients into the store.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), NnError> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::ShapeMismatch {
                context: "backward",
                expected: vec![1],
                got: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.entries.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let entry = &self.entries[i];
            match &entry.op {
                Op::Leaf => {}
                Op::Param { slot } => {
                    store.grad_mut(*slot).add_assign(&g);
                }
                Op::MatMul => {
                    let a = &self.entries[entry.inputs[0]].value;
                    let b = &self.entries[entry.inputs[1]].value;
                    let da = g.matmul_nt(b)?;
                    let db = a.matmul_tn(&g)?;
                    accumulate(&mut grads, entry.inputs[0], da);
                    accumulate(&mut grads, entry.inputs[1], db);
                }
                Op::Add => {
                    accumulate(&mut grads, entry.inputs[0], g.clone());
                    accumulate(&mut grads, entry.inputs[1], g);
                }
                Op::AddBias => {
                    let bias_shape = self.entries[entry.inputs[1]].value.shape().to_vec();
                    let (n, m) = (g.rows(), g.cols());
                    let mut db = vec![0.0; m];
                    for r in 0..n {
                        for c in 0..m {
                            db[c] += g.at(r, c);
                        }
                    }
                    accumulate(&mut grads, entry.inputs[0], g);
                    accumulate(
                        &mut grads,
                        entry.inputs[1],
                        Tensor::from_vec(&bias_shape, db)?,
                    );
                }
                Op::Mul => {
                    let a = &self.entries[entry.inputs[0]].value;
                    let b = &self.entries[entry.inputs[1]].value;
                    let da = zip_mul(&g, b);
                    let db = zip_mul(&g, a);
                    accumulate(&mut grads, entry.inputs[0], da);
                    accumulate(&mut grads, entry.inputs[1], db);
                }
                Op::MulCol => {
                    let x = &self.entries[entry.inputs[0]].value;
                    let col = &self.entries[entry.inputs[1]].value;
                    let (n, m) = (x.rows(), x.cols());
                    let mut dx = Vec::with_capacity(n * m);
                    let mut dc = vec![0.0; n];
                    for r in 0..n {
                        let c = col.data()[r];
                        for j in 0..m {
                            dx.push(g.at(r, j) * c);
                            dc[r] += g.at(r, j) * x.at(r, j);
                        }
                    }
                    accumulate(&mut grads, entry.inputs[0], Tensor::matrix(n, m, dx)?);
                    accumulate(&mut grads, entry.inputs[1], Tensor::matrix(n, 1, dc)?);
                }
                Op::Relu => {
                    let x = &self.entries[entry.inputs[0]].value;
                    let dx = zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, entry.inputs[0], dx);
                }
                Op::LeakyRelu { slope } => {
                    let x = &self.entries[entry.inputs[0]].value;
                    let s = *slope;
                    let dx = zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { s * gv });
                    accumulate(&mut grads, entry.inputs[0], dx);
                }
                Op::Sigmoid => {
                    let y = &entry.value;
                    let dx = zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv));
                    accumulate(&mut grads, entry.inputs[0], dx);
                }
                Op::Tanh => {
                    let y = &entry.value;
                    let dx = zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads, entry.inputs[0], dx);
                }
                Op::Ln => {
                    let x = &self.entries[entry.inputs[0]].value;
                    let dx = zip_map(&g, x, |gv, xv| gv / xv);
                    accumulate(&mut grads, entry.inputs[0], dx);
                }
                Op::Softplus => {
                    let x = &self.entries[entry.inputs[0]].value;
                    let dx = zip_map(&g, x, |gv, xv| gv / (1.0 + (-xv).exp()));
                    accumulate(&mut grads, entry.inputs[0], dx);
                }
                Op::Affine { mul } => {
                    let m = *mul;
                    accumulate(&mut grads, entry.inputs[0], g.map(|v| m * v));
                }
                Op::Clamp { lo, hi } => {
                    let x = &self.entries[entry.inputs[0]].value;
                    let (lo, hi) = (*lo, *hi);
                    let dx = zip_map(&g, x, |gv, xv| if xv > lo && xv < hi { gv } else { 0.0 });
                    accumulate(&mut grads, entry.inputs[0], dx);
                }
                Op::ConcatCols { widths } => {
                    let n = g.rows();
                    let mut offset = 0;
                    for (k, w) in widths.iter().enumerate() {
                        let mut part = Vec::with_capacity(n * w);
                        for r in 0..n {
                            for j in 0..*w {
                                part.push(g.at(r, offset + j));
                            }
                        }
                        accumulate(&mut grads, entry.inputs[k], Tensor::matrix(n, *w, part)?);
                        offset += w;
                    }
                }
                Op::ConcatRows { heights } => {
                    let m = g.cols();
                    let mut offset = 0;
                    for (k, h) in heights.iter().enumerate() {
                        let part = g.data()[offset * m..(offset + h) * m].to_vec();
                        accumulate(&mut grads, entry.inputs[k], Tensor::matrix(*h, m, part)?);
                        offset += h;
                    }
                }
                Op::GatherRows { idx } => {
                    let x = &self.entries[entry.inputs[0]].value;
                    let (n, m) = (x.rows(), x.cols());
                    let mut dx = vec![0.0; n * m];
                    for (r, &source) in idx.iter().enumerate() {
                        for j in 0..m {
                            dx[source * m + j] += g.at(r, j);
                        }
                    }
                    accumulate(&mut grads, entry.inputs[0], Tensor::matrix(n, m, dx)?);
                }
                Op::ScatterAddRows { idx } => {
                    let m = g.cols();
                    let mut dx = Vec::with_capacity(idx.len() * m);
                    for &target in idx {
                        dx.extend_from_slice(g.row(target));
                    }
                    accumulate(
                        &mut grads,
                        entry.inputs[0],
                        Tensor::matrix(idx.len(), m, dx)?,
                    );
                }
                Op::SegmentSoftmax { seg } => {
                    let alpha = &entry.value;
                    let n_segs = seg.iter().copied().max().map_or(0, |s| s + 1);
                    let mut dot = vec![0.0; n_segs];
                    for (r, &s) in seg.iter().enumerate() {
                        dot[s] += alpha.data()[r] * g.data()[r];
                    }
                    let mut dl = Vec::with_capacity(seg.len());
                    for (r, &s) in seg.iter().enumerate() {
                        dl.push(alpha.data()[r] * (g.data()[r] - dot[s]));
                    }
                    accumulate(
                        &mut grads,
                        entry.inputs[0],
                        Tensor::matrix(seg.len(), 1, dl)?,
                    );
                }
                Op::SparseMatmul { coeffs } => {
                    let x = &self.entries[entry.inputs[0]].value;
                    let (n, m) = (x.rows(), x.cols());
                    let mut dx = vec![0.0; n * m];
                    for &(r, c, w) in coeffs {
                        for j in 0..m {
                            dx[c * m + j] += w * g.at(r, j);
                        }
                    }
                    accumulate(&mut grads, entry.inputs[0], Tensor::matrix(n, m, dx)?);
                }
                Op::MeanAll => {
                    let x = &self.entries[entry.inputs[0]].value;
                    let scale = g.data()[0] / x.numel() as f64;
                    accumulate(&mut grads, entry.inputs[0], x.map(|_| scale));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect(),
    )
    .expect("shapes checked")
}
