//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A `Tape` records every operation as a node holding its forward value and
//! the indices of its inputs. Node ids are append-order indices, so a single
//! reverse sweep visits nodes in valid topological order. Parameters are
//! leaf nodes registered under a `ParamKey`; registering the same key twice
//! returns the original node, which is how parameter sharing (and therefore
//! gradient fan-in accumulation) works.
//!
//! The op set is deliberately small: dense affine algebra, the activations
//! used by the networks, and a few structured ops (row stitching, masked
//! log-sum-exp, row diagonal) that let losses be expressed without any
//! index bookkeeping at backward time.

use std::collections::HashMap;

use crate::diffnet::matrix::Matrix;
use crate::error::{Error, Result};

/// Identifies one parameter tensor across the whole model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u32,
    pub layer: u32,
    pub slot: Slot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamKey),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    /// Broadcast-subtract a 1x1 node from every entry.
    SubScalar(NodeId, NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Softplus(NodeId),
    LogClamped(NodeId),
    Abs(NodeId),
    SumAll(NodeId),
    MeanRows(NodeId),
    MinAll(NodeId, (usize, usize)),
    /// Row-wise log of the sum of exp over entries where `mask` is nonzero.
    MaskedRowLogSumExp(NodeId, Matrix),
    Diag(NodeId),
    /// Output row r is row `sources[r].1` of node `sources[r].0`.
    StitchRows(Vec<(NodeId, usize)>),
    /// Row r multiplied by the constant weight `weights[r]`.
    ScaleRows(NodeId, Vec<f64>),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients keyed by parameter tensor; absent keys mean identically zero.
#[derive(Debug, Default)]
pub struct GradientSet {
    grads: HashMap<ParamKey, Matrix>,
}

impl GradientSet {
    pub fn get(&self, key: &ParamKey) -> Option<&Matrix> {
        self.grads.get(key)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.grads.keys()
    }
}

/// Floor used by `log_clamped`; gradients are cut to zero below it.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.push(Op::Constant, Matrix::scalar(value))
    }

    /// Registers a parameter leaf. A key seen before returns the existing
    /// node so that shared parameters accumulate gradients from every use.
    pub fn param(&mut self, key: ParamKey, value: &Matrix) -> NodeId {
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        let id = self.push(Op::Param(key), value.clone());
        self.params.insert(key, id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    /// Adds a 1 x c bias row to every row of an n x c input.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xr, xc) = self.value(x).shape();
        let (br, bc) = self.value(bias).shape();
        if br != 1 || bc != xc {
            return Err(Error::Shape(format!(
                "bias must be 1x{xc} to broadcast over {xr}x{xc}, got {br}x{bc}"
            )));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).row(0).to_vec();
        for r in 0..xr {
            for (o, bv) in value.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), value))
    }

    /// Subtracts a 1x1 node from every entry of `a`.
    pub fn sub_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s).item()?;
        let value = self.value(a).map(|x| x - sv);
        Ok(self.push(Op::SubScalar(a, s), value))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let input = self.value(a);
        let mut value = input.clone();
        for r in 0..value.rows() {
            softmax_row_in_place(value.row_mut(r));
        }
        self.push(Op::Softmax(a), value)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(softplus);
        self.push(Op::Softplus(a), value)
    }

    /// Natural log with inputs clamped up to `LOG_FLOOR`; the gradient is
    /// zero on the clamped region.
    pub fn log_clamped(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        self.push(Op::LogClamped(a), value)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value)
    }

    /// Column means: n x c input reduces to a 1 x c row.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let input = self.value(a);
        let (n, c) = input.shape();
        if n == 0 {
            return Err(Error::Shape("mean over zero rows".into()));
        }
        let mut value = Matrix::zeros(1, c);
        for r in 0..n {
            for (o, x) in value.row_mut(0).iter_mut().zip(input.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / n as f64;
        for o in value.as_mut_slice() {
            *o *= inv;
        }
        Ok(self.push(Op::MeanRows(a), value))
    }

    /// Minimum entry as a 1x1 node; ties resolve to the first position in
    /// row-major order so the subgradient target is deterministic.
    pub fn min_all(&mut self, a: NodeId) -> Result<NodeId> {
        let input = self.value(a);
        let (n, c) = input.shape();
        if n == 0 || c == 0 {
            return Err(Error::Shape("min over empty matrix".into()));
        }
        let mut arg = (0, 0);
        let mut best = input.get(0, 0);
        for r in 0..n {
            for col in 0..c {
                let v = input.get(r, col);
                if v < best {
                    best = v;
                    arg = (r, col);
                }
            }
        }
        Ok(self.push(Op::MinAll(a, arg), Matrix::scalar(best)))
    }

    /// Row-wise log(sum(exp)) restricted to entries where `mask` is nonzero.
    /// Every row must keep at least one entry.
    pub fn masked_row_logsumexp(&mut self, a: NodeId, mask: Matrix) -> Result<NodeId> {
        let input = self.value(a);
        if input.shape() != mask.shape() {
            return Err(Error::Shape(format!(
                "logsumexp mask {}x{} does not match input {}x{}",
                mask.rows(),
                mask.cols(),
                input.rows(),
                input.cols()
            )));
        }
        let mut value = Matrix::zeros(input.rows(), 1);
        for r in 0..input.rows() {
            let (m, s) = masked_row_stats(input.row(r), mask.row(r)).ok_or_else(|| {
                Error::Shape(format!("logsumexp row {r} has no unmasked entries"))
            })?;
            value.set(r, 0, m + s.ln());
        }
        Ok(self.push(Op::MaskedRowLogSumExp(a, mask), value))
    }

    /// Main diagonal of a square matrix as an n x 1 column.
    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let input = self.value(a);
        let (n, c) = input.shape();
        if n != c {
            return Err(Error::Shape(format!("diag of non-square {n}x{c} matrix")));
        }
        let mut value = Matrix::zeros(n, 1);
        for i in 0..n {
            value.set(i, 0, input.get(i, i));
        }
        Ok(self.push(Op::Diag(a), value))
    }

    /// Builds a matrix whose row r is a copy of row `sources[r].1` of node
    /// `sources[r].0`. All source nodes must share the same column count.
    /// Backward scatters each output row's gradient back to its source row,
    /// accumulating when a source row is referenced more than once.
    pub fn stitch_rows(&mut self, sources: Vec<(NodeId, usize)>) -> Result<NodeId> {
        if sources.is_empty() {
            return Err(Error::Shape("stitch of zero rows".into()));
        }
        let cols = self.value(sources[0].0).cols();
        let mut value = Matrix::zeros(sources.len(), cols);
        for (dst, &(src, row)) in sources.iter().enumerate() {
            let m = self.value(src);
            if m.cols() != cols {
                return Err(Error::Shape(format!(
                    "stitch source {dst} has {} cols, expected {cols}",
                    m.cols()
                )));
            }
            if row >= m.rows() {
                return Err(Error::Shape(format!(
                    "stitch source {dst} row {row} out of bounds ({} rows)",
                    m.rows()
                )));
            }
            value.row_mut(dst).copy_from_slice(m.row(row));
        }
        Ok(self.push(Op::StitchRows(sources), value))
    }

    /// Multiplies row r of `a` by the constant `weights[r]`.
    pub fn scale_rows(&mut self, a: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let input = self.value(a);
        if weights.len() != input.rows() {
            return Err(Error::Shape(format!(
                "{} row weights for {} rows",
                weights.len(),
                input.rows()
            )));
        }
        let mut value = input.clone();
        for (r, &w) in weights.iter().enumerate() {
            for o in value.row_mut(r) {
                *o *= w;
            }
        }
        Ok(self.push(Op::ScaleRows(a, weights), value))
    }

    /// Reverse sweep seeded at a scalar loss node. Returns the gradient of
    /// the loss with respect to every parameter leaf reachable from it.
    pub fn backward(&self, loss: NodeId) -> Result<GradientSet> {
        let loss_value = self.value(loss).item().map_err(|_| {
            Error::Shape(format!(
                "backward requires a 1x1 loss node, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            ))
        })?;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {loss_value}")));
        }

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.map(|x| -x))?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |gv, bv| gv * bv)?;
                    let db = g.zip_map(self.value(*a), |gv, av| gv * av)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, g.map(|x| x * factor))?,
                Op::AddBias(x, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, gv) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads, *x, g)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::SubScalar(a, s) => {
                    let ds = Matrix::scalar(-g.sum());
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *s, ds)?;
                }
                Op::Relu(a) => {
                    let da = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 =
                            g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
                        for c in 0..y.cols() {
                            da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Softplus(a) => {
                    let da = g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x))?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::LogClamped(a) => {
                    let da = g.zip_map(self.value(*a), |gv, x| {
                        if x > LOG_FLOOR {
                            gv / x
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Abs(a) => {
                    let da = g.zip_map(self.value(*a), |gv, x| gv * sign(x))?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SumAll(a) => {
                    let gv = g.item()?;
                    let shape = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(shape.0, shape.1, gv))?;
                }
                Op::MeanRows(a) => {
                    let input = self.value(*a);
                    let inv = 1.0 / input.rows() as f64;
                    let mut da = Matrix::zeros(input.rows(), input.cols());
                    for r in 0..input.rows() {
                        for c in 0..input.cols() {
                            da.set(r, c, g.get(0, c) * inv);
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::MinAll(a, arg) => {
                    let gv = g.item()?;
                    let shape = self.value(*a).shape();
                    let mut da = Matrix::zeros(shape.0, shape.1);
                    da.set(arg.0, arg.1, gv);
                    accumulate(&mut grads, *a, da)?;
                }
                Op::MaskedRowLogSumExp(a, mask) => {
                    let input = self.value(*a);
                    let mut da = Matrix::zeros(input.rows(), input.cols());
                    for r in 0..input.rows() {
                        let (m, s) = masked_row_stats(input.row(r), mask.row(r))
                            .expect("validated at construction");
                        let gr = g.get(r, 0);
                        for c in 0..input.cols() {
                            if mask.get(r, c) != 0.0 {
                                da.set(r, c, gr * (input.get(r, c) - m).exp() / s);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Diag(a) => {
                    let n = self.value(*a).rows();
                    let mut da = Matrix::zeros(n, n);
                    for i in 0..n {
                        da.set(i, i, g.get(i, 0));
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::StitchRows(sources) => {
                    for (dst, &(src, row)) in sources.iter().enumerate() {
                        let shape = self.value(src).shape();
                        let slot = grads[src.0]
                            .get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
                        for (o, gv) in slot.row_mut(row).iter_mut().zip(g.row(dst)) {
                            *o += gv;
                        }
                    }
                }
                Op::ScaleRows(a, weights) => {
                    let mut da = g.clone();
                    for (r, &w) in weights.iter().enumerate() {
                        for o in da.row_mut(r) {
                            *o *= w;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
            }
        }

        let mut set = GradientSet::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(key) = &node.op {
                if let Some(g) = grads[idx].take() {
                    set.grads.insert(*key, g);
                }
            }
        }
        Ok(set)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], target: NodeId, delta: Matrix) -> Result<()> {
    match &mut grads[target.0] {
        Some(existing) => existing.add_scaled(&delta, 1.0),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

fn softmax_row_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Max and shifted exp-sum over unmasked entries; `None` if all are masked.
fn masked_row_stats(row: &[f64], mask: &[f64]) -> Option<(f64, f64)> {
    let mut m = f64::NEG_INFINITY;
    for (v, k) in row.iter().zip(mask) {
        if *k != 0.0 && *v > m {
            m = *v;
        }
    }
    if m == f64::NEG_INFINITY {
        return None;
    }
    let mut s = 0.0;
    for (v, k) in row.iter().zip(mask) {
        if *k != 0.0 {
            s += (v - m).exp();
        }
    }
    Some((m, s))
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn key(store: u32) -> ParamKey {
        ParamKey { store, layer: 0, slot: Slot::Weight }
    }

    /// Central finite difference of `f` at coordinate (r, c) of `at`.
    fn central_diff(at: &Matrix, r: usize, c: usize, f: impl Fn(&Matrix) -> f64) -> f64 {
        let h = 1e-4;
        let mut plus = at.clone();
        plus.set(r, c, at.get(r, c) + h);
        let mut minus = at.clone();
        minus.set(r, c, at.get(r, c) - h);
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    /// Checks analytic gradients of a scalar-valued tape program against
    /// central finite differences for every coordinate of one parameter.
    fn check_param_grad(initial: &Matrix, build: impl Fn(&mut Tape, NodeId) -> NodeId) {
        let mut tape = Tape::new();
        let p = tape.param(key(0), initial);
        let loss = build(&mut tape, p);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(&key(0)).cloned().unwrap_or_else(|| {
            Matrix::zeros(initial.rows(), initial.cols())
        });
        for r in 0..initial.rows() {
            for c in 0..initial.cols() {
                let numeric = central_diff(initial, r, c, |m| {
                    let mut t = Tape::new();
                    let p = t.param(key(0), m);
                    let l = build(&mut t, p);
                    t.value(l).item().unwrap()
                });
                let a = analytic.get(r, c);
                assert!(
                    rel_err(a, numeric) <= 1e-3,
                    "grad mismatch at ({r},{c}): analytic {a}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Matrix::from_rows(&[vec![0.0, 0.0], vec![1000.0, 998.0], vec![-3.0, 7.5]]).unwrap(),
        );
        let y = tape.softmax(x);
        let v = tape.value(y);
        assert_abs_diff_eq!(v.get(0, 0), 0.5);
        assert_abs_diff_eq!(v.get(0, 1), 0.5);
        for r in 0..3 {
            let s: f64 = v.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(v.row(r).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap());
        let b = tape.constant(Matrix::from_rows(&[vec![100.3, 98.8, 102.0]]).unwrap());
        let ya = tape.softmax(a);
        let yb = tape.softmax(b);
        for c in 0..3 {
            assert_abs_diff_eq!(
                tape.value(ya).get(0, c),
                tape.value(yb).get(0, c),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn softplus_is_positive_and_stable() {
        assert!(softplus(-800.0) >= 0.0);
        assert_abs_diff_eq!(softplus(800.0), 800.0);
        assert_abs_diff_eq!(softplus(0.0), 2.0_f64.ln());
    }

    #[test]
    fn shared_param_accumulates_fanin() {
        // loss = sum(p) + sum(p) so dp must be 2 everywhere.
        let mut tape = Tape::new();
        let p1 = tape.param(key(0), &Matrix::filled(2, 2, 3.0));
        let p2 = tape.param(key(0), &Matrix::filled(2, 2, 3.0));
        assert_eq!(p1, p2);
        let s1 = tape.sum_all(p1);
        let s2 = tape.sum_all(p2);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(&key(0)).unwrap(), &Matrix::filled(2, 2, 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.param(key(0), &Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(p), Err(Error::Shape(_))));
    }

    #[test]
    fn untouched_store_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(key(0), &Matrix::filled(1, 2, 1.0));
        let _unused = tape.param(key(1), &Matrix::filled(1, 2, 5.0));
        let loss = tape.sum_all(a);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(&key(0)).is_some());
        assert!(grads.get(&key(1)).is_none());
    }

    #[test]
    fn matmul_bias_relu_grads_match_finite_difference() {
        let w = Matrix::from_rows(&[vec![0.6, -1.1], vec![0.4, 0.9]]).unwrap();
        check_param_grad(&w, |tape, p| {
            let x = tape.constant(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.3]]).unwrap());
            let b = tape.constant(Matrix::from_rows(&[vec![0.1, -0.2]]).unwrap());
            let prod = tape.matmul(x, p).unwrap();
            let biased = tape.add_bias(prod, b).unwrap();
            let act = tape.relu(biased);
            let sq = tape.mul(act, act).unwrap();
            tape.sum_all(sq)
        });
    }

    #[test]
    fn softmax_log_grads_match_finite_difference() {
        let w = Matrix::from_rows(&[vec![0.2, -0.7, 1.3], vec![-0.5, 0.8, 0.1]]).unwrap();
        check_param_grad(&w, |tape, p| {
            let q = tape.softmax(p);
            let lq = tape.log_clamped(q);
            let prod = tape.mul(q, lq).unwrap();
            tape.sum_all(prod)
        });
    }

    #[test]
    fn softplus_abs_min_grads_match_finite_difference() {
        let w = Matrix::from_rows(&[vec![0.9], vec![-0.4], vec![1.7]]).unwrap();
        check_param_grad(&w, |tape, p| {
            let e = tape.softplus(p);
            let anchor = tape.min_all(e).unwrap();
            let dev = tape.sub_scalar(e, anchor).unwrap();
            let a = tape.abs(dev);
            tape.sum_all(a)
        });
    }

    #[test]
    fn masked_logsumexp_grads_match_finite_difference() {
        let w =
            Matrix::from_rows(&[vec![0.4, -1.0, 0.2], vec![1.1, 0.3, -0.6], vec![0.0, 0.5, 0.9]])
                .unwrap();
        let mask = Matrix::from_rows(&[
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ])
        .unwrap();
        check_param_grad(&w, |tape, p| {
            let lse = tape.masked_row_logsumexp(p, mask.clone()).unwrap();
            let d = tape.diag(p).unwrap();
            let gap = tape.sub(lse, d).unwrap();
            tape.sum_all(gap)
        });
    }

    #[test]
    fn stitch_and_mean_grads_match_finite_difference() {
        let w = Matrix::from_rows(&[vec![0.5, 1.5], vec![-0.3, 0.7], vec![2.0, -1.0]]).unwrap();
        check_param_grad(&w, |tape, p| {
            let proto = tape.mean_rows(p).unwrap();
            let stitched = tape.stitch_rows(vec![(p, 0), (proto, 0), (p, 2), (p, 0)]).unwrap();
            let scaled = tape.scale_rows(stitched, vec![1.0, 0.5, 2.0, 1.0]).unwrap();
            let sq = tape.mul(scaled, scaled).unwrap();
            tape.sum_all(sq)
        });
    }

    #[test]
    fn transpose_matmul_grads_match_finite_difference() {
        let w = Matrix::from_rows(&[vec![0.3, 0.8], vec![-0.2, 0.6], vec![1.0, -0.4]]).unwrap();
        check_param_grad(&w, |tape, p| {
            let t = tape.transpose(p);
            let gram = tape.matmul(p, t).unwrap();
            let d = tape.diag(gram).unwrap();
            tape.sum_all(d)
        });
    }

    #[test]
    fn masked_logsumexp_requires_unmasked_entry() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let mask = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(tape.masked_row_logsumexp(x, mask).is_err());
    }

    #[test]
    fn min_all_ties_resolve_to_first() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap());
        let m = tape.min_all(x).unwrap();
        let loss = tape.scale(m, 1.0);
        assert_eq!(tape.value(loss).item().unwrap(), 1.0);
        // Gradient lands on (0,1), the first minimum in row-major order.
        let p_val = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let mut t = Tape::new();
        let p = t.param(key(0), &p_val);
        let m = t.min_all(p).unwrap();
        let grads = t.backward(m).unwrap();
        let g = grads.get(&key(0)).unwrap();
        assert_eq!(g.get(0, 1), 1.0);
        assert_eq!(g.get(1, 0), 0.0);
    }
}
