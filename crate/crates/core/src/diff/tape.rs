//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive as it is evaluated. Values live on the
//! tape; [`Var`] is a plain index into it. [`Tape::backward`] walks the record
//! in reverse and returns a [`Gradients`] table, which can then be folded into
//! a [`ParamStore`]'s gradient slots.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Offset added to squared distances before inverting them in
/// inverse-distance interpolation.
pub const IDW_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "none" => Ok(Activation::None),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Max,
}

enum Op {
    Input,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Activate {
        x: Var,
        kind: Activation,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Exp(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    SigmoidDiff(Var, Var),
    MeanRows(Var),
    MaxRows {
        x: Var,
        arg: Vec<usize>,
    },
    Sum(Var),
    Gather {
        x: Var,
        idx: Rc<[usize]>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GroupSoftmax {
        x: Var,
        k: usize,
    },
    GroupSum {
        x: Var,
        k: usize,
    },
    Attend {
        logits: Var,
        values: Var,
        idx: Rc<[usize]>,
        k: usize,
        weights: Vec<f64>,
    },
    GroupMax {
        x: Var,
        arg: Vec<usize>,
    },
    Idw {
        fine: Var,
        coarse: Var,
        feats: Var,
        idx: Rc<[usize]>,
        k: usize,
    },
    Chamfer {
        p: Var,
        q: Var,
        p_to_q: Vec<usize>,
        q_to_p: Vec<usize>,
    },
    GaussianKl {
        mq: Var,
        lq: Var,
        mp: Var,
        lp: Var,
    },
    Detach,
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Linear { .. } => "linear",
            Op::Activate { .. } => "activate",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Exp(..) => "exp",
            Op::Clamp { .. } => "clamp",
            Op::SigmoidDiff(..) => "softmax_pair",
            Op::MeanRows(..) => "reduce_mean",
            Op::MaxRows { .. } => "reduce_max",
            Op::Sum(..) => "sum",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GroupSoftmax { .. } => "group_softmax",
            Op::GroupSum { .. } => "group_sum",
            Op::Attend { .. } => "attend",
            Op::GroupMax { .. } => "group_max",
            Op::Idw { .. } => "idw_interpolate",
            Op::Chamfer { .. } => "chamfer",
            Op::GaussianKl { .. } => "gaussian_kl",
            Op::Detach => "detach",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
}

/// Row-major `c = a * b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserted lengths cover every index reachable through the
    // given strides for the m x k, k x n and m x n operands.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index of the nearest row of `set` to `p` (first one on ties).
fn nearest(p: &[f64], set: &[f64]) -> usize {
    let mut best = f64::INFINITY;
    let mut arg = 0;
    for (j, q) in set.chunks_exact(3).enumerate() {
        let d = sq_dist(p, q);
        if d < best {
            best = d;
            arg = j;
        }
    }
    arg
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Binds a named parameter; repeated requests for one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let mut t = t.clone();
        t.clear_grad();
        let v = self.push(t, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> Vec<(String, Var)> {
        let mut out: Vec<_> = self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        out.sort_by_key(|(_, v)| *v);
        out
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(Error::contract(format!("linear weight must be 2-D, got {ws:?}")));
        }
        let (cin, cout) = (ws[0], ws[1]);
        let xv = self.value(x);
        if xv.cols() != cin {
            return Err(Error::contract(format!(
                "linear input width {} does not match weight rows {cin}",
                xv.cols()
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::contract(format!(
                    "linear bias length {} does not match output width {cout}",
                    self.value(b).len()
                )));
            }
        }
        let rows = xv.rows();
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = b {
            let bd = self.data(b);
            for r in out.chunks_exact_mut(cout) {
                r.copy_from_slice(bd);
            }
        }
        gemm(
            rows,
            cin,
            cout,
            xv.data(),
            (cin as isize, 1),
            self.data(w),
            (cout as isize, 1),
            &mut out,
            1.0,
        );
        let mut shape = xv.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = cout,
            None => shape.push(cout),
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        let xv = self.value(x);
        let data = match kind {
            Activation::Relu => xv.data().iter().map(|&v| v.max(0.0)).collect(),
            Activation::None => xv.data().to_vec(),
        };
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Activate { x, kind })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, c))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let rv = self.data(row);
        if rv.len() != c {
            return Err(Error::contract(format!(
                "row broadcast: row length {} does not match width {c}",
                rv.len()
            )));
        }
        let data = av
            .data()
            .chunks_exact(c.max(1))
            .flat_map(|r| r.iter().zip(rv).map(|(&x, &y)| f(x, y)))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    /// `a[i, c] + row[c]` for every row `i`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// `a[i, c] * row[c]` for every row `i`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|v| v.exp()).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Exp(a))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Clamp { x, lo, hi })
    }

    /// Two-way channelwise softmax: `a_c = e^{x_c} / (e^{x_c} + e^{y_c})` and
    /// `b_c = 1 - a_c`, both evaluated from one shared exponential so that they
    /// sum to one up to a single rounding.
    pub fn softmax_pair(&mut self, logits_a: Var, logits_b: Var) -> Result<(Var, Var)> {
        if self.value(logits_a).len() != self.value(logits_b).len() {
            return Err(Error::contract(format!(
                "softmax_pair: lengths {} and {} differ",
                self.value(logits_a).len(),
                self.value(logits_b).len()
            )));
        }
        let a = self.zip(logits_a, logits_b, Op::SigmoidDiff(logits_a, logits_b), |x, y| {
            stable_sigmoid(x - y)
        });
        let b = self.zip(logits_b, logits_a, Op::SigmoidDiff(logits_b, logits_a), |x, y| {
            stable_sigmoid(x - y)
        });
        Ok((a, b))
    }

    pub fn reduce(&mut self, x: Var, kind: Reduction) -> Result<Var> {
        match kind {
            Reduction::Mean => self.mean_rows(x),
            Reduction::Max => self.max_rows(x),
        }
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 {
            return Err(Error::EmptyReduction);
        }
        // Each column is summed in sorted order so the result does not depend
        // on row order.
        let d = xv.data();
        let mut col = vec![0.0; r];
        let mut out = vec![0.0; c];
        for (ch, o) in out.iter_mut().enumerate() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = d[i * c + ch];
            }
            col.sort_unstable_by(f64::total_cmp);
            *o = col.iter().sum();
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x)))
    }

    /// Channelwise maximum over rows; the first maximal row wins ties.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 {
            return Err(Error::EmptyReduction);
        }
        let d = xv.data();
        let mut out = d[..c].to_vec();
        let mut arg = vec![0; c];
        for i in 1..r {
            let row = &d[i * c..(i + 1) * c];
            for ch in 0..c {
                if row[ch] > out[ch] {
                    out[ch] = row[ch];
                    arg[ch] = i;
                }
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MaxRows { x, arg }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Selects rows of `x` by index (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!("gather index {bad} out of range for {r} rows")));
        }
        let d = xv.data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(idx.len(), c, out)?;
        Ok(self.push(t, Op::Gather { x, idx }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::contract("concat_cols: row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::contract("concat_rows: widths differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rows = out.len() / cols.max(1);
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    fn check_groups(&self, x: Var, k: usize) -> Result<(usize, usize)> {
        let xv = self.value(x);
        if k == 0 || !xv.rows().is_multiple_of(k) {
            return Err(Error::contract(format!(
                "{} rows cannot be split into groups of {k}",
                xv.rows()
            )));
        }
        Ok((xv.rows() / k, xv.cols()))
    }

    /// Softmax over each run of `k` consecutive rows, per column.
    pub fn group_softmax(&mut self, x: Var, k: usize) -> Result<Var> {
        let (groups, c) = self.check_groups(x, k)?;
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        let mut m = vec![0.0; c];
        let mut s = vec![0.0; c];
        for g in 0..groups {
            let block = &d[g * k * c..(g + 1) * k * c];
            group_max_into(block, c, &mut m);
            s.fill(0.0);
            let ob = &mut out[g * k * c..(g + 1) * k * c];
            for (orow, row) in ob.chunks_exact_mut(c).zip(block.chunks_exact(c)) {
                for ch in 0..c {
                    let e = (row[ch] - m[ch]).exp();
                    orow[ch] = e;
                    s[ch] += e;
                }
            }
            for orow in ob.chunks_exact_mut(c) {
                for (o, t) in orow.iter_mut().zip(&s) {
                    *o /= t;
                }
            }
        }
        let t = Tensor::matrix(groups * k, c, out)?;
        Ok(self.push(t, Op::GroupSoftmax { x, k }))
    }

    /// Attention-weighted neighbourhood sum.
    ///
    /// Row `i` of the output is `sum_j a_ij * values[idx[i*k+j]]`, where `a_ij` is the
    /// per-channel softmax of `logits` over the `k` rows of group `i`. Equivalent to
    /// `group_sum(mul(group_softmax(logits), gather(values, idx)))` without the
    /// pair-sized intermediates.
    pub fn attend(&mut self, logits: Var, values: Var, idx: Rc<[usize]>, k: usize) -> Result<Var> {
        let (groups, c) = self.check_groups(logits, k)?;
        let lv = self.data(logits);
        let vv = self.value(values);
        if idx.len() != groups * k || vv.cols() != c {
            return Err(Error::contract(format!(
                "attend: {} logit rows x {c}, {} indices, values {}x{}",
                groups * k,
                idx.len(),
                vv.rows(),
                vv.cols()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= vv.rows()) {
            return Err(Error::contract(format!(
                "attend index {bad} out of range for {} rows",
                vv.rows()
            )));
        }
        let vd = vv.data();
        let mut out = vec![0.0; groups * c];
        let mut weights = vec![0.0; lv.len()];
        let mut m = vec![0.0; c];
        let mut s = vec![0.0; c];
        for g in 0..groups {
            let block = &lv[g * k * c..(g + 1) * k * c];
            let wb = &mut weights[g * k * c..(g + 1) * k * c];
            group_max_into(block, c, &mut m);
            s.fill(0.0);
            let o = &mut out[g * c..(g + 1) * c];
            for (j, (row, wrow)) in block.chunks_exact(c).zip(wb.chunks_exact_mut(c)).enumerate() {
                let src = &vd[idx[g * k + j] * c..(idx[g * k + j] + 1) * c];
                for ch in 0..c {
                    let e = (row[ch] - m[ch]).exp();
                    wrow[ch] = e;
                    s[ch] += e;
                    o[ch] += e * src[ch];
                }
            }
            for t in s.iter_mut() {
                *t = 1.0 / *t;
            }
            for (a, t) in o.iter_mut().zip(&s) {
                *a *= t;
            }
            for wrow in wb.chunks_exact_mut(c) {
                for (a, t) in wrow.iter_mut().zip(&s) {
                    *a *= t;
                }
            }
        }
        let t = Tensor::matrix(groups, c, out)?;
        Ok(self.push(t, Op::Attend { logits, values, idx, k, weights }))
    }

    /// Sum over each run of `k` consecutive rows.
    pub fn group_sum(&mut self, x: Var, k: usize) -> Result<Var> {
        let (groups, c) = self.check_groups(x, k)?;
        let d = self.data(x);
        let mut out = vec![0.0; groups * c];
        for g in 0..groups {
            let o = &mut out[g * c..(g + 1) * c];
            for j in 0..k {
                let row = &d[(g * k + j) * c..(g * k + j + 1) * c];
                for (a, b) in o.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        let t = Tensor::matrix(groups, c, out)?;
        Ok(self.push(t, Op::GroupSum { x, k }))
    }

    /// Channelwise maximum over each run of `k` consecutive rows.
    pub fn group_max(&mut self, x: Var, k: usize) -> Result<Var> {
        let (groups, c) = self.check_groups(x, k)?;
        let d = self.data(x);
        let mut out = vec![0.0; groups * c];
        let mut arg = vec![0usize; groups * c];
        for g in 0..groups {
            for ch in 0..c {
                let mut best = d[g * k * c + ch];
                let mut at = g * k;
                for j in 1..k {
                    let v = d[(g * k + j) * c + ch];
                    if v > best {
                        best = v;
                        at = g * k + j;
                    }
                }
                out[g * c + ch] = best;
                arg[g * c + ch] = at;
            }
        }
        let t = Tensor::matrix(groups, c, out)?;
        Ok(self.push(t, Op::GroupMax { x, arg }))
    }

    /// Inverse-distance interpolation of `feats` (attached to `coarse`) onto
    /// `fine`, using the `k` coarse neighbours listed per fine row in `idx`.
    /// Weights are `1 / (d^2 + IDW_EPS)`, normalised; a fine point that
    /// coincides with a coarse neighbour copies that neighbour's features.
    pub fn idw_interpolate(
        &mut self,
        fine: Var,
        coarse: Var,
        feats: Var,
        idx: Rc<[usize]>,
        k: usize,
    ) -> Result<Var> {
        let (fv, cv, xv) = (self.value(fine), self.value(coarse), self.value(feats));
        if fv.cols() != 3 || cv.cols() != 3 {
            return Err(Error::contract("idw_interpolate: point sets must be N x 3"));
        }
        let (nf, nc, c) = (fv.rows(), cv.rows(), xv.cols());
        if xv.rows() != nc {
            return Err(Error::contract("idw_interpolate: feature rows differ from coarse points"));
        }
        if k == 0 || idx.len() != nf * k || idx.iter().any(|&j| j >= nc) {
            return Err(Error::contract("idw_interpolate: malformed neighbour index"));
        }
        let (fd, cd, xd) = (fv.data(), cv.data(), xv.data());
        let mut out = vec![0.0; nf * c];
        for i in 0..nf {
            let p = &fd[i * 3..i * 3 + 3];
            let nb = &idx[i * k..(i + 1) * k];
            let o = &mut out[i * c..(i + 1) * c];
            if let Some(&j) = nb.iter().find(|&&j| sq_dist(p, &cd[j * 3..j * 3 + 3]) == 0.0) {
                o.copy_from_slice(&xd[j * c..(j + 1) * c]);
                continue;
            }
            let mut wsum = 0.0;
            for &j in nb {
                let w = 1.0 / (sq_dist(p, &cd[j * 3..j * 3 + 3]) + IDW_EPS);
                wsum += w;
                for (a, b) in o.iter_mut().zip(&xd[j * c..(j + 1) * c]) {
                    *a += w * b;
                }
            }
            o.iter_mut().for_each(|v| *v /= wsum);
        }
        let t = Tensor::matrix(nf, c, out)?;
        Ok(self.push(
            t,
            Op::Idw {
                fine,
                coarse,
                feats,
                idx,
                k,
            },
        ))
    }

    /// Symmetric squared Chamfer distance between two `N x 3` point sets.
    pub fn chamfer(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.cols() != 3 || qv.cols() != 3 {
            return Err(Error::contract("chamfer: point sets must be N x 3"));
        }
        if pv.rows() == 0 || qv.rows() == 0 {
            return Err(Error::contract("chamfer: empty point set"));
        }
        let (pd, qd) = (pv.data(), qv.data());
        let p_to_q: Vec<usize> = pd.chunks_exact(3).map(|x| nearest(x, qd)).collect();
        let q_to_p: Vec<usize> = qd.chunks_exact(3).map(|y| nearest(y, pd)).collect();
        let fwd: f64 = pd
            .chunks_exact(3)
            .zip(&p_to_q)
            .map(|(x, &j)| sq_dist(x, &qd[j * 3..j * 3 + 3]))
            .sum::<f64>()
            / pv.rows() as f64;
        let bwd: f64 = qd
            .chunks_exact(3)
            .zip(&q_to_p)
            .map(|(y, &i)| sq_dist(y, &pd[i * 3..i * 3 + 3]))
            .sum::<f64>()
            / qv.rows() as f64;
        Ok(self.push(
            Tensor::scalar(fwd + bwd),
            Op::Chamfer {
                p,
                q,
                p_to_q,
                q_to_p,
            },
        ))
    }

    /// `KL[N(mq, e^lq) || N(mp, e^lp)]` for diagonal Gaussians, summed over
    /// dimensions.
    pub fn gaussian_kl(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Result<Var> {
        let n = self.value(mq).len();
        if [lq, mp, lp].iter().any(|&v| self.value(v).len() != n) {
            return Err(Error::contract("gaussian_kl: dimension mismatch"));
        }
        let (a, b, c, d) = (self.data(mq), self.data(lq), self.data(mp), self.data(lp));
        let kl = (0..n)
            .map(|i| {
                let diff = a[i] - c[i];
                0.5 * (d[i] - b[i] + (b[i] - d[i]).exp() + diff * diff * (-d[i]).exp() - 1.0)
            })
            .sum();
        Ok(self.push(Tensor::scalar(kl), Op::GaussianKl { mq, lq, mp, lp }))
    }

    /// Copies a value forward with no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Detach)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.data(x).to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Fails with the first node holding a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.nodes.iter().position(|n| !n.value.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                index,
                op: self.nodes[index].op.name(),
            }),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract("backward: loss must hold exactly one value"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.bound_params(),
        })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Input | Op::Param | Op::Detach => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let (rows, cin) = (xv.rows(), xv.cols());
                let cout = node.value.cols();
                {
                    let gx = slot(grads, *x, xv.len());
                    gemm(
                        rows,
                        cout,
                        cin,
                        g,
                        (cout as isize, 1),
                        self.data(*w),
                        (1, cout as isize),
                        gx,
                        1.0,
                    );
                }
                {
                    let gw = slot(grads, *w, cin * cout);
                    gemm(cin, rows, cout, xv.data(), (1, cin as isize), g, (cout as isize, 1), gw, 1.0);
                }
                if let Some(b) = b {
                    let gb = slot(grads, *b, cout);
                    for row in g.chunks_exact(cout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Activate { x, kind } => {
                let xd = self.data(*x);
                let gx = slot(grads, *x, xd.len());
                match kind {
                    Activation::Relu => {
                        for ((a, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                            if xv > 0.0 {
                                *a += gv;
                            }
                        }
                    }
                    Activation::None => add_into(gx, g),
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                let gb = slot(grads, *b, g.len());
                for (s, v) in gb.iter_mut().zip(g) {
                    *s -= v;
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let ga = slot(grads, *a, g.len());
                for ((s, gv), y) in ga.iter_mut().zip(g).zip(bd) {
                    *s += gv * y;
                }
                let gb = slot(grads, *b, g.len());
                for ((s, gv), x) in gb.iter_mut().zip(g).zip(ad) {
                    *s += gv * x;
                }
            }
            Op::Scale(a, c) => {
                let ga = slot(grads, *a, g.len());
                for (s, gv) in ga.iter_mut().zip(g) {
                    *s += gv * c;
                }
            }
            Op::AddRow(a, row) => {
                let c = self.data(*row).len();
                add_into(slot(grads, *a, g.len()), g);
                let gr = slot(grads, *row, c);
                for r in g.chunks_exact(c.max(1)) {
                    add_into(gr, r);
                }
            }
            Op::MulRow(a, row) => {
                let rd = self.data(*row);
                let c = rd.len();
                let ad = self.data(*a);
                {
                    let ga = slot(grads, *a, g.len());
                    for (gr, sr) in g.chunks_exact(c).zip(ga.chunks_exact_mut(c)) {
                        for ((s, gv), y) in sr.iter_mut().zip(gr).zip(rd) {
                            *s += gv * y;
                        }
                    }
                }
                let grw = slot(grads, *row, c);
                for (gr, ar) in g.chunks_exact(c).zip(ad.chunks_exact(c)) {
                    for ((s, gv), x) in grw.iter_mut().zip(gr).zip(ar) {
                        *s += gv * x;
                    }
                }
            }
            Op::Exp(a) => {
                let ga = slot(grads, *a, g.len());
                for ((s, gv), y) in ga.iter_mut().zip(g).zip(out) {
                    *s += gv * y;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                let gx = slot(grads, *x, g.len());
                for ((s, gv), v) in gx.iter_mut().zip(g).zip(xd) {
                    if *v >= *lo && *v <= *hi {
                        *s += gv;
                    }
                }
            }
            Op::SigmoidDiff(a, b) => {
                let local: Vec<f64> = g.iter().zip(out).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                add_into(slot(grads, *a, g.len()), &local);
                let gb = slot(grads, *b, g.len());
                for (s, v) in gb.iter_mut().zip(&local) {
                    *s -= v;
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let inv = 1.0 / r as f64;
                let gx = slot(grads, *x, r * c);
                for row in gx.chunks_exact_mut(c) {
                    for (s, gv) in row.iter_mut().zip(g) {
                        *s += gv * inv;
                    }
                }
            }
            Op::MaxRows { x, arg } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let gx = slot(grads, *x, xv.len());
                for (ch, &i) in arg.iter().enumerate() {
                    gx[i * c + ch] += g[ch];
                }
            }
            Op::Sum(x) => {
                let gx = slot(grads, *x, self.value(*x).len());
                gx.iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let gx = slot(grads, *x, xv.len());
                for (o, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[i * c..(i + 1) * c], &g[o * c..(o + 1) * c]);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let gp = slot(grads, p, rows * w);
                    for i in 0..rows {
                        add_into(&mut gp[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    add_into(slot(grads, p, n), &g[off..off + n]);
                    off += n;
                }
            }
            Op::GroupSoftmax { x, k } => {
                let c = node.value.cols();
                let gx = slot(grads, *x, g.len());
                let mut dot = vec![0.0; c];
                for ((ob, gb), xb) in out
                    .chunks_exact(k * c)
                    .zip(g.chunks_exact(k * c))
                    .zip(gx.chunks_exact_mut(k * c))
                {
                    dot.fill(0.0);
                    for (orow, grow) in ob.chunks_exact(c).zip(gb.chunks_exact(c)) {
                        for ch in 0..c {
                            dot[ch] += orow[ch] * grow[ch];
                        }
                    }
                    for ((orow, grow), xrow) in ob
                        .chunks_exact(c)
                        .zip(gb.chunks_exact(c))
                        .zip(xb.chunks_exact_mut(c))
                    {
                        for ch in 0..c {
                            xrow[ch] += orow[ch] * (grow[ch] - dot[ch]);
                        }
                    }
                }
            }
            Op::Attend { logits, values, idx, k, weights } => {
                let c = node.value.cols();
                let vd = self.data(*values);
                let mut gl = vec![0.0; weights.len()];
                let mut gv = vec![0.0; vd.len()];
                for (r, (wrow, glr)) in weights.chunks_exact(c).zip(gl.chunks_exact_mut(c)).enumerate() {
                    let gi = r / k;
                    let y = &out[gi * c..(gi + 1) * c];
                    let gy = &g[gi * c..(gi + 1) * c];
                    let src = idx[r] * c;
                    let vrow = &vd[src..src + c];
                    let gvr = &mut gv[src..src + c];
                    for ch in 0..c {
                        let ag = wrow[ch] * gy[ch];
                        glr[ch] = ag * (vrow[ch] - y[ch]);
                        gvr[ch] += ag;
                    }
                }
                add_into(slot(grads, *logits, gl.len()), &gl);
                add_into(slot(grads, *values, gv.len()), &gv);
            }
            Op::GroupSum { x, k } => {
                let c = node.value.cols();
                let gx = slot(grads, *x, self.value(*x).len());
                for (r, row) in gx.chunks_exact_mut(c).enumerate() {
                    let gi = r / k;
                    add_into(row, &g[gi * c..(gi + 1) * c]);
                }
            }
            Op::GroupMax { x, arg } => {
                let c = node.value.cols();
                let gx = slot(grads, *x, self.value(*x).len());
                for (o, &r) in arg.iter().enumerate() {
                    gx[r * c + o % c] += g[o];
                }
            }
            Op::Idw {
                fine,
                coarse,
                feats,
                idx,
                k,
            } => self.idw_backward(*fine, *coarse, *feats, idx, *k, out, g, grads),
            Op::Chamfer { p, q, p_to_q, q_to_p } => {
                let (pd, qd) = (self.data(*p), self.data(*q));
                let (np, nq) = (pd.len() / 3, qd.len() / 3);
                let mut gp = vec![0.0; pd.len()];
                let mut gq = vec![0.0; qd.len()];
                let sp = 2.0 * g[0] / np as f64;
                for (i, &j) in p_to_q.iter().enumerate() {
                    for d in 0..3 {
                        let v = sp * (pd[i * 3 + d] - qd[j * 3 + d]);
                        gp[i * 3 + d] += v;
                        gq[j * 3 + d] -= v;
                    }
                }
                let sq = 2.0 * g[0] / nq as f64;
                for (j, &i) in q_to_p.iter().enumerate() {
                    for d in 0..3 {
                        let v = sq * (qd[j * 3 + d] - pd[i * 3 + d]);
                        gq[j * 3 + d] += v;
                        gp[i * 3 + d] -= v;
                    }
                }
                add_into(slot(grads, *p, pd.len()), &gp);
                add_into(slot(grads, *q, qd.len()), &gq);
            }
            Op::GaussianKl { mq, lq, mp, lp } => {
                let (a, b, c, d) = (self.data(*mq), self.data(*lq), self.data(*mp), self.data(*lp));
                let n = a.len();
                let s = g[0];
                let mut gmq = vec![0.0; n];
                let mut glq = vec![0.0; n];
                let mut gmp = vec![0.0; n];
                let mut glp = vec![0.0; n];
                for i in 0..n {
                    let inv = (-d[i]).exp();
                    let diff = a[i] - c[i];
                    gmq[i] = s * diff * inv;
                    gmp[i] = -s * diff * inv;
                    glq[i] = s * 0.5 * ((b[i] - d[i]).exp() - 1.0);
                    glp[i] = s * 0.5 * (1.0 - (b[i] - d[i]).exp() - diff * diff * inv);
                }
                add_into(slot(grads, *mq, n), &gmq);
                add_into(slot(grads, *lq, n), &glq);
                add_into(slot(grads, *mp, n), &gmp);
                add_into(slot(grads, *lp, n), &glp);
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn idw_backward(
        &self,
        fine: Var,
        coarse: Var,
        feats: Var,
        idx: &[usize],
        k: usize,
        out: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (fd, cd, xd) = (self.data(fine), self.data(coarse), self.data(feats));
        let c = self.value(feats).cols();
        let nf = fd.len() / 3;
        let mut gf = vec![0.0; fd.len()];
        let mut gc = vec![0.0; cd.len()];
        let mut gx = vec![0.0; xd.len()];
        for i in 0..nf {
            let p = &fd[i * 3..i * 3 + 3];
            let nb = &idx[i * k..(i + 1) * k];
            let gi = &g[i * c..(i + 1) * c];
            if let Some(&j) = nb.iter().find(|&&j| sq_dist(p, &cd[j * 3..j * 3 + 3]) == 0.0) {
                add_into(&mut gx[j * c..(j + 1) * c], gi);
                continue;
            }
            let oi = &out[i * c..(i + 1) * c];
            let ws: Vec<f64> = nb
                .iter()
                .map(|&j| 1.0 / (sq_dist(p, &cd[j * 3..j * 3 + 3]) + IDW_EPS))
                .collect();
            let wsum: f64 = ws.iter().sum();
            for (&j, &w) in nb.iter().zip(&ws) {
                let fj = &xd[j * c..(j + 1) * c];
                let share = w / wsum;
                let mut dw = 0.0;
                for ch in 0..c {
                    gx[j * c + ch] += share * gi[ch];
                    dw += gi[ch] * (fj[ch] - oi[ch]);
                }
                // d out / d (d^2) = dw / wsum * (-w^2)
                let dd2 = -dw / wsum * w * w;
                for d in 0..3 {
                    let delta = 2.0 * (p[d] - cd[j * 3 + d]) * dd2;
                    gf[i * 3 + d] += delta;
                    gc[j * 3 + d] -= delta;
                }
            }
        }
        add_into(slot(grads, fine, fd.len()), &gf);
        add_into(slot(grads, coarse, cd.len()), &gc);
        add_into(slot(grads, feats, xd.len()), &gx);
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn group_max_into(block: &[f64], c: usize, m: &mut [f64]) {
    m.copy_from_slice(&block[..c]);
    for row in block.chunks_exact(c).skip(1) {
        for (a, b) in m.iter_mut().zip(row) {
            *a = a.max(*b);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Same as [`get`](Self::get) but yields zeros for disconnected nodes.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    /// Parameter gradients keyed by name.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&[f64]>)> {
        self.params.iter().map(|(n, v)| (n.as_str(), self.get(*v)))
    }

    /// Adds every parameter gradient into the matching slot of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in self.param_grads() {
            if let Some(g) = g {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}
