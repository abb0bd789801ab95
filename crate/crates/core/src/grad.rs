//! Reverse-mode differentiation on an append-only scalar tape.
//!
//! Every operation records its value together with the local partials with
//! respect to its parents at construction time, so the backward sweep is a
//! single reverse pass over a flat buffer. Numerical code is written once
//! against the [`Real`] trait and runs either on plain `f64` (forward
//! evaluation) or on [`Var`] (recorded for differentiation).

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("node {0} is not a scalar node of this tape")]
    ForeignNode(u32),
    #[error("gradient entry {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
}

/// Elementary operations the tape knows how to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Abs,
    Max,
    Clamp,
    Softplus,
    Sigmoid,
    Dot,
    Sum,
    Norm,
    /// Value and local partials supplied by the caller, for sub-computations
    /// differentiated outside the tape.
    Linearized,
}

#[derive(Default)]
struct TapeData {
    ops: Vec<Op>,
    values: Vec<f64>,
    // (start, len) into `parents`/`partials`
    spans: Vec<(u32, u32)>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    leaves: Vec<u32>,
    min_kink: f64,
}

/// Append-only record of scalar operations.
pub struct Tape {
    data: RefCell<TapeData>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data.borrow();
        f.debug_struct("Tape")
            .field("nodes", &d.values.len())
            .field("leaves", &d.leaves.len())
            .field("edges", &d.parents.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            data: RefCell::new(TapeData {
                min_kink: f64::INFINITY,
                ..Default::default()
            }),
        }
    }

    /// Creates a differentiable input. Leaves are numbered in creation order,
    /// which is the order of the returned [`GradVector`].
    pub fn leaf(&self, value: f64) -> Var<'_> {
        let mut d = self.data.borrow_mut();
        let index = d.values.len() as u32;
        d.ops.push(Op::Leaf);
        d.values.push(value);
        let start = d.parents.len() as u32;
        d.spans.push((start, 0));
        d.leaves.push(index);
        Var {
            tape: self,
            index,
            value,
        }
    }

    pub fn leaves(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(Op::Const, value, &[])
    }

    /// Records a node with a precomputed value and local partials with
    /// respect to `parents`.
    pub fn linearized(&self, value: f64, parents: &[(Var<'_>, f64)]) -> Var<'_> {
        self.push_iter(Op::Linearized, value, parents.iter().map(|(p, w)| (p.index, *w)))
    }

    /// Forgets every node but keeps the allocations.
    pub fn clear(&mut self) {
        let d = self.data.get_mut();
        d.ops.clear();
        d.values.clear();
        d.spans.clear();
        d.parents.clear();
        d.partials.clear();
        d.leaves.clear();
        d.min_kink = f64::INFINITY;
    }

    pub fn len(&self) -> usize {
        self.data.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf_count(&self) -> usize {
        self.data.borrow().leaves.len()
    }

    pub fn edge_count(&self) -> usize {
        self.data.borrow().parents.len()
    }

    pub fn op(&self, var: Var<'_>) -> Op {
        self.data.borrow().ops[var.index as usize]
    }

    /// Smallest distance to a non-differentiable point (max tie, abs at zero,
    /// clamp bound) seen while recording. Finite-difference checks are only
    /// meaningful when this exceeds their step.
    pub fn min_kink_gap(&self) -> f64 {
        self.data.borrow().min_kink
    }

    fn note_kink(&self, gap: f64) {
        let mut d = self.data.borrow_mut();
        if gap < d.min_kink {
            d.min_kink = gap;
        }
    }

    fn push(&self, op: Op, value: f64, edges: &[(u32, f64)]) -> Var<'_> {
        let mut d = self.data.borrow_mut();
        let index = d.values.len() as u32;
        let start = d.parents.len() as u32;
        for &(p, w) in edges {
            debug_assert!(p < index);
            d.parents.push(p);
            d.partials.push(w);
        }
        d.ops.push(op);
        d.values.push(value);
        d.spans.push((start, edges.len() as u32));
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn push_iter<I>(&self, op: Op, value: f64, edges: I) -> Var<'_>
    where
        I: IntoIterator<Item = (u32, f64)>,
    {
        let mut d = self.data.borrow_mut();
        let index = d.values.len() as u32;
        let start = d.parents.len() as u32;
        for (p, w) in edges {
            d.parents.push(p);
            d.partials.push(w);
        }
        let len = d.parents.len() as u32 - start;
        d.ops.push(op);
        d.values.push(value);
        d.spans.push((start, len));
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn check(&self, var: Var<'_>) -> Result<(), GradError> {
        if !std::ptr::eq(var.tape, self) || var.index as usize >= self.len() {
            return Err(GradError::ForeignNode(var.index));
        }
        Ok(())
    }

    /// Gradient of `output` with respect to every leaf.
    pub fn backward(&self, output: Var<'_>) -> Result<GradVector, GradError> {
        self.backward_seeded(&[(output, 1.0)])
    }

    /// Vector-Jacobian product: propagates the given adjoint seeds back to the
    /// leaves. Used when several scalar outputs of one tape feed a loss that is
    /// assembled elsewhere.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, f64)]) -> Result<GradVector, GradError> {
        let adj = self.adjoints(seeds)?;
        let d = self.data.borrow();
        let values = d.leaves.iter().map(|&l| adj[l as usize]).collect();
        Ok(GradVector { values })
    }

    /// Adjoint of every node (indexed by [`Var::index`]) after propagating
    /// `seeds`. Nodes recorded after the last seed are left at zero.
    pub fn adjoints(&self, seeds: &[(Var<'_>, f64)]) -> Result<Vec<f64>, GradError> {
        for &(v, _) in seeds {
            self.check(v)?;
        }
        let d = self.data.borrow();
        let n = d.values.len();
        let mut adj = vec![0.0f64; n];
        let mut top = 0usize;
        for &(v, s) in seeds {
            adj[v.index as usize] += s;
            top = top.max(v.index as usize + 1);
        }
        for i in (0..top).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (start, len) = d.spans[i];
            let (start, end) = (start as usize, (start + len) as usize);
            for k in start..end {
                adj[d.parents[k] as usize] += a * d.partials[k];
            }
        }
        Ok(adj)
    }
}

/// Gradient with respect to the tape's leaves, in leaf creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
}

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradVector) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn check_finite(&self) -> Result<(), GradError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(GradError::NonFinite {
                index,
                value: self.values[index],
            }),
            None => Ok(()),
        }
    }
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} = {})", self.index, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: Op, value: f64, partial: f64) -> Self {
        self.tape.push(op, value, &[(self.index, partial)])
    }
}

/// Scalar arithmetic shared by plain evaluation and the tape.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    /// A constant living in the same context as `self`.
    fn lift(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn softplus(self) -> Self;
    fn sigmoid(self) -> Self;
    /// Hard clamp; the derivative is passed through unchanged inside
    /// `[lo, hi]` and is zero outside.
    fn clamp_to(self, lo: f64, hi: f64) -> Self;
    /// Maximum of a non-empty slice; ties go to the lowest index.
    fn max_of(xs: &[Self]) -> Self;
    /// `Σ w_k x_k + bias`.
    fn affine(weights: &[Self], inputs: &[Self], bias: Self) -> Self;
    fn sum(xs: &[Self]) -> Self;
    /// Euclidean norm; the zero vector gets the zero subgradient.
    fn norm(xs: &[Self]) -> Self;

    fn max2(self, other: Self) -> Self {
        Self::max_of(&[self, other])
    }

    fn square(self) -> Self {
        self * self
    }
}

fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    softplus_f64(x)
}

pub fn sigmoid(x: f64) -> f64 {
    sigmoid_f64(x)
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Inverse of [`sigmoid`] for `y` in `(0, 1)`.
pub fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64, f64) {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if i == 0 || v > best_v {
            if i > 0 {
                second = best_v;
            }
            best = i;
            best_v = v;
        } else if v > second {
            second = v;
        }
    }
    (best, best_v, second)
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lift(self, c: f64) -> Self {
        c
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        self.max(lo).min(hi)
    }
    fn max_of(xs: &[Self]) -> Self {
        assert!(!xs.is_empty(), "max of an empty slice");
        argmax(xs.iter().copied()).1
    }
    fn affine(weights: &[Self], inputs: &[Self], bias: Self) -> Self {
        weights
            .iter()
            .zip(inputs)
            .fold(bias, |acc, (w, x)| acc + w * x)
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    fn norm(xs: &[Self]) -> Self {
        xs.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.value
    }
    fn lift(self, c: f64) -> Self {
        self.tape.constant(c)
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(Op::Exp, e, e)
    }
    fn ln(self) -> Self {
        self.unary(Op::Ln, self.value.ln(), 1.0 / self.value)
    }
    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.unary(Op::Sqrt, s, 0.5 / s)
    }
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(Op::Tanh, t, 1.0 - t * t)
    }
    fn abs(self) -> Self {
        self.tape.note_kink(self.value.abs());
        let sign = if self.value < 0.0 { -1.0 } else { 1.0 };
        self.unary(Op::Abs, self.value.abs(), sign)
    }
    fn softplus(self) -> Self {
        self.unary(
            Op::Softplus,
            softplus_f64(self.value),
            sigmoid_f64(self.value),
        )
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.value);
        self.unary(Op::Sigmoid, s, s * (1.0 - s))
    }
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        let x = self.value;
        self.tape.note_kink((x - lo).abs().min((x - hi).abs()));
        let inside = (lo..=hi).contains(&x);
        let value = x.max(lo).min(hi);
        self.unary(Op::Clamp, value, if inside { 1.0 } else { 0.0 })
    }
    fn max_of(xs: &[Self]) -> Self {
        assert!(!xs.is_empty(), "max of an empty slice");
        if xs.len() == 1 {
            return xs[0];
        }
        let tape = xs[0].tape;
        let (best, value, second) = argmax(xs.iter().map(|x| x.value));
        tape.note_kink(value - second);
        tape.push(Op::Max, value, &[(xs[best].index, 1.0)])
    }
    fn affine(weights: &[Self], inputs: &[Self], bias: Self) -> Self {
        debug_assert_eq!(weights.len(), inputs.len());
        let value = weights
            .iter()
            .zip(inputs)
            .fold(bias.value, |acc, (w, x)| acc + w.value * x.value);
        let edges = weights
            .iter()
            .zip(inputs)
            .flat_map(|(w, x)| [(w.index, x.value), (x.index, w.value)])
            .chain(std::iter::once((bias.index, 1.0)));
        bias.tape.push_iter(Op::Dot, value, edges)
    }
    fn sum(xs: &[Self]) -> Self {
        assert!(!xs.is_empty(), "sum of an empty slice");
        let value = xs.iter().map(|x| x.value).sum();
        xs[0]
            .tape
            .push_iter(Op::Sum, value, xs.iter().map(|x| (x.index, 1.0)))
    }
    fn norm(xs: &[Self]) -> Self {
        assert!(!xs.is_empty(), "norm of an empty slice");
        let n = xs.iter().map(|x| x.value * x.value).sum::<f64>().sqrt();
        let tape = xs[0].tape;
        tape.note_kink(n);
        let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
        tape.push_iter(Op::Norm, n, xs.iter().map(|x| (x.index, x.value * inv)))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.tape.push(
            Op::Add,
            self.value + rhs.value,
            &[(self.index, 1.0), (rhs.index, 1.0)],
        )
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.tape.push(
            Op::Sub,
            self.value - rhs.value,
            &[(self.index, 1.0), (rhs.index, -1.0)],
        )
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.tape.push(
            Op::Mul,
            self.value * rhs.value,
            &[(self.index, rhs.value), (rhs.index, self.value)],
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.tape.push(
            Op::Div,
            q,
            &[(self.index, 1.0 / rhs.value), (rhs.index, -q / rhs.value)],
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(Op::Neg, -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.unary(Op::Add, self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.unary(Op::Sub, self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.unary(Op::Mul, self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.unary(Op::Div, self.value / rhs, 1.0 / rhs)
    }
}

/// Outcome of a central-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Parameter index at which the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `f` at `params` against central
/// differences with step `h`.
///
/// `f` records its computation on the tape it is handed, using the leaves it
/// is given, and returns the scalar output. Returns `None` when the recorded
/// evaluation passes within `tie_margin` of a max/abs/clamp kink, in which
/// case the caller should resample the point.
pub fn finite_diff_check<F>(f: F, params: &[f64], h: f64, tie_margin: f64) -> Option<FdReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    finite_diff_check_at(f, params, 0..params.len(), h, tie_margin)
}

/// [`finite_diff_check`] restricted to the parameters listed in `indices`.
pub fn finite_diff_check_at<F, I>(f: F, params: &[f64], indices: I, h: f64, tie_margin: f64) -> Option<FdReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    I: IntoIterator<Item = usize>,
{
    let eval = |theta: &[f64], _: usize| {
        let t = Tape::new();
        let l = t.leaves(theta);
        f(&t, &l).value()
    };
    finite_diff_check_with(&f, eval, params, indices, h, tie_margin)
}

/// [`finite_diff_check_at`] with the perturbed evaluations done by `value`,
/// a plain-arithmetic twin of `f` that skips recording. It receives the
/// perturbed parameters and the index that was moved.
pub fn finite_diff_check_with<F, V, I>(
    f: F,
    value: V,
    params: &[f64],
    indices: I,
    h: f64,
    tie_margin: f64,
) -> Option<FdReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    V: Fn(&[f64], usize) -> f64,
    I: IntoIterator<Item = usize>,
{
    assert!(h > 0.0, "step must be positive");
    let tape = Tape::new();
    let leaves = tape.leaves(params);
    let out = f(&tape, &leaves);
    if tape.min_kink_gap() <= tie_margin {
        return None;
    }
    let grad = tape.backward(out).expect("output recorded on this tape");

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut theta = params.to_vec();
    for i in indices {
        theta[i] = params[i] + h;
        let plus = value(&theta, i);
        theta[i] = params[i] - h;
        let minus = value(&theta, i);
        theta[i] = params[i];
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grad.values[i];
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error {
            report = FdReport {
                max_rel_error: err,
                worst_index: i,
                analytic,
                numeric,
            };
        }
    }
    Some(report)
}
