//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Scalar
//! operations store their local partial derivatives at record time; the
//! small-matrix kernels (`matmul3`, `inverse3`, `matvec3`, `solve`, ...) are
//! recorded as single fused nodes whose adjoints are evaluated in closed form
//! during [`Tape::backward`].
//!
//! Numerical code is written once against the [`Real`] trait and runs either
//! on plain `f64` or on `Var`. A `Var` without a tape is a constant: it is
//! never recorded and its adjoint is always zero.
//!
//! ```
//! use wgicp::autodiff::{Real, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.var(3.0);
//! let y = x * x;
//! let grads = tape.backward(y);
//! assert_eq!(grads.wrt(x), 6.0);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Largest 1-norm condition number accepted by [`Real::inverse3`].
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("matrix is singular or too ill-conditioned (condition estimate {condition:.3e})")]
    SingularMatrix { condition: f64 },
    #[error("{op} is undefined at {value}")]
    DomainError { op: &'static str, value: f64 },
}

/// Scalar abstraction shared by plain `f64` and tape-recorded [`Var`].
pub trait Real:
    Copy
    + fmt::Debug
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
    fn constant(v: f64) -> Self;
    fn value(&self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Result<Self, AutodiffError>;
    fn sqrt(self) -> Result<Self, AutodiffError>;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sigmoid(self) -> Self;
    /// `max(self, floor)`; the derivative is zero where the floor engages.
    fn max_floor(self, floor: f64) -> Self;

    fn sum(xs: &[Self]) -> Self;
    fn dot(a: &[Self], b: &[Self]) -> Self;
    fn norm2(a: &[Self]) -> Self;
    /// Row-major 3x3 product.
    fn matmul3(a: &[Self; 9], b: &[Self; 9]) -> [Self; 9];
    fn matvec3(a: &[Self; 9], v: &[Self; 3]) -> [Self; 3];
    fn inverse3(a: &[Self; 9]) -> Result<[Self; 9], AutodiffError>;
    /// Solves the dense row-major `n x n` system `a x = b`.
    fn solve(a: &[Self], b: &[Self]) -> Result<Vec<Self>, AutodiffError>;
    /// `sum_k coeffs[k] * vecs[k]`, where `vecs` holds `coeffs.len()` rows of
    /// equal length back to back.
    fn lincomb(coeffs: &[Self], vecs: &[Self]) -> Vec<Self>;
    /// Sums of each column of a row-major table with `width` columns.
    fn column_sums(rows: &[Self], width: usize) -> Vec<Self> {
        let n = rows.len() / width;
        let mut col = Vec::with_capacity(n);
        (0..width)
            .map(|c| {
                col.clear();
                col.extend((0..n).map(|i| rows[i * width + c]));
                Self::sum(&col)
            })
            .collect()
    }
    /// [`Real::lincomb`] written into `out`.
    fn lincomb_into(coeffs: &[Self], vecs: &[Self], out: &mut [Self]) {
        out.copy_from_slice(&Self::lincomb(coeffs, vecs));
    }
}

#[inline]
fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    sigmoid_f64(x)
}

#[inline]
fn matmul3_f64(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut c = [0.0; 9];
    for r in 0..3 {
        for k in 0..3 {
            c[3 * r + k] = a[3 * r] * b[k] + a[3 * r + 1] * b[3 + k] + a[3 * r + 2] * b[6 + k];
        }
    }
    c
}

#[inline]
fn matvec3_f64(a: &[f64; 9], v: &[f64; 3]) -> [f64; 3] {
    [
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    ]
}

#[inline]
fn transpose3(a: &[f64; 9]) -> [f64; 9] {
    [a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]]
}

#[inline]
fn norm1_3(a: &[f64; 9]) -> f64 {
    (0..3)
        .map(|c| a[c].abs() + a[3 + c].abs() + a[6 + c].abs())
        .fold(0.0, f64::max)
}

/// Cofactor inverse with a 1-norm condition check.
#[inline]
pub fn inverse3_f64(a: &[f64; 9]) -> Result<[f64; 9], AutodiffError> {
    let c00 = a[4] * a[8] - a[5] * a[7];
    let c01 = a[5] * a[6] - a[3] * a[8];
    let c02 = a[3] * a[7] - a[4] * a[6];
    let det = a[0] * c00 + a[1] * c01 + a[2] * c02;
    if det == 0.0 || !det.is_finite() {
        return Err(AutodiffError::SingularMatrix {
            condition: f64::INFINITY,
        });
    }
    let inv_det = 1.0 / det;
    let inv = [
        c00 * inv_det,
        (a[2] * a[7] - a[1] * a[8]) * inv_det,
        (a[1] * a[5] - a[2] * a[4]) * inv_det,
        c01 * inv_det,
        (a[0] * a[8] - a[2] * a[6]) * inv_det,
        (a[2] * a[3] - a[0] * a[5]) * inv_det,
        c02 * inv_det,
        (a[1] * a[6] - a[0] * a[7]) * inv_det,
        (a[0] * a[4] - a[1] * a[3]) * inv_det,
    ];
    let condition = norm1_3(a) * norm1_3(&inv);
    if !(condition < MAX_CONDITION) {
        return Err(AutodiffError::SingularMatrix { condition });
    }
    Ok(inv)
}

fn solve_f64(a: &[f64], b: &[f64]) -> Result<Vec<f64>, AutodiffError> {
    let n = b.len();
    assert_eq!(a.len(), n * n, "solve: matrix/vector size mismatch");
    let m = DMatrix::from_row_slice(n, n, a);
    let lu = m.lu();
    let x = lu
        .solve(&DVector::from_column_slice(b))
        .ok_or(AutodiffError::SingularMatrix {
            condition: f64::INFINITY,
        })?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(AutodiffError::SingularMatrix {
            condition: f64::INFINITY,
        });
    }
    Ok(x.iter().copied().collect())
}

impl Real for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Result<Self, AutodiffError> {
        if self > 0.0 {
            Ok(f64::ln(self))
        } else {
            Err(AutodiffError::DomainError { op: "ln", value: self })
        }
    }
    #[inline]
    fn sqrt(self) -> Result<Self, AutodiffError> {
        if self >= 0.0 {
            Ok(f64::sqrt(self))
        } else {
            Err(AutodiffError::DomainError { op: "sqrt", value: self })
        }
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    #[inline]
    fn max_floor(self, floor: f64) -> Self {
        if self > floor {
            self
        } else {
            floor
        }
    }
    #[inline]
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    #[inline]
    fn dot(a: &[Self], b: &[Self]) -> Self {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    #[inline]
    fn norm2(a: &[Self]) -> Self {
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
    #[inline]
    fn matmul3(a: &[Self; 9], b: &[Self; 9]) -> [Self; 9] {
        matmul3_f64(a, b)
    }
    #[inline]
    fn matvec3(a: &[Self; 9], v: &[Self; 3]) -> [Self; 3] {
        matvec3_f64(a, v)
    }
    #[inline]
    fn inverse3(a: &[Self; 9]) -> Result<[Self; 9], AutodiffError> {
        inverse3_f64(a)
    }
    #[inline]
    fn solve(a: &[Self], b: &[Self]) -> Result<Vec<Self>, AutodiffError> {
        solve_f64(a, b)
    }
    #[inline]
    fn lincomb(coeffs: &[Self], vecs: &[Self]) -> Vec<Self> {
        lincomb_f64(coeffs, vecs)
    }
    fn column_sums(rows: &[Self], width: usize) -> Vec<Self> {
        let mut sums = vec![0.0; width];
        for row in rows.chunks_exact(width) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }
    #[inline]
    fn lincomb_into(coeffs: &[Self], vecs: &[Self], out: &mut [Self]) {
        let len = out.len();
        assert_eq!(vecs.len(), coeffs.len() * len, "lincomb: ragged input");
        out.fill(0.0);
        for (k, &c) in coeffs.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&vecs[k * len..(k + 1) * len]) {
                *o += c * v;
            }
        }
    }
}

#[inline]
fn lincomb_f64(coeffs: &[f64], vecs: &[f64]) -> Vec<f64> {
    let m = coeffs.len();
    assert!(m > 0 && vecs.len() % m == 0, "lincomb: ragged input");
    let len = vecs.len() / m;
    let mut out: Vec<f64> = vecs[..len].iter().map(|v| coeffs[0] * v).collect();
    for (k, &c) in coeffs.iter().enumerate().skip(1) {
        for (o, v) in out.iter_mut().zip(&vecs[k * len..(k + 1) * len]) {
            *o += c * v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum Op {
    /// `out` depends on its args through partials stored in `aux`.
    Local,
    MatMul3,
    MatVec3,
    Inverse3,
    Dot,
    Norm2,
    Sum,
    Solve,
    LinComb,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    out: u32,
    args: u32,
    nargs: u32,
    aux: u32,
}

#[derive(Debug, Default)]
struct TapeData {
    values: Vec<f64>,
    nodes: Vec<Node>,
    args: Vec<u32>,
    aux: Vec<f64>,
}

impl TapeData {
    fn slot(&mut self, v: f64) -> u32 {
        self.values.push(v);
        (self.values.len() - 1) as u32
    }
}

/// Append-only record of operations. Single-threaded; distinct tapes are
/// independent.
#[derive(Debug, Default)]
pub struct Tape {
    data: RefCell<TapeData>,
}

/// Handle to a tape slot together with its forward value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    slot: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var(#{}: {})", self.slot, self.value),
            None => write!(f, "Const({})", self.value),
        }
    }
}

/// Adjoints produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    /// Derivative of the seed with respect to `v` (zero for constants).
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        match v.tape {
            Some(_) => self.adjoints[v.slot as usize],
            None => 0.0,
        }
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.adjoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjoints.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A new independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let slot = self.data.borrow_mut().slot(value);
        Var {
            tape: Some(self),
            slot,
            value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// Number of recorded value slots.
    pub fn len(&self) -> usize {
        self.data.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node_count(&self) -> usize {
        self.data.borrow().nodes.len()
    }

    /// Drops every record; requires that no `Var` of this tape is alive.
    pub fn clear(&mut self) {
        let d = self.data.get_mut();
        d.values.clear();
        d.nodes.clear();
        d.args.clear();
        d.aux.clear();
    }

    /// Reverse sweep seeded with d(seed)/d(seed) = 1. Does not modify the tape,
    /// so repeated calls return identical adjoints.
    pub fn backward(&self, seed: Var<'_>) -> Gradients {
        let d = self.data.borrow();
        let mut adj = vec![0.0; d.values.len()];
        let Some(tape) = seed.tape else {
            return Gradients { adjoints: adj };
        };
        assert!(std::ptr::eq(tape, self), "seed belongs to a different tape");
        adj[seed.slot as usize] = 1.0;
        for node in d.nodes.iter().rev() {
            backprop_node(&d, node, &mut adj);
        }
        Gradients { adjoints: adj }
    }

    fn push_local(&self, value: f64, args: &[u32], partials: &[f64]) -> Var<'_> {
        let mut d = self.data.borrow_mut();
        let out = d.slot(value);
        let node = Node {
            op: Op::Local,
            out,
            args: d.args.len() as u32,
            nargs: args.len() as u32,
            aux: d.aux.len() as u32,
        };
        d.args.extend_from_slice(args);
        d.aux.extend_from_slice(partials);
        d.nodes.push(node);
        Var {
            tape: Some(self),
            slot: out,
            value,
        }
    }

    /// Records a fused node; returns the first output slot. Constant inputs
    /// get a slot so the kernel can read their values during backward.
    fn push_fused(&self, op: Op, inputs: &[Var<'_>], outputs: &[f64]) -> u32 {
        self.push_fused_aux(op, inputs, outputs, 0)
    }

    fn push_fused_aux(&self, op: Op, inputs: &[Var<'_>], outputs: &[f64], aux: u32) -> u32 {
        let mut d = self.data.borrow_mut();
        let args_start = d.args.len() as u32;
        for v in inputs {
            let slot = match v.tape {
                Some(t) => {
                    debug_assert!(std::ptr::eq(t, self), "vars from different tapes");
                    v.slot
                }
                None => d.slot(v.value),
            };
            d.args.push(slot);
        }
        let out = d.values.len() as u32;
        d.values.extend_from_slice(outputs);
        d.nodes.push(Node {
            op,
            out,
            args: args_start,
            nargs: inputs.len() as u32,
            aux,
        });
        out
    }
}

fn backprop_node(d: &TapeData, node: &Node, adj: &mut [f64]) {
    let args = &d.args[node.args as usize..(node.args + node.nargs) as usize];
    let out = node.out as usize;
    let val = |slot: u32| d.values[slot as usize];
    match node.op {
        Op::Local => {
            let g = adj[out];
            if g == 0.0 {
                return;
            }
            let partials = &d.aux[node.aux as usize..node.aux as usize + args.len()];
            for (&a, &p) in args.iter().zip(partials) {
                adj[a as usize] += p * g;
            }
        }
        Op::Sum => {
            let g = adj[out];
            for &a in args {
                adj[a as usize] += g;
            }
        }
        Op::Dot => {
            let g = adj[out];
            let n = args.len() / 2;
            for k in 0..n {
                let (a, b) = (args[k], args[n + k]);
                adj[a as usize] += g * val(b);
                adj[b as usize] += g * val(a);
            }
        }
        Op::Norm2 => {
            let g = adj[out];
            let s = d.values[out];
            if s > 0.0 {
                for &a in args {
                    adj[a as usize] += g * val(a) / s;
                }
            }
        }
        Op::MatMul3 => {
            // C = A B: dA += dC B^T, dB += A^T dC
            let a: [u32; 9] = args[..9].try_into().unwrap();
            let b: [u32; 9] = args[9..].try_into().unwrap();
            let gc: [f64; 9] = std::array::from_fn(|k| adj[out + k]);
            for r in 0..3 {
                for c in 0..3 {
                    let mut ga = 0.0;
                    let mut gb = 0.0;
                    for k in 0..3 {
                        ga += gc[3 * r + k] * val(b[3 * c + k]);
                        gb += val(a[3 * k + r]) * gc[3 * k + c];
                    }
                    adj[a[3 * r + c] as usize] += ga;
                    adj[b[3 * r + c] as usize] += gb;
                }
            }
        }
        Op::MatVec3 => {
            // y = A v: dA += dy v^T, dv += A^T dy
            let gy = [adj[out], adj[out + 1], adj[out + 2]];
            for r in 0..3 {
                for c in 0..3 {
                    adj[args[3 * r + c] as usize] += gy[r] * val(args[9 + c]);
                }
            }
            for c in 0..3 {
                let g: f64 = (0..3).map(|r| val(args[3 * r + c]) * gy[r]).sum();
                adj[args[9 + c] as usize] += g;
            }
        }
        Op::Inverse3 => {
            // B = A^-1: dA -= B^T dB B^T
            let b: [f64; 9] = std::array::from_fn(|k| d.values[out + k]);
            let gb: [f64; 9] = std::array::from_fn(|k| adj[out + k]);
            let bt = transpose3(&b);
            let ga = matmul3_f64(&matmul3_f64(&bt, &gb), &bt);
            for k in 0..9 {
                adj[args[k] as usize] -= ga[k];
            }
        }
        Op::LinComb => {
            let m = node.aux as usize;
            let len = (args.len() - m) / m;
            let gy: Vec<f64> = adj[out..out + len].to_vec();
            for k in 0..m {
                let row = &args[m + k * len..m + (k + 1) * len];
                let mut gc = 0.0;
                for (&a, &g) in row.iter().zip(&gy) {
                    gc += val(a) * g;
                }
                adj[args[k] as usize] += gc;
                let c = val(args[k]);
                for (&a, &g) in row.iter().zip(&gy) {
                    adj[a as usize] += c * g;
                }
            }
        }
        Op::Solve => {
            // x = A^-1 b: db += A^-T dx =: u, dA -= u x^T
            let nargs = args.len();
            let n = ((1.0 + 4.0 * nargs as f64).sqrt() as usize - 1) / 2;
            debug_assert_eq!(n * n + n, nargs);
            let a_t: Vec<f64> = (0..n * n).map(|k| val(args[(k % n) * n + k / n])).collect();
            let gx: Vec<f64> = (0..n).map(|k| adj[out + k]).collect();
            if gx.iter().all(|&g| g == 0.0) {
                return;
            }
            // the forward solve succeeded, so the transposed system is solvable
            let u = solve_f64(&a_t, &gx).expect("transposed solve");
            let x: Vec<f64> = (0..n).map(|k| d.values[out + k]).collect();
            for r in 0..n {
                adj[args[n * n + r] as usize] += u[r];
                for c in 0..n {
                    adj[args[r * n + c] as usize] -= u[r] * x[c];
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_constant(&self) -> bool {
        self.tape.is_none()
    }

    fn unary(self, value: f64, partial: f64) -> Self {
        match self.tape {
            None => Var::constant(value),
            Some(t) => t.push_local(value, &[self.slot], &[partial]),
        }
    }

    fn binary(self, rhs: Self, value: f64, da: f64, db: f64) -> Self {
        match (self.tape, rhs.tape) {
            (None, None) => Var::constant(value),
            (Some(t), None) => t.push_local(value, &[self.slot], &[da]),
            (None, Some(t)) => t.push_local(value, &[rhs.slot], &[db]),
            (Some(t), Some(u)) => {
                assert!(std::ptr::eq(t, u), "vars from different tapes");
                t.push_local(value, &[self.slot, rhs.slot], &[da, db])
            }
        }
    }

    pub fn constant(value: f64) -> Self {
        Var {
            tape: None,
            slot: u32::MAX,
            value,
        }
    }

    fn tape_of(vs: &[Var<'t>]) -> Option<&'t Tape> {
        let mut found: Option<&'t Tape> = None;
        for v in vs {
            if let Some(t) = v.tape {
                match found {
                    None => found = Some(t),
                    Some(f) => assert!(std::ptr::eq(f, t), "vars from different tapes"),
                }
            }
        }
        found
    }

    fn fused_outputs(tape: &'t Tape, op: Op, inputs: &[Var<'t>], outputs: &[f64]) -> Vec<Var<'t>> {
        let first = tape.push_fused(op, inputs, outputs);
        outputs
            .iter()
            .enumerate()
            .map(|(k, &value)| Var {
                tape: Some(tape),
                slot: first + k as u32,
                value,
            })
            .collect()
    }
}

fn values<const N: usize>(v: &[Var<'_>; N]) -> [f64; N] {
    std::array::from_fn(|k| v[k].value)
}

fn consts<'t, const N: usize>(v: [f64; N]) -> [Var<'t>; N] {
    v.map(Var::constant)
}

impl<'t> Real for Var<'t> {
    fn constant(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Result<Self, AutodiffError> {
        if self.value > 0.0 {
            Ok(self.unary(self.value.ln(), 1.0 / self.value))
        } else {
            Err(AutodiffError::DomainError { op: "ln", value: self.value })
        }
    }
    fn sqrt(self) -> Result<Self, AutodiffError> {
        if self.value >= 0.0 {
            let s = self.value.sqrt();
            Ok(self.unary(s, 0.5 / s))
        } else {
            Err(AutodiffError::DomainError { op: "sqrt", value: self.value })
        }
    }
    fn sin(self) -> Self {
        self.unary(self.value.sin(), self.value.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.value.cos(), -self.value.sin())
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.value);
        self.unary(s, s * (1.0 - s))
    }
    fn max_floor(self, floor: f64) -> Self {
        if self.value > floor {
            self
        } else {
            Var::constant(floor)
        }
    }
    fn sum(xs: &[Self]) -> Self {
        let value = xs.iter().map(|x| x.value).sum();
        match Var::tape_of(xs) {
            None => Var::constant(value),
            Some(t) => {
                let live: Vec<Var<'t>> = xs.iter().copied().filter(|x| x.tape.is_some()).collect();
                Var::fused_outputs(t, Op::Sum, &live, &[value])[0]
            }
        }
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        assert_eq!(a.len(), b.len());
        let value = a.iter().zip(b).map(|(x, y)| x.value * y.value).sum();
        let inputs: Vec<Var<'t>> = a.iter().chain(b).copied().collect();
        match Var::tape_of(&inputs) {
            None => Var::constant(value),
            Some(t) => Var::fused_outputs(t, Op::Dot, &inputs, &[value])[0],
        }
    }
    fn norm2(a: &[Self]) -> Self {
        let value = a.iter().map(|x| x.value * x.value).sum::<f64>().sqrt();
        match Var::tape_of(a) {
            None => Var::constant(value),
            Some(t) => Var::fused_outputs(t, Op::Norm2, a, &[value])[0],
        }
    }
    fn matmul3(a: &[Self; 9], b: &[Self; 9]) -> [Self; 9] {
        let value = matmul3_f64(&values(a), &values(b));
        let inputs: Vec<Var<'t>> = a.iter().chain(b).copied().collect();
        match Var::tape_of(&inputs) {
            None => consts(value),
            Some(t) => Var::fused_outputs(t, Op::MatMul3, &inputs, &value).try_into().unwrap(),
        }
    }
    fn matvec3(a: &[Self; 9], v: &[Self; 3]) -> [Self; 3] {
        let value = matvec3_f64(&values(a), &values(v));
        let inputs: Vec<Var<'t>> = a.iter().chain(v).copied().collect();
        match Var::tape_of(&inputs) {
            None => consts(value),
            Some(t) => Var::fused_outputs(t, Op::MatVec3, &inputs, &value).try_into().unwrap(),
        }
    }
    fn inverse3(a: &[Self; 9]) -> Result<[Self; 9], AutodiffError> {
        let value = inverse3_f64(&values(a))?;
        Ok(match Var::tape_of(a) {
            None => consts(value),
            Some(t) => Var::fused_outputs(t, Op::Inverse3, a, &value).try_into().unwrap(),
        })
    }
    fn solve(a: &[Self], b: &[Self]) -> Result<Vec<Self>, AutodiffError> {
        let av: Vec<f64> = a.iter().map(|x| x.value).collect();
        let bv: Vec<f64> = b.iter().map(|x| x.value).collect();
        let x = solve_f64(&av, &bv)?;
        let inputs: Vec<Var<'t>> = a.iter().chain(b).copied().collect();
        Ok(match Var::tape_of(&inputs) {
            None => x.into_iter().map(Var::constant).collect(),
            Some(t) => Var::fused_outputs(t, Op::Solve, &inputs, &x),
        })
    }
    fn lincomb(coeffs: &[Self], vecs: &[Self]) -> Vec<Self> {
        let cv: Vec<f64> = coeffs.iter().map(|x| x.value).collect();
        let vv: Vec<f64> = vecs.iter().map(|x| x.value).collect();
        let y = lincomb_f64(&cv, &vv);
        let inputs: Vec<Var<'t>> = coeffs.iter().chain(vecs).copied().collect();
        match Var::tape_of(&inputs) {
            None => y.into_iter().map(Var::constant).collect(),
            Some(t) => {
                let first = t.push_fused_aux(Op::LinComb, &inputs, &y, coeffs.len() as u32);
                y.iter()
                    .enumerate()
                    .map(|(k, &value)| Var {
                        tape: Some(t),
                        slot: first + k as u32,
                        value,
                    })
                    .collect()
            }
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.binary(rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self.unary(self.value / rhs, 1.0 / rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_step(x: f64) -> f64 {
        1e-6 * x.abs().max(1.0)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Five-point central differences of `f` over every coordinate of `x`.
    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let h = 1e-3 * x[k].abs().max(1.0);
                let at = |s: f64| {
                    let mut p = x.to_vec();
                    p[k] += s * h;
                    f(&p)
                };
                (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * h)
            })
            .collect()
    }

    /// Evaluates `f` on the tape and compares its gradient with finite
    /// differences of the same function on `f64`.
    fn check<F>(f: F, x: &[f64], tol: f64)
    where
        F: for<'a> Fn(&[Var<'a>]) -> Var<'a>,
    {
        let tape = Tape::new();
        let xs = tape.vars(x);
        let y = f(&xs);
        let g = tape.backward(y).wrt_all(&xs);
        let fd = fd_grad(
            |p| {
                let cs: Vec<Var<'_>> = p.iter().map(|&v| Var::constant(v)).collect();
                f(&cs).value()
            },
            x,
        );
        for (a, b) in g.iter().zip(&fd) {
            assert!(rel_err(*a, *b) < tol, "tape {a} vs fd {b}");
        }
    }

    #[test]
    fn square_and_sigmoid() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = x * x;
        assert_eq!(tape.backward(y).wrt(x), 6.0);
        let z = tape.var(0.0);
        let s = z.sigmoid();
        assert_eq!(s.value(), 0.5);
        assert_eq!(tape.backward(s).wrt(z), 0.25);
    }

    #[test]
    fn chain_rule_by_hand() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let g = x * 2.0;
        let f = g * g;
        assert_eq!(tape.backward(f).wrt(x), 8.0);
    }

    #[test]
    fn constants_have_zero_adjoints() {
        let tape = Tape::new();
        let a = Var::constant(2.0);
        let b = Var::constant(5.0);
        let c = a * b + 1.0;
        assert!(c.is_constant());
        let g = tape.backward(c);
        assert_eq!(g.wrt(a), 0.0);
        assert_eq!(g.wrt(c), 0.0);
        assert_eq!(tape.node_count(), 0);
    }

    #[test]
    fn backward_is_repeatable() {
        let tape = Tape::new();
        let xs = tape.vars(&[0.3, -1.2, 2.0]);
        let y = (xs[0] * xs[1]).exp() + Var::norm2(&xs) * xs[2].sigmoid();
        let g1 = tape.backward(y).wrt_all(&xs);
        let g2 = tape.backward(y).wrt_all(&xs);
        assert_eq!(g1, g2);
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        assert!(matches!(tape.var(-1.0).ln(), Err(AutodiffError::DomainError { op: "ln", .. })));
        assert!(matches!(tape.var(0.0).ln(), Err(AutodiffError::DomainError { .. })));
        assert!(matches!(tape.var(-1e-3).sqrt(), Err(AutodiffError::DomainError { op: "sqrt", .. })));
        assert!((-2.0f64).sqrt().is_nan());
        assert!(Real::sqrt(-2.0f64).is_err());
    }

    #[test]
    fn singular_inverse() {
        let singular = [1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0];
        assert!(matches!(inverse3_f64(&singular), Err(AutodiffError::SingularMatrix { .. })));
        let ill = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1e-13];
        assert!(matches!(inverse3_f64(&ill), Err(AutodiffError::SingularMatrix { .. })));
        let ok = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1e-6];
        assert!(inverse3_f64(&ok).is_ok());
    }

    #[test]
    fn linearity_of_adjoints() {
        let tape = Tape::new();
        let xs = tape.vars(&[0.7, -0.4]);
        let f = (xs[0] * xs[1]).sin();
        let g = xs[0].exp() * xs[1];
        let (a, b) = (2.5, -1.5);
        let h = f * a + g * b;
        let gf = tape.backward(f).wrt_all(&xs);
        let gg = tape.backward(g).wrt_all(&xs);
        let gh = tape.backward(h).wrt_all(&xs);
        for k in 0..2 {
            assert!((gh[k] - (a * gf[k] + b * gg[k])).abs() < 1e-12);
        }
    }

    fn random_spd(rng: &mut ChaCha8Rng) -> [f64; 9] {
        let m: [f64; 9] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let mt = transpose3(&m);
        let mut a = matmul3_f64(&m, &mt);
        for k in [0, 4, 8] {
            a[k] += 0.5;
        }
        a
    }

    #[test]
    fn quadratic_form_through_inverse_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_spd(&mut rng);
            let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
            let x: Vec<f64> = a.iter().chain(&v).copied().collect();
            check(
                |xs| {
                    let a: [Var<'_>; 9] = xs[..9].try_into().unwrap();
                    let v: [Var<'_>; 3] = xs[9..].try_into().unwrap();
                    let inv = Real::inverse3(&a).unwrap();
                    Real::dot(&v, &Real::matvec3(&inv, &v))
                },
                &x,
                1e-6,
            );
        }
    }

    #[test]
    fn matmul_and_solve_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        check(
            |xs| {
                let a: [Var<'_>; 9] = xs[..9].try_into().unwrap();
                let b: [Var<'_>; 9] = xs[9..].try_into().unwrap();
                let c = Real::matmul3(&a, &b);
                c.iter().enumerate().fold(Var::constant(0.0), |acc, (k, &ck)| acc + ck * ck * (k as f64 + 1.0))
            },
            &x,
            1e-6,
        );

        let n = 6;
        let mut a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for k in 0..n {
            a[k * n + k] += 4.0;
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = a.iter().chain(&b).copied().collect();
        check(
            |xs| {
                let sol = Real::solve(&xs[..36], &xs[36..]).unwrap();
                sol.iter().enumerate().fold(Var::constant(0.0), |acc, (k, &s)| acc + s * (k as f64 - 2.5))
                    + Real::norm2(&sol)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn lincomb_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x: Vec<f64> = (0..3 + 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        check(
            |xs| {
                let y = Real::lincomb(&xs[..3], &xs[3..]);
                y.iter().enumerate().fold(Var::constant(0.0), |acc, (k, &v)| acc + v * v * (k as f64 + 0.5))
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn mixed_constant_inputs_to_fused_ops() {
        let tape = Tape::new();
        let a = tape.vars(&[2.0, 0.1, 0.0, 0.1, 3.0, 0.2, 0.0, 0.2, 1.5]);
        let a: [Var<'_>; 9] = a.try_into().unwrap();
        let c: [Var<'_>; 9] = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0].map(Var::constant);
        let p = Real::matmul3(&a, &c);
        let y = Real::sum(&p);
        let g = tape.backward(y);
        // d/dA_rc sum(A C) = sum_k C_ck = C_cc for diagonal C
        assert_eq!(g.wrt(a[0]), 1.0);
        assert_eq!(g.wrt(a[1]), 2.0);
        assert_eq!(g.wrt(a[5]), 3.0);
    }

    fn unary_op<S: Real>(op: u8, v: S) -> S {
        match op {
            0 => v.exp(),
            1 => v.ln().unwrap(),
            2 => v.sqrt().unwrap(),
            3 => v.sigmoid(),
            4 => v.sin(),
            5 => v.cos(),
            6 => S::constant(1.3) / v,
            _ => v * v * v - v,
        }
    }

    fn binary_op<S: Real>(op: u8, x: S, y: S) -> S {
        match op {
            0 => x + y,
            1 => x - y,
            2 => x * y,
            _ => x / y,
        }
    }

    fn unary_case(op: u8, x: f64) -> f64 {
        let tape = Tape::new();
        let v = tape.var(x);
        let g = tape.backward(unary_op(op, v)).wrt(v);
        let h = fd_step(x);
        let fd = (unary_op(op, x + h) - unary_op(op, x - h)) / (2.0 * h);
        rel_err(g, fd)
    }

    proptest! {
        #[test]
        fn every_scalar_primitive_matches_fd(op in 0u8..8, x in 0.05f64..20.0) {
            let x = if op == 0 || op == 3 { x - 10.0 } else { x };
            prop_assert!(unary_case(op, x) < 1e-5);
        }

        #[test]
        fn binary_primitives_match_fd(a in -5.0f64..5.0, b in 0.1f64..5.0) {
            for op in 0..4 {
                let tape = Tape::new();
                let (x, y) = (tape.var(a), tape.var(b));
                let g = tape.backward(binary_op(op, x, y));
                let (ha, hb) = (fd_step(a), fd_step(b));
                let da = (binary_op(op, a + ha, b) - binary_op(op, a - ha, b)) / (2.0 * ha);
                let db = (binary_op(op, a, b + hb) - binary_op(op, a, b - hb)) / (2.0 * hb);
                prop_assert!(rel_err(g.wrt(x), da) < 1e-5);
                prop_assert!(rel_err(g.wrt(y), db) < 1e-5);
            }
        }

        #[test]
        fn vector_primitives_match_fd(v in prop::collection::vec(-3.0f64..3.0, 6)) {
            let tape = Tape::new();
            let xs = tape.vars(&v);
            let n = Real::norm2(&xs[..3]);
            let d = Real::dot(&xs[..3], &xs[3..]);
            let s = Real::sum(&xs);
            let y = n * 0.5 + d + s * s;
            let g = tape.backward(y).wrt_all(&xs);
            let f = |p: &[f64]| {
                let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                let d: f64 = (0..3).map(|k| p[k] * p[3 + k]).sum();
                let s: f64 = p.iter().sum();
                n * 0.5 + d + s * s
            };
            for (a, b) in g.iter().zip(fd_grad(f, &v)) {
                prop_assert!(rel_err(*a, b) < 1e-5);
            }
        }
    }
}
