//! Scalar reverse-mode differentiation on a thread-local tape.
//!
//! Energy terms are written once, generic over [`Real`]. Evaluating with
//! `f64` gives plain values; evaluating inside [`gradient`] with [`Var`]
//! records every operation and replays the tape backwards.

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Scalar type the energy code is generic over.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn sq(self) -> Self {
        self * self
    }

    /// Pick `self` or `other` by value; the derivative follows the winner.
    fn max(self, other: Self) -> Self {
        if other.value() > self.value() {
            other
        } else {
            self
        }
    }

    fn min(self, other: Self) -> Self {
        if other.value() < self.value() {
            other
        } else {
            self
        }
    }

    fn clamp(self, lo: f64, hi: f64) -> Self {
        let v = self.value();
        if v < lo {
            Self::cst(lo)
        } else if v > hi {
            Self::cst(hi)
        } else {
            self
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
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
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

const NO_NODE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    active: bool,
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

/// A tape-tracked scalar. Constants carry no node and cost nothing to record.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    val: f64,
    idx: u32,
}

impl Var {
    #[inline]
    fn constant(val: f64) -> Self {
        Var { val, idx: NO_NODE }
    }

    #[inline]
    fn is_const(self) -> bool {
        self.idx == NO_NODE
    }

    #[inline]
    fn push(val: f64, parents: [u32; 2], partials: [f64; 2]) -> Self {
        let idx = TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let idx = t.nodes.len() as u32;
            t.nodes.push(Node { parents, partials });
            idx
        });
        Var { val, idx }
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Self {
        if self.is_const() {
            Var::constant(val)
        } else {
            Var::push(val, [self.idx, NO_NODE], [d, 0.0])
        }
    }

    #[inline]
    fn binary(a: Var, b: Var, val: f64, da: f64, db: f64) -> Self {
        match (a.is_const(), b.is_const()) {
            (true, true) => Var::constant(val),
            (false, true) => Var::push(val, [a.idx, NO_NODE], [da, 0.0]),
            (true, false) => Var::push(val, [b.idx, NO_NODE], [db, 0.0]),
            (false, false) => Var::push(val, [a.idx, b.idx], [da, db]),
        }
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, rhs: Var) -> Var {
        Var::binary(self, rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, rhs: Var) -> Var {
        Var::binary(self, rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, rhs: Var) -> Var {
        Var::binary(self, rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, rhs: Var) -> Var {
        let q = self.val / rhs.val;
        Var::binary(self, rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}

impl Add<f64> for Var {
    type Output = Var;
    #[inline]
    fn add(self, rhs: f64) -> Var {
        self.unary(self.val + rhs, 1.0)
    }
}

impl Sub<f64> for Var {
    type Output = Var;
    #[inline]
    fn sub(self, rhs: f64) -> Var {
        self.unary(self.val - rhs, 1.0)
    }
}

impl Mul<f64> for Var {
    type Output = Var;
    #[inline]
    fn mul(self, rhs: f64) -> Var {
        self.unary(self.val * rhs, rhs)
    }
}

impl Div<f64> for Var {
    type Output = Var;
    #[inline]
    fn div(self, rhs: f64) -> Var {
        self.unary(self.val / rhs, 1.0 / rhs)
    }
}

impl AddAssign for Var {
    #[inline]
    fn add_assign(&mut self, rhs: Var) {
        *self = *self + rhs;
    }
}

impl SubAssign for Var {
    #[inline]
    fn sub_assign(&mut self, rhs: Var) {
        *self = *self - rhs;
    }
}

impl MulAssign for Var {
    #[inline]
    fn mul_assign(&mut self, rhs: Var) {
        *self = *self * rhs;
    }
}

impl Real for Var {
    #[inline]
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.val
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        // subgradient 0 at the origin keeps distance terms finite
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.unary(s, d)
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        self.unary(self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }
    #[inline]
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    #[inline]
    fn abs(self) -> Self {
        let d = if self.val < 0.0 { -1.0 } else { 1.0 };
        self.unary(self.val.abs(), d)
    }
}

struct Session;

impl Session {
    fn open(capacity_hint: usize) -> Result<Self> {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            if t.active {
                return Err(Error::invalid("nested gradient recording on one thread"));
            }
            t.active = true;
            t.nodes.clear();
            t.nodes.reserve(capacity_hint);
            Ok(Session)
        })
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            t.active = false;
            t.nodes.clear();
        });
    }
}

/// Evaluate `f` at `x` and return the value together with its gradient.
pub fn gradient<F>(x: &[f64], f: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&[Var]) -> Result<Var>,
{
    let _session = Session::open(x.len() * 16)?;
    let inputs: Vec<Var> = x
        .iter()
        .map(|&v| Var::push(v, [NO_NODE, NO_NODE], [0.0, 0.0]))
        .collect();
    let out = f(&inputs)?;
    let mut grad = vec![0.0; x.len()];
    if out.is_const() {
        return Ok((out.val, grad));
    }
    TAPE.with(|t| {
        let t = t.borrow();
        let mut adj = vec![0.0; t.nodes.len()];
        adj[out.idx as usize] = 1.0;
        for i in (0..=out.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = t.nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NO_NODE {
                    adj[p as usize] += a * node.partials[k];
                }
            }
        }
        grad.copy_from_slice(&adj[..x.len()]);
    });
    Ok((out.val, grad))
}

/// Number of nodes currently on this thread's tape (diagnostics).
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().nodes.len())
}
