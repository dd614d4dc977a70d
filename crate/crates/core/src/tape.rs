//! Reverse-mode automatic differentiation over scalars.
//!
//! A [`Tape`] records every operation as a node with at most two parents and
//! the local partial derivative toward each. [`Var`] is a cheap `Copy`
//! handle; variables built with [`Var::constant`] (or [`Real::cst`]) are not
//! recorded at all, so constant subexpressions cost nothing.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;
use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::real::{sigmoid_f64, softplus_f64, Real};

const NO_NODE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(cap)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [NO_NODE, NO_NODE],
            partials: [0.0, 0.0],
        });
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NO_NODE as usize, "tape overflow");
        nodes.push(node);
        idx as u32
    }

    /// Adjoints of `output` with respect to every recorded node.
    pub fn gradient(&self, output: Var<'_>) -> Gradient {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        if output.idx == NO_NODE {
            return Gradient { adj };
        }
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let node = nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NO_NODE {
                    adj[p as usize] += node.partials[k] * g;
                }
            }
        }
        Gradient { adj }
    }
}

/// Adjoint vector returned by [`Tape::gradient`].
pub struct Gradient {
    adj: Vec<f64>,
}

impl Gradient {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        if v.idx == NO_NODE {
            0.0
        } else {
            self.adj.get(v.idx as usize).copied().unwrap_or(0.0)
        }
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.val)
    }
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var {
            tape: None,
            idx: NO_NODE,
            val,
        }
    }

    pub fn value(self) -> f64 {
        self.val
    }

    pub fn is_constant(self) -> bool {
        self.idx == NO_NODE
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Self {
        match self.tape {
            Some(tape) if self.idx != NO_NODE => {
                let idx = tape.push(Node {
                    parents: [self.idx, NO_NODE],
                    partials: [d, 0.0],
                });
                Var {
                    tape: Some(tape),
                    idx,
                    val,
                }
            }
            _ => Var::constant(val),
        }
    }

    #[inline]
    fn binary(self, other: Self, val: f64, da: f64, db: f64) -> Self {
        let tape = match (self.tape, other.tape) {
            (Some(t), _) if self.idx != NO_NODE => t,
            (_, Some(t)) if other.idx != NO_NODE => t,
            _ => return Var::constant(val),
        };
        let idx = tape.push(Node {
            parents: [self.idx, other.idx],
            partials: [da, db],
        });
        Var {
            tape: Some(tape),
            idx,
            val,
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl Add<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: f64) -> Self {
        self.unary(self.val + rhs, 1.0)
    }
}

impl Sub<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.val - rhs, 1.0)
    }
}

impl Mul<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.val * rhs, rhs)
    }
}

impl Div<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self.unary(self.val / rhs, 1.0 / rhs)
    }
}

impl Real for Var<'_> {
    #[inline]
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn val(self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = libm::exp(self.val);
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(libm::log(self.val), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = libm::sqrt(self.val);
        self.unary(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        self.unary(libm::sin(self.val), libm::cos(self.val))
    }
    fn cos(self) -> Self {
        self.unary(libm::cos(self.val), -libm::sin(self.val))
    }
    fn tanh(self) -> Self {
        let t = libm::tanh(self.val);
        self.unary(t, 1.0 - t * t)
    }
    fn softplus(self) -> Self {
        self.unary(softplus_f64(self.val), sigmoid_f64(self.val))
    }
    fn relu(self) -> Self {
        if self.val > 0.0 {
            self
        } else {
            Var::constant(0.0)
        }
    }
}
