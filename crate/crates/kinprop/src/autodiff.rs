//! Minimal reverse-mode automatic differentiation over scalars.
//!
//! A [`Tape`] records every primitive operation (add, mul, div, sin, cos,
//! tan, sqrt, exp, log, tanh, softplus, clamp) in topological order together
//! with the local partial derivatives of its operands. The backward pass
//! walks the tape in strict reverse order and accumulates adjoints, so the
//! gradient of a constant is exactly 0 and the gradient of the identity is
//! exactly 1.
//!
//! One tape per thread of execution; tapes are not shared across threads.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::{sigmoid_f64, softplus_f64, Scalar};

/// Epsilon placed under the root when differentiating sqrt, so that
/// sigma = 0 inputs (the first prediction step) keep finite gradients.
/// The forward value stays the exact sqrt.
const SQRT_GRAD_EPS: f64 = 1e-12;

const NO_PARENT: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    b: u32,
    pa: f64,
    pb: f64,
}

struct TapeInner {
    vals: Vec<f64>,
    nodes: Vec<Node>,
    nonfinite: Option<usize>,
}

/// Append-only record of a scalar computation.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                vals: Vec::new(),
                nodes: Vec::new(),
                nonfinite: None,
            })),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                vals: Vec::with_capacity(n),
                nodes: Vec::with_capacity(n),
                nonfinite: None,
            })),
        }
    }

    /// Creates an input variable (a leaf node).
    pub fn var(&self, value: f64) -> Var {
        let idx = self.push(value, NO_PARENT, NO_PARENT, 0.0, 0.0);
        Var {
            tape: self.clone(),
            idx,
        }
    }

    /// Creates a constant. Same representation as a leaf; callers simply
    /// never ask for its gradient.
    pub fn constant(&self, value: f64) -> Var {
        self.var(value)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the first node whose forward value came out non-finite.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.inner.borrow().nonfinite
    }

    fn push(&self, value: f64, a: u32, b: u32, pa: f64, pb: f64) -> u32 {
        let mut t = self.inner.borrow_mut();
        let idx = t.vals.len() as u32;
        if !value.is_finite() && t.nonfinite.is_none() {
            t.nonfinite = Some(idx as usize);
        }
        t.vals.push(value);
        t.nodes.push(Node { a, b, pa, pb });
        idx
    }

    /// Reverse pass seeded at `output`; returns one adjoint per tape node.
    pub fn backward(&self, output: &Var) -> Vec<f64> {
        let t = self.inner.borrow();
        let mut grads = vec![0.0; t.vals.len()];
        grads[output.idx as usize] = 1.0;
        for i in (0..t.nodes.len()).rev() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            let n = t.nodes[i];
            if n.a != NO_PARENT {
                grads[n.a as usize] += n.pa * g;
            }
            if n.b != NO_PARENT {
                grads[n.b as usize] += n.pb * g;
            }
        }
        grads
    }
}

/// A differentiable scalar recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: u32,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({} @ {})", self.value(), self.idx)
    }
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx as usize
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn unary(&self, value: f64, partial: f64) -> Var {
        let idx = self.tape.push(value, self.idx, NO_PARENT, partial, 0.0);
        Var {
            tape: self.tape.clone(),
            idx,
        }
    }

    fn binary(&self, rhs: &Var, value: f64, pa: f64, pb: f64) -> Var {
        debug_assert!(
            Rc::ptr_eq(&self.tape.inner, &rhs.tape.inner),
            "operands must live on the same tape"
        );
        let idx = self.tape.push(value, self.idx, rhs.idx, pa, pb);
        Var {
            tape: self.tape.clone(),
            idx,
        }
    }
}

impl Scalar for Var {
    fn value(&self) -> f64 {
        self.tape.inner.borrow().vals[self.idx as usize]
    }

    fn lift(&self, c: f64) -> Self {
        self.tape.constant(c)
    }

    fn sin(&self) -> Self {
        let x = self.value();
        self.unary(x.sin(), x.cos())
    }

    fn cos(&self) -> Self {
        let x = self.value();
        self.unary(x.cos(), -x.sin())
    }

    fn tan(&self) -> Self {
        let x = self.value();
        let c = x.cos();
        self.unary(x.tan(), 1.0 / (c * c))
    }

    fn sqrt(&self) -> Self {
        let x = self.value();
        self.unary(x.sqrt(), 0.5 / (x + SQRT_GRAD_EPS).sqrt())
    }

    fn exp(&self) -> Self {
        let e = self.value().exp();
        self.unary(e, e)
    }

    fn ln(&self) -> Self {
        let x = self.value();
        self.unary(x.ln(), 1.0 / x)
    }

    fn tanh(&self) -> Self {
        let t = self.value().tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn softplus(&self) -> Self {
        let x = self.value();
        self.unary(softplus_f64(x), sigmoid_f64(x))
    }

    fn clamp_range(&self, lo: f64, hi: f64) -> Self {
        let x = self.value();
        let inside = x >= lo && x <= hi;
        self.unary(x.clamp(lo, hi), if inside { 1.0 } else { 0.0 })
    }

    fn scale(&self, c: f64) -> Self {
        self.unary(self.value() * c, c)
    }

    fn shift(&self, c: f64) -> Self {
        self.unary(self.value() + c, 1.0)
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, rhs: Var) -> Var {
        let v = self.value() + rhs.value();
        self.binary(&rhs, v, 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, rhs: Var) -> Var {
        let v = self.value() - rhs.value();
        self.binary(&rhs, v, 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, rhs: Var) -> Var {
        let a = self.value();
        let b = rhs.value();
        self.binary(&rhs, a * b, b, a)
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, rhs: Var) -> Var {
        let a = self.value();
        let b = rhs.value();
        self.binary(&rhs, a / b, 1.0 / b, -a / (b * b))
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        let v = -self.value();
        self.unary(v, -1.0)
    }
}

/// Reverse-mode gradient of a tape-recorded scalar function.
///
/// Builds a fresh tape with one leaf per input, evaluates `f`, and returns
/// d f / d input for every input. Errors with [`Error::NonFiniteForward`]
/// if any intermediate value comes out NaN or infinite.
pub fn grad<F>(f: F, inputs: &[f64]) -> Result<Vec<f64>>
where
    F: FnOnce(&[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|&x| tape.var(x)).collect();
    let out = f(&vars);
    if let Some(node) = tape.first_nonfinite() {
        return Err(Error::NonFiniteForward { node });
    }
    let adjoints = tape.backward(&out);
    Ok(vars.iter().map(|v| adjoints[v.index()]).collect())
}

/// Evaluates a tape function without differentiating (used by the
/// finite-difference probes so both sides share one code path).
pub fn eval<F>(f: F, inputs: &[f64]) -> f64
where
    F: FnOnce(&[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|&x| tape.var(x)).collect();
    f(&vars).value()
}

/// Differences below this are treated as matching regardless of scale.
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub grad: Vec<f64>,
    pub fd: Vec<f64>,
    /// Per-input relative error; 0 when the absolute difference is under
    /// [`FD_ABS_FLOOR`].
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Checks reverse-mode gradients of `f` against central finite differences
/// with step `h`. Requires `h` in `[1e-8, 1e-3]`.
pub fn finite_diff_check<F>(f: F, inputs: &[f64], h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&[Var]) -> Var,
{
    assert!(
        (1e-8..=1e-3).contains(&h),
        "finite-difference step must lie in [1e-8, 1e-3]"
    );
    let g = grad(&f, inputs)?;
    let mut fd = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        let x0 = inputs[i];
        probe[i] = x0 + h;
        let up = eval(&f, &probe);
        probe[i] = x0 - h;
        let down = eval(&f, &probe);
        probe[i] = x0;
        fd.push((up - down) / (2.0 * h));
    }
    let rel_errors: Vec<f64> = g
        .iter()
        .zip(&fd)
        .map(|(&a, &b)| {
            let diff = (a - b).abs();
            if diff <= FD_ABS_FLOOR {
                0.0
            } else {
                diff / a.abs().max(b.abs()).max(FD_ABS_FLOOR)
            }
        })
        .collect();
    let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
    Ok(FdReport {
        grad: g,
        fd,
        rel_errors,
        max_rel_error,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> 6
        let g = grad(|x| x[0].clone() * x[0].clone(), &[3.0]).unwrap();
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn sin_times_y() {
        // f(x, y) = sin(x) * y at (0, 5) -> (5, 0)
        let g = grad(|v| v[0].sin() * v[1].clone(), &[0.0, 5.0]).unwrap();
        assert_eq!(g, vec![5.0, 0.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = grad(
            |v| {
                let c = v[0].lift(7.0);
                v[0].clone() + c
            },
            &[2.0],
        )
        .unwrap();
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn identity_gradient_is_one() {
        let g = grad(|v| v[0].clone(), &[0.123]).unwrap();
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn division_and_tan() {
        let f = |v: &[Var]| v[0].tan() / v[1].clone();
        let report = finite_diff_check(f, &[0.4, 2.0], 1e-6, 1e-7).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sqrt_at_zero_keeps_finite_gradient() {
        let g = grad(|v| v[0].sqrt(), &[0.0]).unwrap();
        assert!(g[0].is_finite());
        // Forward value is the exact sqrt.
        assert_eq!(eval(|v| v[0].sqrt(), &[0.0]), 0.0);
    }

    #[test]
    fn clamp_subgradient() {
        // Inside: identity. Outside: zero. Boundary: inside derivative.
        let f = |v: &[Var]| v[0].clamp_range(-1.0, 1.0);
        assert_eq!(grad(f, &[0.5]).unwrap(), vec![1.0]);
        assert_eq!(grad(f, &[2.0]).unwrap(), vec![0.0]);
        assert_eq!(grad(f, &[1.0]).unwrap(), vec![1.0]);
        assert_eq!(grad(f, &[-1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softplus_matches_sigmoid() {
        for &x in &[-20.0, -1.0, 0.0, 0.5, 30.0] {
            let g = grad(|v| v[0].softplus(), &[x]).unwrap();
            assert!((g[0] - sigmoid_f64(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn nonfinite_forward_is_reported() {
        let err = grad(|v| v[0].ln(), &[-1.0]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteForward { .. }));
    }

    #[test]
    fn repeated_grad_calls_are_identical() {
        let f = |v: &[Var]| (v[0].sin() * v[1].exp() + v[0].clone() * v[0].clone()).tanh();
        let a = grad(f, &[0.7, 0.3]).unwrap();
        let b = grad(f, &[0.7, 0.3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_function_fd_errors_tiny() {
        let f = |v: &[Var]| {
            let two = v[0].lift(2.0);
            v[0].clone() * two + v[1].clone()
        };
        let report = finite_diff_check(f, &[1.0, 2.0], 1e-6, 1e-10).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    /// Evaluates a dense polynomial and its analytic derivative.
    fn poly(coeffs: &[f64], x: f64) -> (f64, f64) {
        let mut val = 0.0;
        let mut der = 0.0;
        for &c in coeffs.iter().rev() {
            der = der * x + val;
            val = val * x + c;
        }
        (val, der)
    }

    fn poly_var(coeffs: &[f64], x: &Var) -> Var {
        let mut acc = x.lift(0.0);
        for &c in coeffs.iter().rev() {
            acc = acc * x.clone() + x.lift(c);
        }
        acc
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        /// Chain rule on random polynomial compositions: the tape gradient of
        /// f(g(x)) equals f'(g(x)) * g'(x) computed analytically.
        #[test]
        fn chain_rule_composition(
            f_coeffs in proptest::collection::vec(-2.0f64..2.0, 1..5),
            g_coeffs in proptest::collection::vec(-2.0f64..2.0, 1..5),
            x in -1.5f64..1.5,
        ) {
            let tape_grad = grad(
                |v| {
                    let inner = poly_var(&g_coeffs, &v[0]);
                    poly_var(&f_coeffs, &inner)
                },
                &[x],
            ).unwrap()[0];
            let (gx, dgx) = poly(&g_coeffs, x);
            let (_, dfg) = poly(&f_coeffs, gx);
            let expected = dfg * dgx;
            let scale = expected.abs().max(1.0);
            prop_assert!((tape_grad - expected).abs() <= 1e-9 * scale,
                "tape {tape_grad} vs analytic {expected}");
        }
    }
}
