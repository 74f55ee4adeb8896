//! Scalar reverse-mode automatic differentiation on an arena tape.
//!
//! Nodes store the forward value plus the local partials of up to two
//! parents, so the backward sweep is a single reverse pass over the arena
//! (construction order is already a topological order). One tape is
//! single-threaded; independent tapes can run in parallel.
//!
//! Subgradient conventions: |x| uses 0 at x = 0; max/min route the gradient
//! to the strictly larger/smaller operand and split it 0.5/0.5 on an exact
//! tie. `ln` of a non-positive value and division by zero panic at forward
//! time rather than silently producing non-finite values.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy)]
struct Node {
    value: f64,
    parents: [u32; 2],
    weights: [f64; 2],
    arity: u8,
}

/// Arena of expression nodes.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one scalar node on a tape.
#[derive(Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    index: u32,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Insert a leaf. Leaves are both parameters and constants; gradients
    /// are available for any of them after a backward pass.
    pub fn value(&self, x: f64) -> Value<'_> {
        self.push(Node {
            value: x,
            parents: [0, 0],
            weights: [0.0, 0.0],
            arity: 0,
        })
    }

    /// Insert a batch of leaves.
    pub fn values(&self, xs: &[f64]) -> Vec<Value<'_>> {
        xs.iter().map(|&x| self.value(x)).collect()
    }

    fn push(&self, node: Node) -> Value<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let index = u32::try_from(nodes.len()).expect("tape overflow");
        nodes.push(node);
        Value { tape: self, index }
    }

    fn unary(&self, a: &Value<'_>, value: f64, weight: f64) -> Value<'_> {
        self.push(Node {
            value,
            parents: [a.index, 0],
            weights: [weight, 0.0],
            arity: 1,
        })
    }

    fn binary(&self, a: &Value<'_>, b: &Value<'_>, value: f64, wa: f64, wb: f64) -> Value<'_> {
        self.push(Node {
            value,
            parents: [a.index, b.index],
            weights: [wa, wb],
            arity: 2,
        })
    }

    /// Adjoints of every node with respect to `root`. Each call starts from
    /// a fresh gradient buffer, so no reset step is needed between calls.
    /// Runtime is linear in the node count.
    pub fn backward(&self, root: Value<'_>) -> Gradients {
        assert!(std::ptr::eq(root.tape, self), "root lives on another tape");
        let nodes = self.nodes.borrow();
        let mut grads = vec![0.0; nodes.len()];
        grads[root.index as usize] = 1.0;
        for i in (0..=root.index as usize).rev() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            let node = &nodes[i];
            for p in 0..node.arity as usize {
                grads[node.parents[p] as usize] += node.weights[p] * g;
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<f64>,
}

impl Gradients {
    /// d(root)/d(v).
    pub fn wrt(&self, v: Value<'_>) -> f64 {
        self.grads[v.index as usize]
    }
}

impl<'t> Value<'t> {
    pub fn value(&self) -> f64 {
        self.tape.nodes.borrow()[self.index as usize].value
    }

    pub fn exp(self) -> Value<'t> {
        let y = self.value().exp();
        self.tape.unary(&self, y, y)
    }

    /// Natural logarithm; panics on non-positive input. NaN propagates so
    /// that divergence checks downstream can report it.
    pub fn ln(self) -> Value<'t> {
        let x = self.value();
        assert!(!(x <= 0.0), "ln of non-positive value {x}");
        self.tape.unary(&self, x.ln(), 1.0 / x)
    }

    pub fn tanh(self) -> Value<'t> {
        let y = self.value().tanh();
        self.tape.unary(&self, y, 1.0 - y * y)
    }

    pub fn abs(self) -> Value<'t> {
        let x = self.value();
        let sign = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.tape.unary(&self, x.abs(), sign)
    }

    pub fn powi(self, n: i32) -> Value<'t> {
        let x = self.value();
        self.tape
            .unary(&self, x.powi(n), n as f64 * x.powi(n - 1))
    }

    pub fn maximum(self, other: Value<'t>) -> Value<'t> {
        let (a, b) = (self.value(), other.value());
        let (wa, wb) = if a > b {
            (1.0, 0.0)
        } else if a < b {
            (0.0, 1.0)
        } else {
            (0.5, 0.5)
        };
        self.tape.binary(&self, &other, a.max(b), wa, wb)
    }

    pub fn minimum(self, other: Value<'t>) -> Value<'t> {
        let (a, b) = (self.value(), other.value());
        let (wa, wb) = if a < b {
            (1.0, 0.0)
        } else if a > b {
            (0.0, 1.0)
        } else {
            (0.5, 0.5)
        };
        self.tape.binary(&self, &other, a.min(b), wa, wb)
    }

    /// max(self, c) for a constant c; same tie convention as `maximum`
    /// (a tie leaves weight 0.5 on self).
    pub fn maximum_c(self, c: f64) -> Value<'t> {
        let a = self.value();
        let w = if a > c {
            1.0
        } else if a < c {
            0.0
        } else {
            0.5
        };
        self.tape.unary(&self, a.max(c), w)
    }

    /// min(self, c) for a constant c.
    pub fn minimum_c(self, c: f64) -> Value<'t> {
        let a = self.value();
        let w = if a < c {
            1.0
        } else if a > c {
            0.0
        } else {
            0.5
        };
        self.tape.unary(&self, a.min(c), w)
    }

    /// Clamp into [lo, hi]; gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Value<'t> {
        self.maximum_c(lo).minimum_c(hi)
    }

    /// Logistic sigmoid, built on tanh.
    pub fn sigmoid(self) -> Value<'t> {
        (self * 0.5).tanh() * 0.5 + 0.5
    }
}

impl<'t> Add for Value<'t> {
    type Output = Value<'t>;
    fn add(self, rhs: Value<'t>) -> Value<'t> {
        self.tape
            .binary(&self, &rhs, self.value() + rhs.value(), 1.0, 1.0)
    }
}

impl<'t> Sub for Value<'t> {
    type Output = Value<'t>;
    fn sub(self, rhs: Value<'t>) -> Value<'t> {
        self.tape
            .binary(&self, &rhs, self.value() - rhs.value(), 1.0, -1.0)
    }
}

impl<'t> Mul for Value<'t> {
    type Output = Value<'t>;
    fn mul(self, rhs: Value<'t>) -> Value<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.tape.binary(&self, &rhs, a * b, b, a)
    }
}

impl<'t> Div for Value<'t> {
    type Output = Value<'t>;
    fn div(self, rhs: Value<'t>) -> Value<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert!(b != 0.0, "division by zero on tape");
        self.tape.binary(&self, &rhs, a / b, 1.0 / b, -a / (b * b))
    }
}

impl<'t> Neg for Value<'t> {
    type Output = Value<'t>;
    fn neg(self) -> Value<'t> {
        self.tape.unary(&self, -self.value(), -1.0)
    }
}

// Mixed scalar arithmetic folds the constant into the node instead of
// allocating a leaf for it.
impl<'t> Add<f64> for Value<'t> {
    type Output = Value<'t>;
    fn add(self, c: f64) -> Value<'t> {
        self.tape.unary(&self, self.value() + c, 1.0)
    }
}

impl<'t> Sub<f64> for Value<'t> {
    type Output = Value<'t>;
    fn sub(self, c: f64) -> Value<'t> {
        self.tape.unary(&self, self.value() - c, 1.0)
    }
}

impl<'t> Mul<f64> for Value<'t> {
    type Output = Value<'t>;
    fn mul(self, c: f64) -> Value<'t> {
        self.tape.unary(&self, self.value() * c, c)
    }
}

impl<'t> Div<f64> for Value<'t> {
    type Output = Value<'t>;
    fn div(self, c: f64) -> Value<'t> {
        assert!(c != 0.0, "division by zero on tape");
        self.tape.unary(&self, self.value() / c, 1.0 / c)
    }
}

impl<'t> Add<Value<'t>> for f64 {
    type Output = Value<'t>;
    fn add(self, v: Value<'t>) -> Value<'t> {
        v + self
    }
}

impl<'t> Sub<Value<'t>> for f64 {
    type Output = Value<'t>;
    fn sub(self, v: Value<'t>) -> Value<'t> {
        v.tape.unary(&v, self - v.value(), -1.0)
    }
}

impl<'t> Mul<Value<'t>> for f64 {
    type Output = Value<'t>;
    fn mul(self, v: Value<'t>) -> Value<'t> {
        v * self
    }
}

/// Sum in slice order; errors on an empty slice are the caller's problem.
pub fn sum<'t>(values: &[Value<'t>]) -> Value<'t> {
    let mut it = values.iter();
    let first = *it.next().expect("sum of empty slice");
    it.fold(first, |acc, &v| acc + v)
}

/// Arithmetic mean. When every element is literally the same node the mean
/// is that node, which keeps "mean of N identical passes" bit-identical to
/// a single pass.
pub fn mean<'t>(values: &[Value<'t>]) -> Value<'t> {
    assert!(!values.is_empty(), "mean of empty slice");
    if values.iter().all(|v| v.index == values[0].index) {
        return values[0];
    }
    sum(values) / values.len() as f64
}

/// Numerically stabilized softmax. The max shift is a constant, which
/// leaves the gradient unchanged.
pub fn softmax<'t>(logits: &[Value<'t>]) -> Vec<Value<'t>> {
    assert!(!logits.is_empty(), "softmax of empty slice");
    let m = logits
        .iter()
        .map(|v| v.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<Value<'t>> = logits.iter().map(|&v| (v - m).exp()).collect();
    let denom = sum(&exps);
    exps.into_iter().map(|e| e / denom).collect()
}

/// log(sum(exp(x_i))), stabilized the same way.
pub fn logsumexp<'t>(logits: &[Value<'t>]) -> Value<'t> {
    assert!(!logits.is_empty(), "logsumexp of empty slice");
    let m = logits
        .iter()
        .map(|v| v.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<Value<'t>> = logits.iter().map(|&v| (v - m).exp()).collect();
    sum(&exps).ln() + m
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index attaining the max error.
    pub worst_param: usize,
    pub n_params: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compare reverse-mode gradients of `build` against central finite
/// differences with step `h`. Relative error per parameter is
/// |ad - fd| / max(1e-8, |ad| + |fd|).
pub fn grad_check<F>(build: F, params: &[f64], h: f64, tol: f64) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Value<'t>]) -> Value<'t>,
{
    let tape = Tape::new();
    let leaves = tape.values(params);
    let root = build(&tape, &leaves);
    let grads = tape.backward(root);
    let ad: Vec<f64> = leaves.iter().map(|&l| grads.wrt(l)).collect();

    let eval = |xs: &[f64]| -> f64 {
        let t = Tape::new();
        let ls = t.values(xs);
        build(&t, &ls).value()
    };

    let mut max_rel = 0.0;
    let mut worst = 0;
    let mut xs = params.to_vec();
    for i in 0..params.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let plus = eval(&xs);
        xs[i] = orig - h;
        let minus = eval(&xs);
        xs[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let rel = (ad[i] - fd).abs() / (ad[i].abs() + fd.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        worst_param: worst,
        n_params: params.len(),
        tol,
    }
}
