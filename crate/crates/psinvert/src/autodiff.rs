//! Reverse-mode automatic differentiation over scalar tape nodes.
//!
//! A [`Tape`] records one forward computation (define-by-run, rebuilt every
//! iteration); [`Tape::backward`] then produces the gradient of one output
//! with respect to every leaf in a single reverse sweep. Heavy dense layers
//! go through a fused affine node that reads weights straight from a bound
//! parameter snapshot instead of materializing one leaf per weight.
//!
//! All arithmetic is f64. The subgradient of `relu` and `abs` at exactly 0
//! is defined as 0, so attached-shadow pixels contribute zero gradient.

use crate::error::{Error, Result};
use crate::vec3::Vec3;
use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;
use std::sync::Arc;

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf,
    Param { slot: u32 },
    Unary { p: u32, d: f64 },
    Binary { p0: u32, p1: u32, d0: f64, d1: f64 },
    /// One dense-layer output: bias + dot(weight row, node range).
    /// Weights and bias live in the bound parameter snapshot.
    Affine { w: u32, b: u32, x0: u32, n: u32 },
}

struct TapeInner {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    params: Arc<Vec<f64>>,
}

/// Append-only record of one forward pass.
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::with_params(Arc::new(Vec::new()))
    }

    /// A tape whose fused affine nodes and `param` leaves read from `params`.
    pub fn with_params(params: Arc<Vec<f64>>) -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                vals: Vec::new(),
                params,
            })),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, node: Node, val: f64) -> Var {
        let mut t = self.inner.borrow_mut();
        let idx = t.nodes.len() as u32;
        t.nodes.push(node);
        t.vals.push(val);
        Var {
            tape: Rc::clone(&self.inner),
            idx,
        }
    }

    /// Registers a free differentiable variable.
    pub fn leaf(&self, value: f64) -> Var {
        self.push(Node::Leaf, value)
    }

    /// Registers a leaf bound to a parameter slot; its gradient is
    /// accumulated into [`Gradients::params`].
    pub fn param(&self, slot: usize) -> Var {
        let value = self.inner.borrow().params[slot];
        self.push(Node::Param { slot: slot as u32 }, value)
    }

    /// Lifts three constants into tape variables.
    pub fn vec3(&self, v: Vec3) -> V3<Var> {
        V3::new(self.leaf(v.x), self.leaf(v.y), self.leaf(v.z))
    }

    /// One dense layer `y = W x + b` over a contiguous run of input nodes.
    /// `w` points at `out_dim * in_dim` row-major weights, `b` at `out_dim`
    /// biases, both inside the bound parameter snapshot.
    pub fn affine_layer(&self, w: usize, b: usize, inputs: &[Var], out_dim: usize) -> Vec<Var> {
        assert!(!inputs.is_empty());
        let x0 = inputs[0].idx;
        for (i, v) in inputs.iter().enumerate() {
            assert!(
                Rc::ptr_eq(&v.tape, &self.inner) && v.idx == x0 + i as u32,
                "affine inputs must be consecutive nodes of this tape"
            );
        }
        let n = inputs.len();
        let mut out = Vec::with_capacity(out_dim);
        for j in 0..out_dim {
            let row = w + j * n;
            let val = {
                let t = self.inner.borrow();
                let xs = &t.vals[x0 as usize..x0 as usize + n];
                let ws = &t.params[row..row + n];
                t.params[b + j] + ws.iter().zip(xs).map(|(wi, xi)| wi * xi).sum::<f64>()
            };
            out.push(self.push(
                Node::Affine {
                    w: row as u32,
                    b: (b + j) as u32,
                    x0,
                    n: n as u32,
                },
                val,
            ));
        }
        out
    }

    /// Gradient of `output` w.r.t. every leaf and parameter, one reverse
    /// sweep, each node visited exactly once.
    pub fn backward(&self, output: &Var) -> Result<Gradients> {
        if !Rc::ptr_eq(&self.inner, &output.tape) {
            return Err(Error::ForeignVar);
        }
        let t = self.inner.borrow();
        let mut grads = vec![0.0; t.nodes.len()];
        let mut params = vec![0.0; t.params.len()];
        grads[output.idx as usize] = 1.0;
        for idx in (0..t.nodes.len()).rev() {
            let g = grads[idx];
            if g == 0.0 {
                continue;
            }
            match t.nodes[idx] {
                Node::Leaf => {}
                Node::Param { slot } => params[slot as usize] += g,
                Node::Unary { p, d } => grads[p as usize] += g * d,
                Node::Binary { p0, p1, d0, d1 } => {
                    grads[p0 as usize] += g * d0;
                    grads[p1 as usize] += g * d1;
                }
                Node::Affine { w, b, x0, n } => {
                    let (w, b, x0, n) = (w as usize, b as usize, x0 as usize, n as usize);
                    for i in 0..n {
                        grads[x0 + i] += g * t.params[w + i];
                        params[w + i] += g * t.vals[x0 + i];
                    }
                    params[b] += g;
                }
            }
        }
        Ok(Gradients {
            tape: Rc::clone(&self.inner),
            nodes: grads,
            params,
        })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Result of one reverse sweep.
pub struct Gradients {
    tape: Rc<RefCell<TapeInner>>,
    nodes: Vec<f64>,
    params: Vec<f64>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> f64 {
        assert!(Rc::ptr_eq(&self.tape, &var.tape), "variable from another tape");
        self.nodes[var.idx as usize]
    }

    /// Gradient per parameter slot of the bound snapshot.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }
}

/// A scalar value recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Rc<RefCell<TapeInner>>,
    idx: u32,
}

impl Var {
    pub fn value(&self) -> f64 {
        self.tape.borrow().vals[self.idx as usize]
    }

    fn push(&self, node: Node, val: f64) -> Var {
        let mut t = self.tape.borrow_mut();
        let idx = t.nodes.len() as u32;
        t.nodes.push(node);
        t.vals.push(val);
        Var {
            tape: Rc::clone(&self.tape),
            idx,
        }
    }

    fn unary(&self, val: f64, d: f64) -> Var {
        self.push(Node::Unary { p: self.idx, d }, val)
    }

    fn binary(&self, rhs: &Var, val: f64, d0: f64, d1: f64) -> Var {
        assert!(
            Rc::ptr_eq(&self.tape, &rhs.tape),
            "variables from different tapes"
        );
        self.push(
            Node::Binary {
                p0: self.idx,
                p1: rhs.idx,
                d0,
                d1,
            },
            val,
        )
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

/// Scalar interface shared by plain f64 and tape variables so that every
/// shading formula has a single source.
pub trait Real:
    Clone + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    /// A constant in the same evaluation context as `self`.
    fn lit(&self, c: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    /// max(x, 0) with subgradient 0 at x = 0.
    fn relu(&self) -> Self;
    /// |x| with subgradient 0 at x = 0.
    fn abs_val(&self) -> Self;
    /// ln(1 + exp(x)), evaluated in overflow-safe form.
    fn softplus(&self) -> Self;
    /// Multiply by a plain constant.
    fn scale(&self, c: f64) -> Self;
    /// Add a plain constant.
    fn shift(&self, c: f64) -> Self;
}

fn softplus_f64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
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

impl Real for f64 {
    fn lit(&self, c: f64) -> f64 {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(&self) -> f64 {
        f64::exp(*self)
    }
    fn ln(&self) -> f64 {
        f64::ln(*self)
    }
    fn sqrt(&self) -> f64 {
        f64::sqrt(*self)
    }
    fn relu(&self) -> f64 {
        self.max(0.0)
    }
    fn abs_val(&self) -> f64 {
        self.abs()
    }
    fn softplus(&self) -> f64 {
        softplus_f64(*self)
    }
    fn scale(&self, c: f64) -> f64 {
        self * c
    }
    fn shift(&self, c: f64) -> f64 {
        self + c
    }
}

impl Real for Var {
    fn lit(&self, c: f64) -> Var {
        self.push(Node::Leaf, c)
    }
    fn value(&self) -> f64 {
        Var::value(self)
    }
    fn exp(&self) -> Var {
        let v = self.value().exp();
        self.unary(v, v)
    }
    fn ln(&self) -> Var {
        let a = self.value();
        self.unary(a.ln(), 1.0 / a)
    }
    fn sqrt(&self) -> Var {
        let v = self.value().sqrt();
        self.unary(v, 0.5 / v)
    }
    fn relu(&self) -> Var {
        let a = self.value();
        self.unary(a.max(0.0), if a > 0.0 { 1.0 } else { 0.0 })
    }
    fn abs_val(&self) -> Var {
        let a = self.value();
        let d = if a > 0.0 {
            1.0
        } else if a < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(a.abs(), d)
    }
    fn softplus(&self) -> Var {
        let a = self.value();
        self.unary(softplus_f64(a), sigmoid_f64(a))
    }
    fn scale(&self, c: f64) -> Var {
        self.unary(self.value() * c, c)
    }
    fn shift(&self, c: f64) -> Var {
        self.unary(self.value() + c, 1.0)
    }
}

/// Generic 3-vector over any [`Real`] scalar.
#[derive(Clone)]
pub struct V3<S> {
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Real> V3<S> {
    pub fn new(x: S, y: S, z: S) -> Self {
        V3 { x, y, z }
    }

    pub fn dot(&self, o: &V3<S>) -> S {
        self.x.clone() * o.x.clone() + self.y.clone() * o.y.clone() + self.z.clone() * o.z.clone()
    }

    pub fn add(&self, o: &V3<S>) -> V3<S> {
        V3::new(
            self.x.clone() + o.x.clone(),
            self.y.clone() + o.y.clone(),
            self.z.clone() + o.z.clone(),
        )
    }

    pub fn shift_vec(&self, c: Vec3) -> V3<S> {
        V3::new(self.x.shift(c.x), self.y.shift(c.y), self.z.shift(c.z))
    }

    pub fn scale_s(&self, s: &S) -> V3<S> {
        V3::new(
            self.x.clone() * s.clone(),
            self.y.clone() * s.clone(),
            self.z.clone() * s.clone(),
        )
    }

    pub fn norm(&self) -> S {
        self.dot(self).sqrt()
    }

    /// Unit direction; errors when the current value is degenerate.
    pub fn normalize(&self, eps: f64) -> Result<V3<S>> {
        let n = self.norm();
        let nv = n.value();
        if !(nv > eps) {
            return Err(Error::DegenerateVector { norm: nv });
        }
        Ok(V3::new(
            self.x.clone() / n.clone(),
            self.y.clone() / n.clone(),
            self.z.clone() / n,
        ))
    }

    pub fn values(&self) -> Vec3 {
        Vec3::new(self.x.value(), self.y.value(), self.z.value())
    }
}

impl V3<f64> {
    pub fn from_vec3(v: Vec3) -> Self {
        V3::new(v.x, v.y, v.z)
    }
}

fn max_rel_error(ad: &[f64], fd: &[f64]) -> f64 {
    ad.iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / f64::max(1e-8, a.abs() + f.abs()))
        .fold(0.0, f64::max)
}

/// Compares reverse-mode gradients against central differences for a
/// scalar function of free leaves. Returns the max relative error
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)` over coordinates.
pub fn grad_check<F>(f: F, x: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    assert!((1e-6..=1e-3).contains(&eps), "step out of supported range");
    let eval = |point: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|&v| tape.leaf(v)).collect();
        let y = f(&tape, &vars)?.value();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation"));
        }
        Ok(y)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = x.iter().map(|&v| tape.leaf(v)).collect();
    let out = f(&tape, &vars)?;
    if !out.value().is_finite() {
        return Err(Error::NonFinite("grad_check evaluation"));
    }
    let grads = tape.backward(&out)?;
    let g_ad: Vec<f64> = vars.iter().map(|v| grads.get(v)).collect();

    let mut g_fd = Vec::with_capacity(x.len());
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        pt[i] = x[i] + eps;
        let hi = eval(&pt)?;
        pt[i] = x[i] - eps;
        let lo = eval(&pt)?;
        pt[i] = x[i];
        g_fd.push((hi - lo) / (2.0 * eps));
    }
    Ok(max_rel_error(&g_ad, &g_fd))
}

/// [`grad_check`] for functions of a bound parameter snapshot (fused
/// affine layers included).
pub fn grad_check_params<F>(f: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&Tape) -> Result<Var>,
{
    assert!((1e-6..=1e-3).contains(&eps), "step out of supported range");
    let eval = |point: Vec<f64>| -> Result<f64> {
        let tape = Tape::with_params(Arc::new(point));
        let y = f(&tape)?.value();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation"));
        }
        Ok(y)
    };

    let tape = Tape::with_params(Arc::new(params.to_vec()));
    let out = f(&tape)?;
    if !out.value().is_finite() {
        return Err(Error::NonFinite("grad_check evaluation"));
    }
    let g_ad = tape.backward(&out)?.into_params();

    let mut g_fd = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut hi = params.to_vec();
        hi[i] += eps;
        let mut lo = params.to_vec();
        lo[i] -= eps;
        g_fd.push((eval(hi)? - eval(lo)?) / (2.0 * eps));
    }
    Ok(max_rel_error(&g_ad, &g_fd))
}
