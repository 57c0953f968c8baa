//! Expression trees over jet variables.
//!
//! An [`Expr`] is an immutable, reference-counted DAG. Every node carries a
//! structural hash and the sorted set of jet variables below it, so equality
//! checks, "does this mention x_j^(k)" queries and memoized rewrites are cheap.
//! Construction goes through smart constructors that fold constants and drop
//! additive zeros and multiplicative ones; nothing more clever than that.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

/// Highest derivative order a jet variable may carry.
pub const MAX_ORDER: u32 = 64;

/// The k-th derivative of dependent variable j.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JetVar {
    pub var: usize,
    pub order: u32,
}

impl JetVar {
    pub const fn new(var: usize, order: u32) -> Self {
        JetVar { var, order }
    }

    /// The next derivative, or `None` past [`MAX_ORDER`].
    pub fn succ(self) -> Option<JetVar> {
        if self.order >= MAX_ORDER {
            None
        } else {
            Some(JetVar::new(self.var, self.order + 1))
        }
    }
}

impl fmt::Display for JetVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.var + 1)?;
        for _ in 0..self.order {
            f.write_str("'")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Tanh,
    Exp,
    Ln,
    Sqrt,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
        }
    }

    pub fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "ln" | "log" => Func::Ln,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("unbound variable {0}")]
    UnboundVariable(JetVar),
    #[error("unbound parameter #{0}")]
    UnboundParam(usize),
    #[error("domain error: {0}")]
    DomainError(&'static str),
    #[error("derivative order of {0} would exceed {MAX_ORDER}")]
    OrderOverflow(JetVar),
}

#[derive(Debug)]
pub enum Node {
    Const(f64),
    Time,
    Var(JetVar),
    /// Named constant resolved at evaluation time (used for frozen IIR constants).
    Param(usize),
    Neg(Expr),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Pow(Expr, i32),
    Func(Func, Expr),
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        use Node::*;
        match (self, other) {
            (Const(a), Const(b)) => a.to_bits() == b.to_bits(),
            (Time, Time) => true,
            (Var(a), Var(b)) => a == b,
            (Param(a), Param(b)) => a == b,
            (Neg(a), Neg(b)) => a == b,
            (Add(a, b), Add(c, d))
            | (Sub(a, b), Sub(c, d))
            | (Mul(a, b), Mul(c, d))
            | (Div(a, b), Div(c, d)) => a == c && b == d,
            (Pow(a, n), Pow(b, m)) => n == m && a == b,
            (Func(f, a), Func(g, b)) => f == g && a == b,
            _ => false,
        }
    }
}

struct Inner {
    node: Node,
    hash: u64,
    vars: Box<[JetVar]>,
    has_time: bool,
    has_param: bool,
}

/// Immutable expression handle. Cloning is a reference-count bump.
#[derive(Clone)]
pub struct Expr(Arc<Inner>);

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || (self.0.hash == other.0.hash && self.0.node == other.0.node)
    }
}
impl Eq for Expr {}

impl Hash for Expr {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.0.hash);
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

fn merge_vars(a: &[JetVar], b: &[JetVar]) -> Box<[JetVar]> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out.into_boxed_slice()
}

impl Expr {
    fn make(node: Node) -> Expr {
        let mut h = DefaultHasher::new();
        let (vars, has_time, has_param): (Box<[JetVar]>, bool, bool) = match &node {
            Node::Const(c) => {
                0u8.hash(&mut h);
                c.to_bits().hash(&mut h);
                (Box::new([]), false, false)
            }
            Node::Time => {
                1u8.hash(&mut h);
                (Box::new([]), true, false)
            }
            Node::Var(v) => {
                2u8.hash(&mut h);
                v.hash(&mut h);
                (Box::new([*v]), false, false)
            }
            Node::Param(p) => {
                3u8.hash(&mut h);
                p.hash(&mut h);
                (Box::new([]), false, true)
            }
            Node::Neg(a) => {
                4u8.hash(&mut h);
                a.0.hash.hash(&mut h);
                (a.0.vars.clone(), a.0.has_time, a.0.has_param)
            }
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                let tag = match &node {
                    Node::Add(..) => 5u8,
                    Node::Sub(..) => 6,
                    Node::Mul(..) => 7,
                    _ => 8,
                };
                tag.hash(&mut h);
                a.0.hash.hash(&mut h);
                b.0.hash.hash(&mut h);
                (
                    merge_vars(&a.0.vars, &b.0.vars),
                    a.0.has_time || b.0.has_time,
                    a.0.has_param || b.0.has_param,
                )
            }
            Node::Pow(a, n) => {
                9u8.hash(&mut h);
                a.0.hash.hash(&mut h);
                n.hash(&mut h);
                (a.0.vars.clone(), a.0.has_time, a.0.has_param)
            }
            Node::Func(f, a) => {
                10u8.hash(&mut h);
                f.hash(&mut h);
                a.0.hash.hash(&mut h);
                (a.0.vars.clone(), a.0.has_time, a.0.has_param)
            }
        };
        Expr(Arc::new(Inner { node, hash: h.finish(), vars, has_time, has_param }))
    }

    pub fn node(&self) -> &Node {
        &self.0.node
    }

    pub fn constant(c: f64) -> Expr {
        // -0.0 and 0.0 should hash alike
        Expr::make(Node::Const(if c == 0.0 { 0.0 } else { c }))
    }

    pub fn zero() -> Expr {
        Expr::constant(0.0)
    }

    pub fn one() -> Expr {
        Expr::constant(1.0)
    }

    pub fn time() -> Expr {
        Expr::make(Node::Time)
    }

    pub fn var(var: usize, order: u32) -> Expr {
        Expr::make(Node::Var(JetVar::new(var, order)))
    }

    pub fn jet(v: JetVar) -> Expr {
        Expr::make(Node::Var(v))
    }

    pub fn param(id: usize) -> Expr {
        Expr::make(Node::Param(id))
    }

    pub fn as_const(&self) -> Option<f64> {
        match self.0.node {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    /// Sorted, duplicate-free jet variables occurring in the expression.
    pub fn vars(&self) -> &[JetVar] {
        &self.0.vars
    }

    pub fn contains(&self, v: JetVar) -> bool {
        self.0.vars.binary_search(&v).is_ok()
    }

    pub fn has_time(&self) -> bool {
        self.0.has_time
    }

    pub fn has_params(&self) -> bool {
        self.0.has_param
    }

    pub fn neg(&self) -> Expr {
        match &self.0.node {
            Node::Const(c) => Expr::constant(-c),
            Node::Neg(a) => a.clone(),
            _ => Expr::make(Node::Neg(self.clone())),
        }
    }

    pub fn add(&self, o: &Expr) -> Expr {
        match (self.as_const(), o.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a + b),
            (Some(a), _) if a == 0.0 => o.clone(),
            (_, Some(b)) if b == 0.0 => self.clone(),
            _ => Expr::make(Node::Add(self.clone(), o.clone())),
        }
    }

    pub fn sub(&self, o: &Expr) -> Expr {
        match (self.as_const(), o.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a - b),
            (Some(a), _) if a == 0.0 => o.neg(),
            (_, Some(b)) if b == 0.0 => self.clone(),
            _ => Expr::make(Node::Sub(self.clone(), o.clone())),
        }
    }

    pub fn mul(&self, o: &Expr) -> Expr {
        match (self.as_const(), o.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a * b),
            (Some(a), _) if a == 0.0 => Expr::zero(),
            (_, Some(b)) if b == 0.0 => Expr::zero(),
            (Some(a), _) if a == 1.0 => o.clone(),
            (_, Some(b)) if b == 1.0 => self.clone(),
            _ => Expr::make(Node::Mul(self.clone(), o.clone())),
        }
    }

    pub fn div(&self, o: &Expr) -> Expr {
        match (self.as_const(), o.as_const()) {
            (Some(a), Some(b)) if b != 0.0 => Expr::constant(a / b),
            (Some(a), _) if a == 0.0 => Expr::zero(),
            (_, Some(b)) if b == 1.0 => self.clone(),
            _ => Expr::make(Node::Div(self.clone(), o.clone())),
        }
    }

    pub fn powi(&self, n: i32) -> Expr {
        if n == 0 {
            return Expr::one();
        }
        if n == 1 {
            return self.clone();
        }
        match self.as_const() {
            Some(c) if n > 0 || c != 0.0 => Expr::constant(c.powi(n)),
            _ => Expr::make(Node::Pow(self.clone(), n)),
        }
    }

    pub fn apply(f: Func, a: &Expr) -> Expr {
        if let Some(c) = a.as_const() {
            if let Ok(v) = <f64 as EvalScalar>::func(f, c) {
                if v.is_finite() {
                    return Expr::constant(v);
                }
            }
        }
        Expr::make(Node::Func(f, a.clone()))
    }

    pub fn sin(&self) -> Expr {
        Expr::apply(Func::Sin, self)
    }
    pub fn cos(&self) -> Expr {
        Expr::apply(Func::Cos, self)
    }
    pub fn tan(&self) -> Expr {
        Expr::apply(Func::Tan, self)
    }
    pub fn tanh(&self) -> Expr {
        Expr::apply(Func::Tanh, self)
    }
    pub fn exp(&self) -> Expr {
        Expr::apply(Func::Exp, self)
    }
    pub fn ln(&self) -> Expr {
        Expr::apply(Func::Ln, self)
    }
    pub fn sqrt(&self) -> Expr {
        Expr::apply(Func::Sqrt, self)
    }

    /// True unless some elementary function has a jet variable below it.
    /// Functions of `t` alone count as forcing terms and are allowed.
    pub fn is_polynomial(&self) -> bool {
        match &self.0.node {
            Node::Const(_) | Node::Time | Node::Var(_) | Node::Param(_) => true,
            Node::Neg(a) | Node::Pow(a, _) => a.is_polynomial(),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                a.is_polynomial() && b.is_polynomial()
            }
            Node::Func(_, a) => a.vars().is_empty(),
        }
    }

    /// Total degree in the jet variables, or `None` when the expression is not
    /// a polynomial in them (variable denominators, negative powers of
    /// variables, elementary functions of variables).
    pub fn poly_degree(&self) -> Option<u32> {
        if self.vars().is_empty() {
            return Some(0);
        }
        match &self.0.node {
            Node::Const(_) | Node::Time | Node::Param(_) => Some(0),
            Node::Var(_) => Some(1),
            Node::Neg(a) => a.poly_degree(),
            Node::Add(a, b) | Node::Sub(a, b) => Some(a.poly_degree()?.max(b.poly_degree()?)),
            Node::Mul(a, b) => Some(a.poly_degree()? + b.poly_degree()?),
            Node::Div(a, b) => {
                if b.vars().is_empty() {
                    a.poly_degree()
                } else {
                    None
                }
            }
            Node::Pow(a, n) => {
                if *n < 0 {
                    None
                } else {
                    Some(a.poly_degree()? * (*n as u32))
                }
            }
            Node::Func(..) => None,
        }
    }

    /// Highest order at which variable `j` occurs, `None` meaning absent.
    pub fn leading_order(&self, j: usize) -> Option<u32> {
        self.vars().iter().filter(|v| v.var == j).map(|v| v.order).max()
    }

    /// Number of distinct nodes in the DAG.
    pub fn dag_size(&self) -> usize {
        fn walk(e: &Expr, seen: &mut std::collections::HashSet<*const Inner>) {
            if !seen.insert(Arc::as_ptr(&e.0)) {
                return;
            }
            for c in e.children() {
                walk(c, seen);
            }
        }
        let mut seen = std::collections::HashSet::new();
        walk(self, &mut seen);
        seen.len()
    }

    fn children(&self) -> Vec<&Expr> {
        match &self.0.node {
            Node::Const(_) | Node::Time | Node::Var(_) | Node::Param(_) => vec![],
            Node::Neg(a) | Node::Pow(a, _) | Node::Func(_, a) => vec![a],
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => vec![a, b],
        }
    }

    /// Rebuilds the expression, replacing leaves for which `f` returns a value.
    /// Shared subterms are rewritten once.
    pub fn rewrite_leaves(&self, f: &mut dyn FnMut(&Node) -> Option<Expr>) -> Expr {
        let mut memo = HashMap::new();
        rewrite(self, f, &mut memo)
    }

    pub fn substitute(&self, map: &HashMap<JetVar, Expr>) -> Expr {
        if !self.vars().iter().any(|v| map.contains_key(v)) {
            return self.clone();
        }
        self.rewrite_leaves(&mut |n| match n {
            Node::Var(v) => map.get(v).cloned(),
            _ => None,
        })
    }

    /// Replaces `t` by a constant and folds.
    pub fn at_time(&self, t0: f64) -> Expr {
        if !self.has_time() {
            return self.clone();
        }
        self.rewrite_leaves(&mut |n| match n {
            Node::Time => Some(Expr::constant(t0)),
            _ => None,
        })
    }

    /// Replaces parameters found in `values` by constants and folds.
    pub fn bind_params(&self, values: &HashMap<usize, f64>) -> Expr {
        if !self.has_params() {
            return self.clone();
        }
        self.rewrite_leaves(&mut |n| match n {
            Node::Param(p) => values.get(p).map(|v| Expr::constant(*v)),
            _ => None,
        })
    }

    /// Symbolic partial derivative with respect to one jet variable.
    pub fn partial(&self, v: JetVar) -> Expr {
        let mut memo = HashMap::new();
        differentiate(self, &mut memo, &mut |leaf| match leaf {
            Node::Var(u) if *u == v => Ok(Expr::one()),
            _ => Ok(Expr::zero()),
        }, &|e| e.contains(v))
        .expect("partial derivatives cannot fail")
    }

    /// The formal total derivative `d/dt + sum_k x^(k+1) d/dx^(k)`.
    pub fn total_derivative(&self) -> Result<Expr, ExprError> {
        let mut memo = HashMap::new();
        differentiate(self, &mut memo, &mut |leaf| match leaf {
            Node::Time => Ok(Expr::one()),
            Node::Var(u) => u.succ().map(Expr::jet).ok_or(ExprError::OrderOverflow(*u)),
            _ => Ok(Expr::zero()),
        }, &|e| e.has_time() || !e.vars().is_empty())
    }

    /// Applies the total derivative `k` times.
    pub fn total_derivative_n(&self, k: u32) -> Result<Expr, ExprError> {
        let mut e = self.clone();
        for _ in 0..k {
            e = e.total_derivative()?;
        }
        Ok(e)
    }

    pub fn eval<S: EvalScalar>(&self, b: &Binding<S>) -> Result<S, ExprError> {
        let mut memo = HashMap::new();
        eval_rec(self, b, &mut memo)
    }

    /// Formats with user-facing names.
    pub fn display<'a>(&'a self, names: &'a Names) -> Display<'a> {
        Display { e: self, names }
    }
}

fn rewrite(
    e: &Expr,
    f: &mut dyn FnMut(&Node) -> Option<Expr>,
    memo: &mut HashMap<Expr, Expr>,
) -> Expr {
    if let Some(r) = memo.get(e) {
        return r.clone();
    }
    let out = match &e.0.node {
        Node::Const(_) | Node::Time | Node::Var(_) | Node::Param(_) => {
            f(&e.0.node).unwrap_or_else(|| e.clone())
        }
        Node::Neg(a) => rewrite(a, f, memo).neg(),
        Node::Add(a, b) => rewrite(a, f, memo).add(&rewrite(b, f, memo)),
        Node::Sub(a, b) => rewrite(a, f, memo).sub(&rewrite(b, f, memo)),
        Node::Mul(a, b) => rewrite(a, f, memo).mul(&rewrite(b, f, memo)),
        Node::Div(a, b) => rewrite(a, f, memo).div(&rewrite(b, f, memo)),
        Node::Pow(a, n) => rewrite(a, f, memo).powi(*n),
        Node::Func(g, a) => Expr::apply(*g, &rewrite(a, f, memo)),
    };
    memo.insert(e.clone(), out.clone());
    out
}

// Shared chain-rule engine for partial and total derivatives. `leaf` gives
// the derivative of atoms, `live` prunes subtrees known to differentiate to 0.
fn differentiate(
    e: &Expr,
    memo: &mut HashMap<Expr, Expr>,
    leaf: &mut dyn FnMut(&Node) -> Result<Expr, ExprError>,
    live: &dyn Fn(&Expr) -> bool,
) -> Result<Expr, ExprError> {
    if !live(e) {
        return Ok(Expr::zero());
    }
    if let Some(r) = memo.get(e) {
        return Ok(r.clone());
    }
    let out = match &e.0.node {
        Node::Const(_) | Node::Time | Node::Var(_) | Node::Param(_) => leaf(&e.0.node)?,
        Node::Neg(a) => differentiate(a, memo, leaf, live)?.neg(),
        Node::Add(a, b) => differentiate(a, memo, leaf, live)?.add(&differentiate(b, memo, leaf, live)?),
        Node::Sub(a, b) => differentiate(a, memo, leaf, live)?.sub(&differentiate(b, memo, leaf, live)?),
        Node::Mul(a, b) => {
            let da = differentiate(a, memo, leaf, live)?;
            let db = differentiate(b, memo, leaf, live)?;
            da.mul(b).add(&a.mul(&db))
        }
        Node::Div(a, b) => {
            let da = differentiate(a, memo, leaf, live)?;
            let db = differentiate(b, memo, leaf, live)?;
            if db.is_zero() {
                da.div(b)
            } else {
                da.mul(b).sub(&a.mul(&db)).div(&b.powi(2))
            }
        }
        Node::Pow(a, n) => {
            let da = differentiate(a, memo, leaf, live)?;
            Expr::constant(*n as f64).mul(&a.powi(n - 1)).mul(&da)
        }
        Node::Func(f, a) => {
            let da = differentiate(a, memo, leaf, live)?;
            if da.is_zero() {
                Expr::zero()
            } else {
                let outer = match f {
                    Func::Sin => a.cos(),
                    Func::Cos => a.sin().neg(),
                    Func::Tan => Expr::one().div(&a.cos().powi(2)),
                    Func::Tanh => Expr::one().sub(&a.tanh().powi(2)),
                    Func::Exp => a.exp(),
                    Func::Ln => Expr::one().div(a),
                    Func::Sqrt => Expr::one().div(&Expr::constant(2.0).mul(&a.sqrt())),
                };
                outer.mul(&da)
            }
        }
    };
    memo.insert(e.clone(), out.clone());
    Ok(out)
}

macro_rules! ops_for_expr {
    ($tr:ident, $m:ident) => {
        impl $tr<Expr> for Expr {
            type Output = Expr;
            fn $m(self, o: Expr) -> Expr {
                Expr::$m(&self, &o)
            }
        }
        impl $tr<&Expr> for Expr {
            type Output = Expr;
            fn $m(self, o: &Expr) -> Expr {
                Expr::$m(&self, o)
            }
        }
        impl $tr<&Expr> for &Expr {
            type Output = Expr;
            fn $m(self, o: &Expr) -> Expr {
                Expr::$m(self, o)
            }
        }
        impl $tr<f64> for Expr {
            type Output = Expr;
            fn $m(self, o: f64) -> Expr {
                Expr::$m(&self, &Expr::constant(o))
            }
        }
        impl $tr<Expr> for f64 {
            type Output = Expr;
            fn $m(self, o: Expr) -> Expr {
                Expr::$m(&Expr::constant(self), &o)
            }
        }
    };
}
ops_for_expr!(Add, add);
ops_for_expr!(Sub, sub);
ops_for_expr!(Mul, mul);
ops_for_expr!(Div, div);

impl Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(&self)
    }
}

impl Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

/// Scalars an expression can be evaluated in: real floats for analysis and
/// integration, complex numbers for homotopy path tracking.
pub trait EvalScalar:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
{
    fn from_f64(x: f64) -> Self;
    fn is_zero_value(self) -> bool;
    fn powi(self, n: i32) -> Self;
    fn func(f: Func, x: Self) -> Result<Self, ExprError>;

    fn checked_div(self, o: Self) -> Result<Self, ExprError> {
        if o.is_zero_value() {
            Err(ExprError::DomainError("division by zero"))
        } else {
            Ok(self / o)
        }
    }
}

macro_rules! eval_scalar_float {
    ($($t:ty),*) => {$(
        impl EvalScalar for $t {
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn is_zero_value(self) -> bool {
                self == 0.0
            }
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            fn func(f: Func, x: Self) -> Result<Self, ExprError> {
                Ok(match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Tan => x.tan(),
                    Func::Tanh => x.tanh(),
                    Func::Exp => x.exp(),
                    Func::Ln => {
                        if x <= 0.0 {
                            return Err(ExprError::DomainError("logarithm of a nonpositive number"));
                        }
                        x.ln()
                    }
                    Func::Sqrt => {
                        if x < 0.0 {
                            return Err(ExprError::DomainError("square root of a negative number"));
                        }
                        x.sqrt()
                    }
                })
            }
        }
    )*};
}
eval_scalar_float!(f32, f64);

impl EvalScalar for Complex64 {
    fn from_f64(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn is_zero_value(self) -> bool {
        self.re == 0.0 && self.im == 0.0
    }
    fn powi(self, n: i32) -> Self {
        Complex64::powi(&self, n)
    }
    fn func(f: Func, x: Self) -> Result<Self, ExprError> {
        Ok(match f {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Tan => x.tan(),
            Func::Tanh => x.tanh(),
            Func::Exp => x.exp(),
            Func::Ln => {
                if x.is_zero_value() {
                    return Err(ExprError::DomainError("logarithm of zero"));
                }
                x.ln()
            }
            Func::Sqrt => x.sqrt(),
        })
    }
}

/// Values for `t`, jet variables and parameters.
#[derive(Clone, Debug, Default)]
pub struct Binding<S> {
    pub t: S,
    pub values: HashMap<JetVar, S>,
    pub params: HashMap<usize, S>,
}

impl<S: EvalScalar> Binding<S> {
    pub fn new(t: S) -> Self {
        Binding { t, values: HashMap::new(), params: HashMap::new() }
    }

    pub fn with(mut self, v: JetVar, x: S) -> Self {
        self.values.insert(v, x);
        self
    }

    pub fn set(&mut self, v: JetVar, x: S) {
        self.values.insert(v, x);
    }

    pub fn set_param(&mut self, p: usize, x: S) {
        self.params.insert(p, x);
    }
}

fn eval_rec<S: EvalScalar>(
    e: &Expr,
    b: &Binding<S>,
    memo: &mut HashMap<*const Inner, S>,
) -> Result<S, ExprError> {
    let key = Arc::as_ptr(&e.0);
    if let Some(v) = memo.get(&key) {
        return Ok(*v);
    }
    let v = match &e.0.node {
        Node::Const(c) => S::from_f64(*c),
        Node::Time => b.t,
        Node::Var(v) => *b.values.get(v).ok_or(ExprError::UnboundVariable(*v))?,
        Node::Param(p) => *b.params.get(p).ok_or(ExprError::UnboundParam(*p))?,
        Node::Neg(a) => -eval_rec(a, b, memo)?,
        Node::Add(x, y) => eval_rec(x, b, memo)? + eval_rec(y, b, memo)?,
        Node::Sub(x, y) => eval_rec(x, b, memo)? - eval_rec(y, b, memo)?,
        Node::Mul(x, y) => eval_rec(x, b, memo)? * eval_rec(y, b, memo)?,
        Node::Div(x, y) => eval_rec(x, b, memo)?.checked_div(eval_rec(y, b, memo)?)?,
        Node::Pow(a, n) => {
            let base = eval_rec(a, b, memo)?;
            if *n < 0 && base.is_zero_value() {
                return Err(ExprError::DomainError("division by zero"));
            }
            base.powi(*n)
        }
        Node::Func(f, a) => S::func(*f, eval_rec(a, b, memo)?)?,
    };
    memo.insert(key, v);
    Ok(v)
}

/// Convenience wrapper for [`Expr::eval`].
pub fn evaluate<S: EvalScalar>(e: &Expr, b: &Binding<S>) -> Result<S, ExprError> {
    e.eval(b)
}

/// Convenience wrapper for [`Expr::partial`].
pub fn partial(e: &Expr, v: JetVar) -> Expr {
    e.partial(v)
}

/// Convenience wrapper for [`Expr::total_derivative`].
pub fn total_derivative(e: &Expr) -> Result<Expr, ExprError> {
    e.total_derivative()
}

/// Convenience wrapper for [`Expr::leading_order`].
pub fn leading_order(e: &Expr, j: usize) -> Option<u32> {
    e.leading_order(j)
}

/// Names used when printing expressions.
#[derive(Clone, Debug, Default)]
pub struct Names {
    pub vars: Vec<String>,
    pub params: Vec<String>,
    pub indep: String,
}

impl Names {
    fn var(&self, j: usize) -> String {
        self.vars.get(j).cloned().unwrap_or_else(|| format!("x{}", j + 1))
    }
    fn param(&self, p: usize) -> String {
        self.params.get(p).cloned().unwrap_or_else(|| format!("p{}", p + 1))
    }
    fn indep(&self) -> &str {
        if self.indep.is_empty() {
            "t"
        } else {
            &self.indep
        }
    }
}

pub struct Display<'a> {
    e: &'a Expr,
    names: &'a Names,
}

impl fmt::Display for Display<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self.e, self.names, 0)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self, &Names::default(), 0)
    }
}

fn prec(e: &Expr) -> u8 {
    match e.node() {
        Node::Add(..) | Node::Sub(..) => 1,
        Node::Mul(..) | Node::Div(..) => 2,
        Node::Neg(_) => 3,
        Node::Pow(..) => 4,
        Node::Const(c) if *c < 0.0 => 3,
        _ => 5,
    }
}

fn write_expr(f: &mut fmt::Formatter<'_>, e: &Expr, n: &Names, ctx: u8) -> fmt::Result {
    let p = prec(e);
    let paren = p < ctx;
    if paren {
        f.write_str("(")?;
    }
    match e.node() {
        Node::Const(c) => write!(f, "{:?}", c)?,
        Node::Time => f.write_str(n.indep())?,
        Node::Var(v) => {
            let name = n.var(v.var);
            if v.order <= 2 {
                write!(f, "{}{}", name, "'".repeat(v.order as usize))?;
            } else {
                write!(f, "diff({},{},{})", name, n.indep(), v.order)?;
            }
        }
        Node::Param(id) => f.write_str(&n.param(*id))?,
        Node::Neg(a) => {
            f.write_str("-")?;
            write_expr(f, a, n, 4)?;
        }
        Node::Add(a, b) => {
            write_expr(f, a, n, 1)?;
            f.write_str(" + ")?;
            write_expr(f, b, n, 2)?;
        }
        Node::Sub(a, b) => {
            write_expr(f, a, n, 1)?;
            f.write_str(" - ")?;
            write_expr(f, b, n, 2)?;
        }
        Node::Mul(a, b) => {
            write_expr(f, a, n, 2)?;
            f.write_str("*")?;
            write_expr(f, b, n, 3)?;
        }
        Node::Div(a, b) => {
            write_expr(f, a, n, 2)?;
            f.write_str("/")?;
            write_expr(f, b, n, 3)?;
        }
        Node::Pow(a, k) => {
            write_expr(f, a, n, 5)?;
            if *k < 0 {
                write!(f, "^({})", k)?;
            } else {
                write!(f, "^{}", k)?;
            }
        }
        Node::Func(g, a) => {
            write!(f, "{}(", g.name())?;
            write_expr(f, a, n, 0)?;
            f.write_str(")")?;
        }
    }
    if paren {
        f.write_str(")")?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum Op {
    Const(f64),
    Time,
    Slot(usize),
    Param(usize),
    Neg(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Pow(usize, i32),
    Func(Func, usize),
}

/// A list of expressions flattened into a straight-line program with common
/// subexpressions shared. Jet variables are read from a dense slot vector,
/// which is much faster than hashing in inner loops.
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<Op>,
    outputs: Vec<usize>,
}

impl Tape {
    /// `slot_of` maps every jet variable that may occur to its slot.
    pub fn compile(
        exprs: &[Expr],
        slot_of: &dyn Fn(JetVar) -> Option<usize>,
    ) -> Result<Tape, ExprError> {
        let mut ops = Vec::new();
        let mut index: HashMap<Expr, usize> = HashMap::new();
        let mut outputs = Vec::with_capacity(exprs.len());
        for e in exprs {
            outputs.push(emit(e, slot_of, &mut ops, &mut index)?);
        }
        Ok(Tape { ops, outputs })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Evaluates every output. `scratch` is reused between calls.
    pub fn eval_into<S: EvalScalar>(
        &self,
        t: S,
        slots: &[S],
        params: &[S],
        scratch: &mut Vec<S>,
        out: &mut [S],
    ) -> Result<(), ExprError> {
        scratch.clear();
        for op in &self.ops {
            let v = match *op {
                Op::Const(c) => S::from_f64(c),
                Op::Time => t,
                Op::Slot(i) => slots[i],
                Op::Param(p) => *params.get(p).ok_or(ExprError::UnboundParam(p))?,
                Op::Neg(a) => -scratch[a],
                Op::Add(a, b) => scratch[a] + scratch[b],
                Op::Sub(a, b) => scratch[a] - scratch[b],
                Op::Mul(a, b) => scratch[a] * scratch[b],
                Op::Div(a, b) => scratch[a].checked_div(scratch[b])?,
                Op::Pow(a, n) => {
                    if n < 0 && scratch[a].is_zero_value() {
                        return Err(ExprError::DomainError("division by zero"));
                    }
                    scratch[a].powi(n)
                }
                Op::Func(f, a) => S::func(f, scratch[a])?,
            };
            scratch.push(v);
        }
        for (o, &i) in out.iter_mut().zip(&self.outputs) {
            *o = scratch[i];
        }
        Ok(())
    }

    pub fn eval<S: EvalScalar>(&self, t: S, slots: &[S], params: &[S]) -> Result<Vec<S>, ExprError> {
        let mut scratch = Vec::with_capacity(self.ops.len());
        let mut out = vec![S::from_f64(0.0); self.outputs.len()];
        self.eval_into(t, slots, params, &mut scratch, &mut out)?;
        Ok(out)
    }
}

fn emit(
    e: &Expr,
    slot_of: &dyn Fn(JetVar) -> Option<usize>,
    ops: &mut Vec<Op>,
    index: &mut HashMap<Expr, usize>,
) -> Result<usize, ExprError> {
    if let Some(&i) = index.get(e) {
        return Ok(i);
    }
    let op = match e.node() {
        Node::Const(c) => Op::Const(*c),
        Node::Time => Op::Time,
        Node::Var(v) => Op::Slot(slot_of(*v).ok_or(ExprError::UnboundVariable(*v))?),
        Node::Param(p) => Op::Param(*p),
        Node::Neg(a) => Op::Neg(emit(a, slot_of, ops, index)?),
        Node::Add(a, b) => Op::Add(emit(a, slot_of, ops, index)?, emit(b, slot_of, ops, index)?),
        Node::Sub(a, b) => Op::Sub(emit(a, slot_of, ops, index)?, emit(b, slot_of, ops, index)?),
        Node::Mul(a, b) => Op::Mul(emit(a, slot_of, ops, index)?, emit(b, slot_of, ops, index)?),
        Node::Div(a, b) => Op::Div(emit(a, slot_of, ops, index)?, emit(b, slot_of, ops, index)?),
        Node::Pow(a, n) => Op::Pow(emit(a, slot_of, ops, index)?, *n),
        Node::Func(f, a) => Op::Func(*f, emit(a, slot_of, ops, index)?),
    };
    ops.push(op);
    let i = ops.len() - 1;
    index.insert(e.clone(), i);
    Ok(i)
}
