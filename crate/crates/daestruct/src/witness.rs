//! Real witness points of polynomial constraint sets.
//!
//! A point on every real component is found as a critical point of the
//! squared distance to a random anchor `a`:
//!
//! ```text
//!     f(x) = 0,    x - a + sum_k lambda_k grad f_k(x) = 0
//! ```
//!
//! The square system is solved with a total-degree homotopy and the gamma
//! trick. Real endpoints are refined on `f = 0` alone and deduplicated.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::expr::{Binding, Expr, ExprError, JetVar, Tape};
use crate::numlin::{gauss_newton, singular_values, NewtonOptions, NumlinError};

pub const IMAG_TOL: f64 = 1e-6;
pub const DEDUP_TOL: f64 = 1e-6;
pub const RESIDUAL_TOL: f64 = 1e-8;
pub const MAX_PATHS: u128 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WitnessError {
    #[error("constraint {0} is not polynomial in the unknowns; supply starting points instead")]
    NonPolynomialConstraint(usize),
    #[error("no constraints given")]
    NoConstraints,
    #[error("anchor has length {got}, expected {expected}")]
    AnchorMismatch { expected: usize, got: usize },
    #[error("Bezout number {0} exceeds the path budget")]
    TooManyPaths(u128),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// The Lagrange system for the distance from `anchor` to `{f = 0}`.
///
/// Internally unknown `i` is `JetVar(i, 0)` and multiplier `k` is
/// `JetVar(n + k, 0)`; `unknowns` maps slots back to the caller's jets.
#[derive(Clone, Debug)]
pub struct CriticalSystem {
    pub unknowns: Vec<JetVar>,
    pub constraints: Vec<Expr>,
    pub anchor: Vec<f64>,
    pub equations: Vec<Expr>,
    pub degrees: Vec<u32>,
    pub t0: f64,
}

impl CriticalSystem {
    pub fn n(&self) -> usize {
        self.unknowns.len()
    }

    pub fn m(&self) -> usize {
        self.constraints.len()
    }

    pub fn bezout_number(&self) -> u128 {
        self.degrees.iter().map(|&d| d as u128).product()
    }
}

/// Builds the critical system. Constraints are frozen at `t0`; any
/// parameters must already be bound.
pub fn build_critical_system(
    f: &[Expr],
    unknowns: &[JetVar],
    anchor: &[f64],
    t0: f64,
) -> Result<CriticalSystem, WitnessError> {
    let n = unknowns.len();
    if anchor.len() != n {
        return Err(WitnessError::AnchorMismatch { expected: n, got: anchor.len() });
    }
    let slot_map: HashMap<JetVar, Expr> =
        unknowns.iter().enumerate().map(|(i, v)| (*v, Expr::var(i, 0))).collect();
    let mut constraints = Vec::new();
    for (k, e) in f.iter().enumerate() {
        if !e.is_polynomial() || e.poly_degree().is_none() {
            return Err(WitnessError::NonPolynomialConstraint(k));
        }
        let g = e.at_time(t0).substitute(&slot_map);
        if let Some(v) = g.vars().iter().find(|v| v.order != 0 || v.var >= n) {
            return Err(ExprError::UnboundVariable(unknowns.get(v.var).copied().unwrap_or(*v)).into());
        }
        if g.has_params() {
            return Err(WitnessError::NonPolynomialConstraint(k));
        }
        if g.is_zero() {
            continue;
        }
        constraints.push(g);
    }
    if constraints.is_empty() {
        return Err(WitnessError::NoConstraints);
    }
    let m = constraints.len();
    let mut equations = constraints.clone();
    for i in 0..n {
        let xi = JetVar::new(i, 0);
        let mut e = Expr::var(i, 0) - anchor[i];
        for (k, g) in constraints.iter().enumerate() {
            let d = g.partial(xi);
            if !d.is_zero() {
                e = e + Expr::var(n + k, 0) * d;
            }
        }
        equations.push(e);
    }
    let degrees = equations
        .iter()
        .enumerate()
        .map(|(k, e)| e.poly_degree().ok_or(WitnessError::NonPolynomialConstraint(k.min(m - 1))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CriticalSystem { unknowns: unknowns.to_vec(), constraints, anchor: anchor.to_vec(), equations, degrees, t0 })
}

#[derive(Clone, Debug, PartialEq)]
pub enum PathStatus {
    Converged,
    /// Step size fell below the floor at this value of the homotopy parameter.
    StepFloor(f64),
    Diverged(f64),
    Singular(f64),
}

#[derive(Clone, Debug)]
pub struct PathResult {
    pub index: usize,
    pub status: PathStatus,
    pub endpoint: Vec<Complex64>,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrackerOptions {
    pub initial_step: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub corrector_tol: f64,
    pub corrector_iters: usize,
    pub grow_after: usize,
    pub divergence: f64,
}

impl Default for TrackerOptions {
    fn default() -> Self {
        TrackerOptions {
            initial_step: 0.05,
            min_step: 1e-7,
            max_step: 0.1,
            corrector_tol: 1e-10,
            corrector_iters: 3,
            grow_after: 5,
            divergence: 1e8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WitnessPoint {
    /// Values of the unknowns, in the order of [`WitnessSet::unknowns`].
    pub coords: Vec<f64>,
    pub residual: f64,
    /// Smallest singular value of the system Jacobian, filled in by the
    /// degeneration check.
    pub min_singular_value: Option<f64>,
    pub component_id: Option<String>,
    /// Start-root index of the path that produced the point.
    pub path_index: usize,
    /// The critical system was numerically singular at the endpoint.
    pub singular_endpoint: bool,
}

impl WitnessPoint {
    pub fn get(&self, unknowns: &[JetVar], v: JetVar) -> Option<f64> {
        unknowns.iter().position(|u| *u == v).map(|i| self.coords[i])
    }
}

#[derive(Clone, Debug, Default)]
pub struct WitnessSet {
    pub unknowns: Vec<JetVar>,
    pub points: Vec<WitnessPoint>,
    pub anchor: Vec<f64>,
    pub t0: f64,
    pub paths_tracked: usize,
    pub paths_failed: usize,
}

impl WitnessSet {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn binding(&self, p: &WitnessPoint) -> Binding<f64> {
        let mut b = Binding::new(self.t0);
        for (v, x) in self.unknowns.iter().zip(&p.coords) {
            b.set(*v, *x);
        }
        b
    }
}

struct Evaluator {
    f: Tape,
    jac: Tape,
    n: usize,
}

impl Evaluator {
    fn new(cs: &CriticalSystem) -> Result<Self, ExprError> {
        let n = cs.equations.len();
        let slot = |v: JetVar| if v.order == 0 && v.var < n { Some(v.var) } else { None };
        let f = Tape::compile(&cs.equations, &slot)?;
        let entries: Vec<Expr> = cs
            .equations
            .iter()
            .flat_map(|e| (0..n).map(move |j| e.partial(JetVar::new(j, 0))))
            .collect();
        let jac = Tape::compile(&entries, &slot)?;
        Ok(Evaluator { f, jac, n })
    }

    fn eval(&self, z: &[Complex64]) -> Result<(DVector<Complex64>, DMatrix<Complex64>), ExprError> {
        let zero = Complex64::new(0.0, 0.0);
        let fv = self.f.eval(zero, z, &[])?;
        let jv = self.jac.eval(zero, z, &[])?;
        Ok((DVector::from_vec(fv), DMatrix::from_row_slice(self.n, self.n, &jv)))
    }
}

struct Homotopy<'a> {
    ev: &'a Evaluator,
    degrees: &'a [u32],
    gamma: Complex64,
}

impl Homotopy<'_> {
    /// `H`, `dH/dz` and `dH/ds` at `(z, s)`.
    fn eval(
        &self,
        z: &[Complex64],
        s: f64,
    ) -> Result<(DVector<Complex64>, DMatrix<Complex64>, DVector<Complex64>), ExprError> {
        let (fv, fj) = self.ev.eval(z)?;
        let n = z.len();
        let one = Complex64::new(1.0, 0.0);
        let mut g = DVector::zeros(n);
        let mut gj = DMatrix::zeros(n, n);
        for k in 0..n {
            let d = self.degrees[k] as i32;
            g[k] = z[k].powi(d) - one;
            gj[(k, k)] = z[k].powi(d - 1) * d as f64;
        }
        let a = self.gamma * (1.0 - s);
        let h = &g * a + &fv * Complex64::new(s, 0.0);
        let hz = &gj * a + &fj * Complex64::new(s, 0.0);
        let hs = &fv - &g * self.gamma;
        Ok((h, hz, hs))
    }
}

fn cnorm(v: &[Complex64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.norm()))
}

fn solve_c(a: DMatrix<Complex64>, b: &DVector<Complex64>) -> Option<DVector<Complex64>> {
    let x = a.lu().solve(b)?;
    if x.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
        Some(x)
    } else {
        None
    }
}

fn track_one(h: &Homotopy, start: Vec<Complex64>, index: usize, opts: &TrackerOptions) -> PathResult {
    let mut z = start;
    let mut s = 0.0f64;
    let mut ds = opts.initial_step;
    let mut streak = 0;
    let mut steps = 0;
    let fail = |status, z: Vec<Complex64>, steps| PathResult { index, status, endpoint: z, steps };
    while s < 1.0 {
        steps += 1;
        let step = ds.min(1.0 - s);
        let s1 = if s + step >= 1.0 - 1e-15 { 1.0 } else { s + step };
        let predicted = match h.eval(&z, s) {
            Ok((_, hz, hs)) => match solve_c(hz, &(-hs)) {
                Some(dz) => z.iter().zip(dz.iter()).map(|(a, b)| a + b * (s1 - s)).collect::<Vec<_>>(),
                None => return fail(PathStatus::Singular(s), z, steps),
            },
            Err(_) => return fail(PathStatus::Singular(s), z, steps),
        };
        let mut w = predicted;
        let mut ok = false;
        for _ in 0..opts.corrector_iters {
            let Ok((hv, hz, _)) = h.eval(&w, s1) else { break };
            let Some(dw) = solve_c(hz, &(-hv)) else { break };
            for (a, b) in w.iter_mut().zip(dw.iter()) {
                *a += b;
            }
            if cnorm(dw.as_slice()) <= opts.corrector_tol * (1.0 + cnorm(&w)) {
                ok = true;
                break;
            }
        }
        if ok {
            s = s1;
            z = w;
            streak += 1;
            if streak >= opts.grow_after {
                ds = (ds * 2.0).min(opts.max_step);
                streak = 0;
            }
            if cnorm(&z) > opts.divergence {
                return fail(PathStatus::Diverged(s), z, steps);
            }
        } else {
            ds *= 0.5;
            streak = 0;
            if ds < opts.min_step {
                return fail(PathStatus::StepFloor(s), z, steps);
            }
        }
    }
    PathResult { index, status: PathStatus::Converged, endpoint: z, steps }
}

fn start_root(index: usize, degrees: &[u32]) -> Vec<Complex64> {
    let mut rest = index;
    degrees
        .iter()
        .map(|&d| {
            let k = rest % d as usize;
            rest /= d as usize;
            Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / d as f64)
        })
        .collect()
}

/// Tracks every path of the total-degree homotopy. Paths run in parallel;
/// results come back ordered by start-root index.
pub fn track_all(cs: &CriticalSystem, seed: u64, opts: &TrackerOptions) -> Result<Vec<PathResult>, WitnessError> {
    let total = cs.bezout_number();
    if total > MAX_PATHS {
        return Err(WitnessError::TooManyPaths(total));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let gamma = Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU));
    let ev = Evaluator::new(cs)?;
    let h = Homotopy { ev: &ev, degrees: &cs.degrees, gamma };
    Ok((0..total as usize)
        .into_par_iter()
        .map(|i| track_one(&h, start_root(i, &cs.degrees), i, opts))
        .collect())
}

fn refine_real(cs: &CriticalSystem, x0: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = cs.n();
    let slot = |v: JetVar| if v.order == 0 && v.var < n { Some(v.var) } else { None };
    let f = Tape::compile(&cs.constraints, &slot).ok()?;
    let entries: Vec<Expr> = cs
        .constraints
        .iter()
        .flat_map(|e| (0..n).map(move |j| e.partial(JetVar::new(j, 0))))
        .collect();
    let jt = Tape::compile(&entries, &slot).ok()?;
    let m = cs.m();
    let fun = |x: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>), NumlinError> {
        let r = f.eval(0.0, x.as_slice(), &[]).map_err(|e| NumlinError::Eval(e.to_string()))?;
        let j = jt.eval(0.0, x.as_slice(), &[]).map_err(|e| NumlinError::Eval(e.to_string()))?;
        Ok((DVector::from_vec(r), DMatrix::from_row_slice(m, n, &j)))
    };
    let opts = NewtonOptions { abstol: 1e-13, reltol: 1e-14, max_iter: 30, pinv_fallback: true, pinv_tol: 1e-10 };
    let x = match gauss_newton(fun, DVector::from_column_slice(x0), &opts) {
        Ok(rep) => rep.x,
        Err(NumlinError::NoConvergence { .. }) => DVector::from_column_slice(x0),
        Err(_) => return None,
    };
    let r = f.eval(0.0, x.as_slice(), &[]).ok()?;
    let res = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Some((x.iter().copied().collect(), res))
}

fn endpoint_is_singular(cs: &CriticalSystem, z: &[Complex64]) -> bool {
    let Ok(ev) = Evaluator::new(cs) else { return true };
    let Ok((_, j)) = ev.eval(z) else { return true };
    let re = j.map(|c| c.re);
    match singular_values(&re) {
        Ok(s) => s.is_empty() || s.last().copied().unwrap_or(0.0) <= 1e-8 * s[0].max(1.0),
        Err(_) => true,
    }
}

/// Runs the homotopy and post-processes endpoints into a witness set.
pub fn track_paths(cs: &CriticalSystem, seed: u64) -> Result<WitnessSet, WitnessError> {
    track_paths_with(cs, seed, &TrackerOptions::default())
}

pub fn track_paths_with(cs: &CriticalSystem, seed: u64, opts: &TrackerOptions) -> Result<WitnessSet, WitnessError> {
    let results = track_all(cs, seed, opts)?;
    let n = cs.n();
    let mut points: Vec<WitnessPoint> = Vec::new();
    let mut failed = 0;
    for pr in &results {
        if pr.status != PathStatus::Converged {
            failed += 1;
            continue;
        }
        if pr.endpoint[..n].iter().any(|c| c.im.abs() > IMAG_TOL) {
            continue;
        }
        let x0: Vec<f64> = pr.endpoint[..n].iter().map(|c| c.re).collect();
        let Some((x, res)) = refine_real(cs, &x0) else { continue };
        if res > RESIDUAL_TOL {
            continue;
        }
        if points.iter().any(|p| p.coords.iter().zip(&x).all(|(a, b)| (a - b).abs() <= DEDUP_TOL)) {
            continue;
        }
        points.push(WitnessPoint {
            coords: x,
            residual: res,
            min_singular_value: None,
            component_id: None,
            path_index: pr.index,
            singular_endpoint: endpoint_is_singular(cs, &pr.endpoint),
        });
    }
    Ok(WitnessSet {
        unknowns: cs.unknowns.clone(),
        points,
        anchor: cs.anchor.clone(),
        t0: cs.t0,
        paths_tracked: results.len(),
        paths_failed: failed,
    })
}

/// Anchor drawn uniformly from `[-1, 1]^n`.
pub fn random_anchor(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// Witness points of `f` in the given unknowns with an anchor drawn from the seed.
pub fn witness_points(f: &[Expr], unknowns: &[JetVar], t0: f64, seed: u64) -> Result<WitnessSet, WitnessError> {
    let anchor = random_anchor(unknowns.len(), seed);
    let cs = build_critical_system(f, unknowns, &anchor, t0)?;
    track_paths(&cs, seed)
}

/// Tags each point with the sign pattern of the factor polynomials:
/// `0` where a factor vanishes, otherwise `+` or `-`.
pub fn classify_components(mut ws: WitnessSet, factors: &[Expr]) -> WitnessSet {
    if factors.is_empty() {
        return ws;
    }
    for i in 0..ws.points.len() {
        let b = ws.binding(&ws.points[i]);
        let tag: String = factors
            .iter()
            .map(|f| match f.eval(&b) {
                Ok(v) if v.abs() <= DEDUP_TOL => '0',
                Ok(v) if v > 0.0 => '+',
                Ok(_) => '-',
                Err(_) => '?',
            })
            .collect();
        ws.points[i].component_id = Some(tag);
    }
    ws
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(j: usize) -> Expr {
        Expr::var(j, 0)
    }
    fn jets(n: usize) -> Vec<JetVar> {
        (0..n).map(|j| JetVar::new(j, 0)).collect()
    }

    fn circle() -> Vec<Expr> {
        vec![v(0).powi(2) + v(1).powi(2) - 1.0]
    }

    #[test]
    fn critical_system_for_circle() {
        let cs = build_critical_system(&circle(), &jets(2), &[2.0, 0.0], 0.0).unwrap();
        assert_eq!(cs.equations.len(), 3);
        assert_eq!(cs.degrees, vec![2, 2, 2]);
        // x - 2 + 2 lambda x at (1, 0, lambda = 1/2)
        let b = Binding::new(0.0f64).with(JetVar::new(0, 0), 1.0).with(JetVar::new(1, 0), 0.0).with(JetVar::new(2, 0), 0.5);
        for e in &cs.equations {
            assert!(e.eval(&b).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(build_critical_system(&[], &jets(2), &[0.0, 0.0], 0.0).unwrap_err(), WitnessError::NoConstraints);
        let f = vec![v(0).tanh()];
        assert_eq!(
            build_critical_system(&f, &jets(1), &[0.0], 0.0).unwrap_err(),
            WitnessError::NonPolynomialConstraint(0)
        );
        // forcing terms in t are fine
        let f = vec![v(0) - Expr::time().sin()];
        assert!(build_critical_system(&f, &jets(1), &[0.0], 1.0).is_ok());
    }

    #[test]
    fn circle_witness_points() {
        let cs = build_critical_system(&circle(), &jets(2), &[2.0, 0.0], 0.0).unwrap();
        let ws = track_paths(&cs, 1).unwrap();
        assert_eq!(ws.paths_tracked, 8);
        assert_eq!(ws.len(), 2);
        let mut xs: Vec<Vec<f64>> = ws.points.iter().map(|p| p.coords.clone()).collect();
        xs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert!((xs[0][0] + 1.0).abs() < 1e-10 && xs[0][1].abs() < 1e-10);
        assert!((xs[1][0] - 1.0).abs() < 1e-10 && xs[1][1].abs() < 1e-10);
    }

    #[test]
    fn no_real_points() {
        let f = vec![v(0).powi(2) + 1.0];
        let cs = build_critical_system(&f, &jets(1), &[0.3], 0.0).unwrap();
        assert!(track_paths(&cs, 3).unwrap().is_empty());
    }

    #[test]
    fn parabola_points_satisfy_constraint() {
        let f = vec![v(1) - v(0).powi(2)];
        let ws = witness_points(&f, &jets(2), 0.0, 42).unwrap();
        assert!(!ws.is_empty());
        assert_eq!(ws.paths_tracked, 4);
        for p in &ws.points {
            assert!((p.coords[1] - p.coords[0].powi(2)).abs() <= 1e-8);
        }
    }

    #[test]
    fn circle_components_by_sign() {
        let cs = build_critical_system(&circle(), &jets(2), &[2.0, 0.0], 0.0).unwrap();
        let ws = classify_components(track_paths(&cs, 1).unwrap(), &[v(0)]);
        let mut tags: Vec<String> = ws.points.iter().map(|p| p.component_id.clone().unwrap()).collect();
        tags.sort();
        assert_eq!(tags, vec!["+", "-"]);
        let single = WitnessSet { points: vec![ws.points[0].clone()], ..ws.clone() };
        let mut unl = single.clone();
        unl.points[0].component_id = None;
        assert_eq!(classify_components(unl, &[]).points[0].component_id, None);
    }

    #[test]
    fn deterministic_under_seed() {
        let f = vec![v(1) - v(0).powi(2)];
        let a = witness_points(&f, &jets(2), 0.0, 7).unwrap();
        let b = witness_points(&f, &jets(2), 0.0, 7).unwrap();
        assert_eq!(a.points, b.points);
    }
}
