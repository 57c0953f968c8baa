//! Prolonged system `F^(c)`, its blocks and block Jacobians.
//!
//! Block `B_p` holds `F_j^(p + c_j - k_c)` for every equation whose exponent is
//! nonnegative, and block Jacobian `J_p` differentiates `B_p` with respect to
//! `X^(p + k_d - k_c)`, the variables `x_j^(q + d_j - k_d)`. Columns are always
//! ordered by variable index. `J_{k_c}` is the square system Jacobian; every
//! other `J_p` is a submatrix of it.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::dae::DaeSystem;
use crate::expr::{Binding, EvalScalar, Expr, ExprError, JetVar, Tape};
use crate::numlin::{gauss_newton, levenberg_marquardt, newton_solve, pinv_solve, NewtonOptions, NewtonReport, NumlinError};
use crate::structure::OffsetPair;
use crate::Real;

/// One member of the prolonged system: `D^order F_eq`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EqRef {
    pub eq: usize,
    pub order: u32,
}

#[derive(Clone, Debug)]
pub struct ProlongedSystem {
    pub n: usize,
    pub offsets: OffsetPair,
    /// `derivs[i][r]` is `D^r F_i` for `r = 0..=c_i`.
    pub derivs: Vec<Vec<Expr>>,
    pub blocks: Vec<Vec<EqRef>>,
    pub var_partition: Vec<Vec<JetVar>>,
    pub k_c: u32,
    pub k_d: u32,
}

impl ProlongedSystem {
    pub fn equation(&self, r: EqRef) -> &Expr {
        &self.derivs[r.eq][r.order as usize]
    }

    pub fn block_exprs(&self, p: usize) -> Vec<Expr> {
        self.blocks[p].iter().map(|r| self.equation(*r).clone()).collect()
    }

    /// `B_{k_c}`, ordered by equation index.
    pub fn top_block(&self) -> Vec<Expr> {
        self.block_exprs(self.k_c as usize)
    }

    /// `X^(k_d)`: the leading derivative `x_j^(d_j)` of every variable.
    pub fn top_vars(&self) -> Vec<JetVar> {
        self.var_partition[self.k_d as usize].clone()
    }

    /// Members of `B_0 .. B_{k_c - 1}`.
    pub fn constraint_refs(&self) -> Vec<EqRef> {
        self.blocks[..self.k_c as usize].iter().flatten().copied().collect()
    }

    /// The algebraic constraints `F^(c-1)`.
    pub fn constraints(&self) -> Vec<Expr> {
        self.constraint_refs().iter().map(|r| self.equation(*r).clone()).collect()
    }

    /// Jets below the leading order, `x_j^(k)` with `k < d_j`, sorted.
    pub fn state_vars(&self) -> Vec<JetVar> {
        let mut out = Vec::new();
        for (j, &d) in self.offsets.d.iter().enumerate() {
            for k in 0..d {
                out.push(JetVar::new(j, k));
            }
        }
        out
    }

    pub fn n_equations(&self) -> usize {
        self.derivs.iter().map(|d| d.len()).sum()
    }

    /// Number of distinct jets `x_j^(k)`, `k <= d_j`.
    pub fn n_variables(&self) -> usize {
        self.offsets.d.iter().map(|&d| d as usize + 1).sum()
    }

    /// Blocks as lists of sizes, for reports.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len()).collect()
    }
}

/// Builds `F^(c)` for equations over `n` variables with the given offsets.
pub fn prolong_equations(eqs: &[Expr], off: &OffsetPair) -> Result<ProlongedSystem, ExprError> {
    let n = eqs.len();
    let k_c = off.k_c();
    let k_d = off.k_d();
    let mut derivs = Vec::with_capacity(n);
    for (i, e) in eqs.iter().enumerate() {
        let mut chain = vec![e.clone()];
        for _ in 0..off.c[i] {
            let next = chain.last().unwrap().total_derivative()?;
            chain.push(next);
        }
        derivs.push(chain);
    }
    let blocks = (0..=k_c)
        .map(|p| {
            (0..n)
                .filter(|&j| p + off.c[j] >= k_c)
                .map(|j| EqRef { eq: j, order: p + off.c[j] - k_c })
                .collect()
        })
        .collect();
    let var_partition = (0..=k_d)
        .map(|q| {
            (0..off.d.len())
                .filter(|&j| q + off.d[j] >= k_d)
                .map(|j| JetVar::new(j, q + off.d[j] - k_d))
                .collect()
        })
        .collect();
    Ok(ProlongedSystem { n, offsets: off.clone(), derivs, blocks, var_partition, k_c, k_d })
}

pub fn prolong(sys: &DaeSystem, off: &OffsetPair) -> Result<ProlongedSystem, ExprError> {
    prolong_equations(&sys.equations, off)
}

#[derive(Clone, Debug)]
pub struct BlockJacobian {
    pub block: usize,
    pub rows: Vec<EqRef>,
    pub cols: Vec<JetVar>,
    /// Row-major partial derivatives.
    pub entries: Vec<Vec<Expr>>,
}

impl BlockJacobian {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }
}

/// Symbolic `J_i = dB_i / dX^(i + k_d - k_c)`.
pub fn block_jacobian(ps: &ProlongedSystem, i: usize) -> BlockJacobian {
    assert!(i as u32 <= ps.k_c, "block index out of range");
    let q = i as u32 + ps.k_d - ps.k_c;
    let cols = ps.var_partition[q as usize].clone();
    let rows = ps.blocks[i].clone();
    let entries = rows
        .iter()
        .map(|r| {
            let e = ps.equation(*r);
            cols.iter().map(|v| e.partial(*v)).collect()
        })
        .collect();
    BlockJacobian { block: i, rows, cols, entries }
}

/// Jacobian of arbitrary expressions with respect to the given columns.
pub fn jacobian_of(eqs: &[Expr], cols: &[JetVar]) -> Vec<Vec<Expr>> {
    eqs.iter().map(|e| cols.iter().map(|v| e.partial(*v)).collect()).collect()
}

pub fn evaluate_jacobian<T: Real + EvalScalar>(bj: &BlockJacobian, b: &Binding<T>) -> Result<DMatrix<T>, ExprError> {
    evaluate_matrix(&bj.entries, b)
}

pub fn evaluate_matrix<T: Real + EvalScalar>(entries: &[Vec<Expr>], b: &Binding<T>) -> Result<DMatrix<T>, ExprError> {
    let rows = entries.len();
    let cols = entries.first().map_or(0, |r| r.len());
    let mut m = DMatrix::zeros(rows, cols);
    for (i, row) in entries.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            m[(i, j)] = e.eval(b)?;
        }
    }
    Ok(m)
}

/// Residuals and Jacobian of an equation list compiled against a fixed jet
/// layout. Every jet in the equations must have a slot; the Jacobian is
/// taken with respect to the `unknowns` subset.
#[derive(Clone, Debug)]
pub struct CompiledSystem {
    pub slots: Vec<JetVar>,
    /// Slot index of each unknown, in column order.
    pub unknowns: Vec<usize>,
    residual: Tape,
    jacobian: Tape,
    n_eqs: usize,
}

impl CompiledSystem {
    pub fn new(eqs: &[Expr], slots: &[JetVar], unknowns: &[JetVar]) -> Result<Self, ExprError> {
        let index: HashMap<JetVar, usize> = slots.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let slot_of = |v: JetVar| index.get(&v).copied();
        let cols = unknowns
            .iter()
            .map(|v| slot_of(*v).ok_or(ExprError::UnboundVariable(*v)))
            .collect::<Result<Vec<_>, _>>()?;
        let residual = Tape::compile(eqs, &slot_of)?;
        let entries: Vec<Expr> = eqs.iter().flat_map(|e| unknowns.iter().map(move |v| e.partial(*v))).collect();
        let jacobian = Tape::compile(&entries, &slot_of)?;
        Ok(CompiledSystem { slots: slots.to_vec(), unknowns: cols, residual, jacobian, n_eqs: eqs.len() })
    }

    pub fn n_eqs(&self) -> usize {
        self.n_eqs
    }

    pub fn residual(&self, t: f64, values: &[f64], params: &[f64]) -> Result<DVector<f64>, ExprError> {
        Ok(DVector::from_vec(self.residual.eval(t, values, params)?))
    }

    pub fn jacobian(&self, t: f64, values: &[f64], params: &[f64]) -> Result<DMatrix<f64>, ExprError> {
        let e = self.jacobian.eval(t, values, params)?;
        Ok(DMatrix::from_row_slice(self.n_eqs, self.unknowns.len(), &e))
    }

    /// Solves for the unknowns in place, keeping the other slots fixed.
    /// With `least_change` every step is a truncated-SVD minimum-norm step,
    /// otherwise LU Newton on a square system.
    pub fn solve(
        &self,
        t: f64,
        values: &mut [f64],
        params: &[f64],
        least_change: bool,
        opts: &NewtonOptions,
    ) -> Result<NewtonReport<f64>, NumlinError> {
        self.solve_weighted(t, values, params, least_change, opts, None, Driver::Newton)
    }

    /// Like [`solve`](Self::solve), but each equation is divided by the
    /// largest entry of its Jacobian row at the start point (when above
    /// one), so tolerances act at the scale of the row. If damped Newton
    /// stalls, restarts with Levenberg-Marquardt and polishes the result.
    pub fn solve_scaled(
        &self,
        t: f64,
        values: &mut [f64],
        params: &[f64],
        least_change: bool,
        opts: &NewtonOptions,
    ) -> Result<NewtonReport<f64>, NumlinError> {
        let j = self.jacobian(t, values, params).map_err(|e| NumlinError::Eval(e.to_string()))?;
        let w = DVector::from_iterator(j.nrows(), j.row_iter().map(|r| 1.0 / r.amax().max(1.0)));
        let start = values.to_vec();
        match self.solve_weighted(t, values, params, least_change, opts, Some(w.clone()), Driver::Newton) {
            Err(NumlinError::NoConvergence { .. }) => {
                values.copy_from_slice(&start);
                let loose = NewtonOptions { max_iter: opts.max_iter * 5, ..opts.clone() };
                self.solve_weighted(t, values, params, least_change, &loose, Some(w.clone()), Driver::Marquardt)?;
                self.solve_weighted(t, values, params, least_change, opts, Some(w), Driver::Newton)
            }
            other => other,
        }
    }

    fn solve_weighted(
        &self,
        t: f64,
        values: &mut [f64],
        params: &[f64],
        least_change: bool,
        opts: &NewtonOptions,
        weights: Option<DVector<f64>>,
        driver: Driver,
    ) -> Result<NewtonReport<f64>, NumlinError> {
        if self.n_eqs == 0 {
            return Ok(NewtonReport {
                x: DVector::zeros(0),
                iterations: 0,
                residual: 0.0,
                used_pinv: false,
                history: vec![],
            });
        }
        let x0 = DVector::from_iterator(self.unknowns.len(), self.unknowns.iter().map(|&i| values[i]));
        let mut work = values.to_vec();
        let f = |x: &DVector<f64>| {
            for (k, &i) in self.unknowns.iter().enumerate() {
                work[i] = x[k];
            }
            let mut r = self.residual(t, &work, params).map_err(|e| NumlinError::Eval(e.to_string()))?;
            let mut j = self.jacobian(t, &work, params).map_err(|e| NumlinError::Eval(e.to_string()))?;
            if let Some(w) = &weights {
                for (i, wi) in w.iter().enumerate() {
                    r[i] *= wi;
                    j.row_mut(i).scale_mut(*wi);
                }
            }
            Ok((r, j))
        };
        let rep = match driver {
            Driver::Marquardt => levenberg_marquardt(f, x0, opts)?,
            Driver::Newton if least_change => gauss_newton(f, x0, opts)?,
            Driver::Newton => newton_solve(f, x0, opts)?,
        };
        for (k, &i) in self.unknowns.iter().enumerate() {
            values[i] = rep.x[k];
        }
        Ok(rep)
    }

    /// Best-effort least-squares fit: plain truncated-SVD steps with no line
    /// search, for systems that may be inconsistent. Returns the final
    /// residual norm.
    pub fn least_squares(&self, t: f64, values: &mut [f64], params: &[f64], max_iter: usize) -> Result<f64, NumlinError> {
        self.least_squares_tol(t, values, params, max_iter, 1e-10)
    }

    /// Like [`least_squares`](Self::least_squares) with a relative singular
    /// value cutoff.
    pub fn least_squares_tol(
        &self,
        t: f64,
        values: &mut [f64],
        params: &[f64],
        max_iter: usize,
        tol: f64,
    ) -> Result<f64, NumlinError> {
        let eval = |v: &[f64]| -> Result<(DVector<f64>, DMatrix<f64>), NumlinError> {
            let r = self.residual(t, v, params).map_err(|e| NumlinError::Eval(e.to_string()))?;
            let j = self.jacobian(t, v, params).map_err(|e| NumlinError::Eval(e.to_string()))?;
            Ok((r, j))
        };
        let mut best = f64::INFINITY;
        for _ in 0..max_iter {
            let (r, j) = eval(values)?;
            best = r.norm();
            if r.is_empty() || best == 0.0 {
                break;
            }
            let dx = pinv_solve(&j, &r, tol)?;
            let scale = 1.0 + self.unknowns.iter().fold(0.0f64, |m, &i| m.max(values[i].abs()));
            for (k, &i) in self.unknowns.iter().enumerate() {
                values[i] += dx[k];
            }
            if dx.amax() <= 1e-14 * scale {
                best = self.residual(t, values, params).map_err(|e| NumlinError::Eval(e.to_string()))?.norm();
                break;
            }
        }
        Ok(best)
    }
}

#[derive(Clone, Copy)]
enum Driver {
    Newton,
    Marquardt,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numlin::svd_rank;
    use crate::structure::{signature_of, solve_offsets};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn x(k: u32) -> Expr {
        Expr::var(0, k)
    }
    fn y(k: u32) -> Expr {
        Expr::var(1, k)
    }

    fn example4() -> Vec<Expr> {
        vec![
            2.0 * y(0) * x(1) - x(0) * y(1) - x(0) + Expr::time().sin() + 2.0,
            y(0) - x(0).powi(2),
        ]
    }

    fn beam() -> Vec<Expr> {
        vec![
            x(2) + y(2) + 0.2 * (1.0 - Expr::time().sin()) + x(0),
            x(0).powi(2) - y(0).powi(2),
        ]
    }

    fn analyze(eqs: &[Expr]) -> ProlongedSystem {
        let off = solve_offsets(&signature_of(eqs, eqs.len()).unwrap()).unwrap();
        prolong_equations(eqs, &off).unwrap()
    }

    fn random_binding(rng: &mut ChaCha8Rng, n: usize, max_order: u32) -> Binding<f64> {
        let mut b = Binding::new(rng.gen_range(-1.0..1.0));
        for j in 0..n {
            for k in 0..=max_order {
                b.set(JetVar::new(j, k), rng.gen_range(-2.0..2.0));
            }
        }
        b
    }

    #[test]
    fn example4_blocks() {
        let ps = analyze(&example4());
        assert_eq!(ps.block_sizes(), vec![1, 2]);
        assert_eq!(ps.block_exprs(0), vec![y(0) - x(0).powi(2)]);
        let top = ps.top_block();
        assert_eq!(top[0], example4()[0]);
        // D(y - x^2) = y' - 2 x x'
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let b = random_binding(&mut rng, 2, 1);
            let v = |j, k| b.values[&JetVar::new(j, k)];
            let expect = v(1, 1) - 2.0 * v(0, 0) * v(0, 1);
            assert!((top[1].eval(&b).unwrap() - expect).abs() < 1e-14);
        }
        assert_eq!(ps.n_equations(), 2 + 1);
        assert_eq!(ps.n_variables(), 2 + 2);
    }

    #[test]
    fn example4_top_jacobian() {
        let ps = analyze(&example4());
        let j1 = block_jacobian(&ps, 1);
        assert_eq!(j1.cols, vec![JetVar::new(0, 1), JetVar::new(1, 1)]);
        assert_eq!(j1.entries[0][0], 2.0 * y(0));
        assert_eq!(j1.entries[0][1], -x(0));
        let b = Binding::new(0.0f64).with(JetVar::new(0, 0), 2.0).with(JetVar::new(1, 0), 4.0);
        let m = evaluate_jacobian(&j1, &b).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[8.0, -2.0, -4.0, 1.0]));
        assert!(m.determinant().abs() < 1e-14);
    }

    #[test]
    fn example4_bottom_jacobian_is_a_row_of_the_top() {
        let ps = analyze(&example4());
        let j0 = block_jacobian(&ps, 0);
        assert_eq!(j0.cols, vec![JetVar::new(0, 0), JetVar::new(1, 0)]);
        assert_eq!(j0.shape(), (1, 2));
        let b = Binding::new(0.0f64).with(JetVar::new(0, 0), 2.0).with(JetVar::new(1, 0), 4.0);
        let m0 = evaluate_jacobian(&j0, &b).unwrap();
        assert_eq!(m0, DMatrix::from_row_slice(1, 2, &[-4.0, 1.0]));
    }

    #[test]
    fn beam_blocks_and_determinant() {
        let ps = analyze(&beam());
        assert_eq!(ps.offsets.c, vec![0, 2]);
        assert_eq!(ps.block_sizes(), vec![1, 1, 2]);
        assert_eq!(ps.constraints().len(), 2);
        let j = block_jacobian(&ps, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let b = random_binding(&mut rng, 2, 2);
            let det = evaluate_jacobian(&j, &b).unwrap().determinant();
            let (y1, y2) = (b.values[&JetVar::new(0, 0)], b.values[&JetVar::new(1, 0)]);
            assert!((det + 2.0 * (y2 + y1)).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_degenerate_point_has_small_singular_value() {
        let ps = analyze(&beam());
        let j = block_jacobian(&ps, 2);
        // a point on the y1 = -y2 branch, rounded to 11 digits
        let b = Binding::new(0.0f64)
            .with(JetVar::new(0, 0), -0.19993949748)
            .with(JetVar::new(1, 0), 0.19993723792);
        let r = svd_rank(&evaluate_jacobian(&j, &b).unwrap(), 1e-8).unwrap();
        assert!(r.smallest() < 1e-5);
        // on the exact branch it vanishes
        let b = Binding::new(0.0f64).with(JetVar::new(0, 0), -0.2).with(JetVar::new(1, 0), 0.2);
        let r = svd_rank(&evaluate_jacobian(&j, &b).unwrap(), 1e-8).unwrap();
        assert!(r.smallest() < 1e-12);
        assert_eq!(r.rank, 1);
    }

    #[test]
    fn pure_ode_has_identity_jacobian() {
        let eqs = vec![x(1) - y(0), y(1) + x(0)];
        let ps = analyze(&eqs);
        assert_eq!(ps.k_c, 0);
        let j = block_jacobian(&ps, 0);
        let m = evaluate_jacobian(&j, &Binding::new(0.0f64)).unwrap();
        assert_eq!(m, DMatrix::<f64>::identity(2, 2));
        assert!(ps.constraints().is_empty());
    }

    #[test]
    fn lower_jacobians_are_submatrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for eqs in [example4(), beam()] {
            let ps = analyze(&eqs);
            let top = block_jacobian(&ps, ps.k_c as usize);
            for i in 0..ps.k_c as usize {
                let ji = block_jacobian(&ps, i);
                for _ in 0..20 {
                    let b = random_binding(&mut rng, 2, ps.k_d + 1);
                    let mi = evaluate_jacobian(&ji, &b).unwrap();
                    let mt = evaluate_jacobian(&top, &b).unwrap();
                    for (a, r) in ji.rows.iter().enumerate() {
                        for (bcol, v) in ji.cols.iter().enumerate() {
                            let tr = top.rows.iter().position(|t| t.eq == r.eq).unwrap();
                            let tc = top.cols.iter().position(|t| t.var == v.var).unwrap();
                            let (p, q): (f64, f64) = (mi[(a, bcol)], mt[(tr, tc)]);
                            assert!((p - q).abs() <= 1e-13 * (1.0 + q.abs()), "{} vs {}", p, q);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn blocks_nest_under_total_derivative() {
        for eqs in [example4(), beam()] {
            let ps = analyze(&eqs);
            for p in 1..=ps.k_c as usize {
                for r in &ps.blocks[p] {
                    if r.order > 0 {
                        let below = EqRef { eq: r.eq, order: r.order - 1 };
                        assert!(ps.blocks[p - 1].contains(&below));
                        assert_eq!(ps.equation(below).total_derivative().unwrap(), *ps.equation(*r));
                    }
                }
            }
        }
    }

    #[test]
    fn highest_derivative_matches_d() {
        for eqs in [example4(), beam()] {
            let ps = analyze(&eqs);
            for (j, &d) in ps.offsets.d.iter().enumerate() {
                let top = ps.derivs.iter().flatten().filter_map(|e| e.leading_order(j)).max().unwrap();
                assert_eq!(top, d);
            }
        }
    }
}
