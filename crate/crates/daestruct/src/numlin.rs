//! Dense kernels: SVD rank, rank-revealing Householder QR, damped Newton.

use nalgebra::{DMatrix, DVector};
use num_traits::Float;
use thiserror::Error;

use crate::Real;

/// Singular values at or below this are treated as an all-zero matrix.
pub const ABS_FLOOR: f64 = 1e-14;
/// Default relative rank tolerance.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumlinError {
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("singular Jacobian (pivot {0:e})")]
    SingularJacobian(f64),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("evaluation failed: {0}")]
    Eval(String),
}

fn c<T: Real>(x: f64) -> T {
    T::from_f64(x).unwrap()
}

fn fabs<T: Real>(x: T) -> T {
    Float::abs(x)
}

fn check_finite<T: Real>(m: &DMatrix<T>) -> Result<(), NumlinError> {
    if m.iter().all(|x| Float::is_finite(*x)) {
        Ok(())
    } else {
        Err(NumlinError::NonFinite)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankResult<T> {
    pub rank: usize,
    /// Descending.
    pub singular_values: Vec<T>,
    pub tol_used: T,
}

impl<T: Real> RankResult<T> {
    pub fn smallest(&self) -> T {
        self.singular_values.last().copied().unwrap_or_else(T::zero)
    }
}

/// Singular values in descending order.
pub fn singular_values<T: Real>(m: &DMatrix<T>) -> Result<Vec<T>, NumlinError> {
    check_finite(m)?;
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(vec![]);
    }
    let mut s: Vec<T> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(s)
}

/// Numerical rank: singular values above `tol * sigma_1`.
pub fn svd_rank<T: Real>(m: &DMatrix<T>, tol: T) -> Result<RankResult<T>, NumlinError> {
    let s = singular_values(m)?;
    let top = s.first().copied().unwrap_or_else(T::zero);
    let rank = if top <= c(ABS_FLOOR) {
        0
    } else {
        s.iter().filter(|&&x| x > tol * top).count()
    };
    Ok(RankResult { rank, singular_values: s, tol_used: tol })
}

/// Scales rows, then columns, to unit max-norm. Rows or columns already at
/// round-off level relative to the largest entry are left alone so that
/// cancellations are not blown up. Rank is invariant under the scaling; it
/// only keeps physically small but genuine singular values off the cutoff.
pub fn equilibrate<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let mut a = m.clone();
    let gmax = a.iter().fold(T::zero(), |acc, x| Float::max(acc, fabs(*x)));
    if gmax <= T::zero() {
        return a;
    }
    let floor = gmax * c::<T>(64.0) * <T as Float>::epsilon();
    for i in 0..a.nrows() {
        let rmax = a.row(i).iter().fold(T::zero(), |acc, x| Float::max(acc, fabs(*x)));
        if rmax > floor {
            a.row_mut(i).scale_mut(T::one() / rmax);
        }
    }
    for j in 0..a.ncols() {
        let cmax = a.column(j).iter().fold(T::zero(), |acc, x| Float::max(acc, fabs(*x)));
        if cmax > c::<T>(64.0) * <T as Float>::epsilon() {
            a.column_mut(j).scale_mut(T::one() / cmax);
        }
    }
    a
}

/// Row and column orderings that move an `r x r` nonsingular block to the
/// top-left corner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PivotedFactorization {
    /// `row_perm[k]` is the original row placed at position `k`.
    pub row_perm: Vec<usize>,
    pub col_perm: Vec<usize>,
    pub rank: usize,
}

/// Householder QR with column pivoting on the largest remaining column norm
/// (lowest index on ties). Returns the column order and `|R_kk|`.
pub fn householder_col_pivot<T: Real>(m: &DMatrix<T>) -> (Vec<usize>, Vec<T>) {
    let (rows, cols) = m.shape();
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..cols).collect();
    let steps = rows.min(cols);
    let mut diag = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut best = k;
        let mut best_norm = -T::one();
        for j in k..cols {
            let nrm = a.view((k, j), (rows - k, 1)).norm();
            if nrm > best_norm {
                best_norm = nrm;
                best = j;
            }
        }
        a.swap_columns(k, best);
        perm.swap(k, best);
        let mut v: DVector<T> = a.view((k, k), (rows - k, 1)).column(0).into_owned();
        let alpha = v.norm();
        if alpha == T::zero() {
            diag.push(T::zero());
            continue;
        }
        let sign = if v[0] >= T::zero() { T::one() } else { -T::one() };
        v[0] += sign * alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 > T::zero() {
            for j in k..cols {
                let mut col = a.view_mut((k, j), (rows - k, 1));
                let proj = v.dot(&col.column(0)) * c::<T>(2.0) / vnorm2;
                col.column_mut(0).axpy(-proj, &v, T::one());
            }
        }
        diag.push(fabs(a[(k, k)]));
    }
    (perm, diag)
}

fn qr_rank<T: Real>(diag: &[T], eps: T) -> usize {
    let Some(&top) = diag.first() else { return 0 };
    if top <= c(ABS_FLOOR) {
        return 0;
    }
    diag.iter().take_while(|&&d| d > eps * top).count()
}

/// Column pivots from QR of `M`, row pivots from QR of `M^T`.
pub fn pivoted_qr<T: Real>(m: &DMatrix<T>, eps: T) -> Result<PivotedFactorization, NumlinError> {
    check_finite(m)?;
    let (col_perm, rdiag) = householder_col_pivot(m);
    let (row_perm, _) = householder_col_pivot(&m.transpose());
    let mut col_perm = col_perm;
    let mut row_perm = row_perm;
    // QR only orders min(rows, cols) pivots explicitly; the tail keeps its order
    complete_perm(&mut col_perm, m.ncols());
    complete_perm(&mut row_perm, m.nrows());
    Ok(PivotedFactorization { row_perm, col_perm, rank: qr_rank(&rdiag, eps) })
}

fn complete_perm(p: &mut Vec<usize>, n: usize) {
    if p.len() < n {
        for i in 0..n {
            if !p.contains(&i) {
                p.push(i);
            }
        }
    }
}

/// Applies row and column orderings.
pub fn permute<T: Real>(m: &DMatrix<T>, rows: &[usize], cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

#[derive(Clone, Debug)]
pub struct NewtonOptions {
    pub abstol: f64,
    pub reltol: f64,
    pub max_iter: usize,
    /// Take a truncated-SVD pseudo-inverse step when LU hits a tiny pivot.
    pub pinv_fallback: bool,
    /// Relative cutoff for the truncated SVD.
    pub pinv_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { abstol: 1e-10, reltol: 1e-10, max_iter: 50, pinv_fallback: true, pinv_tol: 1e-10 }
    }
}

#[derive(Clone, Debug)]
pub struct NewtonReport<T> {
    pub x: DVector<T>,
    pub iterations: usize,
    pub residual: T,
    pub used_pinv: bool,
    /// Infinity norms of the residual at each iterate, for convergence studies.
    pub history: Vec<T>,
}

const MAX_HALVINGS: usize = 30;

/// Minimum-norm solution of `J dx = -r` with singular values below
/// `tol * sigma_1` dropped.
pub fn pinv_solve<T: Real>(j: &DMatrix<T>, r: &DVector<T>, tol: f64) -> Result<DVector<T>, NumlinError> {
    check_finite(j)?;
    let svd = j.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(T::zero(), |a, b| if b > a { b } else { a });
    let cut = Float::max(smax * c(tol), c(ABS_FLOOR));
    svd.solve(&(-r), cut).map_err(|e| NumlinError::Eval(e.to_string()))
}

fn lu_step<T: Real>(j: &DMatrix<T>, r: &DVector<T>) -> Result<DVector<T>, NumlinError> {
    let lu = j.clone().lu();
    let u = lu.u();
    let min_pivot = (0..u.nrows().min(u.ncols())).map(|k| fabs(u[(k, k)])).fold(None, |m: Option<T>, x| {
        Some(match m {
            Some(m) if m < x => m,
            _ => x,
        })
    });
    match min_pivot {
        Some(p) if p >= c(ABS_FLOOR) => lu.solve(&(-r)).ok_or(NumlinError::SingularJacobian(0.0)),
        Some(p) => Err(NumlinError::SingularJacobian(p.to_f64().unwrap_or(0.0))),
        None => Ok(DVector::zeros(j.ncols())),
    }
}

fn inf_norm<T: Real>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |m, x| Float::max(m, fabs(*x)))
}

/// Damped Newton on a square system `F(x) = 0`. `f` returns the residual and
/// Jacobian. Stops when `|F|_inf <= abstol` and the last step is below
/// `reltol * (1 + |x|_inf)`.
pub fn newton_solve<T, F>(f: F, x0: DVector<T>, opts: &NewtonOptions) -> Result<NewtonReport<T>, NumlinError>
where
    T: Real,
    F: FnMut(&DVector<T>) -> Result<(DVector<T>, DMatrix<T>), NumlinError>,
{
    iterate(f, x0, opts, false)
}

/// Gauss-Newton with truncated-SVD steps for over- or under-determined
/// systems. Each step is the least-change correction.
pub fn gauss_newton<T, F>(f: F, x0: DVector<T>, opts: &NewtonOptions) -> Result<NewtonReport<T>, NumlinError>
where
    T: Real,
    F: FnMut(&DVector<T>) -> Result<(DVector<T>, DMatrix<T>), NumlinError>,
{
    iterate(f, x0, opts, true)
}

fn iterate<T, F>(mut f: F, x0: DVector<T>, opts: &NewtonOptions, always_pinv: bool) -> Result<NewtonReport<T>, NumlinError>
where
    T: Real,
    F: FnMut(&DVector<T>) -> Result<(DVector<T>, DMatrix<T>), NumlinError>,
{
    let mut x = x0;
    let mut used_pinv = false;
    let mut history = Vec::new();
    let (mut r, mut jac) = f(&x)?;
    for it in 0..opts.max_iter {
        let rn = inf_norm(&r);
        history.push(rn);
        if r.is_empty() {
            return Ok(NewtonReport { x, iterations: it, residual: T::zero(), used_pinv, history });
        }
        let dx = if always_pinv || jac.nrows() != jac.ncols() {
            used_pinv = true;
            pinv_solve(&jac, &r, opts.pinv_tol)?
        } else {
            match lu_step(&jac, &r) {
                Ok(dx) => dx,
                Err(NumlinError::SingularJacobian(_)) if opts.pinv_fallback => {
                    used_pinv = true;
                    pinv_solve(&jac, &r, opts.pinv_tol)?
                }
                Err(e) => return Err(e),
            }
        };
        let step = inf_norm(&dx);
        let small_step = step <= c::<T>(opts.reltol) * (T::one() + inf_norm(&x));
        if rn <= c(opts.abstol) && small_step {
            // polish with the final step unless it makes things worse
            let xt = &x + &dx;
            if let Ok((rt, _)) = f(&xt) {
                if inf_norm(&rt) <= rn {
                    let res = inf_norm(&rt);
                    return Ok(NewtonReport { x: xt, iterations: it + 1, residual: res, used_pinv, history });
                }
            }
            return Ok(NewtonReport { x, iterations: it, residual: rn, used_pinv, history });
        }
        let mut lambda = T::one();
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let xt = &x + &dx * lambda;
            if let Ok((rt, jt)) = f(&xt) {
                // Gauss-Newton steps descend in the 2-norm, not the max norm
                let rtn = rt.norm();
                if Float::is_finite(rtn) && rtn < r.norm() {
                    accepted = Some((xt, rt, jt));
                    break;
                }
            }
            lambda = lambda * c(0.5);
        }
        match accepted {
            Some((xt, rt, jt)) => {
                x = xt;
                r = rt;
                jac = jt;
            }
            None => {
                if rn <= c(opts.abstol) {
                    // stalled at round-off level
                    return Ok(NewtonReport { x, iterations: it, residual: rn, used_pinv, history });
                }
                return Err(NumlinError::NoConvergence { iterations: it, residual: rn.to_f64().unwrap_or(f64::NAN) });
            }
        }
    }
    let rn = inf_norm(&r);
    if rn <= c(opts.abstol) {
        return Ok(NewtonReport { x, iterations: opts.max_iter, residual: rn, used_pinv, history });
    }
    Err(NumlinError::NoConvergence { iterations: opts.max_iter, residual: rn.to_f64().unwrap_or(f64::NAN) })
}

/// Levenberg-Marquardt with Nielsen's damping update. Slower than
/// [`gauss_newton`] near a root but robust far from one; does not give the
/// least-change solution.
pub fn levenberg_marquardt<T, F>(mut f: F, x0: DVector<T>, opts: &NewtonOptions) -> Result<NewtonReport<T>, NumlinError>
where
    T: Real,
    F: FnMut(&DVector<T>) -> Result<(DVector<T>, DMatrix<T>), NumlinError>,
{
    let mut x = x0;
    let mut history = Vec::new();
    let (mut r, mut jac) = f(&x)?;
    let jtj = jac.tr_mul(&jac);
    let mut mu = c::<T>(1e-3) * jtj.diagonal().iter().copied().fold(c(ABS_FLOOR), |a, b| Float::max(a, b));
    let mut nu = c::<T>(2.0);
    for it in 0..opts.max_iter {
        let rn = inf_norm(&r);
        history.push(rn);
        if rn <= c(opts.abstol) {
            return Ok(NewtonReport { x, iterations: it, residual: rn, used_pinv: false, history });
        }
        check_finite(&jac)?;
        let g = jac.tr_mul(&r);
        let mut a = jac.tr_mul(&jac);
        for i in 0..a.nrows() {
            a[(i, i)] += mu;
        }
        let Some(ch) = a.cholesky() else {
            mu *= nu;
            nu *= c(2.0);
            continue;
        };
        let dx = -ch.solve(&g);
        let xt = &x + &dx;
        let old = r.norm_squared();
        let trial = f(&xt).ok().filter(|(rt, _)| Float::is_finite(rt.norm_squared()));
        // gain ratio against the linear model
        let pred = dx.dot(&(dx.scale(mu) - &g));
        match trial {
            Some((rt, jt)) if rt.norm_squared() < old && pred > T::zero() => {
                let rho = (old - rt.norm_squared()) / pred;
                let k = c::<T>(1.0) - Float::powi(c::<T>(2.0) * rho - c(1.0), 3);
                mu *= Float::max(c(1.0 / 3.0), k);
                nu = c(2.0);
                x = xt;
                r = rt;
                jac = jt;
            }
            _ => {
                mu *= nu;
                nu *= c(2.0);
            }
        }
        if !Float::is_finite(mu) {
            break;
        }
    }
    let rn = inf_norm(&r);
    if rn <= c(opts.abstol) {
        return Ok(NewtonReport { x, iterations: opts.max_iter, residual: rn, used_pinv: false, history });
    }
    Err(NumlinError::NoConvergence { iterations: opts.max_iter, residual: rn.to_f64().unwrap_or(f64::NAN) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rank1() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[8.0, -2.0, -4.0, 1.0])
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn rank_of_proportional_rows() {
        let res = svd_rank(&rank1(), 1e-8).unwrap();
        assert_eq!(res.rank, 1);
        // sigma_2 is exactly zero analytically; numerically it sits at round-off
        assert!(res.singular_values[1] < 1e-14);
        assert!((res.singular_values[0] - 85.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rank_of_identity_and_zero() {
        for n in 1..6 {
            assert_eq!(svd_rank(&DMatrix::<f64>::identity(n, n), 1e-8).unwrap().rank, n);
        }
        assert_eq!(svd_rank(&DMatrix::<f64>::zeros(3, 3), 1e-8).unwrap().rank, 0);
        let bad = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert_eq!(svd_rank(&bad, 1e-8), Err(NumlinError::NonFinite));
    }

    #[test]
    fn rank_in_f32() {
        let m = DMatrix::<f32>::from_row_slice(2, 2, &[8.0, -2.0, -4.0, 1.0]);
        assert_eq!(svd_rank(&m, 1e-5).unwrap().rank, 1);
        let pf = pivoted_qr(&m, 1e-5).unwrap();
        assert_eq!(pf.rank, 1);
    }

    #[test]
    fn qr_selects_largest_entry_block() {
        let pf = pivoted_qr(&rank1(), 1e-8).unwrap();
        assert_eq!(pf.rank, 1);
        assert_eq!(rank1()[(pf.row_perm[0], pf.col_perm[0])], 8.0);
    }

    #[test]
    fn qr_identity_permutations() {
        let pf = pivoted_qr(&DMatrix::<f64>::identity(4, 4), 1e-8).unwrap();
        assert_eq!(pf.row_perm, vec![0, 1, 2, 3]);
        assert_eq!(pf.col_perm, vec![0, 1, 2, 3]);
        assert_eq!(pf.rank, 4);
    }

    #[test]
    fn qr_leading_block_is_nonsingular() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r = rng.gen_range(1..5);
            let m = random(&mut rng, 6, r) * random(&mut rng, r, 6);
            let pf = pivoted_qr(&m, 1e-8).unwrap();
            assert_eq!(pf.rank, r);
            let block = permute(&m, &pf.row_perm[..r], &pf.col_perm[..r]);
            assert_eq!(svd_rank(&block, 1e-8).unwrap().rank, r);
        }
    }

    #[test]
    fn svd_reconstruction_up_to_50() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..40 {
            let (r, c) = (rng.gen_range(1..=50), rng.gen_range(1..=50));
            let m = random(&mut rng, r, c);
            let svd = m.clone().svd(true, true);
            let rec = svd.recompose().unwrap();
            assert!((rec - &m).norm() <= 1e-10 * m.norm());
        }
    }

    #[test]
    fn qr_and_svd_agree_on_rank_deficient_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let n = rng.gen_range(2..=10);
            let m_cols = rng.gen_range(2..=10);
            let k = rng.gen_range(0..=n.min(m_cols));
            let m = if k == 0 {
                DMatrix::zeros(n, m_cols)
            } else {
                random(&mut rng, n, k) * random(&mut rng, k, m_cols)
            };
            let s = svd_rank(&m, 1e-8).unwrap().rank;
            let q = pivoted_qr(&m, 1e-8).unwrap().rank;
            assert_eq!(s, k);
            assert_eq!(q, s);
        }
    }

    #[test]
    fn newton_linear_in_one_unknown() {
        // y - x^2 with x frozen at 2
        let f = |v: &DVector<f64>| Ok((DVector::from_vec(vec![v[0] - 4.0]), DMatrix::from_element(1, 1, 1.0)));
        let rep = newton_solve(f, DVector::from_vec(vec![3.9]), &NewtonOptions::default()).unwrap();
        assert!((rep.x[0] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_newton_projects_onto_parabola() {
        // least-change projection of (2.1, 4.2) onto y = x^2
        let f = |v: &DVector<f64>| {
            Ok((
                DVector::from_vec(vec![v[1] - v[0] * v[0]]),
                DMatrix::from_row_slice(1, 2, &[-2.0 * v[0], 1.0]),
            ))
        };
        let rep = gauss_newton(f, DVector::from_vec(vec![2.1, 4.2]), &NewtonOptions::default()).unwrap();
        assert!(rep.residual < 1e-10);
        // the result should be close to the orthogonal projection: solve
        // (x - 2.1) + 2x (x^2 - 4.2) = 0 by bisection as an oracle
        let g = |x: f64| (x - 2.1) + 2.0 * x * (x * x - 4.2);
        let (mut lo, mut hi) = (2.0, 2.1);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if g(lo) * g(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((rep.x[0] - lo).abs() < 1e-3);
    }

    #[test]
    fn newton_quadratic_convergence() {
        // x^3 - 2x - 5 with root near 2.0945514815
        let f = |v: &DVector<f64>| {
            let x = v[0];
            Ok((DVector::from_vec(vec![x * x * x - 2.0 * x - 5.0]), DMatrix::from_element(1, 1, 3.0 * x * x - 2.0)))
        };
        let opts = NewtonOptions { abstol: 1e-15, reltol: 1e-16, ..Default::default() };
        let rep = newton_solve(f, DVector::from_vec(vec![2.5]), &opts).unwrap();
        let root = rep.x[0];
        // rebuild iterates to measure errors
        let mut x = 2.5f64;
        let mut errs = vec![];
        for _ in 0..5 {
            errs.push((x - root).abs());
            x -= (x * x * x - 2.0 * x - 5.0) / (3.0 * x * x - 2.0);
        }
        for w in errs.windows(2) {
            if w[1] > 1e-13 {
                let ratio = w[1] / (w[0] * w[0]);
                assert!(ratio < 2.0, "ratio {}", ratio);
            }
        }
        assert!(rep.history.len() <= 8);
    }

    #[test]
    fn singular_without_fallback_is_reported() {
        let f = |_: &DVector<f64>| Ok((DVector::from_vec(vec![1.0, 1.0]), DMatrix::zeros(2, 2)));
        let opts = NewtonOptions { pinv_fallback: false, ..Default::default() };
        assert!(matches!(
            newton_solve(f, DVector::zeros(2), &opts),
            Err(NumlinError::SingularJacobian(_))
        ));
    }

    #[test]
    fn pinv_fallback_handles_rank_deficiency() {
        // x + y = 2 written twice: singular but consistent
        let f = |v: &DVector<f64>| {
            let s = v[0] + v[1] - 2.0;
            Ok((DVector::from_vec(vec![s, s]), DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])))
        };
        let rep = newton_solve(f, DVector::from_vec(vec![0.0, 0.0]), &NewtonOptions::default()).unwrap();
        assert!(rep.used_pinv);
        assert!((rep.x[0] - 1.0).abs() < 1e-12 && (rep.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_convergence_is_reported() {
        // x^2 + 1 has no real root
        let f = |v: &DVector<f64>| Ok((DVector::from_vec(vec![v[0] * v[0] + 1.0]), DMatrix::from_element(1, 1, 2.0 * v[0])));
        let opts = NewtonOptions { max_iter: 20, ..Default::default() };
        assert!(matches!(
            newton_solve(f, DVector::from_vec(vec![0.5]), &opts),
            Err(NumlinError::NoConvergence { .. })
        ));
    }

    #[test]
    fn lm_solves_rosenbrock_root() {
        // root at (1, 1); Gauss-Newton from far away needs heavy damping
        let f = |x: &DVector<f64>| {
            let r = DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]);
            let j = DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]);
            Ok((r, j))
        };
        let opts = NewtonOptions { abstol: 1e-12, max_iter: 200, ..Default::default() };
        let rep = levenberg_marquardt(f, DVector::from_vec(vec![-1.2, 1.0]), &opts).unwrap();
        assert!((rep.x[0] - 1.0).abs() < 1e-10 && (rep.x[1] - 1.0).abs() < 1e-10);
    }
}
