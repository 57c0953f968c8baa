//! Signature matrix and Pryce offsets.
//!
//! The offsets come from the dual of the assignment problem on the signature
//! matrix: a Hungarian pass finds a maximum-weight transversal, then the usual
//! fixed-point iteration turns it into the smallest nonnegative duals.

use std::fmt;

use thiserror::Error;

use crate::dae::DaeSystem;
use crate::expr::Expr;

/// Marker for "variable absent from equation".
pub const NEG_INF: i32 = i32::MIN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StructureError {
    #[error("system is not square: {eqs} equations, {vars} variables")]
    NotSquare { eqs: usize, vars: usize },
    #[error("equation {0} references no dependent variable")]
    EmptyRow(usize),
    #[error("no perfect matching: the DAE is structurally singular")]
    NoPerfectMatching,
}

#[derive(Clone, PartialEq, Eq)]
pub struct SignatureMatrix {
    pub n: usize,
    entries: Vec<i32>,
}

impl SignatureMatrix {
    /// Builds from rows; use [`NEG_INF`] for absent entries.
    pub fn from_rows(rows: &[Vec<i32>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "signature matrix must be square");
        SignatureMatrix { n, entries: rows.concat() }
    }

    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.entries[i * self.n + j]
    }

    pub fn is_finite(&self, i: usize, j: usize) -> bool {
        self.get(i, j) != NEG_INF
    }

    pub fn rows(&self) -> Vec<Vec<i32>> {
        self.entries.chunks(self.n.max(1)).map(|r| r.to_vec()).collect()
    }

    /// Value of a transversal, `None` if it uses an absent entry.
    pub fn transversal_value(&self, perm: &[usize]) -> Option<i64> {
        let mut s = 0i64;
        for (i, &j) in perm.iter().enumerate() {
            if !self.is_finite(i, j) {
                return None;
            }
            s += self.get(i, j) as i64;
        }
        Some(s)
    }
}

impl fmt::Debug for SignatureMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for SignatureMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for i in 0..self.n {
            if i > 0 {
                f.write_str(", ")?;
            }
            f.write_str("[")?;
            for j in 0..self.n {
                if j > 0 {
                    f.write_str(", ")?;
                }
                match self.get(i, j) {
                    NEG_INF => f.write_str("-inf")?,
                    v => write!(f, "{}", v)?,
                }
            }
            f.write_str("]")?;
        }
        f.write_str("]")
    }
}

/// Equation offsets `c`, variable offsets `d`, and the transversal used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffsetPair {
    pub c: Vec<u32>,
    pub d: Vec<u32>,
    pub delta: i64,
    /// `transversal[i]` is the variable matched to equation `i`.
    pub transversal: Vec<usize>,
}

impl OffsetPair {
    pub fn k_c(&self) -> u32 {
        self.c.iter().copied().max().unwrap_or(0)
    }

    pub fn k_d(&self) -> u32 {
        self.d.iter().copied().max().unwrap_or(0)
    }

    /// Checks `d_j - c_i >= sigma_ij` everywhere and equality on the transversal.
    pub fn is_feasible_for(&self, sig: &SignatureMatrix) -> bool {
        (0..sig.n).all(|i| {
            (0..sig.n).all(|j| {
                !sig.is_finite(i, j) || self.d[j] as i64 - self.c[i] as i64 >= sig.get(i, j) as i64
            })
        })
    }
}

pub fn build_signature(sys: &DaeSystem) -> Result<SignatureMatrix, StructureError> {
    signature_of(&sys.equations, sys.n_vars())
}

/// Signature matrix of an arbitrary square equation list.
pub fn signature_of(eqs: &[Expr], n_vars: usize) -> Result<SignatureMatrix, StructureError> {
    if eqs.len() != n_vars {
        return Err(StructureError::NotSquare { eqs: eqs.len(), vars: n_vars });
    }
    let n = n_vars;
    let mut entries = vec![NEG_INF; n * n];
    for (i, e) in eqs.iter().enumerate() {
        let mut any = false;
        for v in e.vars() {
            if v.var < n {
                let slot = &mut entries[i * n + v.var];
                if *slot == NEG_INF || (v.order as i32) > *slot {
                    *slot = v.order as i32;
                }
                any = true;
            }
        }
        if !any {
            return Err(StructureError::EmptyRow(i));
        }
    }
    Ok(SignatureMatrix { n, entries })
}

/// Maximum-weight perfect matching on the finite entries. Returns the column
/// of each row. Ties go to the lowest column index.
pub fn max_transversal(sig: &SignatureMatrix) -> Result<Vec<usize>, StructureError> {
    let n = sig.n;
    if n == 0 {
        return Ok(vec![]);
    }
    let (mut lo, mut hi) = (i64::MAX, i64::MIN);
    for i in 0..n {
        for j in 0..n {
            if sig.is_finite(i, j) {
                lo = lo.min(sig.get(i, j) as i64);
                hi = hi.max(sig.get(i, j) as i64);
            }
        }
    }
    if lo > hi {
        return Err(StructureError::NoPerfectMatching);
    }
    // any matching through a forbidden edge costs more than every finite one
    let big = (n as i64 + 1) * (hi - lo + 1) + 1;
    let cost = |i: usize, j: usize| {
        if sig.is_finite(i, j) {
            hi - sig.get(i, j) as i64
        } else {
            big
        }
    };

    // potentials formulation, 1-based with a dummy column 0
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    if row_to_col.iter().enumerate().any(|(i, &j)| !sig.is_finite(i, j)) {
        return Err(StructureError::NoPerfectMatching);
    }
    Ok(row_to_col)
}

/// Smallest canonical offsets for the signature matrix.
pub fn solve_offsets(sig: &SignatureMatrix) -> Result<OffsetPair, StructureError> {
    let n = sig.n;
    let tr = max_transversal(sig)?;
    let mut c = vec![0i64; n];
    let mut d = vec![0i64; n];
    loop {
        for j in 0..n {
            d[j] = (0..n)
                .filter(|&i| sig.is_finite(i, j))
                .map(|i| sig.get(i, j) as i64 + c[i])
                .max()
                .unwrap_or(0);
        }
        let mut changed = false;
        for i in 0..n {
            let ci = d[tr[i]] - sig.get(i, tr[i]) as i64;
            if ci != c[i] {
                c[i] = ci;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let shift = c.iter().copied().min().unwrap_or(0);
    for x in c.iter_mut() {
        *x -= shift;
    }
    for x in d.iter_mut() {
        *x -= shift;
    }
    let delta = d.iter().sum::<i64>() - c.iter().sum::<i64>();
    Ok(OffsetPair {
        c: c.iter().map(|&x| x as u32).collect(),
        d: d.iter().map(|&x| x.max(0) as u32).collect(),
        delta,
        transversal: tr,
    })
}

/// Degrees of freedom of a square top part carrying extra constraint equations.
pub fn extended_delta(top_delta: i64, n_constraint_eqs: usize) -> i64 {
    top_delta - n_constraint_eqs as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const N: i32 = NEG_INF;

    fn example4() -> Vec<Expr> {
        let (x, y) = (|k| Expr::var(0, k), |k| Expr::var(1, k));
        vec![
            2.0 * y(0) * x(1) - x(0) * y(1) - x(0) + Expr::time().sin() + 2.0,
            y(0) - x(0).powi(2),
        ]
    }

    #[test]
    fn example4_signature_and_offsets() {
        let sig = signature_of(&example4(), 2).unwrap();
        assert_eq!(sig.rows(), vec![vec![1, 1], vec![0, 0]]);
        let off = solve_offsets(&sig).unwrap();
        assert_eq!(off.c, vec![0, 1]);
        assert_eq!(off.d, vec![1, 1]);
        assert_eq!(off.delta, 1);
    }

    #[test]
    fn beam_offsets() {
        let sig = SignatureMatrix::from_rows(&[vec![2, 2], vec![0, 0]]);
        let off = solve_offsets(&sig).unwrap();
        assert_eq!((off.c, off.d, off.delta), (vec![0, 2], vec![2, 2], 2));
    }

    #[test]
    fn scalar_algebraic_equation() {
        let e = Expr::var(0, 0) - Expr::time();
        let sig = signature_of(&[e], 1).unwrap();
        assert_eq!(sig.rows(), vec![vec![0]]);
        let off = solve_offsets(&sig).unwrap();
        assert_eq!((off.c, off.d, off.delta), (vec![0], vec![0], 0));
    }

    #[test]
    fn structural_errors() {
        assert_eq!(
            signature_of(&example4()[..1], 2),
            Err(StructureError::NotSquare { eqs: 1, vars: 2 })
        );
        let eqs = vec![Expr::var(0, 0), Expr::time().sin()];
        assert_eq!(signature_of(&eqs, 2), Err(StructureError::EmptyRow(1)));
        let sig = SignatureMatrix::from_rows(&[vec![1, N], vec![0, N]]);
        assert_eq!(solve_offsets(&sig), Err(StructureError::NoPerfectMatching));
    }

    #[test]
    fn extended_delta_examples() {
        assert_eq!(extended_delta(2, 1), 1);
        assert_eq!(extended_delta(5, 0), 5);
    }

    fn random_sig(rng: &mut ChaCha8Rng, n: usize) -> SignatureMatrix {
        let rows: Vec<Vec<i32>> = (0..n)
            .map(|_| (0..n).map(|_| [N, 0, 1, 2][rng.gen_range(0..4)]).collect())
            .collect();
        SignatureMatrix::from_rows(&rows)
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..n {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn brute_force_minimality_on_random_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let perms = permutations(4);
        let mut checked = 0;
        while checked < 500 {
            let sig = random_sig(&mut rng, 4);
            let best_transversal = perms.iter().filter_map(|p| sig.transversal_value(p)).max();
            let res = solve_offsets(&sig);
            let Some(best) = best_transversal else {
                assert_eq!(res, Err(StructureError::NoPerfectMatching));
                continue;
            };
            let off = res.unwrap();
            assert!(off.is_feasible_for(&sig));
            assert_eq!(off.delta, best, "LP duality on {:?}", sig);
            // exhaustive search over c in [0,4]^4 with the tightest d for each c
            let mut brute = i64::MAX;
            for code in 0..625 {
                let c: Vec<i64> = (0..4).map(|k| (code / 5i64.pow(k)) % 5).collect();
                let d: Vec<i64> = (0..4)
                    .map(|j| {
                        (0..4)
                            .filter(|&i| sig.is_finite(i, j))
                            .map(|i| sig.get(i, j) as i64 + c[i])
                            .max()
                            .unwrap_or(0)
                            .max(0)
                    })
                    .collect();
                if d.iter().all(|&x| x <= 4) {
                    brute = brute.min(d.iter().sum::<i64>() - c.iter().sum::<i64>());
                }
            }
            assert_eq!(off.delta, brute, "{:?}", sig);
            checked += 1;
        }
    }

    #[test]
    fn offsets_do_not_depend_on_equation_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let sig = random_sig(&mut rng, 5);
            let Ok(off) = solve_offsets(&sig) else { continue };
            let mut perm: Vec<usize> = (0..5).collect();
            for k in (1..5).rev() {
                perm.swap(k, rng.gen_range(0..=k));
            }
            let rows = sig.rows();
            let shuffled: Vec<Vec<i32>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let off2 = solve_offsets(&SignatureMatrix::from_rows(&shuffled)).unwrap();
            assert_eq!(off.d, off2.d);
            for (k, &i) in perm.iter().enumerate() {
                assert_eq!(off.c[i], off2.c[k]);
            }
            assert_eq!(off.delta, off2.delta);
        }
    }

    #[test]
    fn transversal_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let sig = random_sig(&mut rng, 6);
            if let Ok(off) = solve_offsets(&sig) {
                assert_eq!(off.c.iter().min(), Some(&0));
                for (i, &j) in off.transversal.iter().enumerate() {
                    assert_eq!(off.d[j] as i64 - off.c[i] as i64, sig.get(i, j) as i64);
                }
            }
        }
    }
}
