//! Predict-project integration of a regularized system.
//!
//! The state is every jet below its leading order. Each right-hand side
//! evaluation solves the square top block for the leading derivatives; after
//! an explicit Euler or RK4 step the state is projected back onto the
//! algebraic constraints by least-change Gauss-Newton with `t` fixed.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::expr::{Expr, ExprError, JetVar, Tape};
use crate::numlin::{NewtonOptions, NumlinError};
use crate::prolong::CompiledSystem;
use crate::regularize::{Analysis, Point, Regularized, StagedSystem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrateError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("top block singular at t = {t}")]
    SingularTopBlock { t: f64 },
    #[error("leading-derivative solve failed at t = {t}: {source}")]
    TopSolve { t: f64, source: NumlinError },
    #[error("projection failed at t = {t}: {source}")]
    Projection { t: f64, source: NumlinError },
    #[error("initial point violates the constraints (residual {residual:e})")]
    InconsistentInitialPoint { residual: f64 },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(format!("unknown method '{other}' (expected euler or rk4)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveConfig {
    pub t0: f64,
    pub t_end: f64,
    pub h: f64,
    pub abstol: f64,
    pub reltol: f64,
    pub max_newton: usize,
    pub method: Method,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { t0: 0.0, t_end: 1.0, h: 1e-3, abstol: 1e-6, reltol: 1e-3, max_newton: 50, method: Method::Rk4 }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<(), IntegrateError> {
        let bad = |m: &str| Err(IntegrateError::InvalidConfig(m.to_string()));
        if !(self.t0.is_finite() && self.t_end.is_finite()) || self.t_end < self.t0 {
            return bad("need finite t0 <= t_end");
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad("step size must be positive");
        }
        if !(self.abstol > 0.0 && self.reltol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_newton == 0 {
            return bad("max_newton must be at least 1");
        }
        Ok(())
    }
}

/// The regularized system split into the square top block (`F_DE`) and the
/// algebraic constraints (`F_AE`), both over the slot layout `state ++ top`.
#[derive(Clone, Debug)]
pub struct SplitSystem {
    pub state: Vec<JetVar>,
    pub top: Vec<JetVar>,
    pub de: CompiledSystem,
    pub ae: CompiledSystem,
    /// Slot holding the time derivative of each state jet.
    pub deriv_slot: Vec<usize>,
    pub params: Vec<f64>,
    pub var_names: Vec<String>,
    pub n_orig: usize,
}

impl SplitSystem {
    pub fn slots(&self) -> Vec<JetVar> {
        self.state.iter().chain(self.top.iter()).copied().collect()
    }
}

pub fn split_system(stage: &StagedSystem, an: &Analysis, params: &[f64]) -> Result<SplitSystem, IntegrateError> {
    let ps = &an.prolonged;
    let state = ps.state_vars();
    let top = ps.top_vars();
    let slots: Vec<JetVar> = state.iter().chain(top.iter()).copied().collect();
    let index: HashMap<JetVar, usize> = slots.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let deriv_slot = state
        .iter()
        .map(|v| index[&JetVar::new(v.var, v.order + 1)])
        .collect();
    let de = CompiledSystem::new(&ps.top_block(), &slots, &top)?;
    let ae = CompiledSystem::new(&an.constraints, &slots, &state)?;
    Ok(SplitSystem {
        state,
        top,
        de,
        ae,
        deriv_slot,
        params: params.to_vec(),
        var_names: stage.var_names.clone(),
        n_orig: stage.n_orig,
    })
}

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub var_names: Vec<String>,
    pub times: Vec<f64>,
    /// Original variables at each time.
    pub states: Vec<Vec<f64>>,
    /// Layout of `jet_values`: every state jet then every leading derivative.
    pub jets: Vec<JetVar>,
    pub jet_values: Vec<Vec<f64>>,
    /// Largest constraint residual after projection at each time.
    pub residuals: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[j]).collect()
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, &r| m.max(r))
    }

    /// Largest residual of arbitrary equations along the trajectory, reading
    /// jets from the recorded layout.
    pub fn max_residual_of(&self, eqs: &[Expr], params: &[f64]) -> Result<f64, ExprError> {
        let index: HashMap<JetVar, usize> = self.jets.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let tape = Tape::compile(eqs, &|v| index.get(&v).copied())?;
        let mut worst = 0.0f64;
        for (t, vals) in self.times.iter().zip(&self.jet_values) {
            for r in tape.eval(*t, vals, params)? {
                worst = worst.max(r.abs());
            }
        }
        Ok(worst)
    }

    /// CSV with header `t,x1,...,xn` and 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for n in &self.var_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (t, row) in self.times.iter().zip(&self.states) {
            s.push_str(&format!("{:.16e}", t));
            for v in row {
                s.push_str(&format!(",{:.16e}", v));
            }
            s.push('\n');
        }
        s
    }
}

/// Condition number beyond which the top block is solved by truncated SVD.
const COND_LIMIT: f64 = 1e8;

/// Condition number beyond which the step is predicted by extrapolating the
/// last accepted states instead of integrating the top block.
const EXTRAPOLATE_COND: f64 = 1e3;

struct Stepper<'a> {
    sys: &'a SplitSystem,
    cfg: &'a SolveConfig,
    /// Current leading-derivative guess, reused between solves.
    top: Vec<f64>,
}

impl Stepper<'_> {
    fn top_options(&self) -> NewtonOptions {
        NewtonOptions {
            abstol: self.cfg.abstol * 1e-4,
            reltol: 1e-12,
            max_iter: self.cfg.max_newton,
            pinv_fallback: false,
            pinv_tol: 1e-12,
        }
    }

    /// Condition number of the top block at `(t, vals)`; infinite when singular.
    fn condition(&self, t: f64, vals: &[f64]) -> Result<f64, IntegrateError> {
        let j = self.sys.de.jacobian(t, vals, &self.sys.params)?;
        if j.is_empty() {
            return Ok(1.0);
        }
        let sv = j.singular_values();
        let (lo, hi) = (sv.min(), sv.max());
        Ok(if lo > 0.0 && hi.is_finite() { hi / lo } else { f64::INFINITY })
    }

    fn ill_conditioned(&self, t: f64, vals: &[f64]) -> Result<bool, IntegrateError> {
        Ok(self.condition(t, vals)? > COND_LIMIT)
    }

    /// Solves the top block at `(t, s)` and returns the state derivative.
    fn rhs(&mut self, t: f64, s: &[f64]) -> Result<Vec<f64>, IntegrateError> {
        let ns = s.len();
        let mut vals: Vec<f64> = s.iter().chain(self.top.iter()).copied().collect();
        if self.ill_conditioned(t, &vals)? {
            // Near a crossing of solution branches the top block is nearly
            // singular. Truncated-SVD steps from the warm start keep the
            // near-null component continuous instead of amplifying drift;
            // the projection that follows restores the constraints.
            self.sys
                .de
                .least_squares_tol(t, &mut vals, &self.sys.params, self.cfg.max_newton, COND_LIMIT.recip())
                .map_err(|source| IntegrateError::TopSolve { t, source })?;
        } else {
            self.sys
                .de
                .solve(t, &mut vals, &self.sys.params, false, &self.top_options())
                .map_err(|e| match e {
                    NumlinError::SingularJacobian(_) => IntegrateError::SingularTopBlock { t },
                    source => IntegrateError::TopSolve { t, source },
                })?;
        }
        self.top.copy_from_slice(&vals[ns..]);
        Ok(self.sys.deriv_slot.iter().map(|&i| vals[i]).collect())
    }

    fn predict(&mut self, t: f64, s: &[f64], h: f64) -> Result<Vec<f64>, IntegrateError> {
        let axpy = |a: &[f64], k: &[f64], c: f64| -> Vec<f64> { a.iter().zip(k).map(|(x, d)| x + c * d).collect() };
        match self.cfg.method {
            Method::Euler => {
                let k1 = self.rhs(t, s)?;
                Ok(axpy(s, &k1, h))
            }
            Method::Rk4 => {
                let k1 = self.rhs(t, s)?;
                let k2 = self.rhs(t + 0.5 * h, &axpy(s, &k1, 0.5 * h))?;
                let k3 = self.rhs(t + 0.5 * h, &axpy(s, &k2, 0.5 * h))?;
                let k4 = self.rhs(t + h, &axpy(s, &k3, h))?;
                Ok((0..s.len()).map(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
            }
        }
    }

    /// Projects onto the constraints; returns the residual afterwards.
    fn project(&self, t: f64, s: &mut [f64]) -> Result<f64, IntegrateError> {
        if self.sys.ae.n_eqs() == 0 {
            return Ok(0.0);
        }
        let ns = s.len();
        let mut vals: Vec<f64> = s.iter().chain(self.top.iter()).copied().collect();
        let opts = NewtonOptions {
            abstol: self.cfg.abstol * 1e-4,
            reltol: 1e-13,
            max_iter: self.cfg.max_newton,
            pinv_fallback: true,
            pinv_tol: 1e-10,
        };
        let rep = self
            .sys
            .ae
            .solve(t, &mut vals, &self.sys.params, true, &opts)
            .map_err(|source| IntegrateError::Projection { t, source })?;
        s.copy_from_slice(&vals[..ns]);
        Ok(rep.residual)
    }
}

fn constraint_residual(sys: &SplitSystem, t: f64, vals: &[f64]) -> Result<f64, IntegrateError> {
    Ok(sys.ae.residual(t, vals, &sys.params)?.amax())
}

/// Integrates from a consistent point over `[cfg.t0, cfg.t_end]` with fixed
/// steps; the last step is shortened to land on `t_end`.
pub fn dae_solve(sys: &SplitSystem, initial: &Point, cfg: &SolveConfig) -> Result<Trajectory, IntegrateError> {
    cfg.validate()?;
    let mut s: Vec<f64> = sys.state.iter().map(|v| initial.get(v).copied().unwrap_or(0.0)).collect();
    let top: Vec<f64> = sys.top.iter().map(|v| initial.get(v).copied().unwrap_or(0.0)).collect();
    let vals: Vec<f64> = s.iter().chain(top.iter()).copied().collect();
    let r0 = if sys.ae.n_eqs() > 0 { constraint_residual(sys, cfg.t0, &vals)? } else { 0.0 };
    if !(r0 <= cfg.abstol) {
        return Err(IntegrateError::InconsistentInitialPoint { residual: r0 });
    }
    let slots = sys.slots();
    let orig_slot: Vec<usize> = (0..sys.n_orig)
        .map(|j| slots.iter().position(|v| *v == JetVar::new(j, 0)).expect("every variable has an order-0 jet"))
        .collect();
    let mut st = Stepper { sys, cfg, top };
    let mut traj = Trajectory {
        var_names: sys.var_names[..sys.n_orig].to_vec(),
        jets: slots,
        ..Default::default()
    };
    let mut record = |st: &mut Stepper, t: f64, s: &[f64], res: f64| -> Result<(), IntegrateError> {
        st.rhs(t, s)?;
        let vals: Vec<f64> = s.iter().chain(st.top.iter()).copied().collect();
        traj.times.push(t);
        traj.states.push(orig_slot.iter().map(|&i| vals[i]).collect());
        traj.jet_values.push(vals);
        traj.residuals.push(res);
        Ok(())
    };
    record(&mut st, cfg.t0, &s, r0)?;
    let span = cfg.t_end - cfg.t0;
    let steps = if span <= 0.0 { 0 } else { (span / cfg.h - 1e-9).ceil().max(1.0) as usize };
    let mut t = cfg.t0;
    let mut hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(4);
    hist.push_back(s.clone());
    for k in 0..steps {
        let t1 = if k + 1 == steps { cfg.t_end } else { cfg.t0 + (k + 1) as f64 * cfg.h };
        let vals: Vec<f64> = s.iter().chain(st.top.iter()).copied().collect();
        let uniform = (t1 - t - cfg.h).abs() <= 1e-9 * cfg.h;
        let mut next = if hist.len() == 4 && uniform && st.condition(t, &vals)? > EXTRAPOLATE_COND {
            // The top block loses rank where solution branches cross and its
            // derivatives amplify drift; a cubic through the last four states
            // carries the step and the projection corrects it.
            (0..s.len())
                .map(|i| 4.0 * hist[3][i] - 6.0 * hist[2][i] + 4.0 * hist[1][i] - hist[0][i])
                .collect()
        } else {
            st.predict(t, &s, t1 - t)?
        };
        let res = st.project(t1, &mut next)?;
        if !(res <= cfg.abstol) {
            return Err(IntegrateError::Projection {
                t: t1,
                source: NumlinError::NoConvergence { iterations: cfg.max_newton, residual: res },
            });
        }
        s = next;
        t = t1;
        if hist.len() == 4 {
            hist.pop_front();
        }
        hist.push_back(s.clone());
        record(&mut st, t, &s, res)?;
    }
    Ok(traj)
}

/// Splits a regularized system with its constants bound and integrates it
/// from its consistent point.
pub fn solve_regularized(reg: &Regularized, cfg: &SolveConfig) -> Result<Trajectory, IntegrateError> {
    let sys = split_system(&reg.stage, &reg.analysis, &reg.params())?;
    dae_solve(&sys, &reg.point, cfg)
}
