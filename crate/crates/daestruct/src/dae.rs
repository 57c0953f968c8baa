//! The DAE container shared by every stage.

use std::collections::HashMap;

use crate::expr::{Expr, JetVar, Names};

/// Equations `F_i = 0` over dependent variables `x_1..x_n` and time.
#[derive(Clone, Debug, Default)]
pub struct DaeSystem {
    pub equations: Vec<Expr>,
    pub var_names: Vec<String>,
    pub indep: String,
    /// Names of symbolic constants referenced by `Param` nodes.
    pub const_names: Vec<String>,
    pub t0: f64,
    pub t_end: f64,
    /// Optional factor polynomials used to tag components of witness sets.
    pub factors: Vec<Expr>,
    /// User-supplied starting points, one map per `init` block.
    pub inits: Vec<HashMap<JetVar, f64>>,
}

impl DaeSystem {
    pub fn new(equations: Vec<Expr>, var_names: Vec<String>) -> Self {
        DaeSystem {
            equations,
            var_names,
            indep: "t".to_string(),
            t_end: 1.0,
            ..Default::default()
        }
    }

    pub fn n_vars(&self) -> usize {
        self.var_names.len()
    }

    pub fn n_eqs(&self) -> usize {
        self.equations.len()
    }

    pub fn names(&self) -> Names {
        Names {
            vars: self.var_names.clone(),
            params: self.const_names.clone(),
            indep: self.indep.clone(),
        }
    }

    pub fn jet_name(&self, v: JetVar) -> String {
        let base = self.var_names.get(v.var).cloned().unwrap_or_else(|| format!("x{}", v.var + 1));
        if v.order <= 2 {
            format!("{}{}", base, "'".repeat(v.order as usize))
        } else {
            format!("diff({},{},{})", base, self.indep, v.order)
        }
    }

    /// Highest order of any variable in any equation.
    pub fn max_order(&self) -> u32 {
        self.equations
            .iter()
            .flat_map(|e| e.vars().iter().map(|v| v.order))
            .max()
            .unwrap_or(0)
    }
}
