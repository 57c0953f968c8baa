//! The end-to-end driver: parse, structural analysis, starting points,
//! per-point regularization and integration, report assembly.
//!
//! Points are processed concurrently; results are collected in point order
//! so the report does not depend on scheduling.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::cli::parse::parse;
use crate::cli::report::*;
use crate::dae::DaeSystem;
use crate::expr::{Binding, JetVar};
use crate::integrate::{solve_regularized, Method, SolveConfig, Trajectory};
use crate::regularize::{rank_test, regularize_loop, Analysis, Point, Regularized, RegularizeOptions, StagedSystem};
use crate::structure::{build_signature, solve_offsets};
use crate::witness::{classify_components, random_anchor, witness_points, WitnessError, WitnessSet};

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub seed: u64,
    pub tol_rank: f64,
    pub abstol: f64,
    pub reltol: f64,
    /// Step size; defaults to a thousandth of the interval.
    pub h: Option<f64>,
    pub method: Method,
    pub max_iir: usize,
    /// Overrides the end of the interval given by `indep`.
    pub t_end: Option<f64>,
    /// Integrate after regularizing.
    pub solve: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            seed: 0,
            tol_rank: 1e-8,
            abstol: 1e-6,
            reltol: 1e-3,
            h: None,
            method: Method::Rk4,
            max_iir: 10,
            t_end: None,
            solve: false,
        }
    }
}

/// Report plus one trajectory per solved point, keyed by CSV file name.
#[derive(Debug)]
pub struct Outcome {
    pub report: Report,
    pub trajectories: Vec<(String, Trajectory)>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        self.report.exit_code
    }
}

/// Runs the pipeline on the text of a `.dae` file. `input` names the file in
/// the report and gives the stem of the CSV names.
pub fn run(input: &str, text: &str, opts: &PipelineOptions) -> Outcome {
    let mut report = Report {
        schema: SCHEMA,
        command: if opts.solve { "solve" } else { "analyze" }.to_string(),
        input: input.to_string(),
        seed: opts.seed,
        options: OptionsReport {
            tol_rank: opts.tol_rank,
            abstol: opts.abstol,
            reltol: opts.reltol,
            h: opts.h,
            method: opts.method.to_string(),
            max_iir: opts.max_iir,
            t_end: opts.t_end,
        },
        system: None,
        structure: None,
        witness: None,
        degeneration: None,
        components: vec![],
        status: Status::Analyzed,
        exit_code: 0,
        error: None,
    };
    let fail = |mut report: Report, status: Status, msg: String| {
        report.status = status;
        report.exit_code = status.exit_code();
        report.error = Some(msg);
        Outcome { report, trajectories: vec![] }
    };

    let sys = match parse(text) {
        Ok(s) => s,
        Err(e) => return fail(report, Status::ParseFailed, e.to_string()),
    };
    report.system = Some(system_report(&sys));

    let an = match build_signature(&sys)
        .and_then(|sig| solve_offsets(&sig))
        .map_err(|e| e.to_string())
        .and_then(|_| StagedSystem::from_dae(&sys).analyze().map_err(|e| e.to_string()))
    {
        Ok(an) => an,
        Err(e) => return fail(report, Status::StructureFailed, e),
    };
    report.structure = Some(structure_report(&sys, &an));

    let (ws, source, witness_error) = starting_points(&sys, &an, opts.seed);
    let state = an.prolonged.state_vars();
    let points: Vec<Point> = ws
        .points
        .iter()
        .map(|wp| state.iter().copied().zip(wp.coords.iter().copied()).collect())
        .collect();

    let stem = stem_of(input);
    let ropts = RegularizeOptions { tol_rank: opts.tol_rank, max_rounds: opts.max_iir, seed: opts.seed, ..Default::default() };
    let results: Vec<PointResult> = points
        .par_iter()
        .enumerate()
        .map(|(k, p)| process_point(&sys, &an, p, k, ws.points[k].component_id.clone(), &stem, &ropts, opts))
        .collect();

    let mut witness = WitnessReport {
        source,
        unknowns: state.iter().map(|v| sys.jet_name(*v)).collect(),
        anchor: if source == PointSource::Init { None } else { Some(ws.anchor.clone()) },
        paths_tracked: ws.paths_tracked,
        paths_failed: ws.paths_failed,
        points: vec![],
        error: witness_error.clone(),
    };
    let mut trajectories = Vec::new();
    for (k, (wp, res)) in ws.points.iter().zip(results).enumerate() {
        witness.points.push(PointReport {
            index: k,
            component: wp.component_id.clone(),
            coords: wp.coords.clone(),
            residual: wp.residual,
            rank: res.rank.map(|r| r.0),
            n: res.rank.map(|r| r.1),
            min_singular_value: res.rank.map(|r| r.2),
            verdict: res.rank.map(|r| if r.0 < r.1 { "degenerate" } else { "regular" }.to_string()),
        });
        if let Some(t) = res.trajectory {
            trajectories.push(t);
        }
        report.components.push(res.component);
    }
    report.degeneration = Some(global_verdict(&witness.points).to_string());
    report.witness = Some(witness);

    let worst = report
        .components
        .iter()
        .map(|c| c.status)
        .filter(|s| s.exit_code() != 0)
        .min_by_key(|s| s.exit_code());
    report.status = match worst {
        Some(s) => s,
        None if report.components.is_empty() => Status::RegularizationFailed,
        None if opts.solve => Status::Solved,
        None => Status::Analyzed,
    };
    report.exit_code = report.status.exit_code();
    if report.components.is_empty() {
        report.error = Some(witness_error.unwrap_or_else(|| "no starting points".to_string()));
    }
    Outcome { report, trajectories }
}

fn stem_of(input: &str) -> String {
    let name = std::path::Path::new(input).file_stem().and_then(|s| s.to_str()).unwrap_or("dae");
    if name.is_empty() { "dae".to_string() } else { name.to_string() }
}

fn system_report(sys: &DaeSystem) -> SystemReport {
    let names = sys.names();
    SystemReport {
        variables: sys.var_names.clone(),
        equations: sys.equations.iter().map(|e| e.display(&names).to_string()).collect(),
        independent: sys.indep.clone(),
        interval: [sys.t0, sys.t_end],
        factors: sys.factors.iter().map(|e| e.display(&names).to_string()).collect(),
        init_blocks: sys.inits.len(),
    }
}

fn structure_report(sys: &DaeSystem, an: &Analysis) -> StructureReport {
    let names = sys.names();
    let n = sys.n_vars();
    StructureReport {
        signature: (0..n)
            .map(|i| (0..n).map(|j| an.signature.is_finite(i, j).then(|| an.signature.get(i, j))).collect())
            .collect(),
        c: an.offsets.c.clone(),
        d: an.offsets.d.clone(),
        k_c: an.offsets.k_c(),
        k_d: an.offsets.k_d(),
        dof: an.dof,
        top_block: [an.prolonged.top_block().len(), an.prolonged.top_vars().len()],
        state_variables: an.prolonged.state_vars().iter().map(|v| sys.jet_name(*v)).collect(),
        constraints: an.constraints.iter().map(|e| e.display(&names).to_string()).collect(),
    }
}

/// Witness points of the constraints when they are polynomial, otherwise
/// the `init` blocks; with no constraints and no `init` block, the anchor.
fn starting_points(sys: &DaeSystem, an: &Analysis, seed: u64) -> (WitnessSet, PointSource, Option<String>) {
    let state = an.prolonged.state_vars();
    let from_inits = |error: Option<String>| {
        let mut ws = WitnessSet { unknowns: state.clone(), t0: sys.t0, ..Default::default() };
        for init in &sys.inits {
            let coords: Vec<f64> = state.iter().map(|v| init.get(v).copied().unwrap_or(0.0)).collect();
            let residual = constraint_residual(sys, an, &state, &coords);
            ws.points.push(crate::witness::WitnessPoint {
                coords,
                residual,
                min_singular_value: None,
                component_id: None,
                path_index: 0,
                singular_endpoint: false,
            });
        }
        (classify_components(ws, &sys.factors), PointSource::Init, error)
    };
    if an.constraints.is_empty() {
        if !sys.inits.is_empty() {
            return from_inits(None);
        }
        let anchor = random_anchor(state.len(), seed);
        let ws = WitnessSet {
            unknowns: state.clone(),
            points: vec![crate::witness::WitnessPoint {
                coords: anchor.clone(),
                residual: 0.0,
                min_singular_value: None,
                component_id: None,
                path_index: 0,
                singular_endpoint: false,
            }],
            anchor,
            t0: sys.t0,
            ..Default::default()
        };
        return (classify_components(ws, &sys.factors), PointSource::Anchor, None);
    }
    match witness_points(&an.constraints, &state, sys.t0, seed) {
        Ok(ws) if !ws.is_empty() => (classify_components(ws, &sys.factors), PointSource::Homotopy, None),
        Ok(ws) if sys.inits.is_empty() => (ws, PointSource::Homotopy, Some("no real witness points".to_string())),
        Ok(_) => from_inits(Some("no real witness points; using init blocks".to_string())),
        Err(e @ WitnessError::NonPolynomialConstraint(_)) if sys.inits.is_empty() => {
            let ws = WitnessSet { unknowns: state.clone(), t0: sys.t0, ..Default::default() };
            (ws, PointSource::Init, Some(format!("{e}; add an init block")))
        }
        Err(WitnessError::NonPolynomialConstraint(_)) => from_inits(None),
        Err(e) if sys.inits.is_empty() => {
            let ws = WitnessSet { unknowns: state.clone(), t0: sys.t0, ..Default::default() };
            (ws, PointSource::Homotopy, Some(e.to_string()))
        }
        Err(e) => from_inits(Some(format!("{e}; using init blocks"))),
    }
}

fn constraint_residual(sys: &DaeSystem, an: &Analysis, state: &[JetVar], coords: &[f64]) -> f64 {
    let mut b = Binding::new(sys.t0);
    for (v, x) in state.iter().zip(coords) {
        b.set(*v, *x);
    }
    an.constraints.iter().map(|e| e.eval(&b).map(f64::abs).unwrap_or(f64::NAN)).fold(0.0, f64::max)
}

fn global_verdict(points: &[PointReport]) -> &'static str {
    let reg = points.iter().any(|p| p.verdict.as_deref() == Some("regular"));
    let deg = points.iter().any(|p| p.verdict.as_deref() == Some("degenerate"));
    match (reg, deg) {
        (true, true) => "component-dependent",
        (true, false) => "regular-everywhere",
        (false, true) => "degenerate-everywhere",
        (false, false) => "unknown",
    }
}

struct PointResult {
    /// Rank, size and smallest singular value of the top block at the point.
    rank: Option<(usize, usize, f64)>,
    component: ComponentReport,
    trajectory: Option<(String, Trajectory)>,
}

#[allow(clippy::too_many_arguments)]
fn process_point(
    sys: &DaeSystem,
    an: &Analysis,
    p: &Point,
    k: usize,
    component: Option<String>,
    stem: &str,
    ropts: &RegularizeOptions,
    opts: &PipelineOptions,
) -> PointResult {
    let params = vec![0.0; sys.const_names.len()];
    let rank = rank_test(&an.prolonged, p, sys.t0, &params, opts.tol_rank)
        .ok()
        .map(|rt| (rt.rank.rank, rt.jacobian.nrows(), rt.rank.smallest()));
    let mut comp = ComponentReport {
        point: k,
        component,
        status: Status::Analyzed,
        method: None,
        iir: None,
        solve: None,
        error: None,
    };
    let reg = match regularize_loop(sys, p, ropts) {
        Ok(reg) => reg,
        Err(e) => {
            comp.status = Status::RegularizationFailed;
            comp.error = Some(e.to_string());
            return PointResult { rank, component: comp, trajectory: None };
        }
    };
    comp.method = Some(if reg.iir_rounds() == 0 { "direct" } else { "regularized via IIR" }.to_string());
    comp.iir = Some(iir_report(&reg));
    if !opts.solve {
        return PointResult { rank, component: comp, trajectory: None };
    }
    let t_end = opts.t_end.unwrap_or(sys.t_end);
    let span = (t_end - sys.t0).abs();
    let cfg = SolveConfig {
        t0: sys.t0,
        t_end,
        h: opts.h.unwrap_or(if span > 0.0 { span / 1000.0 } else { 1e-3 }),
        abstol: opts.abstol,
        reltol: opts.reltol,
        method: opts.method,
        ..Default::default()
    };
    match solve_regularized(&reg, &cfg) {
        Ok(tr) => {
            let csv = format!("{stem}.p{k}.csv");
            let orig_params = &reg.params()[..sys.const_names.len()];
            comp.status = Status::Solved;
            comp.solve = Some(SolveReport {
                steps: tr.len().saturating_sub(1),
                t_end: tr.times.last().copied().unwrap_or(sys.t0),
                final_state: tr.states.last().cloned().unwrap_or_default(),
                max_constraint_residual: tr.max_residual(),
                max_residual_original: tr.max_residual_of(&sys.equations, orig_params).ok(),
                csv: Some(csv.clone()),
            });
            PointResult { rank, component: comp, trajectory: Some((csv, tr)) }
        }
        Err(e) => {
            comp.status = Status::IntegrationFailed;
            comp.error = Some(e.to_string());
            PointResult { rank, component: comp, trajectory: None }
        }
    }
}

fn jet_label(vars: &[String], indep: &str, v: JetVar) -> String {
    let base = vars.get(v.var).cloned().unwrap_or_else(|| format!("x{}", v.var + 1));
    if v.order <= 2 {
        format!("{}{}", base, "'".repeat(v.order as usize))
    } else {
        format!("diff({},{},{})", base, indep, v.order)
    }
}

fn iir_report(reg: &Regularized) -> IirReport {
    let vars = &reg.stage.var_names;
    let label = |v: JetVar| jet_label(vars, &reg.stage.indep, v);
    let steps = reg
        .rounds
        .iter()
        .filter_map(|r| r.step.as_ref())
        .map(|s| IirStepReport {
            round: s.round,
            n: s.n,
            rank: s.rank,
            dof_before: s.dof_before,
            dof_bound: s.dof_bound,
            new_variables: s.u_vars.iter().map(|u| Replacement { name: u.name.clone(), replaces: label(u.replaced) }).collect(),
            offsets_feasible: s.bar_feasible,
        })
        .collect();
    IirReport {
        rounds: reg.iir_rounds(),
        n_trace: reg.rounds.iter().map(|r| r.n).collect(),
        rank_trace: reg.rounds.iter().map(|r| r.rank.rank).collect(),
        dof_trace: reg.dof_trace(),
        steps,
        final_variables: reg.stage.n_vars(),
        final_rank: reg.final_rank.rank,
        consistency_residual: reg.residual,
        constants: reg
            .stage
            .xi
            .iter()
            .map(|x| ConstantReport { name: x.name.clone(), replaces: label(x.replaced), value: x.value })
            .collect(),
    }
}

/// Writes every trajectory into `dir` under its report name.
pub fn write_trajectories(dir: &std::path::Path, trajectories: &[(String, Trajectory)]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, tr) in trajectories {
        std::fs::write(dir.join(name), tr.to_csv())?;
    }
    Ok(())
}

/// Index of each solved point's trajectory, for callers merging solutions.
pub fn trajectories_by_point(outcome: &Outcome) -> HashMap<usize, &Trajectory> {
    let by_name: HashMap<&str, &Trajectory> = outcome.trajectories.iter().map(|(n, t)| (n.as_str(), t)).collect();
    outcome
        .report
        .components
        .iter()
        .filter_map(|c| {
            let name = c.solve.as_ref()?.csv.as_deref()?;
            Some((c.point, *by_name.get(name)?))
        })
        .collect()
}
