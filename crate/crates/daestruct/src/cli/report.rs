//! The analysis report: a schema-versioned JSON document.
//!
//! Field order is fixed by the struct definitions and floats print in
//! shortest round-trip form, so the same inputs and seed give byte-identical
//! output. Non-finite floats serialize as `null`.

use serde::Serialize;

/// Bumped whenever a field is renamed, removed or changes meaning.
pub const SCHEMA: &str = "daestruct-report/1";

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub command: String,
    pub input: String,
    pub seed: u64,
    pub options: OptionsReport,
    pub system: Option<SystemReport>,
    pub structure: Option<StructureReport>,
    pub witness: Option<WitnessReport>,
    pub degeneration: Option<String>,
    pub components: Vec<ComponentReport>,
    pub status: Status,
    pub exit_code: i32,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptionsReport {
    pub tol_rank: f64,
    pub abstol: f64,
    pub reltol: f64,
    pub h: Option<f64>,
    pub method: String,
    pub max_iir: usize,
    pub t_end: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SystemReport {
    pub variables: Vec<String>,
    pub equations: Vec<String>,
    pub independent: String,
    pub interval: [f64; 2],
    pub factors: Vec<String>,
    pub init_blocks: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct StructureReport {
    /// Rows of the signature matrix; `null` marks a structural zero.
    pub signature: Vec<Vec<Option<i32>>>,
    pub c: Vec<u32>,
    pub d: Vec<u32>,
    pub k_c: u32,
    pub k_d: u32,
    /// Extended degrees of freedom.
    pub dof: i64,
    pub top_block: [usize; 2],
    pub state_variables: Vec<String>,
    pub constraints: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointSource {
    /// Real witness points from homotopy continuation.
    Homotopy,
    /// User `init` blocks.
    Init,
    /// No constraints and no `init` block: the random anchor itself.
    Anchor,
}

#[derive(Clone, Debug, Serialize)]
pub struct WitnessReport {
    pub source: PointSource,
    /// Names of the coordinates of every point.
    pub unknowns: Vec<String>,
    pub anchor: Option<Vec<f64>>,
    pub paths_tracked: usize,
    pub paths_failed: usize,
    pub points: Vec<PointReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PointReport {
    pub index: usize,
    pub component: Option<String>,
    pub coords: Vec<f64>,
    pub residual: f64,
    pub rank: Option<usize>,
    pub n: Option<usize>,
    pub min_singular_value: Option<f64>,
    pub verdict: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Solved,
    Analyzed,
    ParseFailed,
    StructureFailed,
    RegularizationFailed,
    IntegrationFailed,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Solved | Status::Analyzed => 0,
            Status::StructureFailed => 2,
            Status::RegularizationFailed => 3,
            Status::IntegrationFailed => 4,
            Status::ParseFailed => 5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentReport {
    pub point: usize,
    pub component: Option<String>,
    pub status: Status,
    /// `direct` when the top block is regular at the point, otherwise
    /// `regularized via IIR`.
    pub method: Option<String>,
    pub iir: Option<IirReport>,
    pub solve: Option<SolveReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct IirReport {
    pub rounds: usize,
    pub n_trace: Vec<usize>,
    pub rank_trace: Vec<usize>,
    pub dof_trace: Vec<i64>,
    pub steps: Vec<IirStepReport>,
    pub final_variables: usize,
    pub final_rank: usize,
    pub consistency_residual: f64,
    pub constants: Vec<ConstantReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct IirStepReport {
    pub round: usize,
    pub n: usize,
    pub rank: usize,
    pub dof_before: i64,
    pub dof_bound: i64,
    pub new_variables: Vec<Replacement>,
    pub offsets_feasible: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Replacement {
    pub name: String,
    pub replaces: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstantReport {
    pub name: String,
    pub replaces: String,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub steps: usize,
    pub t_end: f64,
    pub final_state: Vec<f64>,
    pub max_constraint_residual: f64,
    pub max_residual_original: Option<f64>,
    pub csv: Option<String>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report types always serialize");
        s.push('\n');
        s
    }
}
