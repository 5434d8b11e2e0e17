use thiserror::Error;

/// Coarse outcome class of an error; the CLI maps each class to one exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed or invalid input (bad JSON, broken invariants, out-of-domain arguments).
    Validation,
    /// A numerical certificate, solvability or convergence check failed.
    Certificate,
}

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient sampling: need at least {needed} samples, got {got}")]
    InsufficientSampling { needed: usize, got: usize },

    #[error("no global logarithm branch: f(w)/w winds {winding} times around 0")]
    Branch { winding: i64 },

    #[error("samples do not describe a circle map: symmetry defect {defect:e} exceeds 1e-8")]
    NotCircleMap { defect: f64 },

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error("invalid nerve: {0}")]
    InvalidNerve(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("path error: {0}")]
    Path(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("nesting error: {0}")]
    Nesting(String),

    #[error("univalence not certified: derivative majorant {bound:e} exceeds {limit:e}")]
    UnivalenceUncertified { bound: f64, limit: f64 },

    #[error("inversion diverged: {0}")]
    InversionDiverged(String),

    #[error("resonant mode n = {mode}: loop {loop_desc} has n-fold holonomy {holonomy:e} mod 2pi")]
    ResonantMode {
        mode: i64,
        loop_desc: String,
        holonomy: f64,
    },

    #[error("coboundary condition fails at mode n = {mode}: residual {residual:e} > tolerance {tolerance:e}")]
    CoboundaryFailure {
        mode: i64,
        residual: f64,
        tolerance: f64,
    },

    #[error("schedule violation at step {step} ({certificate}){}: {detail}", edge_suffix(.edge))]
    ScheduleViolation {
        step: usize,
        certificate: String,
        edge: Option<String>,
        detail: String,
    },

    #[error("convergence violation at step {step}: hat norm {norm:e} is not below delta {delta:e}")]
    ConvergenceViolation { step: usize, norm: f64, delta: f64 },

    #[error("truncation error at step {step}: tail mass {tail:e} exceeds {limit:e}")]
    Truncation { step: usize, tail: f64, limit: f64 },

    #[error("no convergence after {steps} steps: hat norm {norm:e} above tolerance {tol:e}")]
    NonConvergence { steps: usize, norm: f64, tol: f64 },

    #[error("extraction error: {0}")]
    Extraction(String),

    #[error("verification failed: residual {residual:e} exceeds {tolerance:e}")]
    Verification { residual: f64, tolerance: f64 },
}

fn edge_suffix(edge: &Option<String>) -> String {
    match edge {
        Some(e) => format!(" on edge {e}"),
        None => String::new(),
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Domain(_) | InsufficientSampling { .. } | Branch { .. } | NotCircleMap { .. }
            | InvalidMap(_) | InvalidNerve(_) | InvalidParams(_) | Path(_) | Serialization(_) => {
                ErrorClass::Validation
            }
            Nesting(_)
            | UnivalenceUncertified { .. }
            | InversionDiverged(_)
            | ResonantMode { .. }
            | CoboundaryFailure { .. }
            | ScheduleViolation { .. }
            | ConvergenceViolation { .. }
            | Truncation { .. }
            | NonConvergence { .. }
            | Extraction(_)
            | Verification { .. } => ErrorClass::Certificate,
        }
    }

    /// Short machine-readable tag used in diagnostics.
    pub fn kind(&self) -> &'static str {
        use Error::*;
        match self {
            Domain(_) => "domain",
            InsufficientSampling { .. } => "insufficient-sampling",
            Branch { .. } => "branch",
            NotCircleMap { .. } => "not-a-circle-map",
            InvalidMap(_) => "invalid-map",
            InvalidNerve(_) => "invalid-nerve",
            InvalidParams(_) => "invalid-params",
            Path(_) => "path",
            Serialization(_) => "serialization",
            Nesting(_) => "nesting",
            UnivalenceUncertified { .. } => "univalence-uncertified",
            InversionDiverged(_) => "inversion-diverged",
            ResonantMode { .. } => "resonant-mode",
            CoboundaryFailure { .. } => "coboundary-condition-failure",
            ScheduleViolation { .. } => "schedule-violation",
            ConvergenceViolation { .. } => "convergence-violation",
            Truncation { .. } => "truncation",
            NonConvergence { .. } => "non-convergence",
            Extraction(_) => "extraction",
            Verification { .. } => "verification",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
