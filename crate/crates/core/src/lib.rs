//! Linearization of circle-diffeomorphism transition systems over covering
//! nerves by a KAM-type iteration with certified majorant bookkeeping.
//!
//! The building blocks are [`LaurentSeries`] (truncated series on annuli),
//! [`CircleDiffeo`] (maps `w ↦ w·e^{iφ + f̂(w)}`), the nerve and flat-bundle
//! types with the per-mode coboundary solver, and the iteration itself in
//! [`engine`].

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod circle;
pub mod cocycle;
pub mod engine;
pub mod error;
pub mod scenario;
pub mod series;
pub mod system;

pub use circle::{CircleDiffeo, ExpansionReport, InvertOptions, RotationEstimate};
pub use cocycle::{
    amplification_spectrum, fit_diophantine, holonomy, solve_mode, DiophantineFit, Edge, EdgeStep,
    ModeAmplification, ModeCochainSolution, Nerve, UnitaryFlatBundle,
};
pub use engine::{
    alpha_vs_rotation, gate_check, kam_step, run, Conjugacy, GateReport, IterationTrace, KamParams,
    RunFailure, RunOutput, ScheduleEntry, StepReport, TraceRow,
};
pub use error::{Error, ErrorClass, Result};
pub use num_complex::Complex64;
pub use scenario::{
    build_genus2, build_single_chart, extract_simultaneous, Diagnostics, ParamsSpec, Scenario,
    SimultaneousLinearization,
};
pub use series::{coeffs_from_circle, DecayReport, LaurentSeries};
pub use system::TransitionSystem;
