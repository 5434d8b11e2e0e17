//! Scenario documents, the built-in scenario builders, simultaneous
//! linearization of the genus-2 suspension and machine-readable diagnostics.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::circle::{phase_difference, CircleDiffeo};
use crate::cocycle::Nerve;
use crate::engine::{default_eta0, fit_c0, Conjugacy, KamParams, CONJUGACY_TOL, RESIDUAL_SAMPLES};
use crate::error::{Error, ErrorClass, Result};
use crate::series::{unit_circle, LaurentSeries};
use crate::system::TransitionSystem;

pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_N: usize = 64;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 40;
pub const DEFAULT_MU: f64 = 2.0;

/// Parameters as written in a scenario; omitted fields take defaults when resolved.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    #[serde(rename = "C0", default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta0: Option<f64>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strict_schedule: Option<bool>,
}

impl ParamsSpec {
    /// Fills defaults: `σ₀` from the system width, `η₀` at 95% of its limit,
    /// and `C₀` fitted from the amplification spectrum of the system's phases.
    pub fn resolve(&self, system: &TransitionSystem) -> Result<KamParams> {
        let mu = self.mu.unwrap_or(DEFAULT_MU);
        let sigma0 = self.sigma0.unwrap_or(system.width());
        let n = self.n.unwrap_or(DEFAULT_N);
        if !(mu > 1.0) {
            return Err(Error::InvalidParams(format!("mu = {mu} must exceed 1")));
        }
        let c0 = match self.c0 {
            Some(c) => c,
            None => fit_c0(&system.bundle()?, n, mu)?,
        };
        KamParams::new(
            c0,
            mu,
            sigma0,
            self.eta0.unwrap_or_else(|| default_eta0(mu, sigma0)),
            n,
            self.tol.unwrap_or(DEFAULT_TOL),
            self.max_iter.unwrap_or(DEFAULT_MAX_ITER),
            self.strict_schedule.unwrap_or(true),
        )
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    #[serde(default = "yes")]
    pub trace_csv: bool,
    #[serde(default = "yes")]
    pub conjugacy_json: bool,
    #[serde(default = "yes")]
    pub diagnostics_json: bool,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            trace_csv: true,
            conjugacy_json: true,
            diagnostics_json: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub system: TransitionSystem,
    pub params: ParamsSpec,
    pub outputs: Outputs,
}

#[derive(Serialize)]
struct ScenarioOut<'a> {
    schema: u32,
    name: &'a str,
    system: &'a TransitionSystem,
    params: &'a ParamsSpec,
    outputs: &'a Outputs,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioIn {
    schema: u32,
    name: String,
    system: TransitionSystem,
    #[serde(default)]
    params: ParamsSpec,
    #[serde(default)]
    outputs: Outputs,
}

impl Serialize for Scenario {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ScenarioOut {
            schema: SCHEMA_VERSION,
            name: &self.name,
            system: &self.system,
            params: &self.params,
            outputs: &self.outputs,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Scenario {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = ScenarioIn::deserialize(deserializer)?;
        if s.schema != SCHEMA_VERSION {
            return Err(serde::de::Error::custom(format!(
                "unsupported schema {} (expected {SCHEMA_VERSION})",
                s.schema
            )));
        }
        Ok(Scenario {
            name: s.name,
            system: s.system,
            params: s.params,
            outputs: s.outputs,
        })
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn resolve_params(&self) -> Result<KamParams> {
        self.params.resolve(&self.system)
    }
}

/// One chart with a self-loop: the classical circle-map linearization problem.
pub fn build_single_chart(theta: f64, hat: LaurentSeries, sigma0: f64) -> Result<Scenario> {
    let nerve = Nerve::from_ids(&["U"], &[("U", "U", "f")], &[])?;
    let hat = hat.with_width(sigma0)?;
    let f = CircleDiffeo::new(TAU * theta, hat)?;
    Ok(Scenario {
        name: format!("single-chart theta={theta}"),
        system: TransitionSystem::new(nerve, vec![f], sigma0)?,
        params: ParamsSpec {
            sigma0: Some(sigma0),
            ..Default::default()
        },
        outputs: Outputs::default(),
    })
}

/// `c₁ w - conj(c₁) w⁻¹`, the simplest symmetric hat.
pub fn first_harmonic_hat(c1: Complex64, n: usize, width: f64) -> Result<LaurentSeries> {
    LaurentSeries::from_terms(n, width, [(1, c1), (-1, -c1.conj())])
}

pub const GENUS2_CHARTS: [&str; 3] = ["U0", "U1", "U2"];
pub const PLUS: &str = "+";
pub const MINUS: &str = "-";

/// Charts `U0, U1, U2`; edges `U0 -> Uj` labeled `+` carrying `f_j` and labeled
/// `-` carrying the identity; no triple overlaps.
pub fn build_genus2(f1: CircleDiffeo, f2: CircleDiffeo, sigma0: f64) -> Result<Scenario> {
    let nerve = Nerve::from_ids(
        &GENUS2_CHARTS,
        &[
            ("U0", "U1", PLUS),
            ("U0", "U1", MINUS),
            ("U0", "U2", PLUS),
            ("U0", "U2", MINUS),
        ],
        &[],
    )?;
    let n = f1.truncation().max(f2.truncation());
    let id = CircleDiffeo::identity(n, sigma0)?;
    Ok(Scenario {
        name: "genus-2 suspension".into(),
        system: TransitionSystem::new(nerve, vec![f1, id.clone(), f2, id], sigma0)?,
        params: ParamsSpec {
            sigma0: Some(sigma0),
            ..Default::default()
        },
        outputs: Outputs::default(),
    })
}

/// `ψ⁻¹ ∘ R_θ ∘ ψ` expanded to truncation `n` on width `width`, where `ψ` has
/// phase zero; a pair built with a common `ψ` is simultaneously linearizable.
pub fn conjugated_rotation(psi: &CircleDiffeo, theta: f64, n: usize, width: f64) -> Result<CircleDiffeo> {
    if psi.phase() != 0.0 {
        return Err(Error::InvalidMap("conjugator must have zero phase".into()));
    }
    let t = Complex64::from_polar(1.0, TAU * theta);
    let mut scale: f64 = 0.0;
    let mut logs = Vec::with_capacity(4 * n);
    for w in unit_circle(4 * n) {
        let p = psi.hat().horner(w);
        let v = t * w * p.exp();
        let (_, log_ratio) = psi.preimage(v)?;
        scale = scale.max(p.norm()).max(log_ratio.norm());
        logs.push(p + log_ratio);
    }
    let (f, _) = CircleDiffeo::from_log_samples(TAU * theta, &logs, n, width, scale)?;
    Ok(f)
}

/// Genus-2 scenario whose generators are rotations by `θ₁, θ₂` conjugated by
/// the common map with hat `ε(w - w⁻¹)`.
pub fn genus2_consistent(theta1: f64, theta2: f64, eps: f64, n: usize, sigma0: f64) -> Result<Scenario> {
    let psi = CircleDiffeo::new(0.0, first_harmonic_hat(Complex64::new(eps, 0.0), n, sigma0)?)?;
    let f1 = conjugated_rotation(&psi, theta1, n, sigma0)?;
    let f2 = conjugated_rotation(&psi, theta2, n, sigma0)?;
    let mut s = build_genus2(f1, f2, sigma0)?;
    s.name = format!("genus-2 consistent eps={eps}");
    Ok(s)
}

/// Genus-2 scenario with the same first-harmonic hat on both generators; its
/// mode-1 data is not a coboundary.
pub fn genus2_inconsistent(theta1: f64, theta2: f64, eps: f64, n: usize, sigma0: f64) -> Result<Scenario> {
    let hat = first_harmonic_hat(Complex64::new(eps, 0.0), n, sigma0)?;
    let f1 = CircleDiffeo::new(TAU * theta1, hat.clone())?;
    let f2 = CircleDiffeo::new(TAU * theta2, hat)?;
    let mut s = build_genus2(f1, f2, sigma0)?;
    s.name = format!("genus-2 inconsistent eps={eps}");
    Ok(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct SimultaneousLinearization {
    /// Common conjugator: `Φ₀⁻¹ ∘ f_j ∘ Φ₀` is the rotation by `rotations[j]`.
    pub psi0: CircleDiffeo,
    pub rotations: [f64; 2],
    /// `max |Φ₀(e^{iφ_j} u) - f_j(Φ₀(u))|`.
    pub residuals: [f64; 2],
    /// `max |Φ_j(t⁻ u) - Φ₀(u)|` along the identity edges.
    pub minus_residuals: [f64; 2],
}

fn genus2_edges(system: &TransitionSystem) -> Result<[[usize; 2]; 2]> {
    let nerve = system.nerve();
    if nerve.charts() != GENUS2_CHARTS.map(String::from).as_slice() {
        return Err(Error::Extraction(format!(
            "expected charts {GENUS2_CHARTS:?}, got {:?}",
            nerve.charts()
        )));
    }
    let find = |to: usize, label: &str| {
        nerve
            .edges()
            .iter()
            .position(|e| e.from == 0 && e.to == to && e.label == label)
            .ok_or_else(|| Error::Extraction(format!("missing edge U0->U{to}[{label}]")))
    };
    Ok([[find(1, PLUS)?, find(1, MINUS)?], [find(2, PLUS)?, find(2, MINUS)?]])
}

/// Collapses the three charts of a genus-2 conjugacy onto `U0`.
pub fn extract_simultaneous(conj: &Conjugacy, system: &TransitionSystem) -> Result<SimultaneousLinearization> {
    let edges = genus2_edges(system)?;
    if conj.maps.len() != 3 || conj.linear.phases().len() != system.maps().len() {
        return Err(Error::Extraction("conjugacy does not match the genus-2 nerve".into()));
    }
    let phi0 = &conj.maps[0];
    let phases = conj.linear.phases();
    let mut rotations = [0.0; 2];
    let mut residuals = [0.0; 2];
    let mut minus_residuals = [0.0; 2];
    for (j, [plus, minus]) in edges.iter().enumerate() {
        let chart = j + 1;
        let t_minus = Complex64::from_polar(1.0, phases[*minus]);
        let mut worst: f64 = 0.0;
        for u in unit_circle(RESIDUAL_SAMPLES) {
            worst = worst.max((conj.maps[chart].apply(t_minus * u) - phi0.apply(u)).norm());
        }
        minus_residuals[j] = worst;
        if worst > CONJUGACY_TOL {
            return Err(Error::Extraction(format!(
                "identity-edge relation on U{chart} fails: residual {worst:e} > {CONJUGACY_TOL:e}"
            )));
        }
        // Φ_j(x) = Φ₀(x / t⁻), so f_j ∘ Φ₀ = Φ₀ ∘ (rotation by φ⁺ - φ⁻).
        let rotation = (phases[*plus] - phases[*minus]).rem_euclid(TAU);
        let t = Complex64::from_polar(1.0, rotation);
        let f = &system.maps()[*plus];
        let mut worst: f64 = 0.0;
        for u in unit_circle(RESIDUAL_SAMPLES) {
            worst = worst.max((phi0.apply(t * u) - f.apply(phi0.apply(u))).norm());
        }
        residuals[j] = worst;
        if worst > CONJUGACY_TOL {
            return Err(Error::Extraction(format!(
                "common conjugator fails for f_{}: residual {worst:e} > {CONJUGACY_TOL:e}",
                j + 1
            )));
        }
        rotations[j] = rotation;
    }
    Ok(SimultaneousLinearization {
        psi0: phi0.clone(),
        rotations,
        residuals,
        minus_residuals,
    })
}

/// Distance between an extracted rotation and `2π ρ(f)`, wrapped to `(-π, π]`.
pub fn rotation_mismatch(rotation: f64, f: &CircleDiffeo, iters: usize) -> Result<f64> {
    let rho = f.rotation_number(iters)?;
    Ok(phase_difference(rotation, TAU * rho.value))
}

/// Machine-readable run outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_certificate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge: Option<String>,
    #[serde(rename = "loop", default, skip_serializing_if = "Option::is_none")]
    pub loop_desc: Option<String>,
    pub message: String,
}

impl Diagnostics {
    pub fn success(message: impl Into<String>) -> Self {
        Self {
            outcome: "success".into(),
            failed_certificate: None,
            mode: None,
            edge: None,
            loop_desc: None,
            message: message.into(),
        }
    }

    pub fn from_error(err: &Error) -> Self {
        let outcome = match err.class() {
            ErrorClass::Validation => "validation-error",
            ErrorClass::Certificate => "certificate-failure",
        };
        let (failed_certificate, mode, edge, loop_desc) = match err {
            Error::ResonantMode { mode, loop_desc, .. } => {
                (Some("resonance".to_string()), Some(*mode), None, Some(loop_desc.clone()))
            }
            Error::CoboundaryFailure { mode, .. } => {
                (Some("coboundary-condition".to_string()), Some(*mode), None, None)
            }
            Error::ScheduleViolation { certificate, edge, .. } => {
                (Some(certificate.clone()), None, edge.clone(), None)
            }
            Error::ConvergenceViolation { .. } => (Some("inductive-bound".to_string()), None, None, None),
            e if e.class() == ErrorClass::Certificate => (Some(e.kind().to_string()), None, None, None),
            _ => (None, None, None, None),
        };
        Self {
            outcome: outcome.into(),
            failed_certificate,
            mode,
            edge,
            loop_desc,
            message: format!("{}: {err}", err.kind()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golden() -> f64 {
        (5f64.sqrt() - 1.0) / 2.0
    }

    #[test]
    fn params_defaults() {
        let s = build_single_chart(golden(), LaurentSeries::zeros(8, 1.0).unwrap(), 1.0).unwrap();
        let p = s.resolve_params().unwrap();
        assert_eq!(p.n, 64);
        assert_eq!(p.tol, 1e-10);
        assert_eq!(p.max_iter, 40);
        assert_eq!(p.mu, 2.0);
        assert!(p.strict_schedule);
        assert!(p.c0 > 0.0);
    }

    #[test]
    fn scenario_round_trip() {
        let hat = first_harmonic_hat(Complex64::new(1e-4, 2e-5), 64, 1.0).unwrap();
        let s = build_single_chart(golden(), hat, 1.0).unwrap();
        let back = Scenario::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn schema_checked() {
        let s = build_single_chart(golden(), LaurentSeries::zeros(4, 1.0).unwrap(), 1.0).unwrap();
        let text = s.to_json().unwrap().replace("\"schema\": 1", "\"schema\": 2");
        assert!(matches!(Scenario::from_json(&text), Err(Error::Serialization(_))));
    }

    #[test]
    fn asymmetric_hat_rejected() {
        let hat = LaurentSeries::from_terms(4, 1.0, [(1, Complex64::new(1e-3, 0.0))]).unwrap();
        assert!(matches!(build_single_chart(golden(), hat, 1.0), Err(Error::InvalidMap(_))));
    }

    #[test]
    fn genus2_shape() {
        let f = CircleDiffeo::rotation(1.0, 8, 1.0).unwrap();
        let s = build_genus2(f.clone(), f, 1.0).unwrap();
        assert_eq!(s.system.nerve().edges().len(), 4);
        assert!(s.system.nerve().triples().is_empty());
        assert!(s.system.maps()[1].is_rotation() && s.system.maps()[1].phase() == 0.0);
    }

    #[test]
    fn conjugated_rotation_is_conjugate() {
        let psi = CircleDiffeo::new(0.0, first_harmonic_hat(Complex64::new(1e-3, 0.0), 32, 1.0).unwrap()).unwrap();
        let f = conjugated_rotation(&psi, golden(), 32, 1.0).unwrap();
        let t = Complex64::from_polar(1.0, TAU * golden());
        for w in unit_circle(50) {
            assert!((psi.apply(f.apply(w)) - t * psi.apply(w)).norm() < 1e-14);
        }
    }

    #[test]
    fn diagnostics_fields() {
        let d = Diagnostics::from_error(&Error::ResonantMode {
            mode: 3,
            loop_desc: "U -[f]-> U".into(),
            holonomy: 0.0,
        });
        assert_eq!(d.outcome, "certificate-failure");
        assert_eq!(d.mode, Some(3));
        assert_eq!(d.loop_desc.as_deref(), Some("U -[f]-> U"));
        let d = Diagnostics::from_error(&Error::InvalidParams("x".into()));
        assert_eq!(d.outcome, "validation-error");
        assert_eq!(d.failed_certificate, None);
    }
}
