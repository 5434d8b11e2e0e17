//! The linearization iteration: parameter schedule, per-step coordinate
//! changes, certificate bookkeeping, transition renewal and the composed
//! conjugacy.
//!
//! Conventions: `ψ_{j,m}(w) = w·e^{ψ̂_{j,m}(w)}` maps step-`m+1` coordinates to
//! step-`m` coordinates, so `Φ_j = ψ_{j,0} ∘ … ∘ ψ_{j,M-1}` maps final
//! coordinates to initial ones and `Φ_k(t_kj u) = f_kj(Φ_j(u))`.

use std::f64::consts::PI;
use std::fmt;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::gamma::gamma;

use crate::circle::{phase_difference, CircleDiffeo};
use crate::cocycle::{amplification_spectrum_partial, fit_diophantine, Edge, ModeOperator, Nerve, UnitaryFlatBundle};
use crate::error::{Error, Result};
use crate::series::{unit_circle, LaurentSeries, NOISE_FLOOR_REL};
use crate::system::TransitionSystem;

/// Samples used for the conjugation residual.
pub const RESIDUAL_SAMPLES: usize = 128;
/// Acceptance tolerance on the conjugation residual.
pub const CONJUGACY_TOL: f64 = 1e-8;
/// Largest admissible per-step phase change on any edge.
pub const PHASE_TOL: f64 = 1e-10;
/// Truncation tail allowed per step, relative to `δ_m`.
pub const TAIL_REL: f64 = 1e-3;
/// Relative slack in comparisons against the schedule, which hits its own
/// bounds with equality when `δ_0` is the second branch of its minimum.
pub const SCHEDULE_SLACK: f64 = 1e-12;

const GAMMA_NOTE: &str = "C1 uses Gamma(mu) in place of (mu-1)!";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KamParams {
    #[serde(rename = "C0")]
    pub c0: f64,
    pub mu: f64,
    pub sigma0: f64,
    pub eta0: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub strict_schedule: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleEntry {
    pub m: usize,
    pub sigma: f64,
    pub eta: f64,
    pub delta: f64,
}

impl KamParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c0: f64,
        mu: f64,
        sigma0: f64,
        eta0: f64,
        n: usize,
        tol: f64,
        max_iter: usize,
        strict_schedule: bool,
    ) -> Result<Self> {
        let p = Self {
            c0,
            mu,
            sigma0,
            eta0,
            n,
            tol,
            max_iter,
            strict_schedule,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return bad(format!("C0 = {} must be positive", self.c0));
        }
        if !(self.mu > 1.0 && self.mu.is_finite()) {
            return bad(format!("mu = {} must exceed 1", self.mu));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad(format!("sigma0 = {} must be positive", self.sigma0));
        }
        let limit = eta_limit(self.mu, self.sigma0);
        if !(self.eta0 > 0.0 && self.eta0 < limit) {
            return bad(format!("eta0 = {} must lie in (0, {limit})", self.eta0));
        }
        if self.n == 0 {
            return bad("truncation N must be at least 1".into());
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol = {} must be positive", self.tol));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        Ok(())
    }

    /// `r = μ^{-1/(μ+1)}`.
    pub fn ratio(&self) -> f64 {
        self.mu.powf(-1.0 / (self.mu + 1.0))
    }

    /// `C₁ = 2 C₀ σ₀^μ Γ(μ) / (1 - e^{-σ₀})^μ`.
    pub fn c1(&self) -> f64 {
        2.0 * self.c0 * self.sigma0.powf(self.mu) * gamma(self.mu)
            / (1.0 - (-self.sigma0).exp()).powf(self.mu)
    }

    /// `(1 + e^{σ₀}) C₁`, the constant of the quadratic estimate.
    pub fn contraction_constant(&self) -> f64 {
        (1.0 + self.sigma0.exp()) * self.c1()
    }

    /// `η^{μ+1} / ((1 + e^{σ₀}) C₁ μ)`.
    pub fn inductive_bound(&self, eta: f64) -> f64 {
        eta.powf(self.mu + 1.0) / (self.contraction_constant() * self.mu)
    }

    /// `δ₀ = min{η₀, η₀^{μ+1}/((1+e^{σ₀})C₁μ)}`; also the admission gate.
    pub fn gate(&self) -> f64 {
        self.eta0.min(self.inductive_bound(self.eta0))
    }

    /// `σ∞ = σ₀ - 4η₀/(1 - r)`.
    pub fn sigma_limit(&self) -> f64 {
        self.sigma0 - 4.0 * self.eta0 / (1.0 - self.ratio())
    }

    /// Closed form of the schedule at step `m`.
    pub fn schedule(&self, m: usize) -> ScheduleEntry {
        let r = self.ratio();
        let rm = r.powi(m as i32);
        let eta = self.eta0 * rm;
        let sigma = self.sigma0 - 4.0 * self.eta0 * (1.0 - rm) / (1.0 - r);
        // δ_m = B_m q^{2^m} with B_m the inductive bound at η_m and q = δ₀/B₀ <= 1.
        let q = self.gate() / self.inductive_bound(self.eta0);
        let delta = if q >= 1.0 {
            self.inductive_bound(eta)
        } else {
            self.inductive_bound(eta) * (2f64.powi(m as i32) * q.ln()).exp()
        };
        ScheduleEntry {
            m,
            sigma,
            eta,
            delta,
        }
    }

    /// The schedule by direct recursion, entries `0..=steps`.
    pub fn schedule_recursive(&self, steps: usize) -> Vec<ScheduleEntry> {
        let r = self.ratio();
        let k = self.contraction_constant();
        let mut out = Vec::with_capacity(steps + 1);
        let (mut sigma, mut eta, mut delta) = (self.sigma0, self.eta0, self.gate());
        for m in 0..=steps {
            out.push(ScheduleEntry {
                m,
                sigma,
                eta,
                delta,
            });
            sigma -= 4.0 * eta;
            delta = k * delta * delta / eta.powf(self.mu + 1.0);
            eta *= r;
        }
        out
    }
}

/// `min{π, (1 - μ^{-1/(μ+1)}) σ₀/4}`, the exclusive upper bound for `η₀`.
pub fn eta_limit(mu: f64, sigma0: f64) -> f64 {
    let r = mu.powf(-1.0 / (mu + 1.0));
    PI.min((1.0 - r) * sigma0 / 4.0)
}

/// Default `η₀`: 95% of the admissible limit.
pub fn default_eta0(mu: f64, sigma0: f64) -> f64 {
    0.95 * eta_limit(mu, sigma0)
}

/// `C₀` fitted from the measured amplification of every non-resonant mode `|n| <= N`.
pub fn fit_c0(bundle: &UnitaryFlatBundle, n: usize, mu: f64) -> Result<f64> {
    let (spectrum, _) = amplification_spectrum_partial(bundle, n)?;
    if spectrum.is_empty() {
        return Err(Error::InvalidParams(
            "C0 cannot be fitted: every mode is resonant; supply C0 explicitly".into(),
        ));
    }
    Ok(fit_diophantine(&spectrum, mu)?.c0)
}

#[derive(Debug, Clone, Serialize)]
pub struct EdgeGate {
    pub edge: String,
    pub majorant: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GateReport {
    pub gate: f64,
    pub eta0: f64,
    pub inductive_bound: f64,
    pub c1: f64,
    pub max_majorant: f64,
    /// `gate - max_majorant`; positive when admitted.
    pub margin: f64,
    pub passed: bool,
    pub edges: Vec<EdgeGate>,
}

impl GateReport {
    pub fn first_failure(&self) -> Option<&EdgeGate> {
        self.edges.iter().find(|e| !e.pass)
    }
}

/// Compares every certified `‖f̂_e‖_{σ₀}` with `δ₀`.
pub fn gate_check(system: &TransitionSystem, params: &KamParams) -> Result<GateReport> {
    let gate = params.gate();
    let mut edges = Vec::with_capacity(system.maps().len());
    for (i, f) in system.maps().iter().enumerate() {
        let majorant = f.hat().majorant_norm(params.sigma0)?;
        edges.push(EdgeGate {
            edge: system.nerve().edge_name(i),
            majorant,
            pass: majorant < gate,
        });
    }
    let max_majorant = edges.iter().map(|e| e.majorant).fold(0.0, f64::max);
    Ok(GateReport {
        gate,
        eta0: params.eta0,
        inductive_bound: params.inductive_bound(params.eta0),
        c1: params.c1(),
        max_majorant,
        margin: gate - max_majorant,
        passed: edges.iter().all(|e| e.pass),
        edges,
    })
}

/// A certificate that failed during a step.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub step: usize,
    pub certificate: String,
    pub edge: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub m: usize,
    pub schedule: ScheduleEntry,
    /// Certified `max_e ‖f̂_{e,m}‖_{σ_m}`.
    pub hat_norm: f64,
    /// Certified `max_e ‖f̂_{e,m+1}‖_{σ_{m+1}}`.
    pub next_hat_norm: f64,
    /// Sampled sup of the renewed hats on the width-`σ_{m+1}` annulus, for diagnosis.
    pub next_hat_empirical: f64,
    /// `(1 + e^{σ₀}) C₁ h_m² / η_m^{μ+1}`.
    pub quadratic_bound: f64,
    /// `max_j ‖ψ̂_{j,m}‖_{σ_m - 4η_m}`.
    pub psi_norm: f64,
    /// `max_j sup |d/dζ ψ̂_{j,m}(e^ζ)|` on `|Re ζ| < σ_m - η_m` (majorant).
    pub psi_derivative: f64,
    pub worst_mode_residual: f64,
    pub tail_mass: f64,
    /// Largest per-edge phase change.
    pub phase_drift: f64,
    /// Largest reality projection applied to a coordinate change.
    pub reality_projection: f64,
    pub modes_solved: usize,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub system: TransitionSystem,
    pub psi: Vec<CircleDiffeo>,
    pub report: StepReport,
}

struct Certifier<'a> {
    strict: bool,
    step: usize,
    nerve: &'a Nerve,
    violations: Vec<Violation>,
}

impl Certifier<'_> {
    fn check(&mut self, ok: bool, certificate: &str, edge: Option<usize>, detail: impl FnOnce() -> String) -> Result<()> {
        if ok {
            return Ok(());
        }
        let v = Violation {
            step: self.step,
            certificate: certificate.to_string(),
            edge: edge.map(|e| self.nerve.edge_name(e)),
            detail: detail(),
        };
        if self.strict {
            return Err(Error::ScheduleViolation {
                step: v.step,
                certificate: v.certificate,
                edge: v.edge,
                detail: v.detail,
            });
        }
        self.violations.push(v);
        Ok(())
    }
}

fn within(value: f64, bound: f64) -> bool {
    value <= bound * (1.0 + SCHEDULE_SLACK)
}

/// One renewal step `f_{m+1} = ψ_k⁻¹ ∘ f_m ∘ ψ_j` on every edge.
pub fn kam_step(system: &TransitionSystem, m: usize, params: &KamParams) -> Result<StepOutput> {
    let sched = params.schedule(m);
    let next = params.schedule(m + 1);
    let (sigma, eta) = (sched.sigma, sched.eta);
    if system.width() < sigma * (1.0 - 1e-12) {
        return Err(Error::InvalidParams(format!(
            "system width {} is below the step-{m} width {sigma}",
            system.width()
        )));
    }
    let nerve = system.nerve();
    let mut cert = Certifier {
        strict: params.strict_schedule,
        step: m,
        nerve,
        violations: Vec::new(),
    };
    let h = system.max_hat_majorant(sigma)?;

    if !(h < sched.delta) {
        let worst = (0..system.maps().len())
            .max_by(|&a, &b| {
                let na = system.maps()[a].hat().majorant_norm(sigma).unwrap_or(0.0);
                let nb = system.maps()[b].hat().majorant_norm(sigma).unwrap_or(0.0);
                na.total_cmp(&nb)
            })
            .map(|e| nerve.edge_name(e));
        if params.strict_schedule {
            if m == 0 {
                return Err(Error::ScheduleViolation {
                    step: 0,
                    certificate: "gate".into(),
                    edge: worst,
                    detail: format!("hat majorant {h:e} is not below delta_0 = {:e}", sched.delta),
                });
            }
            return Err(Error::ConvergenceViolation {
                step: m,
                norm: h,
                delta: sched.delta,
            });
        }
        cert.violations.push(Violation {
            step: m,
            certificate: if m == 0 { "gate" } else { "inductive-bound" }.into(),
            edge: worst,
            detail: format!("hat majorant {h:e} is not below delta_{m} = {:e}", sched.delta),
        });
    }

    // Mode data and its exponential decay.
    for (e, f) in system.maps().iter().enumerate() {
        let norm = f.hat().majorant_norm(sigma)?;
        let decay = f.hat().with_width(sigma)?.decay_check(norm);
        cert.check(decay.passed(), "coefficient-decay", Some(e), || {
            format!("indices {:?} exceed the decay bound", decay.violations())
        })?;
    }

    let bundle = system.bundle()?;
    let charts = nerve.charts().len();
    let n_max = params.n;
    let mut a = vec![vec![Complex64::new(0.0, 0.0); 2 * n_max + 1]; charts];
    let max_coeff = system
        .maps()
        .iter()
        .map(|f| f.hat().max_abs_coeff())
        .fold(0.0, f64::max);
    let mut worst_residual: f64 = 0.0;
    let mut modes_solved = 0;
    for k in 1..=n_max as i64 {
        for n in [k, -k] {
            let b: Vec<Complex64> = system.maps().iter().map(|f| f.hat().coeff(n)).collect();
            let bmax = b.iter().map(|z| z.norm()).fold(0.0, f64::max);
            if bmax == 0.0 {
                continue;
            }
            let tolerance = (1e-10 * bmax)
                .max(h * h)
                .max(16.0 * NOISE_FLOOR_REL * max_coeff);
            let sol = ModeOperator::new(&bundle, n)?.solve(&b, tolerance)?;
            worst_residual = worst_residual.max(sol.residual);
            modes_solved += 1;
            for (j, aj) in sol.a.iter().enumerate() {
                a[j][(n + n_max as i64) as usize] = *aj;
            }
        }
    }

    let psi_width = sigma - eta;
    let mut reality_projection: f64 = 0.0;
    let mut psi = Vec::with_capacity(charts);
    for coeffs in a {
        let mut hat = LaurentSeries::from_terms(
            n_max,
            psi_width,
            coeffs
                .into_iter()
                .enumerate()
                .map(|(i, c)| (i as i64 - n_max as i64, c)),
        )?;
        reality_projection = reality_projection.max(hat.project_reality());
        psi.push(CircleDiffeo::new(0.0, hat)?);
    }
    let reality_scale = psi.iter().map(|p| p.hat().max_abs_coeff()).fold(0.0, f64::max);
    cert.check(reality_projection <= 1e-8 * reality_scale.max(1.0), "psi-reality", None, || {
        format!("coordinate change needed a reality projection of {reality_projection:e}")
    })?;

    // Size of the coordinate changes against the small-divisor estimate.
    let c1 = params.c1();
    let chart_norm = |j: usize, s: f64| psi[j].hat().majorant_norm(s);
    for nu in 1..=4 {
        let lambda = nu as f64 * eta;
        let bound = c1 * h * lambda.powf(-params.mu);
        for j in 0..charts {
            let norm = chart_norm(j, sigma - lambda)?;
            cert.check(within(norm, bound), "psi-bound", None, || {
                format!(
                    "chart {}: |psi|_(sigma-{nu}eta) = {norm:e} exceeds C1 h lambda^-mu = {bound:e}",
                    nerve.charts()[j]
                )
            })?;
        }
    }
    let deriv_limit = 1.0 / (1.0 + params.sigma0.exp());
    let mut psi_derivative: f64 = 0.0;
    let mut psi_norm: f64 = 0.0;
    for (j, p) in psi.iter().enumerate() {
        let d = p.hat().log_derivative_majorant(psi_width)?;
        psi_derivative = psi_derivative.max(d);
        cert.check(d <= deriv_limit, "psi-derivative", None, || {
            format!(
                "chart {}: derivative majorant {d:e} exceeds 1/(1+e^sigma0) = {deriv_limit:e}",
                nerve.charts()[j]
            )
        })?;
        let inner = chart_norm(j, sigma - 4.0 * eta)?;
        psi_norm = psi_norm.max(inner);
        cert.check(inner < eta, "nesting-psi", None, || {
            format!("chart {}: |psi|_(sigma-4eta) = {inner:e} >= eta = {eta:e}", nerve.charts()[j])
        })?;
        let outer = chart_norm(j, sigma - eta)?;
        cert.check(outer < eta, "nesting-inverse", None, || {
            format!("chart {}: |psi|_(sigma-eta) = {outer:e} >= eta = {eta:e}", nerve.charts()[j])
        })?;
    }
    for (e, f) in system.maps().iter().enumerate() {
        let norm = f.hat().majorant_norm(sigma - 3.0 * eta)?;
        cert.check(norm < eta, "nesting-transition", Some(e), || {
            format!("|f|_(sigma-3eta) = {norm:e} >= eta = {eta:e}")
        })?;
    }

    // Renewal, sampled on the unit circle in log coordinates.
    let samples = 4 * n_max;
    let mut maps = Vec::with_capacity(system.maps().len());
    let mut tail_mass: f64 = 0.0;
    let mut phase_drift: f64 = 0.0;
    for (e, (edge, f)) in nerve.edges().iter().zip(system.maps()).enumerate() {
        let (pj, pk) = (&psi[edge.from], &psi[edge.to]);
        let i_phi = Complex64::new(0.0, f.phase());
        let mut scale: f64 = 0.0;
        let mut logs = Vec::with_capacity(samples);
        for w in unit_circle(samples) {
            let psi_j = pj.hat().horner(w);
            let fv = f.hat().horner(w * psi_j.exp());
            let g = psi_j + fv;
            let v = w * (i_phi + g).exp();
            let (_, log_ratio) = pk.preimage(v)?;
            // log_ratio = log(u/v) = -s with s = ψ̂_k(u).
            scale = scale.max(psi_j.norm()).max(fv.norm()).max(log_ratio.norm());
            logs.push(g + log_ratio);
        }
        let (renewed, report) = CircleDiffeo::from_log_samples(f.phase(), &logs, n_max, next.sigma, scale)?;
        let limit = TAIL_REL * sched.delta;
        if report.tail_mass > limit {
            return Err(Error::Truncation {
                step: m,
                tail: report.tail_mass,
                limit,
            });
        }
        tail_mass = tail_mass.max(report.tail_mass);
        let drift = phase_difference(renewed.phase(), f.phase()).abs();
        phase_drift = phase_drift.max(drift);
        cert.check(drift <= PHASE_TOL, "phase-invariance", Some(e), || {
            format!("phase moved by {drift:e}")
        })?;
        maps.push(renewed);
    }
    let renewed = TransitionSystem::from_parts_unchecked(nerve.clone(), maps, next.sigma);
    let next_hat_norm = renewed.max_hat_majorant(next.sigma)?;
    let next_hat_empirical = renewed
        .maps()
        .iter()
        .map(|f| f.hat().empirical_sup_norm(next.sigma, samples))
        .try_fold(0.0, |acc: f64, v| v.map(|v| acc.max(v)))?;

    if !(next_hat_norm < next.delta) {
        if params.strict_schedule {
            return Err(Error::ConvergenceViolation {
                step: m + 1,
                norm: next_hat_norm,
                delta: next.delta,
            });
        }
        cert.violations.push(Violation {
            step: m,
            certificate: "inductive-bound".into(),
            edge: None,
            detail: format!(
                "renewed hat majorant {next_hat_norm:e} is not below delta_{} = {:e}",
                m + 1,
                next.delta
            ),
        });
    }

    Ok(StepOutput {
        system: renewed,
        psi,
        report: StepReport {
            m,
            schedule: sched,
            hat_norm: h,
            next_hat_norm,
            next_hat_empirical,
            quadratic_bound: params.contraction_constant() * h * h / eta.powf(params.mu + 1.0),
            psi_norm,
            psi_derivative,
            worst_mode_residual: worst_residual,
            tail_mass,
            phase_drift,
            reality_projection,
            modes_solved,
            violations: cert.violations,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub m: usize,
    pub sigma: f64,
    pub eta: f64,
    pub delta: f64,
    pub max_hat_norm: f64,
    pub worst_mode_residual: f64,
    pub tail_mass: f64,
    pub wall_ms: f64,
}

pub const TRACE_CSV_HEADER: &str = "m,sigma,eta,delta,max_hat_norm,worst_mode_residual,tail_mass,wall_ms";

#[derive(Debug, Clone, Default, Serialize)]
pub struct IterationTrace {
    pub notes: Vec<String>,
    pub rows: Vec<TraceRow>,
    pub steps: Vec<StepReport>,
}

impl IterationTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:.3}\n",
                r.m, r.sigma, r.eta, r.delta, r.max_hat_norm, r.worst_mode_residual, r.tail_mass, r.wall_ms
            ));
        }
        out
    }

    pub fn violations(&self) -> impl Iterator<Item = &Violation> {
        self.steps.iter().flat_map(|s| s.violations.iter())
    }
}

/// Per-chart coordinate changes taking the system to its linear part.
#[derive(Debug, Clone, PartialEq)]
pub struct Conjugacy {
    pub maps: Vec<CircleDiffeo>,
    pub linear: UnitaryFlatBundle,
    pub final_width: f64,
}

impl Conjugacy {
    /// `max |Φ_k(t_kj u) - f_kj(Φ_j(u))|` over all edges and `samples` unit-circle points.
    pub fn residual(&self, system: &TransitionSystem, samples: usize) -> Result<f64> {
        if system.nerve().charts() != self.linear.nerve().charts()
            || system.nerve().edges() != self.linear.nerve().edges()
        {
            return Err(Error::InvalidMap("conjugacy and system have different nerves".into()));
        }
        let mut worst: f64 = 0.0;
        for (e, (edge, f)) in system.nerve().edges().iter().zip(system.maps()).enumerate() {
            let t = Complex64::from_polar(1.0, self.linear.phases()[e]);
            for u in unit_circle(samples) {
                let lhs = self.maps[edge.to].apply(t * u);
                let rhs = f.apply(self.maps[edge.from].apply(u));
                worst = worst.max((lhs - rhs).norm());
            }
        }
        Ok(worst)
    }

    pub fn verify(&self, system: &TransitionSystem, tolerance: f64) -> Result<f64> {
        let residual = self.residual(system, RESIDUAL_SAMPLES)?;
        if residual > tolerance {
            return Err(Error::Verification { residual, tolerance });
        }
        Ok(residual)
    }
}

#[derive(Serialize, Deserialize)]
struct LinearEdgeRepr {
    from: String,
    to: String,
    label: String,
    phase: f64,
}

#[derive(Serialize, Deserialize)]
struct ConjugacyRepr {
    charts: Vec<String>,
    maps: Vec<CircleDiffeo>,
    edges: Vec<LinearEdgeRepr>,
    #[serde(default)]
    triples: Vec<[String; 3]>,
    final_width: f64,
}

impl Serialize for Conjugacy {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let nerve = self.linear.nerve();
        let charts = nerve.charts();
        ConjugacyRepr {
            charts: charts.to_vec(),
            maps: self.maps.clone(),
            edges: nerve
                .edges()
                .iter()
                .zip(self.linear.phases())
                .map(|(e, p)| LinearEdgeRepr {
                    from: charts[e.from].clone(),
                    to: charts[e.to].clone(),
                    label: e.label.clone(),
                    phase: *p,
                })
                .collect(),
            triples: nerve.triples().iter().map(|t| t.map(|i| charts[i].clone())).collect(),
            final_width: self.final_width,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Conjugacy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = ConjugacyRepr::deserialize(deserializer)?;
        let build = || -> Result<Conjugacy> {
            let index = |id: &str| {
                repr.charts
                    .iter()
                    .position(|c| c == id)
                    .ok_or_else(|| Error::InvalidNerve(format!("unknown chart {id:?}")))
            };
            let edges = repr
                .edges
                .iter()
                .map(|e| {
                    Ok(Edge {
                        from: index(&e.from)?,
                        to: index(&e.to)?,
                        label: e.label.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let triples = repr
                .triples
                .iter()
                .map(|t| Ok([index(&t[0])?, index(&t[1])?, index(&t[2])?]))
                .collect::<Result<Vec<_>>>()?;
            if repr.maps.len() != repr.charts.len() {
                return Err(Error::InvalidMap(format!(
                    "{} chart maps for {} charts",
                    repr.maps.len(),
                    repr.charts.len()
                )));
            }
            let nerve = Nerve::new(repr.charts.clone(), edges, triples)?;
            let linear = UnitaryFlatBundle::new(nerve, repr.edges.iter().map(|e| e.phase).collect())?;
            Ok(Conjugacy {
                maps: repr.maps.clone(),
                linear,
                final_width: repr.final_width,
            })
        };
        build().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub conjugacy: Conjugacy,
    pub trace: IterationTrace,
    pub residual: f64,
    /// The system after the last step; its hats are below `tol`.
    pub final_system: TransitionSystem,
}

/// A failed run together with everything recorded up to the failure.
#[derive(Debug, Clone)]
pub struct RunFailure {
    pub error: Error,
    pub trace: IterationTrace,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {}

impl From<RunFailure> for Error {
    fn from(f: RunFailure) -> Self {
        f.error
    }
}

/// Re-expresses every hat with truncation `n` on width `sigma0`.
fn prepare(system: &TransitionSystem, params: &KamParams) -> Result<TransitionSystem> {
    if params.sigma0 > system.width() * (1.0 + 1e-12) {
        return Err(Error::InvalidParams(format!(
            "sigma0 = {} exceeds the system width {}",
            params.sigma0,
            system.width()
        )));
    }
    let maps = system
        .maps()
        .iter()
        .map(|f| {
            if let Some((k, _)) = f
                .hat()
                .terms()
                .find(|(k, c)| k.unsigned_abs() as usize > params.n && c.norm_sqr() > 0.0)
            {
                return Err(Error::InvalidParams(format!(
                    "hat has a nonzero coefficient at index {k} beyond N = {}",
                    params.n
                )));
            }
            let hat = LaurentSeries::from_terms(
                params.n,
                params.sigma0,
                f.hat().terms().filter(|(k, c)| k.unsigned_abs() as usize <= params.n && c.norm_sqr() > 0.0),
            )?;
            CircleDiffeo::new(f.phase(), hat)
        })
        .collect::<Result<Vec<_>>>()?;
    TransitionSystem::new(system.nerve().clone(), maps, params.sigma0)
}

/// Iterates [`kam_step`] until the certified hat norm drops below `tol`,
/// composes the conjugacy and verifies it against the input system.
#[allow(clippy::result_large_err)] // the failure carries the full trace by design
pub fn run(system: &TransitionSystem, params: &KamParams) -> std::result::Result<RunOutput, RunFailure> {
    let mut trace = IterationTrace {
        notes: vec![
            GAMMA_NOTE.to_string(),
            format!(
                "C0 = {:e}, C1 = {:e}, mu = {}, sigma0 = {}, eta0 = {}, strict = {}",
                params.c0,
                params.c1(),
                params.mu,
                params.sigma0,
                params.eta0,
                params.strict_schedule
            ),
        ],
        ..Default::default()
    };
    let fail = |error: Error, trace: &IterationTrace| RunFailure {
        error,
        trace: trace.clone(),
    };
    if let Err(e) = params.validate() {
        return Err(fail(e, &trace));
    }
    let mut current = prepare(system, params).map_err(|e| fail(e, &trace))?;
    let mut history: Vec<Vec<CircleDiffeo>> = Vec::new();
    let mut m = 0;
    loop {
        let start = Instant::now();
        let sched = params.schedule(m);
        let h = current.max_hat_majorant(sched.sigma).map_err(|e| fail(e, &trace))?;
        if h < params.tol {
            trace.rows.push(TraceRow {
                m,
                sigma: sched.sigma,
                eta: sched.eta,
                delta: sched.delta,
                max_hat_norm: h,
                worst_mode_residual: 0.0,
                tail_mass: 0.0,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            break;
        }
        if m >= params.max_iter {
            let err = Error::NonConvergence {
                steps: m,
                norm: h,
                tol: params.tol,
            };
            return Err(fail(err, &trace));
        }
        let out = kam_step(&current, m, params).map_err(|e| fail(e, &trace))?;
        trace.rows.push(TraceRow {
            m,
            sigma: sched.sigma,
            eta: sched.eta,
            delta: sched.delta,
            max_hat_norm: h,
            worst_mode_residual: out.report.worst_mode_residual,
            tail_mass: out.report.tail_mass,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        trace.steps.push(out.report);
        history.push(out.psi);
        current = out.system;
        m += 1;
    }

    let final_width = current.width();
    let charts = current.nerve().charts().len();
    let mut maps = Vec::with_capacity(charts);
    for j in 0..charts {
        let mut phi = CircleDiffeo::identity(params.n, final_width).map_err(|e| fail(e, &trace))?;
        for step in history.iter().rev() {
            phi = CircleDiffeo::compose(&step[j], &phi, final_width).map_err(|e| fail(e, &trace))?;
        }
        maps.push(phi);
    }
    let linear = current.bundle().map_err(|e| fail(e, &trace))?;
    let conjugacy = Conjugacy {
        maps,
        linear,
        final_width,
    };
    let residual = conjugacy
        .verify(system, CONJUGACY_TOL)
        .map_err(|e| fail(e, &trace))?;
    Ok(RunOutput {
        conjugacy,
        trace,
        residual,
        final_system: current,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RotationComparison {
    pub edge: String,
    pub phase: f64,
    /// `2π ρ(f)`.
    pub rotation_phase: f64,
    /// `phase - 2π ρ(f)` wrapped to `(-π, π]`.
    pub difference: f64,
    pub warning: Option<String>,
}

/// Edge phases next to `2π·ρ(f)`; a diagnostic only.
pub fn alpha_vs_rotation(system: &TransitionSystem, iters: usize) -> Result<Vec<RotationComparison>> {
    system
        .maps()
        .iter()
        .enumerate()
        .map(|(e, f)| {
            let rho = f.rotation_number(iters)?;
            let rotation_phase = std::f64::consts::TAU * rho.value;
            Ok(RotationComparison {
                edge: system.nerve().edge_name(e),
                phase: f.phase(),
                rotation_phase,
                difference: phase_difference(f.phase(), rotation_phase),
                warning: rho.warning,
            })
        })
        .collect()
}
