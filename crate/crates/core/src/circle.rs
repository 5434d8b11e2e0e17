//! Analytic circle diffeomorphisms in multiplicative form `w ↦ w·exp(iφ + f̂(w))`.
//!
//! All composition and inversion work happens in log coordinates: the hat
//! values stay small and are never mixed with the O(1) phase, so the
//! extracted coefficients carry round-off proportional to the hats
//! themselves.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::series::{self, coeffs_from_circle_with_floor, unit_circle, LaurentSeries, NOISE_FLOOR_REL};

/// Largest reality-symmetry defect accepted before projection.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Residual required of `ψ⁻¹∘ψ - id` after inversion.
pub const INVERSE_TOL: f64 = 1e-9;

const FIXED_POINT_ITERS: usize = 50;
const MAX_INVERSE_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CircleDiffeo {
    phase: f64,
    hat: LaurentSeries,
}

/// Diagnostics of a re-expansion from unit-circle samples.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ExpansionReport {
    /// Largest coefficient change made by the reality projection.
    pub projection: f64,
    /// Imaginary constant mode moved from the hat into the phase.
    pub phase_shift: f64,
    /// Out-of-band plus dropped round-off mass, on the unit circle.
    pub tail_mass: f64,
    pub noise_floor: f64,
}

impl CircleDiffeo {
    /// Validates reality symmetry (defect at most 1e-8, then projected) and a
    /// vanishing constant term.
    pub fn new(phase: f64, mut hat: LaurentSeries) -> Result<Self> {
        if !phase.is_finite() {
            return Err(Error::InvalidMap("phase is not finite".into()));
        }
        let defect = hat.reality_defect();
        if defect > SYMMETRY_TOL {
            return Err(Error::InvalidMap(format!(
                "hat violates c_-n = -conj(c_n) by {defect:e}"
            )));
        }
        hat.project_reality();
        let c0 = hat.coeff(0);
        if c0.norm() > SYMMETRY_TOL {
            return Err(Error::InvalidMap(format!(
                "hat has a nonzero constant term {c0}"
            )));
        }
        hat.take_constant();
        Ok(Self {
            phase: phase.rem_euclid(TAU),
            hat,
        })
    }

    pub fn rotation(phase: f64, n: usize, width: f64) -> Result<Self> {
        Self::new(phase, LaurentSeries::zeros(n, width)?)
    }

    pub fn identity(n: usize, width: f64) -> Result<Self> {
        Self::rotation(0.0, n, width)
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }

    pub fn hat(&self) -> &LaurentSeries {
        &self.hat
    }

    pub fn width(&self) -> f64 {
        self.hat.width()
    }

    pub fn truncation(&self) -> usize {
        self.hat.truncation()
    }

    pub fn is_rotation(&self) -> bool {
        self.hat.is_zero()
    }

    /// Same map regarded on a narrower (or wider) annulus.
    pub fn with_width(&self, width: f64) -> Result<Self> {
        Ok(Self {
            phase: self.phase,
            hat: self.hat.with_width(width)?,
        })
    }

    /// `iφ + f̂(w)`, a branch of `log(f(w)/w)`.
    pub fn log_ratio(&self, w: Complex64) -> Complex64 {
        Complex64::new(0.0, self.phase) + self.hat.horner(w)
    }

    pub fn eval(&self, w: Complex64) -> Result<Complex64> {
        Ok(w * (Complex64::new(0.0, self.phase) + self.hat.eval(w)?).exp())
    }

    pub(crate) fn apply(&self, w: Complex64) -> Complex64 {
        w * self.log_ratio(w).exp()
    }

    /// Expands unit-circle samples of a circle map.
    ///
    /// The argument of `f(w)/w` is unwrapped along the circle; its total
    /// increment is the obstruction to a global logarithm and must vanish.
    pub fn expand(fvals: &[Complex64], n: usize, width: f64) -> Result<(Self, ExpansionReport)> {
        let m = fvals.len();
        if m < (4 * n).max(4) {
            return Err(Error::InsufficientSampling {
                needed: (4 * n).max(4),
                got: m,
            });
        }
        let ratios: Vec<Complex64> = fvals
            .iter()
            .zip(unit_circle(m))
            .map(|(f, w)| f / w)
            .collect();
        if ratios.iter().any(|g| !(g.norm() > 0.0) || !g.re.is_finite() || !g.im.is_finite()) {
            return Err(Error::InvalidMap("samples must be finite and nonzero".into()));
        }
        let mut logs = Vec::with_capacity(m);
        let mut prev = ratios[0].arg();
        let mut unwrapped = prev;
        for g in &ratios {
            let a = g.arg();
            unwrapped += wrap_pi(a - prev);
            prev = a;
            logs.push(Complex64::new(g.norm().ln(), unwrapped));
        }
        let total = unwrapped - logs[0].im + wrap_pi(ratios[0].arg() - prev);
        let winding = (total / TAU).round() as i64;
        if winding != 0 {
            return Err(Error::Branch { winding });
        }
        let scale = logs.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let fit = coeffs_from_circle_with_floor(&logs, n, width, NOISE_FLOOR_REL * scale)?;
        let mut hat = fit.series;
        let defect = hat.reality_defect();
        if defect > SYMMETRY_TOL {
            return Err(Error::NotCircleMap { defect });
        }
        let projection = hat.project_reality();
        let c0 = hat.take_constant();
        let map = Self {
            phase: c0.im.rem_euclid(TAU),
            hat,
        };
        Ok((
            map,
            ExpansionReport {
                projection,
                phase_shift: 0.0,
                tail_mass: fit.tail_mass,
                noise_floor: fit.noise_floor,
            },
        ))
    }

    /// Re-expands sampled log-ratio values `L(w) = log(f(w)/w) - i·base_phase`.
    ///
    /// The constant mode of `L` joins the phase; `scale` is the magnitude of
    /// the terms whose sum produced `L` and sets the round-off floor.
    pub(crate) fn from_log_samples(
        base_phase: f64,
        logs: &[Complex64],
        n: usize,
        width: f64,
        scale: f64,
    ) -> Result<(Self, ExpansionReport)> {
        let fit = coeffs_from_circle_with_floor(logs, n, width, NOISE_FLOOR_REL * scale)?;
        let mut hat = fit.series;
        let defect = hat.reality_defect();
        if defect > SYMMETRY_TOL {
            return Err(Error::NotCircleMap { defect });
        }
        let projection = hat.project_reality();
        let c0 = hat.take_constant();
        Ok((
            Self {
                phase: (base_phase + c0.im).rem_euclid(TAU),
                hat,
            },
            ExpansionReport {
                projection,
                phase_shift: c0.im,
                tail_mass: fit.tail_mass,
                noise_floor: fit.noise_floor,
            },
        ))
    }

    /// Rotation number in `[0, 1)` from the lift `F(x) = x + (φ + Im f̂(e^{2πix}))/2π`,
    /// Richardson-extrapolated over orbit lengths `iters/4`, `iters/2`, `iters`.
    pub fn rotation_number(&self, iters: usize) -> Result<RotationEstimate> {
        if iters < 1000 {
            return Err(Error::Domain(format!("rotation number needs iters >= 1000, got {iters}")));
        }
        let checkpoints = [iters / 4, iters / 2, iters];
        let mut means = [0.0; 3];
        let mut x = 0.0f64;
        let mut travelled = 0.0f64;
        let mut next = 0;
        for k in 1..=iters {
            let step = self.lift_increment(x);
            travelled += step;
            x = (x + step).rem_euclid(1.0);
            if k == checkpoints[next] {
                means[next] = travelled / k as f64;
                next += 1;
                if next == 3 {
                    break;
                }
            }
        }
        let coarse = 2.0 * means[1] - means[0];
        let fine = 2.0 * means[2] - means[1];
        let spread = (fine - coarse).abs();
        let warning = (spread > 1e-6).then(|| {
            format!("Richardson estimates disagree by {spread:e}; orbit may be too short")
        });
        Ok(RotationEstimate {
            value: fine.rem_euclid(1.0),
            raw: means[2].rem_euclid(1.0),
            spread,
            warning,
        })
    }

    /// `F(x) - x` for the lift.
    pub fn lift_increment(&self, x: f64) -> f64 {
        let w = Complex64::from_polar(1.0, TAU * x);
        (self.phase + self.hat.horner(w).im) / TAU
    }

    /// `g ∘ f` re-expanded on the unit circle and regarded on width `out_width`.
    pub fn compose(g: &Self, f: &Self, out_width: f64) -> Result<Self> {
        Self::compose_with_report(g, f, out_width).map(|(c, _)| c)
    }

    pub fn compose_with_report(g: &Self, f: &Self, out_width: f64) -> Result<(Self, ExpansionReport)> {
        if !(out_width > 0.0 && out_width <= f.width()) {
            return Err(Error::Nesting(format!(
                "output annulus of width {out_width} is not inside the domain of f (width {})",
                f.width()
            )));
        }
        let image = out_width + f.hat.weighted_sum(out_width, 0);
        if image > g.width() {
            return Err(Error::Nesting(format!(
                "f maps the width-{out_width} annulus into width {image}, outside the domain of g (width {})",
                g.width()
            )));
        }
        let n = g.truncation().max(f.truncation());
        let m = 4 * n.max(1);
        let mut scale: f64 = 0.0;
        let logs: Vec<Complex64> = unit_circle(m)
            .map(|w| {
                let inner = f.hat.horner(w);
                let outer = g.hat.horner(f.apply(w));
                scale = scale.max(inner.norm()).max(outer.norm());
                inner + outer
            })
            .collect();
        Self::from_log_samples(f.phase + g.phase, &logs, n, out_width, scale)
    }

    /// Solves `self(u) = v` on the log-lift. Returns `u` and `log(u/v)`.
    pub(crate) fn preimage(&self, v: Complex64) -> Result<(Complex64, Complex64)> {
        let i_phi = Complex64::new(0.0, self.phase);
        // s = iφ + f̂(v e^{-s}); u = v e^{-s}
        let mut s = i_phi + self.hat.horner(v);
        for it in 0..MAX_INVERSE_ITERS {
            let u = v * (-s).exp();
            let next = if it < FIXED_POINT_ITERS {
                i_phi + self.hat.horner(u)
            } else {
                let residual = s - i_phi - self.hat.horner(u);
                let slope = Complex64::new(1.0, 0.0) + self.hat.log_derivative(u);
                s - residual / slope
            };
            let delta = (next - s).norm();
            s = next;
            if delta <= 4.0 * f64::EPSILON * (1.0 + s.norm()) {
                return Ok((v * (-s).exp(), -s));
            }
        }
        Err(Error::InversionDiverged(format!(
            "preimage of {v} not converged in {MAX_INVERSE_ITERS} iterations"
        )))
    }

    /// `ψ⁻¹` on the width-`out_width` annulus, using the working width and
    /// derivative limit of `opts`.
    pub fn invert_with(&self, out_width: f64, opts: InvertOptions) -> Result<Self> {
        let working = opts.working_width.unwrap_or(self.width());
        let limit = opts
            .derivative_limit
            .unwrap_or_else(|| 1.0 / (1.0 + working.exp()));
        let deriv = self.hat.log_derivative_majorant(working)?;
        if deriv > limit {
            return Err(Error::UnivalenceUncertified { bound: deriv, limit });
        }
        let shift = self.hat.majorant_norm(working)?;
        if !(out_width > 0.0 && out_width <= working - 2.0 * shift) {
            return Err(Error::Nesting(format!(
                "inverse width {out_width} exceeds working width {working} minus twice the hat majorant {shift:e}"
            )));
        }
        let n = self.truncation();
        let m = 4 * n.max(1);
        let mut scale: f64 = 0.0;
        let mut logs = Vec::with_capacity(m);
        for v in unit_circle(m) {
            let (_, log_ratio) = self.preimage(v)?;
            // log(u/v) = -iφ - f̂(u); keep only the hat part for re-expansion.
            let hat_part = log_ratio + Complex64::new(0.0, self.phase);
            scale = scale.max(hat_part.norm());
            logs.push(hat_part);
        }
        let (inv, _) = Self::from_log_samples(-self.phase, &logs, n, out_width, scale)?;
        let residual = inverse_residual(self, &inv, out_width, 64);
        if residual > INVERSE_TOL {
            return Err(Error::InversionDiverged(format!(
                "inverse certificate failed: residual {residual:e} > {INVERSE_TOL:e}"
            )));
        }
        Ok(inv)
    }

    pub fn invert(&self, out_width: f64) -> Result<Self> {
        self.invert_with(out_width, InvertOptions::default())
    }

    /// `max | |f(w)| - 1 |` over `samples` unit-circle points.
    pub fn circle_defect(&self, samples: usize) -> f64 {
        unit_circle(samples)
            .map(|w| (self.apply(w).norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Whether the derivative majorant of the lift perturbation stays below 1
    /// on the width-`sigma_prime` annulus.
    pub fn univalence_certified(&self, sigma_prime: f64) -> Result<bool> {
        Ok(self.hat.log_derivative_majorant(sigma_prime)? < 1.0)
    }
}

/// Largest `|ψ(ψ⁻¹(v)) - v|` and `|ψ⁻¹(ψ(w)) - w|` over sample circles inside the
/// inverse's annulus.
pub fn inverse_residual(psi: &CircleDiffeo, inv: &CircleDiffeo, width: f64, samples: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for radius in [(-width).exp(), 1.0, width.exp()] {
        for v in unit_circle(samples) {
            let v = v * radius;
            worst = worst.max((psi.apply(inv.apply(v)) - v).norm());
        }
    }
    for w in unit_circle(samples) {
        worst = worst.max((inv.apply(psi.apply(w)) - w).norm());
    }
    worst
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InvertOptions {
    /// Sub-annulus on which the derivative certificate is evaluated (default: the map's width).
    pub working_width: Option<f64>,
    /// Upper limit for the derivative majorant (default `1/(1 + e^{working_width})`).
    pub derivative_limit: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RotationEstimate {
    /// Extrapolated rotation number in `[0, 1)`.
    pub value: f64,
    /// Plain orbit average at the longest orbit length.
    pub raw: f64,
    pub spread: f64,
    pub warning: Option<String>,
}

fn wrap_pi(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// Signed difference `a - b` wrapped to `(-π, π]`.
pub fn phase_difference(a: f64, b: f64) -> f64 {
    wrap_pi(a - b)
}

#[derive(Deserialize)]
struct DiffeoRepr {
    phase: f64,
    hat: LaurentSeries,
}

impl<'de> Deserialize<'de> for CircleDiffeo {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = DiffeoRepr::deserialize(deserializer)?;
        CircleDiffeo::new(repr.phase, repr.hat).map_err(serde::de::Error::custom)
    }
}

/// Samples `f` on `m` unit-circle points.
pub fn sample_map(f: &CircleDiffeo, m: usize) -> Vec<Complex64> {
    series::unit_circle(m).map(|w| f.apply(w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn standard(phase: f64, eps: f64, n: usize, width: f64) -> CircleDiffeo {
        let hat = LaurentSeries::from_terms(n, width, [(1, c(eps, 0.0)), (-1, c(-eps, 0.0))]).unwrap();
        CircleDiffeo::new(phase, hat).unwrap()
    }

    #[test]
    fn expand_rigid_rotation() {
        let phi = 1.234;
        let f = CircleDiffeo::rotation(phi, 8, 1.0).unwrap();
        let (g, rep) = CircleDiffeo::expand(&sample_map(&f, 32), 8, 1.0).unwrap();
        assert!((g.phase() - phi).abs() < 1e-14);
        assert!(g.hat().is_zero());
        assert!(rep.projection < 1e-15);
    }

    #[test]
    fn expand_standard_map() {
        // log(f(w)/w) = iφ + ε(w - 1/w): Fourier integrals give c_1 = ε, c_-1 = -ε.
        let (phi, eps) = (2.0, 0.05);
        let vals: Vec<_> = unit_circle(64)
            .map(|w| w * (c(0.0, phi) + (w - w.inv()) * eps).exp())
            .collect();
        let (g, _) = CircleDiffeo::expand(&vals, 16, 1.0).unwrap();
        assert!((g.phase() - phi).abs() < 1e-14);
        assert!((g.hat().coeff(1) - c(eps, 0.0)).norm() < 1e-15);
        assert!((g.hat().coeff(-1) - c(-eps, 0.0)).norm() < 1e-15);
        for k in 2..=16 {
            assert!(g.hat().coeff(k).norm() < 1e-15);
        }
    }

    #[test]
    fn expand_rejects_degree_two() {
        let vals: Vec<_> = unit_circle(64).map(|w| w * w).collect();
        assert!(matches!(
            CircleDiffeo::expand(&vals, 16, 1.0),
            Err(Error::Branch { winding: 1 })
        ));
    }

    #[test]
    fn expand_rejects_non_unitary_samples() {
        let vals: Vec<_> = unit_circle(64).map(|w| w * 1.01).collect();
        assert!(matches!(
            CircleDiffeo::expand(&vals, 16, 1.0),
            Err(Error::NotCircleMap { .. })
        ));
    }

    #[test]
    fn new_rejects_asymmetric_hat() {
        let hat = LaurentSeries::from_terms(2, 1.0, [(1, c(1e-3, 0.0))]).unwrap();
        assert!(matches!(CircleDiffeo::new(0.3, hat), Err(Error::InvalidMap(_))));
    }

    #[test]
    fn rotation_number_of_rotation() {
        let f = CircleDiffeo::rotation(TAU * 0.375, 4, 1.0).unwrap();
        let est = f.rotation_number(4000).unwrap();
        assert!((est.value - 0.375).abs() < 1e-12);
        assert!(est.warning.is_none());
        assert!(f.rotation_number(999).is_err());
    }

    #[test]
    fn compose_rotations() {
        let a = CircleDiffeo::rotation(4.0, 4, 1.0).unwrap();
        let b = CircleDiffeo::rotation(3.5, 4, 1.0).unwrap();
        let ab = CircleDiffeo::compose(&a, &b, 1.0).unwrap();
        assert!((ab.phase() - (7.5f64).rem_euclid(TAU)).abs() < 1e-14);
        assert!(ab.hat().is_zero());
    }

    #[test]
    fn compose_with_identity() {
        let f = standard(1.0, 0.01, 16, 1.0);
        let id = CircleDiffeo::identity(16, 2.0).unwrap();
        let fi = CircleDiffeo::compose(&f, &id, 1.0).unwrap();
        assert!((fi.phase() - f.phase()).abs() < 1e-10);
        for (k, ck) in f.hat().terms() {
            assert!((fi.hat().coeff(k) - ck).norm() < 1e-10);
        }
    }

    #[test]
    fn compose_nesting_error() {
        let f = standard(1.0, 0.2, 16, 1.0);
        let g = standard(1.0, 0.01, 16, 1.0);
        let err = CircleDiffeo::compose(&g, &f, 1.0).unwrap_err();
        assert!(matches!(err, Error::Nesting(_)));
    }

    #[test]
    fn invert_rotation_and_identity() {
        let id = CircleDiffeo::identity(8, 1.0).unwrap();
        let inv = id.invert(0.5).unwrap();
        assert!(inv.hat().is_zero() && inv.phase().abs() < 1e-15);
        let r = CircleDiffeo::rotation(1.0, 8, 1.0).unwrap();
        let rinv = r.invert(0.5).unwrap();
        assert!((rinv.phase() - (TAU - 1.0)).abs() < 1e-14);
        assert!(rinv.hat().is_zero());
    }

    #[test]
    fn invert_rejects_large_derivative() {
        let f = standard(0.0, 0.2, 8, 1.0);
        assert!(matches!(
            f.invert(0.3),
            Err(Error::UnivalenceUncertified { .. })
        ));
    }

    #[test]
    fn phase_difference_wraps() {
        assert!((phase_difference(0.1, TAU - 0.1) - 0.2).abs() < 1e-15);
        assert!((phase_difference(TAU - 0.1, 0.1) + 0.2).abs() < 1e-15);
    }
}
