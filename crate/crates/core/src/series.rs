//! Truncated two-sided power series regarded as holomorphic functions on
//! annuli `{e^-σ < |w| < e^σ}`.
//!
//! Coefficients are stored densely for indices `-N..=N`. The annulus width
//! `σ` records where the represented function is meant to be analytic; all
//! norms used by the iteration are the majorant `Σ |c_n| e^{|n|σ'}`, which
//! bounds the sup-norm on the width-`σ'` annulus from above.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Round-off floor for coefficients extracted from samples, relative to the
/// magnitude of the sampled quantities.
pub const NOISE_FLOOR_REL: f64 = 64.0 * f64::EPSILON;

/// Relative slack granted to each index in [`LaurentSeries::decay_check`].
const DECAY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LaurentSeries {
    n: usize,
    width: f64,
    coeffs: Vec<Complex64>,
}

impl LaurentSeries {
    pub fn zeros(n: usize, width: f64) -> Result<Self> {
        check_width(width)?;
        Ok(Self {
            n,
            width,
            coeffs: vec![Complex64::new(0.0, 0.0); 2 * n + 1],
        })
    }

    /// Builds a series from `(index, coefficient)` pairs; indices must satisfy `|n| <= N`.
    pub fn from_terms<I>(n: usize, width: f64, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (i64, Complex64)>,
    {
        let mut s = Self::zeros(n, width)?;
        for (k, c) in terms {
            if k.unsigned_abs() as usize > n {
                return Err(Error::Domain(format!("index {k} exceeds truncation {n}")));
            }
            if !c.re.is_finite() || !c.im.is_finite() {
                return Err(Error::Domain(format!("coefficient {k} is not finite")));
            }
            *s.coeff_mut(k) += c;
        }
        Ok(s)
    }

    /// Dense constructor; `coeffs[k + N]` is the coefficient of `w^k`.
    pub(crate) fn from_dense(n: usize, width: f64, coeffs: Vec<Complex64>) -> Self {
        debug_assert_eq!(coeffs.len(), 2 * n + 1);
        Self { n, width, coeffs }
    }

    pub fn truncation(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// Same coefficients regarded on a different annulus.
    pub fn with_width(&self, width: f64) -> Result<Self> {
        check_width(width)?;
        Ok(Self {
            width,
            ..self.clone()
        })
    }

    /// Coefficient of `w^k`; zero outside the stored range.
    pub fn coeff(&self, k: i64) -> Complex64 {
        if k.unsigned_abs() as usize > self.n {
            Complex64::new(0.0, 0.0)
        } else {
            self.coeffs[(k + self.n as i64) as usize]
        }
    }

    pub(crate) fn coeff_mut(&mut self, k: i64) -> &mut Complex64 {
        let idx = (k + self.n as i64) as usize;
        &mut self.coeffs[idx]
    }

    /// Iterates `(index, coefficient)` over all stored indices.
    pub fn terms(&self) -> impl Iterator<Item = (i64, Complex64)> + '_ {
        let n = self.n as i64;
        self.coeffs
            .iter()
            .enumerate()
            .map(move |(i, c)| (i as i64 - n, *c))
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.norm_sqr() == 0.0)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Evaluates `Σ c_n w^n` with one Horner pass in `w` and one in `1/w`.
    pub fn eval(&self, w: Complex64) -> Result<Complex64> {
        let r = w.norm();
        let bound = self.width.exp();
        if !(r > 1.0 / bound && r < bound) {
            return Err(Error::Domain(format!(
                "|w| = {r} lies outside the annulus of width {}",
                self.width
            )));
        }
        Ok(self.horner(w))
    }

    pub(crate) fn horner(&self, w: Complex64) -> Complex64 {
        let n = self.n;
        let mut pos = Complex64::new(0.0, 0.0);
        for k in (0..=n).rev() {
            pos = pos * w + self.coeffs[n + k];
        }
        if n == 0 {
            return pos;
        }
        let inv = w.inv();
        let mut neg = Complex64::new(0.0, 0.0);
        for k in (1..=n).rev() {
            neg = neg * inv + self.coeffs[n - k];
        }
        pos + neg * inv
    }

    /// `d/dζ s(e^ζ)` evaluated at `w = e^ζ`, i.e. `Σ n c_n w^n`.
    pub(crate) fn log_derivative(&self, w: Complex64) -> Complex64 {
        let n = self.n as i64;
        let mut acc = Complex64::new(0.0, 0.0);
        let mut wp = Complex64::new(1.0, 0.0);
        let inv = w.inv();
        let mut wm = Complex64::new(1.0, 0.0);
        for k in 1..=n {
            wp *= w;
            wm *= inv;
            acc += self.coeff(k) * wp * k as f64 - self.coeff(-k) * wm * k as f64;
        }
        acc
    }

    /// `Σ |c_n| e^{|n| σ'}`, an upper bound for the sup-norm on the width-`σ'` annulus.
    pub fn majorant_norm(&self, sigma_prime: f64) -> Result<f64> {
        if !(sigma_prime > 0.0 && sigma_prime <= self.width) {
            return Err(Error::Domain(format!(
                "sigma' = {sigma_prime} not in (0, {}]",
                self.width
            )));
        }
        Ok(self.weighted_sum(sigma_prime, 0))
    }

    /// `Σ |n| |c_n| e^{|n| σ'}`, bounding `sup |d/dζ s(e^ζ)|` on `|Re ζ| < σ'`.
    ///
    /// The boundary value `σ' = width` is accepted since the truncated sum is finite there.
    pub fn log_derivative_majorant(&self, sigma_prime: f64) -> Result<f64> {
        if !(sigma_prime > 0.0 && sigma_prime <= self.width) {
            return Err(Error::Domain(format!(
                "sigma' = {sigma_prime} not in (0, {}]",
                self.width
            )));
        }
        Ok(self.weighted_sum(sigma_prime, 1))
    }

    /// Majorant without the domain check; negative widths are clamped to zero.
    pub(crate) fn weighted_sum(&self, sigma_prime: f64, power: i32) -> f64 {
        let s = sigma_prime.max(0.0);
        self.terms()
            .filter(|(_, c)| c.norm_sqr() > 0.0)
            .map(|(k, c)| {
                let a = k.unsigned_abs() as f64;
                c.norm() * a.powi(power) * (a * s).exp()
            })
            .fold(0.0, |acc, v| acc + v)
    }

    /// Largest `|s(w)|` over `samples` equispaced points on each of the circles
    /// `|w| = e^{-σ'}`, `|w| = 1` and `|w| = e^{σ'}`.
    pub fn empirical_sup_norm(&self, sigma_prime: f64, samples: usize) -> Result<f64> {
        if samples < 2 * self.n + 1 {
            return Err(Error::InsufficientSampling {
                needed: 2 * self.n + 1,
                got: samples,
            });
        }
        if !(sigma_prime >= 0.0 && sigma_prime <= self.width) {
            return Err(Error::Domain(format!(
                "sigma' = {sigma_prime} not in [0, {}]",
                self.width
            )));
        }
        // The truncated series is a finite sum, so the boundary circles are admissible.
        let mut best: f64 = 0.0;
        for radius in [(-sigma_prime).exp(), 1.0, sigma_prime.exp()] {
            for w in unit_circle(samples) {
                best = best.max(self.horner(w * radius).norm());
            }
        }
        Ok(best)
    }

    /// Checks `|c_n| <= norm_sigma * e^{-|n| σ}` index by index.
    pub fn decay_check(&self, norm_sigma: f64) -> DecayReport {
        let per_index: Vec<(i64, bool)> = self
            .terms()
            .map(|(k, c)| {
                let bound = norm_sigma * (-(k.unsigned_abs() as f64) * self.width).exp();
                (k, c.norm() <= bound * (1.0 + DECAY_SLACK))
            })
            .collect();
        DecayReport {
            norm_sigma,
            width: self.width,
            truncation: self.n,
            per_index,
        }
    }

    /// `max_n |c_{-n} + conj(c_n)|`: zero exactly when the series is purely
    /// imaginary on the unit circle.
    pub fn reality_defect(&self) -> f64 {
        (0..=self.n as i64)
            .map(|k| (self.coeff(-k) + self.coeff(k).conj()).norm())
            .fold(0.0, f64::max)
    }

    /// Projects onto series that are purely imaginary on `|w| = 1`; returns the
    /// largest coefficient change.
    pub fn project_reality(&mut self) -> f64 {
        let mut size: f64 = 0.0;
        for k in 0..=self.n as i64 {
            let c = self.coeff(k);
            let d = self.coeff(-k);
            let avg = (c - d.conj()) * 0.5;
            size = size.max((avg - c).norm()).max((-avg.conj() - d).norm());
            *self.coeff_mut(k) = avg;
            *self.coeff_mut(-k) = -avg.conj();
        }
        size
    }

    /// Zeroes coefficients at or below `floor`; returns their summed modulus.
    pub fn clean(&mut self, floor: f64) -> f64 {
        let mut dropped = 0.0;
        for c in self.coeffs.iter_mut() {
            let a = c.norm();
            if a > 0.0 && a <= floor {
                dropped += a;
                *c = Complex64::new(0.0, 0.0);
            }
        }
        dropped
    }

    /// Removes the constant term and returns it.
    pub fn take_constant(&mut self) -> Complex64 {
        std::mem::replace(self.coeff_mut(0), Complex64::new(0.0, 0.0))
    }

    /// `w ↦ s(λ w)` for `|λ| = 1`, i.e. `c_n ↦ c_n λ^n`.
    pub fn rotated(&self, phase: f64) -> Self {
        let mut out = self.clone();
        for (k, c) in self.terms() {
            *out.coeff_mut(k) = c * Complex64::from_polar(1.0, phase * k as f64);
        }
        out
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= factor);
        out
    }

    /// Coefficient-wise sum; the result has the larger truncation and the smaller width.
    pub fn add(&self, other: &Self) -> Self {
        let n = self.n.max(other.n);
        let mut out = Self::from_dense(
            n,
            self.width.min(other.width),
            vec![Complex64::new(0.0, 0.0); 2 * n + 1],
        );
        for (k, c) in self.terms().chain(other.terms()) {
            *out.coeff_mut(k) += c;
        }
        out
    }

    /// Samples on `m` equispaced unit-circle points.
    pub fn sample_unit_circle(&self, m: usize) -> Vec<Complex64> {
        unit_circle(m).map(|w| self.horner(w)).collect()
    }
}

fn check_width(width: f64) -> Result<()> {
    if width > 0.0 && width.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("annulus width {width} must be positive")))
    }
}

/// `m` equispaced points `e^{2πi l/m}` on the unit circle.
pub fn unit_circle(m: usize) -> impl Iterator<Item = Complex64> + Clone {
    (0..m).map(move |l| Complex64::from_polar(1.0, 2.0 * PI * l as f64 / m as f64))
}

/// Result of [`coeffs_from_circle`].
#[derive(Debug, Clone)]
pub struct CircleFit {
    pub series: LaurentSeries,
    /// Mass of DFT bins beyond the truncation plus in-band coefficients dropped
    /// as round-off; measured on the unit circle.
    pub tail_mass: f64,
    /// Floor below which coefficients were treated as round-off.
    pub noise_floor: f64,
}

/// Discrete Fourier coefficients `c_n`, `|n| <= N`, of equispaced unit-circle samples.
///
/// Requires at least `4N` samples. Coefficients below the round-off floor
/// (relative to the largest sample) are zeroed.
pub fn coeffs_from_circle(fvals: &[Complex64], n: usize, width: f64) -> Result<CircleFit> {
    let scale = fvals.iter().map(|v| v.norm()).fold(0.0, f64::max);
    coeffs_from_circle_with_floor(fvals, n, width, NOISE_FLOOR_REL * scale)
}

/// As [`coeffs_from_circle`] with an explicit round-off floor, for callers whose
/// samples result from cancellation between larger terms.
pub fn coeffs_from_circle_with_floor(
    fvals: &[Complex64],
    n: usize,
    width: f64,
    floor: f64,
) -> Result<CircleFit> {
    let m = fvals.len();
    if m < (4 * n).max(1) {
        return Err(Error::InsufficientSampling {
            needed: (4 * n).max(1),
            got: m,
        });
    }
    if fvals.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Domain("non-finite sample".into()));
    }
    let mut buf = fvals.to_vec();
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let inv_m = 1.0 / m as f64;
    let bin = |k: i64| buf[k.rem_euclid(m as i64) as usize] * inv_m;

    let mut series = LaurentSeries::zeros(n, width)?;
    for k in -(n as i64)..=n as i64 {
        *series.coeff_mut(k) = bin(k);
    }
    // Bins strictly between N and M - N carry what the truncation cannot represent.
    let out_of_band: f64 = ((n as i64 + 1)..(m as i64 - n as i64))
        .map(|k| bin(k).norm())
        .fold(0.0, |acc, v| acc + v);
    let dropped = series.clean(floor);
    Ok(CircleFit {
        series,
        tail_mass: out_of_band + dropped,
        noise_floor: floor,
    })
}

/// Per-index outcome of [`LaurentSeries::decay_check`].
#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    pub norm_sigma: f64,
    pub width: f64,
    pub truncation: usize,
    pub per_index: Vec<(i64, bool)>,
}

impl DecayReport {
    pub fn passed(&self) -> bool {
        self.per_index.iter().all(|(_, ok)| *ok)
    }

    pub fn violations(&self) -> Vec<i64> {
        self.per_index
            .iter()
            .filter(|(_, ok)| !ok)
            .map(|(k, _)| *k)
            .collect()
    }

    /// Bound on the majorant contribution of the modes `|n| > N` at width `σ' < σ`,
    /// assuming the decay `|c_n| <= norm_sigma e^{-|n|σ}` continues past the truncation.
    pub fn tail_mass(&self, sigma_prime: f64) -> f64 {
        let gap = self.width - sigma_prime;
        if gap <= 0.0 {
            return f64::INFINITY;
        }
        let q = (-gap).exp();
        2.0 * self.norm_sigma * q.powi(self.truncation as i32 + 1) / (1.0 - q)
    }
}

#[derive(Serialize, Deserialize)]
struct SeriesRepr {
    #[serde(rename = "N")]
    n: usize,
    sigma: f64,
    coeffs: Vec<(i64, f64, f64)>,
}

impl Serialize for LaurentSeries {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let coeffs = self
            .terms()
            .filter(|(_, c)| c.norm() >= 1e-300)
            .map(|(k, c)| (k, c.re, c.im))
            .collect();
        SeriesRepr {
            n: self.n,
            sigma: self.width,
            coeffs,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LaurentSeries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = SeriesRepr::deserialize(deserializer)?;
        LaurentSeries::from_terms(
            repr.n,
            repr.sigma,
            repr.coeffs
                .into_iter()
                .map(|(k, re, im)| (k, Complex64::new(re, im))),
        )
        .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn eval_examples() {
        let zero = LaurentSeries::zeros(4, 1.0).unwrap();
        assert_eq!(zero.eval(c(0.5, 0.0)).unwrap(), c(0.0, 0.0));

        let mono = LaurentSeries::from_terms(2, 1.0, [(1, c(1.0, 0.0))]).unwrap();
        let v = mono.eval(Complex64::from_polar(1.0, PI / 2.0)).unwrap();
        assert!((v - c(0.0, 1.0)).norm() < 1e-15);

        let two = LaurentSeries::from_terms(3, 1.0, [(-1, c(2.0, 0.0)), (2, c(-1.0, 0.0))]).unwrap();
        assert!((two.eval(c(2.0, 0.0)).unwrap() - c(-3.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn eval_outside_annulus_is_domain_error() {
        let s = LaurentSeries::zeros(2, 0.5).unwrap();
        assert!(matches!(s.eval(c(2.0, 0.0)), Err(Error::Domain(_))));
        assert!(matches!(s.eval(c(0.0, 0.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn majorant_examples() {
        let zero = LaurentSeries::zeros(4, 2.0).unwrap();
        assert_eq!(zero.majorant_norm(1.3).unwrap(), 0.0);
        let s = LaurentSeries::from_terms(1, 1.0, [(1, c(0.1, 0.0))]).unwrap();
        assert!((s.majorant_norm(1.0).unwrap() - 0.1 * 1f64.exp()).abs() < 1e-15);
        assert!((s.majorant_norm(1.0).unwrap() - 0.27183).abs() < 1e-5);
        assert!(s.majorant_norm(1.5).is_err());
        assert!(s.majorant_norm(0.0).is_err());
    }

    #[test]
    fn empirical_sup_single_term() {
        let eps = 1e-3;
        let s = LaurentSeries::from_terms(2, 1.0, [(1, c(eps, 0.0))]).unwrap();
        let sup = s.empirical_sup_norm(0.7, 64).unwrap();
        assert!((sup - eps * 0.7f64.exp()).abs() < 1e-15);
        assert_eq!(
            LaurentSeries::zeros(2, 1.0).unwrap().empirical_sup_norm(0.5, 8).unwrap(),
            0.0
        );
        assert!(matches!(
            s.empirical_sup_norm(0.5, 3),
            Err(Error::InsufficientSampling { .. })
        ));
    }

    #[test]
    fn log_derivative_single_term() {
        let a = c(0.3, -0.4);
        let s = LaurentSeries::from_terms(3, 1.0, [(1, a)]).unwrap();
        assert!((s.log_derivative_majorant(0.6).unwrap() - 0.5 * 0.6f64.exp()).abs() < 1e-15);
        assert_eq!(
            LaurentSeries::zeros(3, 1.0).unwrap().log_derivative_majorant(0.5).unwrap(),
            0.0
        );
    }

    #[test]
    fn dft_of_monomial() {
        let n = 8;
        for n0 in [-3i64, 0, 5] {
            let vals: Vec<_> = unit_circle(4 * n).map(|w| w.powi(n0 as i32)).collect();
            let fit = coeffs_from_circle(&vals, n, 1.0).unwrap();
            for (k, ck) in fit.series.terms() {
                let expect = if k == n0 { 1.0 } else { 0.0 };
                assert!((ck - c(expect, 0.0)).norm() < 1e-14, "k={k}");
            }
        }
        let zeros = vec![c(0.0, 0.0); 32];
        assert!(coeffs_from_circle(&zeros, 8, 1.0).unwrap().series.is_zero());
    }

    #[test]
    fn undersampling_rejected() {
        let vals = vec![c(1.0, 0.0); 31];
        assert!(matches!(
            coeffs_from_circle(&vals, 8, 1.0),
            Err(Error::InsufficientSampling { needed: 32, got: 31 })
        ));
    }

    #[test]
    fn decay_check_flags_constructed_violation() {
        let n = 16;
        let sigma = 1.0;
        let norm = 0.5;
        let bad = 2.0 * norm * (-(n as f64) * sigma).exp();
        let s = LaurentSeries::from_terms(n, sigma, [(n as i64, c(bad, 0.0))]).unwrap();
        let rep = s.decay_check(norm);
        assert!(!rep.passed());
        assert_eq!(rep.violations(), vec![n as i64]);
        assert!(LaurentSeries::zeros(n, sigma).unwrap().decay_check(0.0).passed());
    }

    #[test]
    fn decay_tail_mass_closed_form() {
        let s = LaurentSeries::zeros(4, 1.0).unwrap();
        let rep = s.decay_check(1.0);
        let brute: f64 = (5..2000).map(|k| 2.0 * (-(k as f64) * 0.5).exp()).sum();
        assert!((rep.tail_mass(0.5) - brute).abs() < 1e-14);
        assert!(rep.tail_mass(1.0).is_infinite());
    }

    #[test]
    fn reality_projection() {
        let mut s = LaurentSeries::from_terms(2, 1.0, [(1, c(0.2, 0.1)), (-1, c(-0.2, 0.1))]).unwrap();
        assert!(s.reality_defect() < 1e-16);
        *s.coeff_mut(2) = c(0.01, 0.0);
        assert!((s.reality_defect() - 0.01).abs() < 1e-16);
        let moved = s.project_reality();
        assert!((moved - 0.005).abs() < 1e-16);
        assert!(s.reality_defect() < 1e-16);
        for w in unit_circle(16) {
            assert!(s.horner(w).re.abs() < 1e-16);
        }
    }

    #[test]
    fn json_schema() {
        let s = LaurentSeries::from_terms(3, 0.75, [(-1, c(2.0, 0.5))]).unwrap();
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["N"], 3);
        assert_eq!(v["sigma"], 0.75);
        assert_eq!(v["coeffs"], serde_json::json!([[-1, 2.0, 0.5]]));
        let back: LaurentSeries = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
        let bad = serde_json::json!({"N": 1, "sigma": 1.0, "coeffs": [[3, 1.0, 0.0]]});
        assert!(serde_json::from_value::<LaurentSeries>(bad).is_err());
    }
}
