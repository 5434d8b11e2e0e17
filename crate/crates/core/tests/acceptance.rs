//! End-to-end acceptance checks. Runs with a custom harness so that each
//! criterion prints exactly one PASS/FAIL line.

// `ensure!` negates its condition so that NaN counts as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::f64::consts::{PI, TAU};
use std::process::ExitCode;
use std::time::Instant;

use kamcircle_core::circle::inverse_residual;
use kamcircle_core::cocycle::{mode_matrix, ModeOperator};
use kamcircle_core::engine::{fit_c0, KamParams, PHASE_TOL, RESIDUAL_SAMPLES};
use kamcircle_core::scenario::{first_harmonic_hat, genus2_consistent, genus2_inconsistent, rotation_mismatch};
use kamcircle_core::{
    amplification_spectrum, build_single_chart, extract_simultaneous, fit_diophantine, run, solve_mode,
    CircleDiffeo, Complex64, Error, ErrorClass, LaurentSeries, Nerve, RunOutput, Scenario, UnitaryFlatBundle,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

fn silver() -> f64 {
    2f64.sqrt() - 1.0
}

fn desk_params(scenario: &Scenario, strict: bool) -> Result<KamParams, String> {
    let mut p = scenario.params.clone();
    p.mu = Some(2.0);
    p.sigma0 = Some(1.0);
    p.eta0 = Some(0.05);
    p.n = Some(64);
    p.strict_schedule = Some(strict);
    p.resolve(&scenario.system).map_err(err)
}

fn flagship() -> Result<(Scenario, KamParams), String> {
    let hat = first_harmonic_hat(Complex64::new(1e-4, 0.0), 64, 1.0).map_err(err)?;
    let scenario = build_single_chart(golden(), hat, 1.0).map_err(err)?;
    // The flagship hat lies above the admission gate, so certificate
    // failures are logged rather than fatal.
    let params = desk_params(&scenario, false)?;
    Ok((scenario, params))
}

fn flagship_run() -> Result<(RunOutput, KamParams, f64), String> {
    let (scenario, params) = flagship()?;
    let start = Instant::now();
    let out = run(&scenario.system, &params).map_err(err)?;
    Ok((out, params, start.elapsed().as_secs_f64()))
}

/// Random hat with `c_{-k} = -conj(c_k)` and `‖f̂‖_width <= amp`.
fn random_hat(rng: &mut ChaCha8Rng, n: usize, width: f64, modes: usize, amp: f64) -> LaurentSeries {
    let weights: Vec<f64> = (0..modes).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = weights.iter().fold(0.0, |a, w| a + w) * 2.0;
    let mut terms = Vec::new();
    for (i, w) in weights.iter().enumerate() {
        let k = i as i64 + 1;
        let r = amp * w / total * (-(k as f64) * width).exp();
        let c = Complex64::from_polar(r, rng.gen_range(0.0..TAU));
        terms.push((k, c));
        terms.push((-k, -c.conj()));
    }
    LaurentSeries::from_terms(n, width, terms).unwrap()
}

fn criterion_1() -> Check {
    let (out, _, secs) = flagship_run()?;
    let steps = out.trace.rows.len() - 1;
    ensure!(out.residual <= 1e-8, "conjugation residual {:e} > 1e-8", out.residual);
    ensure!(steps <= 20, "{steps} steps > 20");
    ensure!(secs <= 10.0, "{secs:.2} s > 10 s");
    Ok(format!(
        "golden-mean flagship converged in {steps} steps, residual {:.2e}, {:.3} s ({} logged certificate violations; run non-strict)",
        out.residual,
        secs,
        out.trace.violations().count()
    ))
}

fn criterion_2() -> Check {
    let (out, params, _) = flagship_run()?;
    let rows = &out.trace.rows;
    let k = params.contraction_constant();
    let mut worst: f64 = 0.0;
    for pair in rows.windows(2) {
        let (cur, next) = (&pair[0], &pair[1]);
        let bound = k * cur.max_hat_norm * cur.max_hat_norm / cur.eta.powf(params.mu + 1.0);
        ensure!(
            next.max_hat_norm <= bound,
            "step {}: ‖f̂‖ = {:e} exceeds the quadratic bound {bound:e}",
            cur.m,
            next.max_hat_norm
        );
        worst = worst.max(next.max_hat_norm / bound);
    }
    ensure!(rows.len() >= 2, "trace has no step to check");
    Ok(format!(
        "{} trace steps satisfy the quadratic estimate; worst ratio {:.2e}",
        rows.len() - 1,
        worst
    ))
}

fn check_schedule(p: &KamParams) -> Result<usize, String> {
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
    let k = p.contraction_constant();
    let r = p.ratio();
    let limit = p.sigma_limit();
    ensure!(limit > 0.0, "sigma limit {limit} is not positive");
    let mut checked = 0;
    for m in 0..200 {
        let (c, n) = (p.schedule(m), p.schedule(m + 1));
        // σ_m - σ∞ = 4η_m/(1 - r); once that gap is below rounding the two coincide.
        if 4.0 * c.eta / (1.0 - r) > 64.0 * f64::EPSILON * p.sigma0 {
            ensure!(c.sigma > limit, "sigma_{m} = {} not above the limit {limit}", c.sigma);
        }
        ensure!(rel(n.eta, r * c.eta) <= 1e-12, "eta identity fails at m = {m}");
        ensure!(rel(n.sigma, c.sigma - 4.0 * c.eta) <= 1e-12, "sigma identity fails at m = {m}");
        if n.delta >= 1e-250 {
            let step = k * c.delta * c.delta / c.eta.powf(p.mu + 1.0);
            ensure!(rel(n.delta, step) <= 1e-12, "delta identity fails at m = {m}: {} vs {step}", n.delta);
            ensure!(n.delta < n.eta, "delta_{} >= eta_{}", m + 1, m + 1);
            ensure!(
                n.delta <= p.inductive_bound(n.eta) * (1.0 + 1e-12),
                "delta_{} above the inductive bound",
                m + 1
            );
            checked += 1;
        }
    }
    // The full recursion squares δ each step, so its own rounding error grows
    // like 2^m ε; it is compared with the closed form while that stays below 1e-12.
    for e in p.schedule_recursive(8) {
        let c = p.schedule(e.m);
        ensure!(
            rel(c.delta, e.delta) <= 1e-12 && rel(c.eta, e.eta) <= 1e-12 && rel(c.sigma, e.sigma) <= 1e-12,
            "closed form and recursion differ at m = {}",
            e.m
        );
    }
    Ok(checked)
}

fn criterion_3() -> Check {
    let (_, flag) = flagship()?;
    let others = [
        KamParams::new(0.7, 2.5, 1.0, 0.01, 16, 1e-10, 10, true).map_err(err)?,
        KamParams::new(1e-6, 1.5, 5.0, 0.15, 16, 1e-10, 10, true).map_err(err)?,
    ];
    let mut checked = 0;
    for p in std::iter::once(&flag).chain(&others) {
        checked += check_schedule(p)?;
    }
    Ok(format!(
        "one-step identities hold at {checked} indices over 3 parameter sets; closed form matches recursion for m <= 8; sigma_m > sigma_inf = {:.4} > 0",
        flag.sigma_limit()
    ))
}

fn criterion_4() -> Check {
    let theta = golden();
    let nerve = Nerve::from_ids(&["U"], &[("U", "U", "f")], &[]).map_err(err)?;
    let bundle = UnitaryFlatBundle::new(nerve, vec![TAU * theta]).map_err(err)?;
    let spectrum = amplification_spectrum(&bundle, 256).map_err(err)?;
    let mut worst: f64 = 0.0;
    for m in &spectrum {
        let exact = 1.0 / (2.0 * (PI * m.n as f64 * theta).sin()).abs();
        let e = (m.amplification - exact).abs() / exact;
        ensure!(e <= 1e-10, "A_{} = {:e}, closed form {exact:e}", m.n, m.amplification);
        worst = worst.max(e);
    }
    let fit = fit_diophantine(&spectrum, 2.0).map_err(err)?;
    let brute = (1..=256i64)
        .flat_map(|n| [n, -n])
        .map(|n| 1.0 / (2.0 * (PI * n as f64 * theta).sin()).abs() / n.unsigned_abs() as f64)
        .fold(0.0, f64::max);
    ensure!(
        (fit.c0 - brute).abs() <= 1e-10 * brute,
        "fitted C0 {} vs brute force {brute}",
        fit.c0
    );
    Ok(format!(
        "{} modes match 1/|2 sin(pi n theta)| (worst rel {worst:.1e}); C0 = {:.6} at n = {} matches brute force",
        spectrum.len(),
        fit.c0,
        fit.argmax
    ))
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let nerve = Nerve::from_ids(
        &["U0", "U1", "U2"],
        &[("U0", "U1", "+"), ("U0", "U1", "-"), ("U0", "U2", "+"), ("U0", "U2", "-")],
        &[],
    )
    .map_err(err)?;
    let mut done = 0;
    let mut worst_res: f64 = 0.0;
    let mut worst_gen: f64 = 0.0;
    while done < 100 {
        let phases = vec![rng.gen_range(0.0..TAU), 0.0, rng.gen_range(0.0..TAU), 0.0];
        let bundle = UnitaryFlatBundle::new(nerve.clone(), phases).map_err(err)?;
        let n = rng.gen_range(1..=64i64) * if rng.gen_bool(0.5) { 1 } else { -1 };
        let op = match ModeOperator::new(&bundle, n) {
            Ok(op) => op,
            Err(Error::ResonantMode { .. }) => continue,
            Err(e) => return Err(err(e)),
        };
        let gen: Vec<Complex64> = (0..3)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let m = mode_matrix(&bundle, n);
        let b: Vec<Complex64> = (0..m.nrows())
            .map(|i| (0..3).fold(Complex64::new(0.0, 0.0), |acc, j| acc + m[(i, j)] * gen[j]))
            .collect();
        let bnorm = b.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let sol = solve_mode(&bundle, n, &b).map_err(err)?;
        ensure!(
            sol.residual <= 1e-10 * bnorm,
            "mode {n}: residual {:e} > 1e-10 ‖b‖ = {:e}",
            sol.residual,
            1e-10 * bnorm
        );
        // Remove the kernel component of the difference before comparing; on
        // this nerve the kernel is trivial away from resonance.
        ensure!(op.kernel_dim == 0, "unexpected kernel of dimension {}", op.kernel_dim);
        let diff = sol
            .a
            .iter()
            .zip(&gen)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        let scale = gen.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let allowed = 1e-10 * op.amplification().max(1.0) * bnorm + 1e-12 * scale;
        ensure!(diff <= allowed, "mode {n}: cochain differs from the generator by {diff:e}");
        worst_res = worst_res.max(sol.residual / bnorm);
        worst_gen = worst_gen.max(diff / scale);
        done += 1;
    }
    Ok(format!(
        "100 random exact coboundaries on the genus-2 nerve: worst residual/‖b‖ {worst_res:.1e}, worst generator error {worst_gen:.1e}"
    ))
}

fn criterion_6() -> Check {
    let scenario = genus2_consistent(golden(), silver(), 1e-4, 64, 1.0).map_err(err)?;
    let params = desk_params(&scenario, false)?;
    let out = run(&scenario.system, &params).map_err(err)?;
    let ex = extract_simultaneous(&out.conjugacy, &scenario.system).map_err(err)?;
    let worst = ex.residuals.iter().chain(&ex.minus_residuals).cloned().fold(0.0, f64::max);
    ensure!(worst <= 1e-8, "extraction residual {worst:e} > 1e-8");
    let mut mismatch: f64 = 0.0;
    for (j, edge) in [0usize, 2].iter().enumerate() {
        let d = rotation_mismatch(ex.rotations[j], &scenario.system.maps()[*edge], 200_000)
            .map_err(err)?
            .abs();
        ensure!(d <= 1e-6, "rotation {} differs from 2 pi rho(f_{}) by {d:e}", ex.rotations[j], j + 1);
        mismatch = mismatch.max(d);
    }
    Ok(format!(
        "common conjugator found in {} steps; extraction residual {worst:.1e}; rotations match 2 pi rho to {mismatch:.1e}",
        out.trace.rows.len() - 1
    ))
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cases = 100;

    // Phase invariance and reality preservation along in-gate runs.
    let mut worst_drift: f64 = 0.0;
    let mut worst_reality: f64 = 0.0;
    let mut steps = 0;
    for i in 0..cases {
        let theta = if i % 2 == 0 { golden() } else { silver() };
        let nerve = Nerve::from_ids(&["U"], &[("U", "U", "f")], &[]).map_err(err)?;
        let bundle = UnitaryFlatBundle::new(nerve, vec![TAU * theta]).map_err(err)?;
        let c0 = fit_c0(&bundle, 64, 2.0).map_err(err)?;
        let params = KamParams::new(c0, 2.0, 1.0, 0.05, 64, 1e-10, 20, true).map_err(err)?;
        let amp = params.gate() * rng.gen_range(0.05..0.9);
        let modes = rng.gen_range(1..=4);
        let hat = random_hat(&mut rng, 64, 1.0, modes, amp);
        let scenario = build_single_chart(theta, hat, 1.0).map_err(err)?;
        let out = run(&scenario.system, &params).map_err(err)?;
        for s in &out.trace.steps {
            worst_drift = worst_drift.max(s.phase_drift);
            worst_reality = worst_reality.max(s.reality_projection);
            steps += 1;
        }
    }
    ensure!(worst_drift <= PHASE_TOL, "phase drift {worst_drift:e} > 1e-10");
    ensure!(worst_reality <= 1e-8, "reality projection {worst_reality:e} > 1e-8");

    // Circle preservation and inverse composition for random maps.
    let mut worst_circle: f64 = 0.0;
    let mut worst_inverse: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.gen_range(8..=48);
        let (phase, modes, amp) = (rng.gen_range(0.0..TAU), rng.gen_range(1..=6), rng.gen_range(1e-6..0.2));
        let f = CircleDiffeo::new(phase, random_hat(&mut rng, n, 1.0, modes, amp)).map_err(err)?;
        worst_circle = worst_circle.max(f.circle_defect(256));
        let phase = rng.gen_range(0.0..TAU);
        let g = CircleDiffeo::new(phase, random_hat(&mut rng, n, 1.0, 3, 0.05)).map_err(err)?;
        let fg = CircleDiffeo::compose(&f, &g, 0.8).map_err(err)?;
        worst_circle = worst_circle.max(fg.circle_defect(256));

        let (modes, amp) = (rng.gen_range(1..=4), rng.gen_range(1e-6..2e-2));
        let psi = CircleDiffeo::new(0.0, random_hat(&mut rng, n, 1.0, modes, amp)).map_err(err)?;
        let inv = psi.invert(0.5).map_err(err)?;
        worst_inverse = worst_inverse.max(inverse_residual(&psi, &inv, 0.5, RESIDUAL_SAMPLES));
        worst_circle = worst_circle.max(inv.circle_defect(256));
    }
    ensure!(worst_circle <= 1e-10, "circle defect {worst_circle:e} > 1e-10");
    ensure!(worst_inverse <= 1e-9, "inverse-composition residual {worst_inverse:e} > 1e-9");
    Ok(format!(
        "{cases} in-gate runs ({steps} steps): drift {worst_drift:.1e}, reality projection {worst_reality:.1e}; \
         {cases} random maps: circle defect {worst_circle:.1e}, inverse residual {worst_inverse:.1e}"
    ))
}

fn expect_certificate(label: &str, result: Result<RunOutput, Error>, check: impl Fn(&Error) -> bool) -> Check {
    match result {
        Ok(out) => Err(format!("{label}: returned a result (residual {:e})", out.residual)),
        Err(e) if check(&e) && e.class() == ErrorClass::Certificate => Ok(format!("{label}: {}", e.kind())),
        Err(e) => Err(format!("{label}: wrong failure {e}")),
    }
}

fn criterion_8() -> Check {
    let mut seen = Vec::new();
    for (label, theta, k) in [("theta = 1/3", 1.0 / 3.0, 3i64), ("theta = 1/2", 0.5, 2)] {
        let hat = LaurentSeries::from_terms(
            64,
            1.0,
            [
                (1, Complex64::new(1e-4, 0.0)),
                (-1, Complex64::new(-1e-4, 0.0)),
                (k, Complex64::new(1e-5, 0.0)),
                (-k, Complex64::new(-1e-5, 0.0)),
            ],
        )
        .map_err(err)?;
        let mut scenario = build_single_chart(theta, hat, 1.0).map_err(err)?;
        scenario.params.c0 = Some(1.0);
        for strict in [false, true] {
            let params = desk_params(&scenario, strict)?;
            let result = run(&scenario.system, &params).map_err(|f| f.error);
            seen.push(expect_certificate(label, result, |e| {
                strict || matches!(e, Error::ResonantMode { mode, .. } if mode.abs() == k)
            })?);
        }
    }
    let scenario = genus2_inconsistent(golden(), silver(), 1e-4, 64, 1.0).map_err(err)?;
    for strict in [false, true] {
        let params = desk_params(&scenario, strict)?;
        let result = run(&scenario.system, &params).map_err(|f| f.error);
        seen.push(expect_certificate("inconsistent genus-2", result, |e| {
            strict || matches!(e, Error::CoboundaryFailure { mode: 1 | -1, .. })
        })?);
    }
    Ok(format!("certificate class (CLI exit 3) for all: {}", seen.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("classical-limit reproduction", criterion_1),
        ("quadratic-type contraction", criterion_2),
        ("schedule identities", criterion_3),
        ("small-divisor oracle", criterion_4),
        ("coboundary solver exactness", criterion_5),
        ("simultaneous linearization", criterion_6),
        ("invariance suites", criterion_7),
        ("failure honesty", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
