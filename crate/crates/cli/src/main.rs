//! kamcircle: run, gate, inspect and verify linearization scenarios.
//!
//! Exit codes: 0 success, 2 invalid input, 3 certificate or convergence failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kamcircle_core::cocycle::{amplification_spectrum, fit_diophantine};
use kamcircle_core::engine::{alpha_vs_rotation, gate_check, run, Conjugacy, CONJUGACY_TOL, RESIDUAL_SAMPLES};
use kamcircle_core::scenario::{
    build_single_chart, first_harmonic_hat, genus2_consistent, genus2_inconsistent, Diagnostics,
    Scenario,
};
use kamcircle_core::{Complex64, Error, ErrorClass, LaurentSeries};
use serde_json::json;

#[derive(Parser)]
#[command(name = "kamcircle", version, about = "Linearize circle-diffeomorphism transition systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full iteration and write trace, conjugacy and diagnostics.
    Run {
        scenario: PathBuf,
        /// Output directory (created if missing).
        #[arg(long, default_value = "kamcircle-out")]
        out: PathBuf,
        /// Log certificate failures instead of aborting.
        #[arg(long)]
        no_strict: bool,
    },
    /// Compare the initial hat majorants with the admission gate.
    Gate { scenario: PathBuf },
    /// Edge phases next to 2π times the rotation number of each transition.
    Rotnum {
        scenario: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        iters: usize,
    },
    /// Amplification spectrum of the linear part and the fitted C0.
    Dioph {
        scenario: PathBuf,
        #[arg(long, default_value_t = 64)]
        modes: usize,
        #[arg(long, default_value_t = 2.0)]
        mu: f64,
    },
    /// Check a conjugacy against a scenario's transitions.
    Verify { conjugacy: PathBuf, scenario: PathBuf },
    /// Write one of the built-in scenarios as JSON.
    Example {
        #[arg(value_enum)]
        kind: ExampleKind,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExampleKind {
    /// Golden-mean rotation with an `ε = 1e-4` first harmonic.
    Flagship,
    /// Golden-mean rotation without perturbation.
    Linear,
    /// Rotation by 1/3 with a third harmonic.
    Resonant,
    /// Genus-2 suspension with a common conjugator.
    Genus2,
    /// Genus-2 suspension whose mode-1 data is not a coboundary.
    Genus2Inconsistent,
}

type Outcome = Result<(), Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            no_strict,
        } => cmd_run(&scenario, &out, no_strict),
        Command::Gate { scenario } => cmd_gate(&scenario),
        Command::Rotnum { scenario, iters } => cmd_rotnum(&scenario, iters),
        Command::Dioph { scenario, modes, mu } => cmd_dioph(&scenario, modes, mu),
        Command::Verify {
            conjugacy,
            scenario,
        } => cmd_verify(&conjugacy, &scenario),
        Command::Example { kind, output } => cmd_example(kind, output.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    match e.class() {
        ErrorClass::Validation => ExitCode::from(2),
        ErrorClass::Certificate => ExitCode::from(3),
    }
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<Scenario, Error> {
    Scenario::from_json(&read(path)?)
}

/// Writes a line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Outcome {
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::Serialization(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn pretty(v: &impl serde::Serialize) -> Result<String, Error> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn cmd_run(path: &Path, out: &Path, no_strict: bool) -> Outcome {
    fs::create_dir_all(out).map_err(|e| Error::Serialization(format!("{}: {e}", out.display())))?;
    let diag_path = out.join("diagnostics.json");
    let result = (|| {
        let scenario = load(path)?;
        let mut params = scenario.resolve_params()?;
        if no_strict {
            params.strict_schedule = false;
        }
        let outputs = scenario.outputs.clone();
        match run(&scenario.system, &params) {
            Ok(done) => {
                if outputs.trace_csv {
                    write(&out.join("trace.csv"), &done.trace.to_csv())?;
                }
                write(&out.join("trace.json"), &pretty(&done.trace)?)?;
                if outputs.conjugacy_json {
                    write(&out.join("conjugacy.json"), &pretty(&done.conjugacy)?)?;
                }
                let steps = done.trace.rows.len() - 1;
                let violations = done.trace.violations().count();
                emit(&format!(
                    "converged in {steps} step(s); conjugation residual {:e}; {violations} logged violation(s)",
                    done.residual
                ))?;
                Ok((
                    outputs.diagnostics_json,
                    Diagnostics::success(format!(
                        "converged in {steps} step(s) with residual {:e}",
                        done.residual
                    )),
                ))
            }
            Err(failure) => {
                if outputs.trace_csv {
                    write(&out.join("trace.csv"), &failure.trace.to_csv())?;
                }
                write(&out.join("trace.json"), &pretty(&failure.trace)?)?;
                Err(failure.error)
            }
        }
    })();
    match result {
        Ok((emit, diag)) => {
            if emit {
                write(&diag_path, &pretty(&diag)?)?;
            }
            Ok(())
        }
        Err(e) => {
            write(&diag_path, &pretty(&Diagnostics::from_error(&e))?)?;
            Err(e)
        }
    }
}

fn cmd_gate(path: &Path) -> Outcome {
    let scenario = load(path)?;
    let params = scenario.resolve_params()?;
    let report = gate_check(&scenario.system, &params)?;
    emit(&pretty(&report)?)?;
    match report.first_failure() {
        None => Ok(()),
        Some(edge) => Err(Error::ScheduleViolation {
            step: 0,
            certificate: "gate".into(),
            edge: Some(edge.edge.clone()),
            detail: format!("majorant {:e} is not below the gate {:e}", edge.majorant, report.gate),
        }),
    }
}

fn cmd_rotnum(path: &Path, iters: usize) -> Outcome {
    let scenario = load(path)?;
    let report = alpha_vs_rotation(&scenario.system, iters)?;
    emit(&pretty(&report)?)?;
    Ok(())
}

fn cmd_dioph(path: &Path, modes: usize, mu: f64) -> Outcome {
    let scenario = load(path)?;
    let spectrum = amplification_spectrum(&scenario.system.bundle()?, modes)?;
    let fit = fit_diophantine(&spectrum, mu)?;
    emit(&pretty(&json!({ "spectrum": spectrum, "fit": fit }))?)?;
    Ok(())
}

fn cmd_verify(conj_path: &Path, scenario_path: &Path) -> Outcome {
    let conj: Conjugacy = serde_json::from_str(&read(conj_path)?)?;
    let scenario = load(scenario_path)?;
    let residual = conj.verify(&scenario.system, CONJUGACY_TOL)?;
    emit(&pretty(&json!({
        "residual": residual,
        "tolerance": CONJUGACY_TOL,
        "samples": RESIDUAL_SAMPLES,
        "passed": true,
    }))?)
}

fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

fn cmd_example(kind: ExampleKind, output: Option<&Path>) -> Outcome {
    let (n, sigma0) = (64, 1.0);
    let mut scenario = match kind {
        ExampleKind::Flagship | ExampleKind::Linear => {
            let eps = if matches!(kind, ExampleKind::Flagship) { 1e-4 } else { 0.0 };
            let mut s = build_single_chart(golden(), first_harmonic_hat(Complex64::new(eps, 0.0), n, sigma0)?, sigma0)?;
            s.name = if eps > 0.0 { "golden-mean flagship" } else { "golden-mean rotation" }.into();
            s
        }
        ExampleKind::Resonant => {
            let hat = LaurentSeries::from_terms(
                n,
                sigma0,
                [
                    (1, Complex64::new(1e-4, 0.0)),
                    (-1, Complex64::new(-1e-4, 0.0)),
                    (3, Complex64::new(1e-5, 0.0)),
                    (-3, Complex64::new(-1e-5, 0.0)),
                ],
            )?;
            let mut s = build_single_chart(1.0 / 3.0, hat, sigma0)?;
            s.name = "rational rotation 1/3".into();
            s.params.c0 = Some(1.0);
            s
        }
        ExampleKind::Genus2 => genus2_consistent(golden(), 2f64.sqrt() - 1.0, 1e-4, n, sigma0)?,
        ExampleKind::Genus2Inconsistent => genus2_inconsistent(golden(), 2f64.sqrt() - 1.0, 1e-4, n, sigma0)?,
    };
    scenario.params.mu = Some(2.0);
    scenario.params.eta0 = Some(0.05);
    scenario.params.n = Some(n);
    // The ε = 1e-4 examples lie outside the admission gate; they are run
    // with certificate failures logged rather than fatal.
    if !matches!(kind, ExampleKind::Linear) {
        scenario.params.strict_schedule = Some(false);
    }
    let text = scenario.to_json()?;
    match output {
        Some(p) => write(p, &text),
        None => emit(&text),
    }
}
