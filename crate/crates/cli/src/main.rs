//! `curveflow`: fit curves to a family, simulate the projected coordinate
//! dynamics, check the one-step orthogonality of the projection, and
//! calibrate volatility parameters from coordinate series.
//!
//! Exit codes: 0 success; 2 bad input (config, CSV, dimensions, missing
//! files); 3 fit did not converge; 4 simulation aborted (blow-up or left the
//! parameter domain); 5 project-check on a nonlinear family; 6 calibration
//! did not converge (outputs still written); 1 anything else.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use curveflow_core::error::Error;
use curveflow_core::estimation::{GmmProblem, GmmRun, ThetaSpace};
use curveflow_core::function_space::{inner_product, norm_h};
use curveflow_core::hjm::{euler_step, DriftForm};
use curveflow_core::io::{fmt_float, read_curve_csv, read_series_csv, write_series_csv};
use curveflow_core::manifold::fit_curve;
use curveflow_core::noise::NoiseStream;
use curveflow_core::optim::NelderMeadOptions;
use curveflow_core::projection_dynamics::CoordSde;
use rayon::prelude::*;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "curveflow", version, about = "Forward-curve projection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (sectioned key = value file).
    #[arg(long)]
    config: PathBuf,
    /// Print progress to stdout.
    #[arg(long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a curve file to the configured family; writes coordinates and a
    /// residual-norm report.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Input curve CSV (`x,value`).
        #[arg(long)]
        curve: PathBuf,
        /// Output coordinates CSV.
        #[arg(long, default_value = "coords.csv")]
        out: PathBuf,
        /// Residual-norm report file.
        #[arg(long, default_value = "fit_report.txt")]
        report: PathBuf,
        /// Interpolate file nodes onto the grid instead of requiring an
        /// exact match.
        #[arg(long)]
        resample: bool,
    },
    /// Simulate the projected coordinate SDE; writes one series CSV per path.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output series CSV (path index is appended when paths > 1).
        #[arg(long, default_value = "series.csv")]
        out: PathBuf,
        /// Override the seed from the `[sim]` section.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for multi-path runs.
        #[arg(long)]
        jobs: Option<usize>,
        /// Dump the reconstructed curve every k steps.
        #[arg(long, value_name = "k")]
        dump_curves: Option<usize>,
        /// Directory for curve dumps.
        #[arg(long, default_value = "curves")]
        curves_dir: PathBuf,
        /// Resample any configured curve files onto the grid.
        #[arg(long)]
        resample: bool,
    },
    /// Paired one-step orthogonality check of the projection (affine-type
    /// families only).
    ProjectCheck {
        #[command(flatten)]
        common: Common,
        /// Number of independent noise draws.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Report file.
        #[arg(long, default_value = "project_check.txt")]
        out: PathBuf,
        #[arg(long)]
        resample: bool,
    },
    /// Calibrate volatility parameters from a coordinate series.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Input series CSV (`t,z1,...,zn`).
        #[arg(long)]
        series: PathBuf,
        /// Output estimates CSV.
        #[arg(long, default_value = "estimates.csv")]
        out: PathBuf,
        /// Run log with objective traces.
        #[arg(long, default_value = "run_log.txt")]
        log: PathBuf,
        #[arg(long)]
        resample: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit {
            common,
            curve,
            out,
            report,
            resample,
        } => cmd_fit(&common, &curve, &out, &report, resample),
        Command::Simulate {
            common,
            out,
            seed,
            jobs,
            dump_curves,
            curves_dir,
            resample,
        } => cmd_simulate(&common, &out, seed, jobs, dump_curves, &curves_dir, resample),
        Command::ProjectCheck {
            common,
            seeds,
            out,
            resample,
        } => cmd_project_check(&common, seeds, &out, resample),
        Command::Calibrate {
            common,
            series,
            out,
            log,
            resample,
        } => cmd_calibrate(&common, &series, &out, &log, resample),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("curveflow: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Csv { .. }
        | Error::Config { .. }
        | Error::Io(_)
        | Error::InvalidArgument(_)
        | Error::IncompatibleGrid
        | Error::InvalidTheta
        | Error::DegenerateBasis { .. }
        | Error::SingularWeighting => 2,
        Error::FitFailed { .. } => 3,
        Error::NumericalBlowup { .. } | Error::OutOfDomain { .. } => 4,
    }
}

type CmdResult = Result<ExitCode, Error>;

fn cmd_fit(
    common: &Common,
    curve_path: &Path,
    out: &Path,
    report: &Path,
    resample: bool,
) -> CmdResult {
    let cfg = RunConfig::load(&common.config)?;
    let grid = cfg.build_grid()?;
    let w = cfg.build_weight(&grid)?;
    let fam = cfg.build_family(&grid, resample)?;
    let target = read_curve_csv(curve_path, &grid, resample)?;
    let z_init = cfg.z_init(&fam)?;

    let (coords, exit) = match fit_curve(&target, &fam, &z_init, &w) {
        Ok(z) => (z, ExitCode::SUCCESS),
        Err(Error::FitFailed {
            best,
            iters,
            residual_norm,
        }) => {
            eprintln!(
                "curveflow: fit did not converge after {iters} iterations (residual {residual_norm:.3e}); writing best iterate"
            );
            (best, ExitCode::from(3))
        }
        Err(e) => return Err(e),
    };
    let fitted = fam.eval(&coords, &grid)?;
    let residual_norm = norm_h(&target.sub(&fitted)?, &w)?;

    let mut csv = String::new();
    for i in 1..=coords.len() {
        if i > 1 {
            csv.push(',');
        }
        csv.push_str(&format!("z{i}"));
    }
    csv.push('\n');
    for (i, c) in coords.iter().enumerate() {
        if i > 0 {
            csv.push(',');
        }
        csv.push_str(&fmt_float(*c));
    }
    csv.push('\n');
    std::fs::write(out, csv)?;

    let mut rep = String::new();
    rep.push_str(&format!("residual_norm = {}\n", fmt_float(residual_norm)));
    rep.push_str(&format!(
        "converged = {}\n",
        exit == ExitCode::SUCCESS
    ));
    std::fs::write(report, rep)?;

    if common.verbose {
        println!("fit: coords written to {}, residual norm {residual_norm:.6e}", out.display());
    }
    Ok(exit)
}

fn cmd_simulate(
    common: &Common,
    out: &Path,
    seed_override: Option<u64>,
    jobs: Option<usize>,
    dump_curves: Option<usize>,
    curves_dir: &Path,
    resample: bool,
) -> CmdResult {
    let cfg = RunConfig::load(&common.config)?;
    let grid = cfg.build_grid()?;
    let w = cfg.build_weight(&grid)?;
    let fam = cfg.build_family(&grid, resample)?;
    let vol = cfg.build_vol()?;
    let sim = cfg.build_sim()?;
    let seed = seed_override.unwrap_or(sim.seed);

    let z0 = match (&sim.z0, &sim.r0_file) {
        (Some(z0), _) => {
            if z0.len() != fam.n() {
                return Err(Error::invalid(format!(
                    "z0 has dimension {} but the family has {}",
                    z0.len(),
                    fam.n()
                )));
            }
            z0.clone()
        }
        (None, Some(r0)) => {
            let r0 = read_curve_csv(r0, &grid, resample)?;
            fit_curve(&r0, &fam, &cfg.z_init(&fam)?, &w)?
        }
        (None, None) => unreachable!("validated at parse time"),
    };

    let sde = Arc::new(CoordSde::new(fam, vol, w, Arc::clone(&grid))?);
    if let Some(j) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .ok();
    }

    let runs: Vec<(u64, Result<curveflow_core::projection_dynamics::CoordSeries<f64>, Error>)> =
        (0..sim.paths as u64)
            .into_par_iter()
            .map(|p| {
                let stream = NoiseStream::new(seed).path(p);
                (p, sde.simulate(&z0, sim.delta, sim.steps, &stream, sim.scheme))
            })
            .collect();

    for (p, run) in &runs {
        let series = match run {
            Ok(s) => s,
            Err(e) => {
                eprintln!("curveflow: path {p}: {e}");
                return Ok(ExitCode::from(exit_code_for(e)));
            }
        };
        let path = if sim.paths == 1 {
            out.to_path_buf()
        } else {
            suffixed(out, &format!("_p{p:04}"))
        };
        write_series_csv(&path, series)?;
        if let Some(k) = dump_curves {
            if k == 0 {
                return Err(Error::invalid("--dump-curves must be positive"));
            }
            std::fs::create_dir_all(curves_dir)?;
            for (step, z) in series.points().iter().enumerate().step_by(k) {
                let curve = sde.reconstruct_curve(z)?;
                let name = curves_dir.join(format!("curve_p{p:04}_s{step:06}.csv"));
                curveflow_core::io::write_curve_csv(&name, &curve)?;
            }
        }
        if common.verbose {
            println!("simulate: path {p} written to {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let ext = path
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}{ext}"))
}

fn cmd_project_check(common: &Common, seeds: u64, out: &Path, resample: bool) -> CmdResult {
    let cfg = RunConfig::load(&common.config)?;
    let grid = cfg.build_grid()?;
    let w = cfg.build_weight(&grid)?;
    let fam = cfg.build_family(&grid, resample)?;
    let vol = cfg.build_vol()?;
    let sim = cfg.build_sim()?;

    if !fam.is_linear_in_z() {
        eprintln!(
            "curveflow: project-check needs a family whose tangents are coordinate-independent \
             (affine, nelson_siegel or exp_basis); the one-step identity r(dt) - G(z(dt)) = \
             (residual of the projected increments) holds exactly only there"
        );
        return Ok(ExitCode::from(5));
    }
    let z0 = sim
        .z0
        .clone()
        .ok_or_else(|| Error::invalid("project-check needs `z0` in [sim]"))?;
    if z0.len() != fam.n() {
        return Err(Error::invalid("z0 dimension does not match the family"));
    }

    let sde = CoordSde::new(fam.clone(), vol.clone(), w.clone(), Arc::clone(&grid))?;
    let basis = fam.tangent_basis(&z0, &grid)?;
    let basis_norms: Vec<f64> = basis
        .iter()
        .map(|b| norm_h(b, &w))
        .collect::<Result<_, _>>()?;
    let r0 = fam.eval(&z0, &grid)?;
    let dt = sim.delta;
    let m = vol.m();
    let a = sde.drift_coeff(&z0)?;
    let b = sde.diffusion_coeff(&z0)?;

    let mut worst = 0.0f64;
    for s in 0..seeds {
        let stream = NoiseStream::new(sim.seed).path(s);
        let dw: Vec<f64> = (0..m).map(|i| stream.increment(0, i as u32, dt)).collect();
        let r_next = euler_step(&r0, &vol, dt, &dw, DriftForm::Stratonovich);
        let z_next: Vec<f64> = (0..fam.n())
            .map(|i| {
                let be: f64 = (0..m).map(|l| b[(i, l)] * dw[l]).sum();
                z0[i] + a[i] * dt + be
            })
            .collect();
        let residual = r_next.sub(&fam.eval(&z_next, &grid)?)?;
        let rn = norm_h(&residual, &w)?;
        for (j, bj) in basis.iter().enumerate() {
            let ip = inner_product(&residual, bj, &w)?.abs();
            worst = worst.max(ip / (rn * basis_norms[j]).max(1e-300));
        }
    }

    let pass = worst <= 1e-8;
    let mut rep = String::new();
    rep.push_str(&format!("seeds = {seeds}\n"));
    rep.push_str(&format!("max_normalized_tangent_product = {}\n", fmt_float(worst)));
    rep.push_str(&format!("threshold = 1e-8\npass = {pass}\n"));
    std::fs::write(out, rep)?;
    if common.verbose {
        println!("project-check: max normalized tangent product {worst:.3e} (pass = {pass})");
    }
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_calibrate(
    common: &Common,
    series_path: &Path,
    out: &Path,
    log: &Path,
    resample: bool,
) -> CmdResult {
    let cfg = RunConfig::load(&common.config)?;
    let grid = cfg.build_grid()?;
    let w = cfg.build_weight(&grid)?;
    let fam = cfg.build_family(&grid, resample)?;
    let vol = cfg.build_vol()?;
    let est_cfg = cfg.build_estimation()?;

    let series = read_series_csv(series_path)?;
    if series.n() != fam.n() {
        return Err(Error::invalid(format!(
            "series has {} coordinates but the family has {}",
            series.n(),
            fam.n()
        )));
    }
    let theta_space = ThetaSpace::from_template(&vol)?;
    if est_cfg.theta_init.len() != theta_space.dim() {
        return Err(Error::invalid(format!(
            "theta_init has {} entries but the volatility exposes {} parameters ({})",
            est_cfg.theta_init.len(),
            theta_space.dim(),
            theta_space.names().join(", ")
        )));
    }
    let names = theta_space.names().to_vec();
    let problem = GmmProblem::new(theta_space, fam, w, grid, series)?;
    let opts = NelderMeadOptions::default();

    let (theta, round0, converged, run): (Vec<f64>, Vec<f64>, bool, Option<GmmRun<f64>>) =
        if est_cfg.ls_only {
            let est = problem.ls_estimate(&est_cfg.theta_init, &opts)?;
            (est.theta.clone(), est.theta.clone(), est.converged, None)
        } else {
            let run = problem.optimal_gmm(
                &est_cfg.theta_init,
                est_cfg.q,
                est_cfg.max_rounds,
                &opts,
            )?;
            (
                run.theta.clone(),
                run.round0.theta.clone(),
                run.converged,
                Some(run),
            )
        };

    let mut csv = String::from("name,estimate,round0_estimate\n");
    for (i, name) in names.iter().enumerate() {
        csv.push_str(&format!(
            "{name},{},{}\n",
            fmt_float(theta[i]),
            fmt_float(round0[i])
        ));
    }
    std::fs::write(out, csv)?;

    let mut text = String::new();
    text.push_str(&format!("series = {}\n", series_path.display()));
    text.push_str(&format!("moments = {}\n", problem.moment_count()));
    text.push_str(&format!(
        "lag_q = {}\n",
        est_cfg.q.unwrap_or_else(|| problem.default_lag())
    ));
    match &run {
        None => {
            let obj = problem.ls_objective(&theta)?;
            text.push_str("scheme = ls\n");
            text.push_str(&format!("round 0: objective = {obj:.6e}, converged = {converged}\n"));
        }
        Some(run) => {
            text.push_str("scheme = optimal\n");
            text.push_str(&format!(
                "round 0 (least squares): theta = {:?}, objective = {:.6e}, evals = {}, converged = {}\n",
                run.round0.theta, run.round0.objective, run.round0.evals, run.round0.converged
            ));
            for rec in &run.trace {
                text.push_str(&format!(
                    "round {}: theta = {:?}, objective = {:.6e}, evals = {}, converged = {}\n",
                    rec.round, rec.theta, rec.objective, rec.evals, rec.converged
                ));
            }
            text.push_str(&format!(
                "rounds_used = {}, stabilized+converged = {}\n",
                run.rounds_used, run.converged
            ));
        }
    }
    std::fs::write(log, text)?;

    if common.verbose {
        println!("calibrate: estimates written to {}", out.display());
    }
    Ok(if converged {
        ExitCode::SUCCESS
    } else {
        eprintln!("curveflow: calibration did not converge; best estimates written");
        ExitCode::from(6)
    })
}
