//! `nlhom`: command-line front end for the cell problems, homogenized
//! densities, macroscopic energies and property checks.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nlhom_core::cell::io as dump;
use nlhom_core::config::Config;
use nlhom_core::homogenized::{self, HomogenizedDensity};
use nlhom_core::kernels::validate_assumptions;
use nlhom_core::linalg::Mat3;
use nlhom_core::macro_energy::{self, Magnetization};
use nlhom_core::microstructure::{check_h1, sample_bounds};
use nlhom_core::solver::CellProblem;
use nlhom_core::verification;
use nlhom_core::{Error, Result};

#[derive(Parser)]
#[command(name = "nlhom", version, about = "Nonlocal micromagnetic homogenization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a scalar config field, e.g. `--set lattice.n=4`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Output file; defaults to `output.dir` from the config, else stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check kernel and coefficient assumptions on the lattice.
    ValidateKernels(Common),
    /// Moment tensor, averaged DMI vectors and corrector solver stats (JSON).
    Moments(Common),
    /// Solve one cell problem and report solver stats (JSON).
    CellSolve(CellSolveArgs),
    /// Tabulate f_hom by the direct and decomposed routes (CSV).
    Fhom(FhomArgs),
    /// ε-energies of the configured magnetization at each period (JSON).
    Energy(EnergyArgs),
    /// Γ-sweep of the recovery sequence over the configured periods (CSV).
    GammaSweep(SweepArgs),
    /// Run the property checks (JSON); exit 1 if any fails.
    Selftest(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    CorrectorA,
    CorrectorKappa,
    Direct,
}

#[derive(Args)]
struct CellSolveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "corrector-a")]
    mode: Mode,
    /// Unit vector `s` as `s1,s2,s3` (direct mode).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    s: Option<Vec<f64>>,
    /// Gradient `A` row-major as nine comma-separated values (direct mode).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    grad: Option<Vec<f64>>,
    /// Write the solution as an NLHF binary dump.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Write the solution as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct FhomArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EnergyArgs {
    #[command(flatten)]
    common: Common,
    /// Write the magnetization of the last period as an NLHF dump.
    #[arg(long)]
    dump_magnetization: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Also write the check report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        Config::load(&self.config, &self.set)
    }

    /// Writes `bytes` to `--out`, to `output.dir/default_name`, or to stdout.
    fn emit(&self, cfg: &Config, default_name: &str, bytes: &[u8]) -> Result<()> {
        let path = match (&self.out, &cfg.output_dir) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(dir)) => {
                std::fs::create_dir_all(dir)?;
                Some(dir.join(default_name))
            }
            (None, None) => None,
        };
        match path {
            Some(p) => write_file(&p, bytes),
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(bytes)?;
                out.flush()?;
                Ok(())
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

fn json<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn to_mat(v: &[f64]) -> Mat3 {
    [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]
}

fn validate_kernels(c: &Common) -> Result<bool> {
    let cfg = c.load()?;
    let inputs = cfg.inputs()?;
    let lat = inputs.lattice();
    let assumptions = validate_assumptions(&cfg.rho, &cfg.nu, lat)?;
    let a = check_h1(&cfg.a, lat)?;
    let kappa = sample_bounds(&cfg.kappa, lat)?;
    let report = serde_json::json!({
        "lattice": lat.info(),
        "assumptions": assumptions,
        "a": a,
        "kappa": kappa,
    });
    c.emit(&cfg, "kernels.json", &json(&report)?)?;
    eprintln!(
        "validate-kernels: {} nodes, L1(rho) = {:.6}, L1(nu) = {:.6}, min a = {:.6}: {}",
        lat.len(),
        assumptions.l1_rho,
        assumptions.l1_nu,
        a.min_sample,
        if assumptions.pass { "ok" } else { "FAILED" }
    );
    for f in &assumptions.failures {
        eprintln!("  {f}");
    }
    Ok(assumptions.pass)
}

fn moments(c: &Common) -> Result<bool> {
    let cfg = c.load()?;
    let inputs = cfg.inputs()?;
    let h = HomogenizedDensity::build(&inputs)?;
    let report = h.report();
    c.emit(&cfg, "moments.json", &json(&report)?)?;
    eprintln!(
        "moments: trace(Tbar) = {:.10}, corrector solves took {} + {} iterations",
        h.tbar[0][0] + h.tbar[1][1] + h.tbar[2][2],
        report.solver_a.iterations,
        report.solver_kappa.iterations
    );
    Ok(true)
}

fn cell_solve(args: &CellSolveArgs) -> Result<bool> {
    let c = &args.common;
    let cfg = c.load()?;
    let inputs = cfg.inputs()?;
    let problem = match args.mode {
        Mode::CorrectorA => CellProblem::corrector_a(&inputs),
        Mode::CorrectorKappa => CellProblem::corrector_kappa(&inputs),
        Mode::Direct => {
            let s = args
                .s
                .as_ref()
                .ok_or_else(|| Error::Input("direct mode needs --s".into()))?;
            let g = args
                .grad
                .as_ref()
                .ok_or_else(|| Error::Input("direct mode needs --grad".into()))?;
            if s.len() != 3 || g.len() != 9 {
                return Err(Error::Input(format!(
                    "--s takes 3 values and --grad 9, got {} and {}",
                    s.len(),
                    g.len()
                )));
            }
            CellProblem::direct(&inputs, [s[0], s[1], s[2]], to_mat(g))?
        }
    };
    let sol = problem.solve()?;
    if let Some(p) = &args.dump {
        dump::write_dump(p, &sol.v)?;
    }
    if let Some(p) = &args.csv {
        let mut buf = Vec::new();
        dump::write_csv(&mut buf, &sol.v)?;
        write_file(p, &buf)?;
    }
    let stats = sol.stats();
    c.emit(&cfg, "cell_solve.json", &json(&stats)?)?;
    eprintln!(
        "cell-solve: energy = {:.12e}, {} iterations, relative residual {:.2e}",
        stats.energy, stats.iterations, stats.residual
    );
    Ok(true)
}

fn fhom(args: &FhomArgs) -> Result<bool> {
    let c = &args.common;
    let cfg = c.load()?;
    let inputs = cfg.inputs()?;
    let h = HomogenizedDensity::build(&inputs)?;
    let rows = homogenized::sample_table(&inputs, &h, args.samples, args.seed)?;
    let mut buf = Vec::new();
    homogenized::write_sample_csv(&mut buf, &rows)?;
    c.emit(&cfg, "fhom.csv", &buf)?;
    let worst = rows.iter().fold(0.0f64, |m, r| m.max(r.rel_diff));
    eprintln!("fhom: {} samples, max rel_diff = {worst:.3e}", rows.len());
    Ok(true)
}

fn energy(args: &EnergyArgs) -> Result<bool> {
    let c = &args.common;
    let cfg = c.load()?;
    let mc = cfg.macro_config()?;
    let inputs = cfg.inputs()?;
    let mut rows = Vec::new();
    let mut last = None;
    for &p in &mc.periods {
        let grid = mc.grid(cfg.n, p)?;
        let m = Magnetization::sample(&mc.magnetization, grid.m)?;
        let e = macro_energy::energy(&m, &inputs, p)?;
        rows.push(serde_json::json!({
            "eps": grid.eps(),
            "m": grid.m,
            "energy": e,
        }));
        eprintln!(
            "energy: eps = 1/{p}, M = {}: F = {:.10e}, H = {:.10e}, dropped {:.4}",
            grid.m, e.f_eps, e.h_eps, e.dropped_fraction
        );
        last = Some(m);
    }
    if let (Some(p), Some(m)) = (&args.dump_magnetization, &last) {
        dump::write_dump(p, m.field())?;
    }
    c.emit(&cfg, "energy.json", &json(&rows)?)?;
    Ok(true)
}

fn gamma_sweep(args: &SweepArgs) -> Result<bool> {
    let c = &args.common;
    let cfg = c.load()?;
    let outcome = verification::gamma_sweep(&cfg)?;
    let mut buf = Vec::new();
    verification::write_sweep_csv(&mut buf, &outcome.rows)?;
    c.emit(&cfg, "gamma_sweep.csv", &buf)?;
    if let Some(p) = &args.report {
        write_file(p, &json(&outcome.report)?)?;
    }
    eprintln!(
        "gamma-sweep: final recovery gap {:.3e} (tolerance {:.3e}): {}",
        outcome.report.measured["final_gap"],
        outcome.report.tolerance,
        if outcome.report.pass { "pass" } else { "FAIL" }
    );
    Ok(outcome.report.pass)
}

fn selftest(c: &Common) -> Result<bool> {
    let cfg = c.load()?;
    let reports = verification::selftest(&cfg)?;
    c.emit(&cfg, "selftest.json", &json(&reports)?)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        eprintln!("selftest: all {} checks passed", reports.len());
    } else {
        eprintln!("selftest: {} of {} checks failed: {}", failed.len(), reports.len(), failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::ValidateKernels(c) => validate_kernels(c),
        Command::Moments(c) => moments(c),
        Command::CellSolve(a) => cell_solve(a),
        Command::Fhom(a) => fhom(a),
        Command::Energy(a) => energy(a),
        Command::GammaSweep(a) => gamma_sweep(a),
        Command::Selftest(c) => selftest(c),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(1)
        }
    }
}
