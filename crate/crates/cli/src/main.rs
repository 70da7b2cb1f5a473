use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use multiscale_core::averaging::{build_hierarchy, diagnostic_in, AveragingConfig, MAX_HIERARCHY_DEPTH};
use multiscale_core::experiments::{rows_to_csv, run_experiment, SweepSpec};
use multiscale_core::generators::{split_frequencies, ProblemFile, SharedGenerator, SplitConfig};
use multiscale_core::matcore::StateVector;
use multiscale_core::normalform::{compose_step, stage_one, KernelKind, NormalFormMode};
use multiscale_core::oracle::{evolve_grid, OracleConfig};

type CliResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser, Debug)]
#[command(
    name = "multiscale",
    version,
    about = "Time averaging and normal forms for i dc/dt = beta A(t) c"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evolve a basis state and write the trajectory as CSV.
    Simulate(SimulateArgs),
    /// Per-level averaged magnitudes and integral norms of the peel-off hierarchy.
    Hierarchy {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
        /// Horizon; defaults to 1/beta.
        #[arg(long)]
        horizon: Option<f64>,
        /// Sample times per level for the integral norm.
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
    /// Run a scaling sweep; writes raw.csv and report.json into the output directory.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the slow/fast partition of a quasiperiodic problem.
    Split {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value_t = SplitConfig::DEFAULT_THETA)]
        theta: f64,
    },
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long)]
    beta: f64,
    /// Final time.
    #[arg(long)]
    t: f64,
    #[arg(long, value_enum, default_value_t = Method::Oracle)]
    method: Method,
    #[arg(long)]
    out: PathBuf,
    /// Output samples, including both endpoints.
    #[arg(long, default_value_t = 101)]
    points: usize,
    /// Index of the initial basis state.
    #[arg(long, default_value_t = 0)]
    state: usize,
    #[arg(long, default_value_t = 1e-10)]
    oracle_tol: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Oracle,
    /// `U₀(t)c(0)`.
    Averaged,
    /// `U₀(t)U₁(t)Ũ(t)⁻¹c(0)`.
    Normalform,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Averaged => "averaged",
            Method::Normalform => "normalform",
        }
    }
}

fn load_problem(path: &Path) -> CliResult<SharedGenerator> {
    Ok(Arc::new(ProblemFile::load(path)?.to_generator(false)?))
}

fn sample_times(t: f64, points: usize) -> CliResult<Vec<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(format!("final time {t} must be positive").into());
    }
    if points < 2 {
        return Err("need at least 2 output points".into());
    }
    Ok((0..points).map(|k| t * k as f64 / (points - 1) as f64).collect())
}

fn trajectory(
    gen: SharedGenerator,
    beta: f64,
    times: &[f64],
    method: Method,
    c0: &StateVector,
    oracle_tol: f64,
) -> CliResult<Vec<StateVector>> {
    let horizon = *times.last().expect("non-empty");
    Ok(match method {
        Method::Oracle => evolve_grid(gen.as_ref(), beta, times, &OracleConfig::with_tol(oracle_tol)?)?
            .iter()
            .map(|u| u.apply(c0))
            .collect(),
        Method::Averaged => {
            let cfg = AveragingConfig::new(beta, horizon)?;
            let levels = build_hierarchy(gen, &cfg, 0)?;
            times
                .iter()
                .map(|&t| Ok(levels[0].propagator.at(t)?.apply(c0)))
                .collect::<CliResult<_>>()?
        }
        Method::Normalform => {
            let cfg = AveragingConfig::new(beta, horizon)?;
            let (levels, map) = stage_one(gen, &cfg, 0.0, NormalFormMode::Unitary, KernelKind::Residual)?;
            times
                .iter()
                .map(|&t| Ok(c0.transform(&compose_step(&levels[0].propagator, &levels[1].propagator, &map, t)?)?))
                .collect::<CliResult<_>>()?
        }
    })
}

fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let SimulateArgs {
        problem,
        beta,
        t,
        method,
        out,
        points,
        state,
        oracle_tol,
    } = args;
    let (beta, method, state) = (*beta, *method, *state);
    let gen = load_problem(problem)?;
    let dim = gen.dim();
    if state >= dim {
        return Err(format!("state index {state} out of range for dimension {dim}").into());
    }
    let times = sample_times(*t, *points)?;
    let c0 = StateVector::basis(dim, state);
    let states = trajectory(gen, beta, &times, method, &c0, *oracle_tol)?;

    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["t".to_string(), "method".to_string(), "norm".to_string()];
    for k in 0..dim {
        header.push(format!("re_{k}"));
        header.push(format!("im_{k}"));
    }
    w.write_record(&header)?;
    for (t, c) in times.iter().zip(&states) {
        let mut rec = vec![t.to_string(), method.name().to_string(), c.norm().to_string()];
        for z in c.vector().iter() {
            rec.push(z.re.to_string());
            rec.push(z.im.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct LevelSummary {
    level: usize,
    blocks: usize,
    avg_magnitude: f64,
    residual_integral_max: f64,
    in_norm_max: f64,
}

#[derive(Debug, Serialize)]
struct HierarchySummary {
    beta: f64,
    t0: f64,
    horizon: f64,
    levels: Vec<LevelSummary>,
}

fn hierarchy(
    problem: &Path,
    beta: f64,
    depth: usize,
    out: &Path,
    horizon: Option<f64>,
    points: usize,
) -> CliResult<()> {
    if depth > MAX_HIERARCHY_DEPTH {
        return Err(format!("depth {depth} exceeds the maximum of {MAX_HIERARCHY_DEPTH}").into());
    }
    let gen = load_problem(problem)?;
    let cfg = AveragingConfig::new(beta, horizon.unwrap_or(1.0 / beta))?;
    let times = sample_times(cfg.horizon(), points)?;
    let levels = build_hierarchy(gen, &cfg, depth)?;
    let mut summary = Vec::with_capacity(levels.len());
    for level in &levels {
        let mut in_norm: f64 = 0.0;
        for &t in &times {
            in_norm = in_norm.max(diagnostic_in(level, cfg.quadrature(), t)?.1);
        }
        summary.push(LevelSummary {
            level: level.index,
            blocks: level.averaged.blocks().len(),
            avg_magnitude: level.avg_magnitude,
            residual_integral_max: level.residual_integral_bound,
            in_norm_max: in_norm,
        });
    }
    let report = HierarchySummary {
        beta,
        t0: cfg.t0(),
        horizon: cfg.horizon(),
        levels: summary,
    };
    fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}

fn sweep(spec: &Path, seed: u64, out: &Path) -> CliResult<bool> {
    let spec = SweepSpec::load(spec)?;
    let output = run_experiment(&spec, seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("raw.csv"), rows_to_csv(&output.rows)?)?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&output.report)? + "\n",
    )?;
    let r = &output.report;
    let slope = r.fitted_slope.map_or("n/a".to_string(), |s| format!("{s:.4}"));
    let stderr = r.slope_stderr.map_or("n/a".to_string(), |s| format!("{s:.4}"));
    println!(
        "{}: {} slope {} ± {} (expected {} ± {}){}",
        r.name,
        if r.pass { "PASS" } else { "FAIL" },
        slope,
        stderr,
        r.expected_slope,
        r.tolerance,
        if r.gated { "" } else { " [not gated]" }
    );
    for (beta, repeat, err) in &output.failures {
        eprintln!("cell beta={beta} repeat={repeat} failed: {err}");
    }
    Ok(output.passed())
}

fn split(problem: &Path, beta: f64, theta: f64) -> CliResult<()> {
    let file = ProblemFile::load(problem)?;
    let gen = file.to_generator(false)?;
    let cfg = SplitConfig::new(theta, beta.powf(-0.5))?;
    let (slow, fast) = split_frequencies(&gen, &cfg);
    println!("beta {beta} t0 {} theta {theta}", cfg.t0());
    println!("j\tomega\tomega_t0\tpart");
    for term in gen.terms() {
        let part = if cfg.is_slow(term.omega) { "slow" } else { "fast" };
        println!(
            "{}\t{}\t{}\t{}",
            term.index,
            term.omega,
            term.omega.abs() * cfg.t0(),
            part
        );
    }
    let indices = |g: &multiscale_core::generators::QuasiperiodicGenerator| {
        g.terms()
            .iter()
            .map(|t| t.index.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    println!("slow: [{}]", indices(&slow));
    println!("fast: [{}]", indices(&fast));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(&args).map(|_| true),
        Command::Hierarchy {
            problem,
            beta,
            depth,
            out,
            horizon,
            points,
        } => hierarchy(&problem, beta, depth, &out, horizon, points).map(|_| true),
        Command::Sweep { spec, seed, out } => sweep(&spec, seed, &out),
        Command::Split { problem, beta, theta } => split(&problem, beta, theta).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
