//! Command-line driver.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, Manifest, Method, Setup};
use crate::error::{Error, Result};
use crate::galerkin::{GalerkinState, Linearization, StochasticSolution};
use crate::gpc::{smolyak_rule, MultiIndexSet};
use crate::krylov::FgmresConfig;
use crate::mesh::BoundaryTag;
use crate::nonlinear::{hybrid_solve, solve_stochastic_stokes, step_iterations, LinearSolverConfig, NonlinearConfig};
use crate::postproc::{
    compare_methods, inter_quantile_range, kde, moments, probe_pdf, MethodComparison, MethodOutput, Moments, PdfCurve,
    PDF_POINTS,
};
use crate::precond::PreconditionerSpec;
use crate::sampling::{collocation, monte_carlo, SampleEnsemble, SamplingOptions};

#[derive(Debug, Parser)]
#[command(name = "sgns", version, about = "Stochastic Galerkin Navier-Stokes solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the mesh and export it.
    Mesh(CommonArgs),
    /// Solve with the configured method.
    Solve(CommonArgs),
    /// Sweep preconditioners and print iteration tables.
    PrecondBench(BenchArgs),
    /// Run several methods on one problem and compare them.
    Compare(CompareArgs),
    /// Collate the outputs of earlier runs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub precond: Option<String>,
    #[arg(long = "trunc")]
    pub trunc: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Galerkin,
    Mc,
    Collocation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StepArg {
    Picard,
    Newton,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Coefficients of variation to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2, 0.3])]
    pub covs: Vec<f64>,
    /// Stochastic dimensions to sweep.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    /// Solution degrees to sweep.
    #[arg(long, value_delimiter = ',')]
    pub degrees: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["mb".to_string(), "k".into(), "bgs".into(), "ahgs".into()])]
    pub precs: Vec<String>,
    /// Extra ahGS truncation levels.
    #[arg(long, value_delimiter = ',')]
    pub truncs: Vec<usize>,
    #[arg(long, value_enum, default_value = "picard")]
    pub step: StepArg,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["galerkin".to_string(), "collocation".into(), "mc".into()])]
    pub methods: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Directories with earlier outputs.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Geometry(_) | Error::OutsideDomain { .. } => 1,
        Error::Io(_) | Error::Json(_) => 3,
        Error::Singular(_) | Error::Solver(_) | Error::StaleState { .. } | Error::Dimension { .. } => 2,
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

/// Parses `argv` and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Mesh(a) => {
            init_logging(a.quiet);
            cmd_mesh(&a)
        }
        Command::Solve(a) => {
            init_logging(a.quiet);
            cmd_solve(&a)
        }
        Command::PrecondBench(a) => {
            init_logging(a.common.quiet);
            cmd_bench(&a)
        }
        Command::Compare(a) => {
            init_logging(a.common.quiet);
            cmd_compare(&a)
        }
        Command::Report(a) => {
            init_logging(a.quiet);
            cmd_report(&a)
        }
    }
}

/// Loads the config (defaults when no path is given) and applies flags.
pub fn resolve_config(a: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.method {
        cfg.method = match m {
            MethodArg::Galerkin => Method::Galerkin,
            MethodArg::Mc => Method::Mc,
            MethodArg::Collocation => Method::Collocation,
        };
    }
    if let Some(p) = &a.precond {
        cfg.preconditioner = p.clone();
    }
    if a.trunc.is_some() {
        cfg.truncation = a.trunc;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn cmd_mesh(a: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    let dir = &cfg.output_dir;
    prepare_dir(dir)?;
    let mesh = cfg.build_mesh()?;
    let tags: Vec<f64> = mesh
        .node_tags()
        .iter()
        .map(|t| match t {
            None => 0.0,
            Some(BoundaryTag::Inflow) => 1.0,
            Some(BoundaryTag::Wall) => 2.0,
            Some(BoundaryTag::Lid) => 3.0,
            Some(BoundaryTag::Outflow) => 4.0,
        })
        .collect();
    let mut w = create(dir, "mesh.vtk")?;
    mesh.write_vtk(&mut w, &[("boundary_tag", &tags)])?;
    w.flush()?;
    let summary = json!({
        "nodes": mesh.num_nodes(),
        "elements": mesh.elements().len(),
        "velocity_dofs": mesh.nu(),
        "pressure_dofs": mesh.np(),
        "area": mesh.area(),
    });
    write_json(dir, "mesh.json", &summary)?;
    Manifest::new("mesh", &cfg)?.write(dir)?;
    println!("{summary}");
    Ok(())
}

fn write_moments(dir: &Path, setup: &Setup, m: &Moments) -> Result<()> {
    let mut w = create(dir, "moments.vtk")?;
    m.write_vtk(&setup.mesh, &mut w)?;
    w.flush()?;
    let n = setup.mesh.num_nodes();
    let mp = setup.mesh.pressure_to_nodes(&m.mean_p);
    let vp = setup.mesh.pressure_to_nodes(&m.var_p);
    let mut w = create(dir, "moments.csv")?;
    setup.mesh.write_csv(
        &mut w,
        &[
            ("mean_ux", &m.mean_u[..n]),
            ("mean_uy", &m.mean_u[n..]),
            ("mean_p", &mp),
            ("var_ux", &m.var_u[..n]),
            ("var_uy", &m.var_u[n..]),
            ("var_p", &vp),
        ],
    )?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct ProbeRecord {
    probe: String,
    mean: f64,
    std: f64,
    q05: f64,
    q95: f64,
    inter_quantile_range: f64,
    bandwidth: f64,
    pdf_file: String,
}

fn probe_record(label: String, samples: &[f64], pdf: &PdfCurve, file: String) -> ProbeRecord {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    ProbeRecord {
        probe: label,
        mean,
        std: var.sqrt(),
        q05: crate::postproc::quantile(samples, 0.05),
        q95: crate::postproc::quantile(samples, 0.95),
        inter_quantile_range: inter_quantile_range(samples),
        bandwidth: pdf.bandwidth,
        pdf_file: file,
    }
}

/// Probe densities of a gPC solution, written as `pdf_<i>.csv`.
fn gpc_probe_pdfs(dir: &Path, cfg: &ExperimentConfig, setup: &Setup, sol: &StochasticSolution) -> Result<(Vec<PdfCurve>, Vec<ProbeRecord>)> {
    let basis = MultiIndexSet::total_degree(cfg.dim, cfg.degree)?;
    let mut pdfs = Vec::new();
    let mut recs = Vec::new();
    for (i, p) in cfg.probes.iter().enumerate() {
        let (pdf, samples) = probe_pdf(sol, &basis, &setup.mesh, p, cfg.seed.wrapping_add(i as u64))?;
        let file = format!("pdf_{i}.csv");
        let mut w = create(dir, &file)?;
        pdf.write_csv(&mut w)?;
        w.flush()?;
        recs.push(probe_record(p.label(), &samples, &pdf, file));
        pdfs.push(pdf);
    }
    Ok((pdfs, recs))
}

fn ensemble_probe_pdfs(dir: &Path, ens: &SampleEnsemble) -> Result<(Vec<PdfCurve>, Vec<ProbeRecord>)> {
    let mut pdfs = Vec::new();
    let mut recs = Vec::new();
    for (i, (p, vals)) in ens.probes.iter().zip(&ens.probe_values).enumerate() {
        let pdf = kde(vals, PDF_POINTS)?;
        let file = format!("pdf_{i}.csv");
        let mut w = create(dir, &file)?;
        pdf.write_csv(&mut w)?;
        w.flush()?;
        recs.push(probe_record(p.label(), vals, &pdf, file));
        pdfs.push(pdf);
    }
    Ok((pdfs, recs))
}

fn sampling_options(cfg: &ExperimentConfig) -> Result<SamplingOptions> {
    let nl = cfg.nonlinear_config()?;
    Ok(SamplingOptions {
        nonlinear: NonlinearConfig {
            linear: LinearSolverConfig::direct(),
            ..nl
        },
        probes: cfg.probes.clone(),
        ..SamplingOptions::default()
    })
}

/// Runs one method and writes its outputs into `dir`.
fn run_method(cfg: &ExperimentConfig, setup: &Setup, method: Method, dir: &Path) -> Result<MethodOutput> {
    prepare_dir(dir)?;
    let name = match method {
        Method::Galerkin => "galerkin",
        Method::Mc => "mc",
        Method::Collocation => "collocation",
    };
    log::info!("running {name} (ngdof {})", setup.problem.layout().ngdof());
    let (mom, pdfs, recs) = match method {
        Method::Galerkin => {
            let (sol, report) = hybrid_solve(&setup.problem, &cfg.nonlinear_config()?)?;
            write_json(dir, "report.json", &report)?;
            let mut w = create(dir, "residuals.csv")?;
            report.write_csv(&mut w)?;
            w.flush()?;
            if !report.converged() {
                return Err(Error::Solver(format!(
                    "nonlinear iteration stopped with status {:?} at relative residual {:.3e}",
                    report.status, report.final_residual
                )));
            }
            let (pdfs, recs) = gpc_probe_pdfs(dir, cfg, setup, &sol)?;
            (moments(&sol), pdfs, recs)
        }
        Method::Collocation => {
            let rule = smolyak_rule(cfg.smolyak_level, cfg.dim)?;
            let res = collocation(&setup.space, &setup.visc, &rule, cfg.degree, &sampling_options(cfg)?)?;
            write_json(dir, "ensemble.json", &res.ensemble.summary())?;
            let (pdfs, recs) = gpc_probe_pdfs(dir, cfg, setup, &res.solution)?;
            (moments(&res.solution), pdfs, recs)
        }
        Method::Mc => {
            let res = monte_carlo(&setup.space, &setup.visc, cfg.mc_samples, cfg.seed, &sampling_options(cfg)?)?;
            write_json(dir, "ensemble.json", &res.ensemble.summary())?;
            let mut w = create(dir, "probe_samples.csv")?;
            res.ensemble.write_probe_csv(&mut w)?;
            w.flush()?;
            let (pdfs, recs) = ensemble_probe_pdfs(dir, &res.ensemble)?;
            (res.moments(), pdfs, recs)
        }
    };
    write_moments(dir, setup, &mom)?;
    write_json(dir, "probes.json", &recs)?;
    Ok(MethodOutput {
        name: name.into(),
        moments: mom,
        probe_means: recs.iter().map(|r| r.mean).collect(),
        probe_pdfs: pdfs,
    })
}

fn cmd_solve(a: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    let dir = cfg.output_dir.clone();
    prepare_dir(&dir)?;
    Manifest::new("solve", &cfg)?.write(&dir)?;
    let setup = cfg.setup()?;
    run_method(&cfg, &setup, cfg.method, &dir)?;
    log::info!("outputs written to {}", dir.display());
    Ok(())
}

/// Header of the preconditioner iteration table.
pub const BENCH_HEADER: &str = "N,P,CoV,preconditioner,l_t,iters,ngdof,M,M_nu";

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let base = resolve_config(&a.common)?;
    let dir = base.output_dir.clone();
    prepare_dir(&dir)?;
    Manifest::new("precond-bench", &base)?.write(&dir)?;
    let dims = if a.dims.is_empty() { vec![base.dim] } else { a.dims.clone() };
    let degrees = if a.degrees.is_empty() { vec![base.degree] } else { a.degrees.clone() };
    let mut specs: Vec<PreconditionerSpec> = a.precs.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    for &lt in &a.truncs {
        specs.push("ahgs".parse::<PreconditionerSpec>()?.with_truncation(lt));
    }
    let file = match a.step {
        StepArg::Picard => "precond_bench_picard.csv",
        StepArg::Newton => "precond_bench_newton.csv",
    };
    let mut w = create(&dir, file)?;
    writeln!(w, "{BENCH_HEADER}")?;
    println!("{BENCH_HEADER}");
    let fgmres_cfg = FgmresConfig::default();
    for &n in &dims {
        for &p in &degrees {
            for &cov in &a.covs {
                let cfg = ExperimentConfig {
                    dim: n,
                    degree: p,
                    cov,
                    ..base.clone()
                };
                cfg.validate()?;
                let setup = cfg.setup()?;
                let nl = cfg.nonlinear_config()?;
                let state = match a.step {
                    StepArg::Picard => GalerkinState::new(solve_stochastic_stokes(&setup.problem, &nl.linear)?.0),
                    StepArg::Newton => {
                        let picard_only = NonlinearConfig { max_newton: 0, ..nl };
                        GalerkinState::new(hybrid_solve(&setup.problem, &picard_only)?.0)
                    }
                };
                let lin = match a.step {
                    StepArg::Picard => Linearization::Picard,
                    StepArg::Newton => Linearization::Newton,
                };
                let layout = setup.problem.layout();
                let m_nu = setup.problem.coupling().m_nu();
                for spec in &specs {
                    let (iters, converged) = step_iterations(&setup.problem, &state, lin, *spec, &fgmres_cfg)?;
                    if !converged {
                        log::warn!("{} did not reach the tolerance in {iters} iterations", spec.name());
                    }
                    let lt = spec.truncation.unwrap_or(2 * p).min(2 * p);
                    let line = format!(
                        "{n},{p},{cov},{},{lt},{iters},{},{},{m_nu}",
                        spec.name(),
                        layout.ngdof(),
                        layout.m
                    );
                    writeln!(w, "{line}")?;
                    println!("{line}");
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn overlay_csv(dir: &Path, i: usize, outputs: &[MethodOutput]) -> Result<()> {
    let lo = outputs.iter().map(|o| o.probe_pdfs[i].grid[0]).fold(f64::INFINITY, f64::min);
    let hi = outputs
        .iter()
        .map(|o| *o.probe_pdfs[i].grid.last().unwrap_or(&0.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w = create(dir, &format!("pdf_overlay_{i}.csv"))?;
    write!(w, "x")?;
    for o in outputs {
        write!(w, ",{}", o.name)?;
    }
    writeln!(w)?;
    for k in 0..PDF_POINTS {
        let x = lo + (hi - lo) * k as f64 / (PDF_POINTS - 1) as f64;
        write!(w, "{x:.10e}")?;
        for o in outputs {
            write!(w, ",{:.10e}", o.probe_pdfs[i].at(x))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let cfg = resolve_config(&a.common)?;
    let dir = cfg.output_dir.clone();
    prepare_dir(&dir)?;
    Manifest::new("compare", &cfg)?.write(&dir)?;
    let methods: Vec<Method> = a.methods.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    if methods.len() < 2 {
        return Err(Error::Config("compare needs at least two methods".into()));
    }
    let setup = cfg.setup()?;
    let mut outputs = Vec::new();
    for (m, name) in methods.iter().zip(&a.methods) {
        outputs.push(run_method(&cfg, &setup, *m, &dir.join(name))?);
    }
    let mut comparisons: Vec<MethodComparison> = Vec::new();
    for other in &outputs[1..] {
        comparisons.push(compare_methods(other, &outputs[0], &cfg.probes)?);
    }
    for i in 0..cfg.probes.len() {
        overlay_csv(&dir, i, &outputs)?;
    }
    write_json(&dir, "comparison.json", &comparisons)?;
    println!("{}", serde_json::to_string_pretty(&comparisons)?);
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut entries = Vec::new();
    for d in &a.dirs {
        if !d.is_dir() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} is not a directory", d.display()),
            )));
        }
        let mut files = serde_json::Map::new();
        let mut names: Vec<PathBuf> = std::fs::read_dir(d)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        names.sort();
        for path in names {
            let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
                continue;
            };
            if name.ends_with(".json") {
                let text = std::fs::read_to_string(&path)?;
                files.insert(name, serde_json::from_str(&text)?);
            } else if name.starts_with("precond_bench") && name.ends_with(".csv") {
                let text = std::fs::read_to_string(&path)?;
                let rows: Vec<serde_json::Value> = text
                    .lines()
                    .skip(1)
                    .map(|l| {
                        let c: Vec<&str> = l.split(',').collect();
                        json!({"row": c})
                    })
                    .collect();
                files.insert(name, json!({ "header": BENCH_HEADER, "rows": rows }));
            }
        }
        entries.push(json!({ "dir": d.display().to_string(), "files": files }));
    }
    let summary = json!({ "runs": entries });
    match &a.out {
        Some(o) => {
            prepare_dir(o)?;
            write_json(o, "summary.json", &summary)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(())
}
