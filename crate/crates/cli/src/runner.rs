use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use trrisk::convex_terms::NonsmoothTerm;
use trrisk::hilbert::SpaceVec;
use trrisk::problems::burgers::burgers_make;
use trrisk::problems::elliptic::elliptic_from_config;
use trrisk::problems::synthetic::synthetic_make;
use trrisk::problems::{OracleError, SmoothProblem};
use trrisk::support_sets::SupportSet;
use trrisk::tr_engine::{records_to_csv, run, Inexactness, TrError, TrResult};

use crate::config::{ConfigError, Overrides, ProblemConfig, RunConfig};
use crate::report;
use crate::CliError;

/// JSON summary of one run. Counter names follow the mesh-study table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub problem: String,
    pub mode: Inexactness,
    pub seed: u64,
    pub converged: bool,
    pub iter: usize,
    pub nfval: usize,
    pub ngrad: usize,
    pub nhess: usize,
    pub npsi: usize,
    pub nprox: usize,
    pub aprox: f64,
    #[serde(rename = "J")]
    pub j: f64,
    pub h: f64,
    pub newton_iterations: u64,
    pub certificate: Option<CertificateSummary>,
    /// SPG iterations of every prox call, in call order.
    pub spg_trace: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub steps: Vec<f64>,
    pub residuals: Vec<f64>,
    pub threshold: f64,
    pub passed: bool,
}

pub struct Solved {
    pub result: TrResult,
    pub summary: Summary,
    pub csv: String,
}

struct Instance {
    problem: Box<dyn SmoothProblem>,
    phi: NonsmoothTerm,
    set: SupportSet,
    x0: SpaceVec,
}

fn build(cfg: &RunConfig) -> Result<Instance, OracleError> {
    match &cfg.problem {
        ProblemConfig::Synthetic(s) => {
            let p = synthetic_make(s.dim_x, s.dim_y, cfg.seed, s.form)?;
            let x0 = p.control_space().constant(s.x0);
            Ok(Instance {
                problem: Box::new(p),
                phi: s.phi,
                set: SupportSet::risk_combo(s.lambda, s.p)?,
                x0,
            })
        }
        ProblemConfig::Burgers(b) => {
            let (p, set) = burgers_make(&b.with_seed(cfg.seed))?;
            let x0 = p.control_space().zeros();
            Ok(Instance {
                problem: Box::new(p),
                phi: NonsmoothTerm::Zero,
                set,
                x0,
            })
        }
        ProblemConfig::Elliptic(e) => {
            let (p, set, phi) = elliptic_from_config(e)?;
            let x0 = p.control_space().zeros();
            Ok(Instance {
                problem: Box::new(p),
                phi,
                set,
                x0,
            })
        }
    }
}

/// Runs the solver on `cfg` without touching the file system.
pub fn solve(cfg: &RunConfig) -> Result<Solved, CliError> {
    let mut inst = build(cfg).map_err(|e| match e {
        OracleError::Invalid(m) => CliError::Config(ConfigError::Invalid(m)),
        other => CliError::Solver(TrError::Oracle(other)),
    })?;
    let tr = cfg.tr_config();
    let result = run(&inst.x0, &mut inst.problem, &inst.phi, &inst.set, &tr, &cfg.spg)?;
    let c = result.counters;
    let summary = Summary {
        problem: cfg.problem.name().to_string(),
        mode: tr.mode,
        seed: cfg.seed,
        converged: result.converged,
        iter: result.iterations,
        nfval: c.nfval,
        ngrad: c.ngrad,
        nhess: c.nhess,
        npsi: c.npsi,
        nprox: c.nprox,
        aprox: c.aprox(),
        j: result.j,
        h: result.h,
        newton_iterations: result.newton_iterations,
        certificate: result.certificate.as_ref().map(|cert| CertificateSummary {
            steps: cert.steps.clone(),
            residuals: cert.residuals.clone(),
            threshold: cert.threshold,
            passed: cert.passed,
        }),
        spg_trace: result.prox_trace.clone(),
    };
    let csv = records_to_csv(&result.records);
    Ok(Solved { result, summary, csv })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Loads `path`, solves, writes `<stem>.csv` and `<stem>.json` into the output
/// directory and prints the iteration table to `out`.
pub fn run_config(path: &Path, overrides: &Overrides, out: &mut dyn Write) -> Result<Solved, CliError> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(overrides);
    cfg.validate()?;
    let solved = solve(&cfg)?;
    fs::create_dir_all(&cfg.output.dir)?;
    fs::write(cfg.csv_path(), &solved.csv)?;
    write_json(&cfg.summary_path(), &solved.summary)?;
    info!("wrote {} and {}", cfg.csv_path().display(), cfg.summary_path().display());
    out.write_all(report::iteration_table(&solved.result.records).as_bytes())?;
    out.write_all(report::summary_line(&solved.summary).as_bytes())?;
    Ok(solved)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshRow {
    pub mesh: String,
    pub nx: usize,
    pub ny: usize,
    #[serde(flatten)]
    pub summary: Summary,
}

/// Parses `60x20` into `(60, 20)`.
pub fn parse_level(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("mesh level `{s}` is not of the form NXxNY"))?;
    let nx = a.trim().parse().map_err(|_| format!("bad nx in `{s}`"))?;
    let ny = b.trim().parse().map_err(|_| format!("bad ny in `{s}`"))?;
    Ok((nx, ny))
}

/// Solves the elliptic problem of `base` on each mesh from `z = 0`.
pub fn mesh_study(base: &RunConfig, levels: &[(usize, usize)]) -> Result<Vec<MeshRow>, CliError> {
    let ProblemConfig::Elliptic(ell) = &base.problem else {
        return Err(ConfigError::Invalid("mesh-study needs an elliptic problem".into()).into());
    };
    if levels.is_empty() {
        return Err(ConfigError::Invalid("mesh-study needs at least one level".into()).into());
    }
    let mut rows = Vec::with_capacity(levels.len());
    for &(nx, ny) in levels {
        let mut cfg = base.clone();
        let mut e = ell.clone();
        e.nx = nx;
        e.ny = ny;
        cfg.problem = ProblemConfig::Elliptic(e);
        let solved = solve(&cfg)?;
        info!("mesh {nx}x{ny}: {} iterations", solved.summary.iter);
        rows.push(MeshRow {
            mesh: format!("{nx}x{ny}"),
            nx,
            ny,
            summary: solved.summary,
        });
    }
    Ok(rows)
}

/// Runs [`mesh_study`] and writes `<stem>_mesh.csv` and `<stem>_mesh.json`.
pub fn run_mesh_study(
    path: &Path,
    overrides: &Overrides,
    levels: &[(usize, usize)],
    out: &mut dyn Write,
) -> Result<Vec<MeshRow>, CliError> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(overrides);
    cfg.validate()?;
    let rows = mesh_study(&cfg, levels)?;
    fs::create_dir_all(&cfg.output.dir)?;
    let stem = cfg.stem();
    fs::write(cfg.output.dir.join(format!("{stem}_mesh.csv")), report::mesh_csv(&rows))?;
    write_json(&cfg.output.dir.join(format!("{stem}_mesh.json")), &rows)?;
    out.write_all(report::mesh_table(&rows).as_bytes())?;
    Ok(rows)
}
