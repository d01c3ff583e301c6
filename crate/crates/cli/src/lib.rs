//! Experiment driver: builds a contact problem from a JSON config, runs the fine and/or
//! multiscale solvers and writes records, field dumps and a summary.

pub mod config;
pub mod error;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use icem::cem::CemConfig;
use icem::contact::{
    fine_newton_solve, initial_guess, iterative_cem_solve, ContactProblem, IterationRun, NewtonOptions,
};
use icem::fem::{NeumannData, Source};
use icem::field::{
    from_values, load_field, read_grid_bin, read_grid_csv, spectral_weight, synth_medium, write_grid_bin,
    write_grid_csv, PermField,
};
use icem::linsolve::SolverOptions;
use icem::mesh::{build_mesh, BoundaryKind, StructuredMesh};
use icem::metrics::{Ratio, RunRecord};
use serde::Serialize;
use serde_json::Value;

pub use config::{expand_grid, load_config, Config, Mode};
pub use error::{CliError, Result};

/// Per-solver part of `summary.json`.
#[derive(Clone, Debug, Serialize)]
pub struct SolverSummary {
    pub iterations: usize,
    pub converged: bool,
    #[serde(rename = "E_L")]
    pub e_l: Option<Value>,
    #[serde(rename = "E_a")]
    pub e_a: Option<Value>,
    #[serde(rename = "T_L")]
    pub t_l: Option<Value>,
    #[serde(rename = "T_a")]
    pub t_a: Option<Value>,
    pub residual: Option<f64>,
    /// Largest positive nodal value on the contact boundary.
    pub max_contact_positive: Option<f64>,
    pub time_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub config: Value,
    pub fine: Option<SolverSummary>,
    pub cem: Option<SolverSummary>,
    pub coarse_dim: Option<usize>,
    pub timings_ms: Timings,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings {
    pub setup: f64,
    pub fine: Option<f64>,
    pub cem: Option<f64>,
}

/// Everything a run produced, for callers that want more than the files.
pub struct RunOutcome {
    pub summary: Summary,
    pub problem: ContactProblem,
    pub fine: Option<IterationRun>,
    pub cem: Option<IterationRun>,
}

fn ratio_json(r: Option<Ratio>) -> Option<Value> {
    r.map(|r| match r.value() {
        Some(v) => Value::from(v),
        None => Value::from("undefined"),
    })
}

fn solver_summary(record: &RunRecord, last: Option<&[f64]>, problem: &ContactProblem, converged: bool, ms: f64) -> SolverSummary {
    let row = record.last();
    SolverSummary {
        iterations: record.iterations(),
        converged,
        e_l: ratio_json(row.and_then(|r| r.e_l)),
        e_a: ratio_json(row.and_then(|r| r.e_a)),
        t_l: ratio_json(row.and_then(|r| r.t_l)),
        t_a: ratio_json(row.and_then(|r| r.t_a)),
        residual: row.map(|r| r.residual),
        max_contact_positive: last.map(|u| max_contact_positive(problem, u)),
        time_ms: ms,
    }
}

pub fn max_contact_positive(problem: &ContactProblem, u: &[f64]) -> f64 {
    problem
        .spec
        .nodes_of(BoundaryKind::Contact)
        .iter()
        .map(|&n| u[n].max(0.0))
        .fold(0.0, f64::max)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_table(path: &Path) -> Result<TableData> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => {
            let (cols, rows, values) = read_grid_bin(reader)?;
            Ok(TableData::Flat { cols, rows, values })
        }
        _ => Ok(TableData::Rows(read_grid_csv(reader)?)),
    }
}

enum TableData {
    Rows(Vec<Vec<f64>>),
    Flat { cols: usize, rows: usize, values: Vec<f64> },
}

impl TableData {
    fn into_cells(self, mesh: &StructuredMesh) -> Result<PermField> {
        Ok(match self {
            TableData::Rows(rows) => load_field(&rows, mesh)?,
            TableData::Flat { cols, rows, values } => {
                if cols != mesh.nx() || rows != mesh.ny() {
                    return Err(icem::Error::Dimension {
                        expected_cols: mesh.nx(),
                        expected_rows: mesh.ny(),
                        cols,
                        rows,
                    }
                    .into());
                }
                from_values(values, mesh)?
            }
        })
    }

    fn into_flat(self) -> Vec<f64> {
        match self {
            TableData::Rows(rows) => rows.into_iter().flatten().collect(),
            TableData::Flat { values, .. } => values,
        }
    }
}

/// Builds the mesh, medium, loads and boundary data described by `config`.
pub fn build_problem(config: &Config) -> Result<ContactProblem> {
    let (mesh, spec) = build_mesh(config.nx_fine, config.nx_coarse, config.geometry.into())?;
    let field = match (&config.medium, &config.field_file) {
        (Some(m), _) => synth_medium(m.kind.into(), m.seed, m.kappa_r, &mesh)?,
        (None, Some(path)) => read_table(path)?.into_cells(&mesh)?,
        (None, None) => unreachable!("validated config has a medium"),
    };
    use config::{NeumannName, SourceName};
    let source = match config.source {
        SourceName::Zero => Source::Zero,
        SourceName::F1 => Source::F1,
        SourceName::F2 => Source::F2,
        SourceName::F3 => Source::F3,
        SourceName::File => {
            let path = config.source_file.as_ref().expect("validated");
            let values = read_table(path)?.into_flat();
            if values.len() != mesh.num_cells() {
                return Err(CliError::Config(format!(
                    "{}: expected {} cell values, got {}",
                    path.display(),
                    mesh.num_cells(),
                    values.len()
                )));
            }
            Source::CellTable(values)
        }
    };
    let neumann = match config.p {
        NeumannName::Zero => NeumannData::Zero,
        NeumannName::File => {
            let path = config.p_file.as_ref().expect("validated");
            let values = read_table(path)?.into_flat();
            let expected = spec.edges_of(BoundaryKind::Neumann).count();
            if values.len() != expected {
                return Err(CliError::Config(format!(
                    "{}: expected {expected} Neumann edge values, got {}",
                    path.display(),
                    values.len()
                )));
            }
            NeumannData::PerEdge(values)
        }
    };
    Ok(ContactProblem::new(mesh, spec, field, &source, neumann))
}

pub fn newton_options(config: &Config) -> NewtonOptions {
    NewtonOptions {
        eps: config.eps,
        tol: config.tol,
        max_iter: config.max_iter,
        solver: SolverOptions {
            method: config.solver.method.into(),
            tol: config.solver.tol,
            ..Default::default()
        },
    }
}

fn with_timings(mut record: RunRecord, run_timings: &[f64], enabled: bool) -> RunRecord {
    if enabled {
        for (row, &ms) in record.rows.iter_mut().zip(run_timings) {
            row.phase_ms = Some(ms);
        }
    }
    record
}

fn write_record(dir: &Path, name: &str, record: &RunRecord) -> Result<()> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    record.write_csv(&mut w)?;
    w.flush().map_err(io_err(&path))
}

fn write_field(dir: &Path, stem: &str, mesh: &StructuredMesh, u: &[f64]) -> Result<()> {
    let cols = mesh.nx() + 1;
    let rows = mesh.ny() + 1;
    let bin = dir.join(format!("{stem}.bin"));
    let mut w = BufWriter::new(File::create(&bin).map_err(io_err(&bin))?);
    write_grid_bin(&mut w, cols, rows, u)?;
    w.flush().map_err(io_err(&bin))?;
    let csv = dir.join(format!("{stem}.csv"));
    let mut w = BufWriter::new(File::create(&csv).map_err(io_err(&csv))?);
    write_grid_csv(&mut w, cols, u)?;
    w.flush().map_err(io_err(&csv))
}

fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(summary)?;
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Splits a solver result into the run (if any), the record to flush and the pending error.
fn settle(result: icem::Result<IterationRun>) -> (Option<IterationRun>, Option<RunRecord>, Option<icem::Error>) {
    match result {
        Ok(run) => (Some(run), None, None),
        Err(icem::Error::NonConvergence {
            iterations,
            last_update,
            record,
        }) => {
            let partial = (*record).clone();
            let err = icem::Error::NonConvergence {
                iterations,
                last_update,
                record,
            };
            (None, Some(partial), Some(err))
        }
        Err(e) => (None, None, Some(e)),
    }
}

/// Runs one configuration and writes its artifacts into `config.outputs.dir`.
///
/// On solver failure the partial records and the summary are still written before the
/// error is returned.
pub fn run(config: &Config) -> Result<RunOutcome> {
    let dir = config.outputs.dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let timings_on = config.outputs.record_timings;

    let start = Instant::now();
    let problem = build_problem(config)?;
    let u0 = initial_guess(config.initial.into(), &problem.mesh, &problem.spec);
    let opts = newton_options(config);
    let mut summary = Summary {
        config: config.to_value(),
        fine: None,
        cem: None,
        coarse_dim: None,
        timings_ms: Timings {
            setup: start.elapsed().as_secs_f64() * 1e3,
            ..Default::default()
        },
    };
    log::info!(
        "{}x{} fine grid, {} coarse elements, mode {:?}",
        problem.mesh.nx(),
        problem.mesh.ny(),
        problem.mesh.num_coarse(),
        config.mode
    );

    let mut fine = None;
    if matches!(config.mode, Mode::Fine | Mode::Both) {
        let t = Instant::now();
        let (run, partial, err) = settle(fine_newton_solve(&problem, &u0, &opts));
        let ms = t.elapsed().as_secs_f64() * 1e3;
        summary.timings_ms.fine = Some(ms);
        let name = if config.mode == Mode::Fine { "records.csv" } else { "fine_records.csv" };
        if let Some(err) = err {
            if let Some(record) = partial {
                write_record(&dir, name, &record)?;
                summary.fine = Some(solver_summary(&record, None, &problem, false, ms));
            }
            write_summary(&dir, &summary)?;
            return Err(err.into());
        }
        let run = run.expect("settled run");
        log::info!("fine solve: {} iterations in {ms:.0} ms", run.iterations());
        let record = with_timings(run.record.clone(), &run.timings, timings_on);
        write_record(&dir, name, &record)?;
        summary.fine = Some(solver_summary(&record, Some(run.last()), &problem, true, ms));
        if config.outputs.dump_fields {
            let stem = if config.mode == Mode::Fine { "u_final" } else { "u_fine" };
            write_field(&dir, stem, &problem.mesh, run.last())?;
        }
        fine = Some(run);
    }

    let mut cem = None;
    if matches!(config.mode, Mode::Cem | Mode::Both) {
        let t = Instant::now();
        let weight = spectral_weight(&problem.field, &problem.mesh, config.weight.into());
        let cem_config = CemConfig {
            layers: config.m,
            n_eigen: config.l_m,
        };
        let mut solver = problem.cem_solver(&weight, cem_config)?;
        let (run, partial, err) = settle(iterative_cem_solve(&problem, &mut solver, &u0, &opts, fine.as_ref()));
        let ms = t.elapsed().as_secs_f64() * 1e3;
        summary.timings_ms.cem = Some(ms);
        summary.coarse_dim = solver.space().map(|s| s.dim());
        if let Some(err) = err {
            if let Some(record) = partial {
                write_record(&dir, "records.csv", &record)?;
                summary.cem = Some(solver_summary(&record, None, &problem, false, ms));
            }
            write_summary(&dir, &summary)?;
            return Err(err.into());
        }
        let run = run.expect("settled run");
        log::info!("multiscale solve: {} iterations in {ms:.0} ms", run.iterations());
        let record = with_timings(run.record.clone(), &run.timings, timings_on);
        write_record(&dir, "records.csv", &record)?;
        summary.cem = Some(solver_summary(&record, Some(run.last()), &problem, true, ms));
        if config.outputs.dump_fields {
            write_field(&dir, "u_final", &problem.mesh, run.last())?;
        }
        if config.outputs.dump_basis {
            if let Some(space) = solver.space() {
                let basis_dir = dir.join("basis");
                fs::create_dir_all(&basis_dir).map_err(io_err(&basis_dir))?;
                space.write_basis_dump(&basis_dir)?;
            }
        }
        cem = Some(run);
    }

    write_summary(&dir, &summary)?;
    Ok(RunOutcome {
        summary,
        problem,
        fine,
        cem,
    })
}

/// Result of one sweep point.
pub struct SweepPoint {
    pub label: String,
    pub dir: PathBuf,
    pub result: Result<Summary>,
}

/// Runs every grid point of `config`; a failed point does not stop the others.
pub fn sweep(config: &Config) -> Result<Vec<SweepPoint>> {
    let grid = expand_grid(config)?;
    log::info!("sweep over {} grid points", grid.len());
    Ok(grid
        .into_iter()
        .map(|point| {
            log::info!("grid point {}", if point.label.is_empty() { "(base)" } else { &point.label });
            let dir = point.config.outputs.dir.clone();
            let result = run(&point.config).map(|o| o.summary);
            if let Err(e) = &result {
                log::warn!("grid point {} failed: {e}", point.label);
            }
            SweepPoint {
                label: point.label,
                dir,
                result,
            }
        })
        .collect())
}
