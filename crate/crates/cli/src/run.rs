//! Scenario execution and file output.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use kvh_core::diagnostics::{DiagnosticContext, DiagnosticSeries};
use kvh_core::hamiltonians::ModelKind;
use kvh_core::phase_space::PhasePoint;
use kvh_core::propagation::{
    propagate_characteristics, qmc_expectations, sobol_seed, FlowStatus, GridStepper, QmcConfig, DEFAULT_CFL_SAFETY,
};
use kvh_core::wavefunction::{fmt_f64, make_initial, GridWaveFunction};
use kvh_core::KvhError;
use serde::Serialize;

use crate::checks::{evaluate_grid, evaluate_qmc, qmc_observables, CheckResult, GridRun, QmcRun};
use crate::config::{Prepared, Representation};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Why a command stopped early.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    /// Invalid configuration or input, including failed preconditions.
    Config(String),
    Io(String),
    /// A numerical abort, with the step or sample context in the message.
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) | Failure::Io(_) => EXIT_CONFIG,
            Failure::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(format!("i/o error: {e}"))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Io(format!("csv error: {e}"))
    }
}

fn is_numerical(e: &KvhError) -> bool {
    matches!(
        e,
        KvhError::NonFinite { .. }
            | KvhError::TooManyAborts { .. }
            | KvhError::SingularAbort { .. }
            | KvhError::SingularRegion { .. }
            | KvhError::ImaginaryExpectation { .. }
    )
}

/// Errors raised while the scenario runs: numerical kinds abort with code 3.
fn during_run(context: &str, e: KvhError) -> Failure {
    if is_numerical(&e) {
        Failure::Numerical(format!("{context}: {e}"))
    } else {
        Failure::Config(format!("{context}: {e}"))
    }
}

/// Errors raised while building the run: all are configuration problems.
fn setup(context: &str, e: KvhError) -> Failure {
    Failure::Config(format!("{context}: {e}"))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_snapshot(dir: &Path, step: usize, chi: &GridWaveFunction) -> Result<(), Failure> {
    let file = File::create(dir.join(format!("snapshot_{step:08}.csv")))?;
    let mut w = BufWriter::new(file);
    chi.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_series(dir: &Path, series: &DiagnosticSeries) -> Result<(), Failure> {
    let rows: Vec<Vec<String>> = series
        .records
        .iter()
        .map(|r| r.values().into_iter().map(fmt_f64).collect())
        .collect();
    write_csv(&dir.join("series.csv"), &series.columns(), &rows)
}

pub fn run_grid(p: &Prepared, out: &Path) -> Result<GridRun, Failure> {
    let c = &p.config;
    let grid = Arc::clone(p.grid.as_ref().expect("grid representation has a grid"));
    let chi0 = make_initial(&p.spec, Arc::clone(&grid), c.hbar).map_err(|e| setup("initial state", e))?;
    chi0.check_decayed().map_err(|e| setup("initial state", e))?;
    let safety = c.cfl_safety.unwrap_or(DEFAULT_CFL_SAFETY);
    let mut stepper = GridStepper::new(&p.model, Arc::clone(&grid), p.formalism, c.hbar, c.dt, safety)
        .map_err(|e| setup("dt", e))?;
    let context = DiagnosticContext::new(&p.model, grid, p.formalism).map_err(|e| setup("diagnostics", e))?;

    let mut series = DiagnosticSeries::new(c.n, c.dt, p.formalism, c.hbar);
    let mut chi = chi0.clone();
    series.push(context.record(&chi, 0, 0.0).map_err(|e| during_run("step 0", e))?);
    if p.snapshot_steps.first() == Some(&0) {
        write_snapshot(out, 0, &chi)?;
    }
    for step in 1..=c.steps {
        stepper.step(chi.values_mut());
        if !chi.is_finite() {
            return Err(during_run(&format!("step {step}"), KvhError::NonFinite { step }));
        }
        if step % p.diagnostics_every == 0 || step == c.steps {
            let t = step as f64 * c.dt;
            series.push(context.record(&chi, step, t).map_err(|e| during_run(&format!("step {step}"), e))?);
        }
        if p.snapshot_steps.binary_search(&step).is_ok() {
            write_snapshot(out, step, &chi)?;
        }
    }
    write_series(out, &series)?;
    Ok(GridRun {
        initial: chi0,
        last: chi,
        series,
    })
}

pub fn qmc_times(p: &Prepared) -> Vec<f64> {
    let k = p.config.sampler.as_ref().expect("sampler").checkpoints;
    let t_end = p.t_end();
    (0..k).map(|i| t_end * i as f64 / (k - 1) as f64).collect()
}

pub fn run_qmc(p: &Prepared, seed: u64, out: &Path) -> Result<QmcRun, Failure> {
    let c = &p.config;
    let s = c.sampler.as_ref().expect("characteristics representation has a sampler");
    let config = QmcConfig::new(s.samples, seed, c.dt);
    let observables = qmc_observables(c.n);
    let mut reports = Vec::new();
    for (i, t) in qmc_times(p).into_iter().enumerate() {
        let r = qmc_expectations(&p.spec, &p.model, t, c.hbar, &observables, &config)
            .map_err(|e| during_run(&format!("checkpoint {i} (t = {t})"), e))?;
        reports.push(r);
    }

    let mut header = vec!["t".to_string(), "aborted".to_string()];
    for o in &observables {
        for name in component_names(*o, c.n) {
            header.push(name.clone());
            header.push(format!("{name}_err"));
        }
    }
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![fmt_f64(r.t), r.aborted.to_string()];
            for e in &r.estimates {
                for (v, err) in e.value.iter().zip(&e.error) {
                    row.push(fmt_f64(*v));
                    row.push(fmt_f64(*err));
                }
            }
            row
        })
        .collect();
    write_csv(&out.join("series.csv"), &header, &rows)?;
    Ok(QmcRun { reports })
}

fn component_names(o: kvh_core::propagation::QmcObservable, n: usize) -> Vec<String> {
    use kvh_core::propagation::QmcObservable as Q;
    let axes = ["x", "y", "z"];
    match o {
        Q::Identity => vec!["norm".into()],
        Q::Energy => vec!["energy".into()],
        Q::AngularMomentum => axes.iter().map(|a| format!("L{a}")).collect(),
        Q::Position => (1..=2 * n).map(|a| format!("z{a}")).collect(),
        Q::LinearMomentum => axes[..n].iter().map(|a| format!("P{a}")).collect(),
        Q::LinearMomentumKvn => axes[..n].iter().map(|a| format!("Pkvn_{a}")).collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub command: String,
    pub scenario: String,
    pub representation: String,
    pub formalism: String,
    pub n: usize,
    pub hbar: f64,
    pub dt: f64,
    pub steps: usize,
    pub t_end: f64,
    pub seed: Option<u64>,
    pub sobol_seed: Option<u32>,
    pub samples: Option<usize>,
    /// Monitored values at the end of the run.
    pub final_values: BTreeMap<String, f64>,
    pub checks: Vec<CheckResult>,
    pub all_pass: bool,
    pub notes: Vec<String>,
}

fn notes(p: &Prepared) -> Vec<String> {
    let mut notes = Vec::new();
    if p.model.kind() == ModelKind::KeplerReduced {
        notes.push(
            "kepler phase term a(z) = H - z.grad H / 2 = -3 lambda / (2|q|), evaluated from the general formula"
                .to_string(),
        );
    }
    notes
}

fn summary_base(command: &str, p: &Prepared, seed: Option<u64>) -> Summary {
    let c = &p.config;
    Summary {
        command: command.to_string(),
        scenario: c.scenario.name().to_string(),
        representation: match c.representation {
            Representation::Grid => "grid",
            Representation::Characteristics => "characteristics",
        }
        .to_string(),
        formalism: format!("{:?}", p.formalism).to_lowercase(),
        n: c.n,
        hbar: c.hbar,
        dt: c.dt,
        steps: c.steps,
        t_end: p.t_end(),
        seed,
        sobol_seed: seed.map(sobol_seed),
        samples: c.sampler.as_ref().map(|s| s.samples),
        final_values: BTreeMap::new(),
        checks: Vec::new(),
        all_pass: true,
        notes: notes(p),
    }
}

/// Runs the scenario and the selected checks; writes series.csv,
/// summary.json and any snapshots into `out`.
pub fn run_scenario(command: &str, p: &Prepared, seed_override: Option<u64>, out: &Path) -> Result<Summary, Failure> {
    fs::create_dir_all(out)?;
    let mut summary;
    match p.config.representation {
        Representation::Grid => {
            summary = summary_base(command, p, None);
            let run = run_grid(p, out)?;
            if let Some(last) = run.series.records.last() {
                summary.final_values = run.series.columns().into_iter().zip(last.values()).collect();
            }
            for &check in &p.checks {
                let r = evaluate_grid(check, p, &run).map_err(|e| during_run(check.name(), e))?;
                summary.checks.push(r);
            }
        }
        Representation::Characteristics => {
            let s = p.config.sampler.as_ref().expect("sampler");
            let seed = seed_override.unwrap_or(s.seed);
            summary = summary_base(command, p, Some(seed));
            let run = run_qmc(p, seed, out)?;
            if let Some(last) = run.reports.last() {
                for e in &last.estimates {
                    for (name, v) in component_names(e.observable, p.config.n).into_iter().zip(&e.value) {
                        summary.final_values.insert(name, *v);
                    }
                }
            }
            for &check in &p.checks {
                summary.checks.push(evaluate_qmc(check, p, &run));
            }
        }
    }
    summary.all_pass = summary.checks.iter().all(|c| c.pass);
    let file = File::create(out.join("summary.json"))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &summary).map_err(|e| Failure::Io(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(summary)
}

/// Reads evaluation points (header row, columns z1..z2n).
pub fn read_points(path: &Path, n: usize) -> Result<Vec<PhasePoint>, Failure> {
    let bad = |m: String| Failure::Config(format!("point file {}: {m}", path.display()));
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut points = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 2 * n {
            return Err(bad(format!("row {} has {} columns, expected {}", i + 1, rec.len(), 2 * n)));
        }
        let z: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("row {}: non-finite coordinate", i + 1)));
        }
        points.push(PhasePoint::from_z(&z).map_err(|e| bad(e.to_string()))?);
    }
    Ok(points)
}

/// Evaluates the characteristics solution at `t = dt * steps` on the given
/// points and writes oracle.csv; returns the number of aborted points.
pub fn run_oracle(p: &Prepared, points_file: &Path, out: &Path) -> Result<(PathBuf, usize), Failure> {
    fs::create_dir_all(out)?;
    let c = &p.config;
    let points = read_points(points_file, c.n)?;
    let t = p.t_end();
    let values = propagate_characteristics(&p.spec, &p.model, t, p.oracle_dt(), c.hbar, &points)
        .map_err(|e| Failure::Config(format!("oracle: {e}")))?;
    let mut header: Vec<String> = (1..=2 * c.n).map(|a| format!("z{a}")).collect();
    header.extend(["re", "im", "theta", "status"].map(String::from));
    let mut aborted = 0;
    let rows: Vec<Vec<String>> = values
        .iter()
        .map(|(v, st)| {
            let mut row: Vec<String> = st.z.to_z().into_iter().map(fmt_f64).collect();
            row.push(fmt_f64(v.re));
            row.push(fmt_f64(v.im));
            row.push(fmt_f64(st.theta));
            row.push(match st.status {
                FlowStatus::Ok => "ok".to_string(),
                FlowStatus::SingularAbort { .. } => {
                    aborted += 1;
                    "singular_abort".to_string()
                }
            });
            row
        })
        .collect();
    let path = out.join("oracle.csv");
    write_csv(&path, &header, &rows)?;
    Ok((path, aborted))
}
