//! Named checks with default tolerances, applicability rules and
//! evaluation against a finished run.

use kvh_core::diagnostics::{
    kvh_energy_coincidence_check, kvn_energy_mismatch_report, quadratic_coincidence_check, rate_identity_check,
    DiagnosticSeries, RateDecomposition, Which,
};
use kvh_core::hamiltonians::{linear_bracket, HamiltonianModel, ModelKind, Observable};
use kvh_core::operators::{commutator_residual, momentum_commutator_residual, position_commutator_residual, Formalism};
use kvh_core::propagation::{
    characteristics_on_grid, heisenberg_expectation, l1_difference, l2_difference, transport_density_on_grid,
    PropagationConfig, QmcObservable, QmcReport,
};
use kvh_core::wavefunction::{bracket_imaginary_integral, density_kvh, density_kvn, GridWaveFunction};
use kvh_core::KvhError;
use serde::Serialize;

use crate::config::{Prepared, Representation, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CheckName {
    EnergyConservation,
    NormConservation,
    DecompositionSum,
    TermPattern,
    RateIdentityL,
    RateIdentityP,
    QuadraticCoincidence,
    Commutators,
    OracleL2,
    DensityTransport,
    EnergyCoincidence,
    KvnEnergyGap,
    BracketIntegral,
    HeisenbergEhrenfest,
    QmcAngularMomentum,
    QmcEnergy,
}

/// How a value is compared with its tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `value <= tolerance`
    AtMost,
    /// `value > tolerance`
    Exceeds,
}

impl CheckName {
    pub const ALL: [CheckName; 16] = [
        CheckName::EnergyConservation,
        CheckName::NormConservation,
        CheckName::DecompositionSum,
        CheckName::TermPattern,
        CheckName::RateIdentityL,
        CheckName::RateIdentityP,
        CheckName::QuadraticCoincidence,
        CheckName::Commutators,
        CheckName::OracleL2,
        CheckName::DensityTransport,
        CheckName::EnergyCoincidence,
        CheckName::KvnEnergyGap,
        CheckName::BracketIntegral,
        CheckName::HeisenbergEhrenfest,
        CheckName::QmcAngularMomentum,
        CheckName::QmcEnergy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckName::EnergyConservation => "energy_conservation",
            CheckName::NormConservation => "norm_conservation",
            CheckName::DecompositionSum => "decomposition_sum",
            CheckName::TermPattern => "term_pattern",
            CheckName::RateIdentityL => "rate_identity_L",
            CheckName::RateIdentityP => "rate_identity_P",
            CheckName::QuadraticCoincidence => "quadratic_coincidence",
            CheckName::Commutators => "commutators",
            CheckName::OracleL2 => "oracle_l2",
            CheckName::DensityTransport => "density_transport",
            CheckName::EnergyCoincidence => "energy_coincidence",
            CheckName::KvnEnergyGap => "kvn_energy_gap",
            CheckName::BracketIntegral => "bracket_integral",
            CheckName::HeisenbergEhrenfest => "heisenberg_ehrenfest",
            CheckName::QmcAngularMomentum => "qmc_angular_momentum",
            CheckName::QmcEnergy => "qmc_energy",
        }
    }

    pub fn known_names() -> String {
        Self::ALL.iter().map(|c| c.name()).collect::<Vec<_>>().join(", ")
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown check `{s}`; known checks: {}", Self::known_names()))
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            CheckName::EnergyConservation => 1e-6,
            CheckName::NormConservation => 1e-8,
            CheckName::DecompositionSum => 1e-12,
            CheckName::TermPattern => 0.0,
            CheckName::RateIdentityL | CheckName::RateIdentityP => 1e-4,
            CheckName::QuadraticCoincidence => 0.0,
            CheckName::Commutators => 1e-6,
            CheckName::OracleL2 => 1e-4,
            CheckName::DensityTransport => 1e-3,
            CheckName::EnergyCoincidence => 2e-6,
            CheckName::KvnEnergyGap => 0.01,
            CheckName::BracketIntegral => 1e-8,
            CheckName::HeisenbergEhrenfest => 1e-3,
            CheckName::QmcAngularMomentum | CheckName::QmcEnergy => 1e-3,
        }
    }

    pub fn comparison(self) -> Comparison {
        match self {
            CheckName::KvnEnergyGap => Comparison::Exceeds,
            _ => Comparison::AtMost,
        }
    }

    fn is_qmc(self) -> bool {
        matches!(self, CheckName::QmcAngularMomentum | CheckName::QmcEnergy)
    }

    /// `Ok` when the check can run under `config`, else the reason.
    pub fn applicable(self, config: &RunConfig, model: &HamiltonianModel) -> Result<(), String> {
        let grid = config.representation == Representation::Grid;
        if self.is_qmc() && grid {
            return Err(format!("{} needs the characteristics representation", self.name()));
        }
        if !self.is_qmc() && !grid {
            return Err(format!("{} needs the grid representation", self.name()));
        }
        let every = config.diagnostics_every.unwrap_or(config.steps);
        match self {
            CheckName::RateIdentityL | CheckName::RateIdentityP => {
                if self == CheckName::RateIdentityL && config.n < 2 {
                    return Err("rate_identity_L needs n >= 2".into());
                }
                if config.steps < 2 * every {
                    return Err(format!("{} needs steps >= 2 * diagnostics_every", self.name()));
                }
            }
            CheckName::QuadraticCoincidence if model.kind() != ModelKind::Harmonic => {
                return Err("quadratic_coincidence needs a quadratic model (harmonic)".into());
            }
            CheckName::HeisenbergEhrenfest => {
                if model.kind() != ModelKind::Harmonic {
                    return Err("heisenberg_ehrenfest needs a linear force (harmonic)".into());
                }
                if config.steps < 2 {
                    return Err("heisenberg_ehrenfest needs steps >= 2".into());
                }
            }
            CheckName::QmcAngularMomentum if config.n < 2 => {
                return Err("qmc_angular_momentum needs n >= 2".into());
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(check: CheckName, value: f64, tolerance: f64, detail: String) -> Self {
        let pass = match check.comparison() {
            Comparison::AtMost => value <= tolerance,
            Comparison::Exceeds => value > tolerance,
        };
        Self {
            name: check.name(),
            value,
            tolerance,
            comparison: check.comparison(),
            pass,
            detail,
        }
    }
}

/// Everything a grid check may look at.
pub struct GridRun {
    pub initial: GridWaveFunction,
    pub last: GridWaveFunction,
    pub series: DiagnosticSeries,
}

/// QMC estimates at the checkpoints, first at `t = 0`.
pub struct QmcRun {
    pub reports: Vec<QmcReport>,
}

/// Expected `(extra terms, zero colors)` of one split.
fn expected_pattern(model: &HamiltonianModel, formalism: Formalism, which: Which) -> (usize, [bool; 4]) {
    let phase = formalism == Formalism::Kvh && model.kind() != ModelKind::Harmonic;
    // black, red, blue, green exactly zero?
    match which {
        Which::L => (usize::from(phase), [false, !phase, true, true]),
        Which::P => (1 + 2 * usize::from(phase), [false, !phase, false, !phase]),
    }
}

fn pattern_mismatches(rate: &RateDecomposition, expected: (usize, [bool; 4])) -> usize {
    let mut bad = usize::from(rate.extra_terms() != expected.0);
    let colors = [&rate.black, &rate.red, &rate.blue, &rate.green];
    for (values, must_vanish) in colors.iter().zip(expected.1) {
        if must_vanish && values.iter().any(|v| *v != 0.0) {
            bad += 1;
        }
    }
    bad
}

/// Records on the `diagnostics_every` cadence (drops a trailing off-cadence
/// record).
fn uniform_series(series: &DiagnosticSeries, every: usize) -> DiagnosticSeries {
    let mut s = series.clone();
    s.records.retain(|r| r.step % every == 0);
    s
}

pub fn evaluate_grid(check: CheckName, p: &Prepared, run: &GridRun) -> Result<CheckResult, KvhError> {
    let tol = p.tolerance(check);
    let model = &p.model;
    let t_end = p.t_end();
    let states = [&run.initial, &run.last];
    let r = match check {
        CheckName::EnergyConservation => CheckResult::new(
            check,
            run.series.energy_drift(),
            tol,
            "max relative drift of <chi|LL_H chi> over recorded steps".into(),
        ),
        CheckName::NormConservation => CheckResult::new(
            check,
            run.series.norm_drift(),
            tol,
            "max relative drift of ||chi|| over recorded steps".into(),
        ),
        CheckName::DecompositionSum => CheckResult::new(
            check,
            run.series.max_decomposition_residual(),
            tol,
            "max |black + red + blue + green - total| relative to the term scale".into(),
        ),
        CheckName::TermPattern => {
            let mut bad = 0;
            for rec in &run.series.records {
                if p.config.n >= 2 {
                    bad += pattern_mismatches(&rec.rate_l, expected_pattern(model, p.formalism, Which::L));
                }
                bad += pattern_mismatches(&rec.rate_p, expected_pattern(model, p.formalism, Which::P));
            }
            let (l, _) = expected_pattern(model, p.formalism, Which::L);
            let (pp, _) = expected_pattern(model, p.formalism, Which::P);
            CheckResult::new(
                check,
                bad as f64,
                tol,
                format!("mismatches against the expected pattern (L: {l} extra terms, P: {pp})"),
            )
        }
        CheckName::RateIdentityL | CheckName::RateIdentityP => {
            let which = if check == CheckName::RateIdentityL { Which::L } else { Which::P };
            let rep = rate_identity_check(&uniform_series(&run.series, p.diagnostics_every), which)?;
            CheckResult::new(
                check,
                rep.max_residual,
                tol,
                format!("centered difference vs (2/hbar) Im<O chi|LL chi>, max |rate| {:.6e}", rep.max_rate),
            )
        }
        CheckName::QuadraticCoincidence => {
            let mut v: f64 = 0.0;
            for s in states {
                v = v.max(quadratic_coincidence_check(model, s)?);
            }
            CheckResult::new(check, v, tol, "max |LL_H chi - L_H chi| at the first and last state".into())
        }
        CheckName::Commutators => {
            let chi = &run.initial;
            let axes = chi.grid().axes();
            let mut v: f64 = 0.0;
            for m in 0..axes {
                v = v.max(commutator_residual(m, chi)?);
                for k in 0..m {
                    v = v.max(position_commutator_residual(m, k, chi)?);
                    v = v.max(momentum_commutator_residual(m, k, chi)?);
                }
            }
            CheckResult::new(check, v, tol, "canonical commutator residuals on the initial state".into())
        }
        CheckName::OracleL2 => {
            let grid = run.last.grid();
            let oracle = characteristics_on_grid(&p.spec, model, t_end, p.oracle_dt(), p.config.hbar, grid)?;
            let v = l2_difference(grid, run.last.values(), &oracle.values, &oracle.aborted)?;
            CheckResult::new(
                check,
                v,
                tol,
                format!(
                    "L2 distance to the characteristics solution at t = {t_end}; {} aborted nodes skipped",
                    oracle.aborted.len()
                ),
            )
        }
        CheckName::DensityTransport => {
            let grid = run.last.grid();
            let hbar = p.config.hbar;
            let (rho, oracle, which) = match p.formalism {
                Formalism::Kvh => (
                    density_kvh(&run.last),
                    transport_density_on_grid(|z| p.spec.density_kvh(z, hbar), model, t_end, p.oracle_dt(), grid)?,
                    "KvH density",
                ),
                Formalism::Kvn => (
                    density_kvn(&run.last),
                    transport_density_on_grid(|z| p.spec.density_kvn(z), model, t_end, p.oracle_dt(), grid)?,
                    "|chi|^2",
                ),
            };
            let v = l1_difference(grid, &rho, &oracle.values, &oracle.aborted)?;
            CheckResult::new(check, v, tol, format!("L1 distance of the {which} to its transport along the flow"))
        }
        CheckName::EnergyCoincidence => {
            let mut v: f64 = 0.0;
            for s in states {
                v = v.max(kvh_energy_coincidence_check(s, model)?.residual);
            }
            CheckResult::new(
                check,
                v,
                tol,
                "relative |<chi|LL_H chi> - int H rho_kvh| at the first and last state".into(),
            )
        }
        CheckName::KvnEnergyGap => {
            let r = kvn_energy_mismatch_report(&run.initial, model)?;
            let v = if r.physical != 0.0 { r.gap.abs() / r.physical.abs() } else { r.gap.abs() };
            CheckResult::new(
                check,
                v,
                tol,
                format!(
                    "|<chi|L_H chi> - int H |chi|^2| / |int H |chi|^2| on the initial state (h_kvn {:.6e}, physical {:.6e})",
                    r.h_kvn, r.physical
                ),
            )
        }
        CheckName::BracketIntegral => {
            let v = states
                .iter()
                .map(|s| bracket_imaginary_integral(s).abs())
                .fold(0.0, f64::max);
            CheckResult::new(check, v, tol, "|int Im{chi*, chi}| at the first and last state".into())
        }
        CheckName::HeisenbergEhrenfest => heisenberg(check, p, run, tol)?,
        CheckName::QmcAngularMomentum | CheckName::QmcEnergy => {
            unreachable!("QMC checks are rejected for the grid representation")
        }
    };
    Ok(r)
}

/// Harmonic, `A = p_1`: centered difference of `<LL_A>` at the middle of
/// the run against `<LL_{A,H}>`.
fn heisenberg(check: CheckName, p: &Prepared, run: &GridRun, tol: f64) -> Result<CheckResult, KvhError> {
    let n = p.config.n;
    let mut xi = vec![0.0; n];
    xi[0] = 1.0;
    let a = Observable::momentum_projection(&xi);
    let ah = linear_bracket(&a, &p.model)?;
    let dt = p.config.dt;
    let mid = (p.config.steps / 2).max(1);
    let times = [(mid - 1) as f64 * dt, mid as f64 * dt, (mid + 1) as f64 * dt];
    let mut cfg = PropagationConfig::new(dt, 1, p.formalism);
    if let Some(s) = p.config.cfl_safety {
        cfg = cfg.with_cfl_safety(s);
    }
    let va = heisenberg_expectation(&a, &run.initial, &p.model, &cfg, &times)?;
    let vb = heisenberg_expectation(&ah, &run.initial, &p.model, &cfg, &times)?;
    let fd = (va[2] - va[0]) / (2.0 * dt);
    let v = if vb[1] != 0.0 { (fd - vb[1]).abs() / vb[1].abs() } else { (fd - vb[1]).abs() };
    Ok(CheckResult::new(
        check,
        v,
        tol,
        format!("A = p_1 at t = {}: d<LL_A>/dt = {fd:.9e}, <LL_(A,H)> = {:.9e}", times[1], vb[1]),
    ))
}

/// Largest drift from the `t = 0` estimate that is not explained by three
/// half-sample errors; drifts within that band count as zero.
fn unexplained_drift(run: &QmcRun, observable: QmcObservable) -> (f64, String) {
    let first = run.reports[0].get(observable).expect("observable estimated");
    let mut worst = 0.0;
    let mut max_drift: f64 = 0.0;
    for rep in &run.reports[1..] {
        let e = rep.get(observable).expect("observable estimated");
        for c in 0..e.value.len() {
            let drift = (e.value[c] - first.value[c]).abs();
            let band = 3.0 * e.error[c].max(first.error[c]);
            max_drift = max_drift.max(drift);
            if drift > band && drift > worst {
                worst = drift;
            }
        }
    }
    (worst, format!("max drift {max_drift:.6e}; drifts within 3 half-sample errors count as zero"))
}

pub fn evaluate_qmc(check: CheckName, p: &Prepared, run: &QmcRun) -> CheckResult {
    let tol = p.tolerance(check);
    let observable = match check {
        CheckName::QmcAngularMomentum => QmcObservable::AngularMomentum,
        CheckName::QmcEnergy => QmcObservable::Energy,
        _ => unreachable!("grid checks are rejected for the characteristics representation"),
    };
    let (v, detail) = unexplained_drift(run, observable);
    CheckResult::new(check, v, tol, detail)
}

/// Shared by the runner to pick the observables a QMC run needs.
pub fn qmc_observables(n: usize) -> Vec<QmcObservable> {
    let mut obs = vec![QmcObservable::Identity, QmcObservable::Energy];
    if n >= 2 {
        obs.push(QmcObservable::AngularMomentum);
    }
    obs
}
