//! JSON run configuration and its validation.
//!
//! Unknown keys are rejected at every level. Validation errors carry the
//! dotted path of the offending field.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use kvh_core::hamiltonians::HamiltonianModel;
use kvh_core::operators::Formalism;
use kvh_core::phase_space::{PhaseGrid, PhasePoint};
use kvh_core::wavefunction::InitialStateSpec;
use serde::{Deserialize, Serialize};

use crate::checks::CheckName;

/// A configuration problem, reported with the field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "config error: {}", self.message)
        } else {
            write!(f, "config error at `{}`: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Harmonic,
    Anharmonic,
    Kepler,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Harmonic => "harmonic",
            Scenario::Anharmonic => "anharmonic",
            Scenario::Kepler => "kepler",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FormalismConfig {
    Kvn,
    #[default]
    Kvh,
}

impl From<FormalismConfig> for Formalism {
    fn from(f: FormalismConfig) -> Self {
        match f {
            FormalismConfig::Kvn => Formalism::Kvn,
            FormalismConfig::Kvh => Formalism::Kvh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    #[default]
    Grid,
    Characteristics,
}

/// Model parameters; only those of the chosen scenario may be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub k: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub mu: Option<f64>,
    pub lambda: Option<f64>,
    pub r_min: Option<f64>,
}

/// A scalar applied to every axis, or one value per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerAxis<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Copy> PerAxis<T> {
    fn expand(&self, axes: usize, path: &str) -> Result<Vec<T>, ConfigError> {
        match self {
            PerAxis::One(v) => Ok(vec![*v; axes]),
            PerAxis::Many(v) if v.len() == axes => Ok(v.clone()),
            PerAxis::Many(v) => Err(ConfigError::new(
                path,
                format!("expected a scalar or {axes} values, got {}", v.len()),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lower: PerAxis<f64>,
    pub upper: PerAxis<f64>,
    pub points: PerAxis<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Even number of Sobol points.
    pub samples: usize,
    pub seed: u64,
    /// Evenly spaced evaluation times from 0 to `dt * steps`, inclusive.
    pub checkpoints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub sigma: f64,
    /// Linear phase `exp(i k.z)`, 2n components.
    pub k: Option<Vec<f64>>,
}

fn default_hbar() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub model: ModelConfig,
    pub n: usize,
    #[serde(default)]
    pub formalism: FormalismConfig,
    #[serde(default)]
    pub representation: Representation,
    pub grid: Option<GridConfig>,
    pub sampler: Option<SamplerConfig>,
    pub initial: InitialConfig,
    /// Grid time step, or the leapfrog step of the characteristics.
    pub dt: f64,
    /// Zero evaluates the initial state only.
    pub steps: usize,
    /// Defaults to `steps` (records at the start and the end only).
    pub diagnostics_every: Option<usize>,
    #[serde(default = "default_hbar")]
    pub hbar: f64,
    pub cfl_safety: Option<f64>,
    /// Leapfrog step of the characteristics oracle used by grid checks.
    pub oracle_dt: Option<f64>,
    pub output_dir: Option<PathBuf>,
    /// Times at which the grid state is written out.
    #[serde(default)]
    pub snapshots: Vec<f64>,
    #[serde(default)]
    pub checks: Vec<String>,
    /// Per-check tolerance overrides, keyed by check name.
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
}

pub const DEFAULT_ORACLE_DT: f64 = 1e-4;

/// A configuration with every derived object built and checked.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub model: HamiltonianModel,
    pub spec: InitialStateSpec,
    pub formalism: Formalism,
    pub grid: Option<Arc<PhaseGrid>>,
    pub checks: Vec<CheckName>,
    pub tolerances: BTreeMap<CheckName, f64>,
    pub diagnostics_every: usize,
    pub snapshot_steps: Vec<usize>,
}

impl Prepared {
    pub fn t_end(&self) -> f64 {
        self.config.dt * self.config.steps as f64
    }

    pub fn oracle_dt(&self) -> f64 {
        self.config.oracle_dt.unwrap_or(DEFAULT_ORACLE_DT)
    }

    pub fn tolerance(&self, check: CheckName) -> f64 {
        if let Some(v) = self.tolerances.get(&check) {
            return *v;
        }
        match (check, self.config.scenario) {
            // the singular potential costs quadrature accuracy near the cut
            (CheckName::EnergyCoincidence, Scenario::Kepler) => 1e-5,
            _ => check.default_tolerance(),
        }
    }
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::new("", e.to_string()))
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(path, format!("must be finite and > 0, got {v}")))
    }
}

fn build_model(c: &RunConfig) -> Result<HamiltonianModel, ConfigError> {
    let m = &c.model;
    let allowed: &[&str] = match c.scenario {
        Scenario::Harmonic => &["k"],
        Scenario::Anharmonic => &["a", "b"],
        Scenario::Kepler => &["mu", "lambda", "r_min"],
    };
    let set = [
        ("k", m.k),
        ("a", m.a),
        ("b", m.b),
        ("mu", m.mu),
        ("lambda", m.lambda),
        ("r_min", m.r_min),
    ];
    for (name, v) in set {
        if v.is_some() && !allowed.contains(&name) {
            return Err(ConfigError::new(
                format!("model.{name}"),
                format!("not a parameter of {}", c.scenario.name()),
            ));
        }
    }
    let model = match c.scenario {
        Scenario::Harmonic => HamiltonianModel::harmonic(m.k.unwrap_or(1.0)),
        Scenario::Anharmonic => HamiltonianModel::anharmonic(m.a.unwrap_or(1.0), m.b.unwrap_or(0.1)),
        Scenario::Kepler => match m.r_min {
            Some(r) => HamiltonianModel::kepler_with_r_min(m.mu.unwrap_or(1.0), m.lambda.unwrap_or(1.0), r),
            None => HamiltonianModel::kepler(m.mu.unwrap_or(1.0), m.lambda.unwrap_or(1.0)),
        },
    };
    model.map_err(|e| ConfigError::new("model", e.to_string()))
}

fn build_spec(c: &RunConfig) -> Result<InitialStateSpec, ConfigError> {
    let i = &c.initial;
    for (name, v) in [("initial.q", &i.q), ("initial.p", &i.p)] {
        if v.len() != c.n {
            return Err(ConfigError::new(name, format!("expected {} values, got {}", c.n, v.len())));
        }
    }
    let center = PhasePoint::new(i.q.clone(), i.p.clone()).map_err(|e| ConfigError::new("initial", e.to_string()))?;
    positive("initial.sigma", i.sigma)?;
    let spec = InitialStateSpec::gaussian(center, i.sigma).map_err(|e| ConfigError::new("initial.sigma", e.to_string()))?;
    match &i.k {
        Some(k) => spec.with_phase(k.clone()).map_err(|e| ConfigError::new("initial.k", e.to_string())),
        None => Ok(spec),
    }
}

fn build_grid(c: &RunConfig, model: &HamiltonianModel) -> Result<Arc<PhaseGrid>, ConfigError> {
    let g = c
        .grid
        .as_ref()
        .ok_or_else(|| ConfigError::new("grid", "required for the grid representation"))?;
    let axes = 2 * c.n;
    let lower = g.lower.expand(axes, "grid.lower")?;
    let upper = g.upper.expand(axes, "grid.upper")?;
    let points = g.points.expand(axes, "grid.points")?;
    let grid = PhaseGrid::new(c.n, lower.clone(), upper.clone(), points).map_err(|e| ConfigError::new("grid", e.to_string()))?;
    grid.check_stencil_resolution()
        .map_err(|e| ConfigError::new("grid.points", e.to_string()))?;
    if let kvh_core::hamiltonians::ModelParams::KeplerReduced { r_min, .. } = model.params() {
        // closest approach of the q-box to the origin
        let d2: f64 = (0..c.n)
            .map(|i| {
                let d = if lower[i] > 0.0 {
                    lower[i]
                } else if upper[i] < 0.0 {
                    -upper[i]
                } else {
                    0.0
                };
                d * d
            })
            .sum();
        if d2.sqrt() < *r_min {
            return Err(ConfigError::new(
                "grid",
                format!(
                    "the q-domain reaches |q| = {:.4e} < r_min = {r_min:.4e}; exclude the singular ball",
                    d2.sqrt()
                ),
            ));
        }
    }
    Ok(Arc::new(grid))
}

fn times_to_steps(times: &[f64], dt: f64, steps: usize, path: &str) -> Result<Vec<usize>, ConfigError> {
    let mut out = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let k = (t / dt).round();
        if !(t >= 0.0 && (t - k * dt).abs() <= 1e-9 * dt.max(t) && k as usize <= steps) {
            return Err(ConfigError::new(
                format!("{path}[{i}]"),
                format!("{t} is not a multiple of dt within [0, dt * steps]"),
            ));
        }
        out.push(k as usize);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Validates `config` and builds the model, state spec and grid.
/// `all_checks` selects every applicable check when none are listed.
pub fn prepare(config: RunConfig, all_checks: bool) -> Result<Prepared, ConfigError> {
    let c = &config;
    if !(1..=3).contains(&c.n) {
        return Err(ConfigError::new("n", format!("must be 1, 2 or 3, got {}", c.n)));
    }
    positive("dt", c.dt)?;
    positive("hbar", c.hbar)?;
    if let Some(s) = c.cfl_safety {
        if !(s > 0.0 && s <= 1.0) {
            return Err(ConfigError::new("cfl_safety", format!("must lie in (0, 1], got {s}")));
        }
    }
    if let Some(d) = c.oracle_dt {
        positive("oracle_dt", d)?;
    }
    let diagnostics_every = c.diagnostics_every.unwrap_or(c.steps.max(1));
    if diagnostics_every == 0 {
        return Err(ConfigError::new("diagnostics_every", "must be positive"));
    }
    let model = build_model(c)?;
    let spec = build_spec(c)?;

    let grid = match c.representation {
        Representation::Grid => {
            if c.n > 2 {
                return Err(ConfigError::new(
                    "representation",
                    format!("the grid representation needs n <= 2, got n = {}", c.n),
                ));
            }
            if c.sampler.is_some() {
                return Err(ConfigError::new("sampler", "only used by the characteristics representation"));
            }
            Some(build_grid(c, &model)?)
        }
        Representation::Characteristics => {
            if c.grid.is_some() {
                return Err(ConfigError::new("grid", "only used by the grid representation"));
            }
            let s = c
                .sampler
                .as_ref()
                .ok_or_else(|| ConfigError::new("sampler", "required for the characteristics representation"))?;
            if s.samples < 2 || s.samples % 2 != 0 || s.samples > u32::MAX as usize {
                return Err(ConfigError::new("sampler.samples", "must be an even number >= 2"));
            }
            if s.checkpoints < 2 {
                return Err(ConfigError::new("sampler.checkpoints", "must be at least 2"));
            }
            if !c.snapshots.is_empty() {
                return Err(ConfigError::new("snapshots", "only available for the grid representation"));
            }
            None
        }
    };
    let snapshot_steps = times_to_steps(&c.snapshots, c.dt, c.steps, "snapshots")?;

    let mut tolerances = BTreeMap::new();
    for (name, &v) in &c.tolerances {
        let check = CheckName::parse(name).map_err(|m| ConfigError::new(format!("tolerances.{name}"), m))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(ConfigError::new(format!("tolerances.{name}"), format!("must be finite and >= 0, got {v}")));
        }
        tolerances.insert(check, v);
    }

    let mut checks = Vec::new();
    for (i, name) in c.checks.iter().enumerate() {
        let check = CheckName::parse(name).map_err(|m| ConfigError::new(format!("checks[{i}]"), m))?;
        check
            .applicable(c, &model)
            .map_err(|m| ConfigError::new(format!("checks[{i}]"), m))?;
        if !checks.contains(&check) {
            checks.push(check);
        }
    }
    if checks.is_empty() && all_checks {
        checks = CheckName::ALL
            .iter()
            .copied()
            .filter(|k| k.applicable(c, &model).is_ok())
            .collect();
    }

    let formalism = c.formalism.into();
    Ok(Prepared {
        config,
        model,
        spec,
        formalism,
        grid,
        checks,
        tolerances,
        diagnostics_every,
        snapshot_steps,
    })
}
