//! Time evolution of classical wavefunctions.
//!
//! - [`step_rk4`] / [`propagate_grid`]: classical Runge-Kutta on
//!   `d chi/dt = -(i/hbar) LL_H chi` (or `L_H` for KvN) over a grid;
//! - [`propagate_characteristics`]: the exact solution
//!   `chi(t, z) = exp(-(i/hbar) Theta) chi_0(Phi_-t(z))` evaluated pointwise,
//!   with `Theta = int_0^t a` along the trajectory ending at `z`;
//! - [`transport_density`]: `rho(t, z) = rho_0(Phi_-t(z))`;
//! - [`qmc_expectations`]: expectations at n = 3 from scrambled Sobol points
//!   carried forward by the flow;
//! - [`heisenberg_expectation`]: `<U_t chi_0 | LL_A U_t chi_0>` with
//!   `U_t = exp(-(i/hbar) t LL_H)`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::diagnostics::{DiagnosticContext, DiagnosticSeries};
use crate::hamiltonians::{flow_in_place, HamiltonianModel, PhaseFunction};
use crate::operators::{angular_components, Formalism, LiouvillianKernel};
use crate::phase_space::{PhaseGrid, PhasePoint};
use crate::wavefunction::{inner, norm, GridWaveFunction, InitialStateSpec};
use crate::{KvhError, Result, C64};

pub const DEFAULT_CFL_SAFETY: f64 = 0.5;

/// Relative imaginary part tolerated in Heisenberg-picture values.
pub const HEISENBERG_IMAG_LIMIT: f64 = 1e-7;

/// Largest tolerated fraction of QMC samples hitting the singular region.
pub const MAX_ABORT_FRACTION: f64 = 1e-3;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig {
    pub dt: f64,
    pub steps: usize,
    pub formalism: Formalism,
    pub cfl_safety: f64,
    pub diagnostics_every: usize,
}

impl PropagationConfig {
    /// Records diagnostics only at the start and the end.
    pub fn new(dt: f64, steps: usize, formalism: Formalism) -> Self {
        Self {
            dt,
            steps,
            formalism,
            cfl_safety: DEFAULT_CFL_SAFETY,
            diagnostics_every: steps.max(1),
        }
    }

    pub fn with_diagnostics_every(mut self, every: usize) -> Self {
        self.diagnostics_every = every;
        self
    }

    pub fn with_cfl_safety(mut self, safety: f64) -> Self {
        self.cfl_safety = safety;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(KvhError::InvalidState(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.steps == 0 {
            return Err(KvhError::InvalidState("steps must be positive".into()));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(KvhError::InvalidState(format!(
                "cfl_safety must lie in (0, 1], got {}",
                self.cfl_safety
            )));
        }
        if self.diagnostics_every == 0 {
            return Err(KvhError::InvalidState("diagnostics_every must be positive".into()));
        }
        Ok(())
    }

    pub fn total_time(&self) -> f64 {
        self.dt * self.steps as f64
    }
}

/// `cfl_safety * min spacing / max |X|`; infinite when `X` vanishes.
pub fn cfl_bound(kernel: &LiouvillianKernel, cfl_safety: f64) -> f64 {
    if kernel.max_speed() == 0.0 {
        f64::INFINITY
    } else {
        cfl_safety * kernel.grid().min_spacing() / kernel.max_speed()
    }
}

pub fn check_cfl(kernel: &LiouvillianKernel, dt: f64, cfl_safety: f64) -> Result<()> {
    let bound = cfl_bound(kernel, cfl_safety);
    if dt > bound {
        return Err(KvhError::CflViolation {
            dt,
            bound,
            max_speed: kernel.max_speed(),
        });
    }
    Ok(())
}

/// Reusable RK4 stepper with preallocated stage buffers.
#[derive(Debug, Clone)]
pub struct GridStepper {
    kernel: LiouvillianKernel,
    dt: f64,
    hbar: f64,
    acc: Vec<C64>,
    stage: Vec<C64>,
    k: Vec<C64>,
}

impl GridStepper {
    pub fn new<F: PhaseFunction + ?Sized>(
        f: &F,
        grid: Arc<PhaseGrid>,
        formalism: Formalism,
        hbar: f64,
        dt: f64,
        cfl_safety: f64,
    ) -> Result<Self> {
        grid.check_stencil_resolution()?;
        let kernel = LiouvillianKernel::new(f, grid, formalism)?;
        Self::from_kernel(kernel, hbar, dt, cfl_safety)
    }

    pub fn from_kernel(kernel: LiouvillianKernel, hbar: f64, dt: f64, cfl_safety: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(KvhError::InvalidState(format!("dt must be > 0, got {dt}")));
        }
        check_cfl(&kernel, dt, cfl_safety)?;
        let len = kernel.grid().len();
        Ok(Self {
            kernel,
            dt,
            hbar,
            acc: vec![ZERO; len],
            stage: vec![ZERO; len],
            k: vec![ZERO; len],
        })
    }

    pub fn kernel(&self) -> &LiouvillianKernel {
        &self.kernel
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `k = -(i/hbar) LL stage`.
    fn eval_stage(&mut self, input_is_chi: bool, chi: &[C64]) {
        self.k.par_iter_mut().for_each(|v| *v = ZERO);
        let src = if input_is_chi { chi } else { &self.stage };
        self.kernel
            .accumulate(src, self.hbar, &mut self.k, C64::new(0.0, -1.0 / self.hbar));
    }

    /// One classical RK4 step in place.
    pub fn step(&mut self, chi: &mut [C64]) {
        let dt = self.dt;
        let (c6, c3, c2) = (dt / 6.0, dt / 3.0, dt / 2.0);

        self.eval_stage(true, chi);
        self.acc
            .par_iter_mut()
            .zip(self.stage.par_iter_mut())
            .zip(chi.par_iter().zip(self.k.par_iter()))
            .for_each(|((a, s), (c, k))| {
                *a = c + k * c6;
                *s = c + k * c2;
            });

        for (weight, next) in [(c3, c2), (c3, dt)] {
            self.eval_stage(false, chi);
            self.acc
                .par_iter_mut()
                .zip(self.stage.par_iter_mut())
                .zip(chi.par_iter().zip(self.k.par_iter()))
                .for_each(|((a, s), (c, k))| {
                    *a += k * weight;
                    *s = c + k * next;
                });
        }

        self.eval_stage(false, chi);
        chi.par_iter_mut()
            .zip(self.acc.par_iter().zip(self.k.par_iter()))
            .for_each(|(c, (a, k))| *c = a + k * c6);
    }
}

fn all_finite(values: &[C64]) -> bool {
    values.par_iter().all(|v| v.re.is_finite() && v.im.is_finite())
}

/// One RK4 step of size `dt` with the default CFL safety.
pub fn step_rk4(
    chi: &GridWaveFunction,
    model: &HamiltonianModel,
    formalism: Formalism,
    dt: f64,
) -> Result<GridWaveFunction> {
    let mut stepper = GridStepper::new(
        model,
        Arc::clone(chi.grid_arc()),
        formalism,
        chi.hbar(),
        dt,
        DEFAULT_CFL_SAFETY,
    )?;
    let mut out = chi.clone();
    stepper.step(out.values_mut());
    if !all_finite(out.values()) {
        return Err(KvhError::NonFinite { step: 1 });
    }
    Ok(out)
}

/// Runs `config.steps` RK4 steps, recording diagnostics at step 0, every
/// `diagnostics_every` steps, and at the last step.
pub fn propagate_grid(
    chi0: &GridWaveFunction,
    model: &HamiltonianModel,
    config: &PropagationConfig,
) -> Result<(GridWaveFunction, DiagnosticSeries)> {
    config.validate()?;
    chi0.check_decayed()?;
    let grid = Arc::clone(chi0.grid_arc());
    let mut stepper = GridStepper::new(model, Arc::clone(&grid), config.formalism, chi0.hbar(), config.dt, config.cfl_safety)?;
    let context = DiagnosticContext::new(model, grid, config.formalism)?;
    let mut series = DiagnosticSeries::new(chi0.n(), config.dt, config.formalism, chi0.hbar());
    let mut chi = chi0.clone();
    series.push(context.record(&chi, 0, 0.0)?);
    for step in 1..=config.steps {
        stepper.step(chi.values_mut());
        if !all_finite(chi.values()) {
            return Err(KvhError::NonFinite { step });
        }
        if step % config.diagnostics_every == 0 || step == config.steps {
            series.push(context.record(&chi, step, step as f64 * config.dt)?);
        }
    }
    Ok((chi, series))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowStatus {
    Ok,
    SingularAbort { time: f64 },
}

/// Backward characteristic through a sample point.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicState {
    pub z: PhasePoint,
    /// `Phi_-t(z)`; equals `z` when aborted.
    pub z_back: PhasePoint,
    /// `int_0^t a(Phi_s(z_back)) ds`; zero when aborted.
    pub theta: f64,
    pub status: FlowStatus,
}

impl CharacteristicState {
    pub fn is_ok(&self) -> bool {
        self.status == FlowStatus::Ok
    }
}

/// Flows `z` (length 2n) back by `t` in place and returns `Theta`, or the
/// abort time measured backward from `t`.
fn backward_in_place(model: &HamiltonianModel, z: &mut [f64], t: f64, dt: f64) -> Result<std::result::Result<f64, f64>> {
    let n = z.len() / 2;
    let (q, p) = z.split_at_mut(n);
    match flow_in_place(model, q, p, -t, dt) {
        Ok(phase) => Ok(Ok(-phase)),
        Err(KvhError::SingularAbort { time }) => Ok(Err(-time)),
        Err(KvhError::SingularRegion { .. }) => Ok(Err(0.0)),
        Err(e) => Err(e),
    }
}

fn check_point_dims(model: &HamiltonianModel, spec_n: usize, z: &PhasePoint) -> Result<()> {
    model.check_n(z.n())?;
    if z.n() != spec_n {
        return Err(KvhError::DimensionMismatch(format!(
            "point has n = {}, initial state has n = {spec_n}",
            z.n()
        )));
    }
    Ok(())
}

/// Backward characteristic of one point.
pub fn backward_characteristic(
    model: &HamiltonianModel,
    z: &PhasePoint,
    t: f64,
    dt: f64,
) -> Result<CharacteristicState> {
    model.check_n(z.n())?;
    let mut w = z.to_z();
    Ok(match backward_in_place(model, &mut w, t, dt)? {
        Ok(theta) => CharacteristicState {
            z: z.clone(),
            z_back: PhasePoint::from_z(&w)?,
            theta,
            status: FlowStatus::Ok,
        },
        Err(time) => CharacteristicState {
            z: z.clone(),
            z_back: z.clone(),
            theta: 0.0,
            status: FlowStatus::SingularAbort { time },
        },
    })
}

/// `chi(t, z)` at one point; `None` when the trajectory aborts.
fn characteristic_value(
    spec: &InitialStateSpec,
    model: &HamiltonianModel,
    z: &[f64],
    t: f64,
    dt: f64,
    hbar: f64,
) -> Result<Option<C64>> {
    let mut w = [0.0; 6];
    let w = &mut w[..z.len()];
    w.copy_from_slice(z);
    Ok(backward_in_place(model, w, t, dt)?
        .ok()
        .map(|theta| spec.eval(w) * C64::from_polar(1.0, -theta / hbar)))
}

/// Exact solution at each point; aborted points carry `NaN` values.
pub fn propagate_characteristics(
    spec: &InitialStateSpec,
    model: &HamiltonianModel,
    t: f64,
    dt: f64,
    hbar: f64,
    points: &[PhasePoint],
) -> Result<Vec<(C64, CharacteristicState)>> {
    for z in points {
        check_point_dims(model, spec.n(), z)?;
    }
    points
        .par_iter()
        .map(|z| {
            let state = backward_characteristic(model, z, t, dt)?;
            let value = if state.is_ok() {
                spec.eval(&state.z_back.to_z()) * C64::from_polar(1.0, -state.theta / hbar)
            } else {
                C64::new(f64::NAN, f64::NAN)
            };
            Ok((value, state))
        })
        .collect()
}

/// Pointwise values on grid nodes; aborted nodes hold zero and are listed.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOracle<T> {
    pub values: Vec<T>,
    pub aborted: Vec<usize>,
}

/// Characteristics solution at every node of `grid`.
pub fn characteristics_on_grid(
    spec: &InitialStateSpec,
    model: &HamiltonianModel,
    t: f64,
    dt: f64,
    hbar: f64,
    grid: &PhaseGrid,
) -> Result<GridOracle<C64>> {
    model.check_n(grid.n())?;
    if grid.n() != spec.n() {
        return Err(KvhError::DimensionMismatch("grid and initial state differ in n".into()));
    }
    let raw: Vec<Option<C64>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut z = [0.0; 6];
            grid.coords_into(i, &mut z[..grid.axes()]);
            characteristic_value(spec, model, &z[..grid.axes()], t, dt, hbar)
        })
        .collect::<Result<_>>()?;
    Ok(split_aborted(raw))
}

fn split_aborted<T: Default + Copy>(raw: Vec<Option<T>>) -> GridOracle<T> {
    let aborted = raw.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(i, _)| i).collect();
    GridOracle {
        values: raw.into_iter().map(|v| v.unwrap_or_default()).collect(),
        aborted,
    }
}

/// `rho_0(Phi_-t(z))` per point, with the flow status.
pub fn transport_density<R>(
    rho0: R,
    model: &HamiltonianModel,
    t: f64,
    dt: f64,
    points: &[PhasePoint],
) -> Result<Vec<(f64, FlowStatus)>>
where
    R: Fn(&[f64]) -> f64 + Sync,
{
    points
        .par_iter()
        .map(|z| {
            let state = backward_characteristic(model, z, t, dt)?;
            Ok(match state.status {
                FlowStatus::Ok => (rho0(&state.z_back.to_z()), FlowStatus::Ok),
                s => (f64::NAN, s),
            })
        })
        .collect()
}

/// [`transport_density`] at every node of `grid`.
pub fn transport_density_on_grid<R>(
    rho0: R,
    model: &HamiltonianModel,
    t: f64,
    dt: f64,
    grid: &PhaseGrid,
) -> Result<GridOracle<f64>>
where
    R: Fn(&[f64]) -> f64 + Sync,
{
    model.check_n(grid.n())?;
    let raw: Vec<Option<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut z = [0.0; 6];
            let z = &mut z[..grid.axes()];
            grid.coords_into(i, z);
            Ok(backward_in_place(model, z, t, dt)?.ok().map(|_| rho0(z)))
        })
        .collect::<Result<_>>()?;
    Ok(split_aborted(raw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QmcObservable {
    Identity,
    /// `<z_a>` for every axis.
    Position,
    /// `<LL_H>`
    Energy,
    AngularMomentum,
    LinearMomentum,
    LinearMomentumKvn,
}

impl QmcObservable {
    fn needs_gradient(self) -> bool {
        !matches!(self, QmcObservable::Identity | QmcObservable::Position)
    }

    /// Number of reported components for spatial dimension n.
    pub fn components(self, n: usize) -> usize {
        match self {
            QmcObservable::Identity | QmcObservable::Energy => 1,
            QmcObservable::Position => 2 * n,
            QmcObservable::AngularMomentum => 3,
            QmcObservable::LinearMomentum | QmcObservable::LinearMomentumKvn => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QmcConfig {
    /// Even number of Sobol points.
    pub samples: usize,
    pub seed: u64,
    /// Leapfrog step of the characteristics.
    pub flow_dt: f64,
    /// Box half-width in units of sigma.
    pub box_sigmas: f64,
    /// Finite-difference step in units of sigma.
    pub fd_sigmas: f64,
}

impl QmcConfig {
    pub fn new(samples: usize, seed: u64, flow_dt: f64) -> Self {
        Self {
            samples,
            seed,
            flow_dt,
            box_sigmas: 6.0,
            fd_sigmas: 1e-4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.samples < 2 || !self.samples.is_multiple_of(2) || self.samples > u32::MAX as usize {
            return Err(KvhError::InsufficientSamples {
                need: 2,
                have: self.samples,
            });
        }
        if !(self.flow_dt.is_finite() && self.flow_dt > 0.0) {
            return Err(KvhError::InvalidState(format!("flow_dt must be > 0, got {}", self.flow_dt)));
        }
        if !(self.box_sigmas > 0.0 && self.fd_sigmas > 0.0) {
            return Err(KvhError::InvalidState("box and finite-difference widths must be > 0".into()));
        }
        Ok(())
    }
}

/// Sobol scrambling seed derived from the 64-bit run seed.
pub fn sobol_seed(seed: u64) -> u32 {
    (seed ^ (seed >> 32)) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct QmcEstimate {
    pub observable: QmcObservable,
    /// Mean of the two half-sample estimates.
    pub value: Vec<f64>,
    /// Half the difference of the half-sample estimates.
    pub error: Vec<f64>,
    /// Imaginary part of the full-sample estimate.
    pub imag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QmcReport {
    pub t: f64,
    pub samples: usize,
    pub aborted: usize,
    pub estimates: Vec<QmcEstimate>,
}

impl QmcReport {
    pub fn get(&self, observable: QmcObservable) -> Option<&QmcEstimate> {
        self.estimates.iter().find(|e| e.observable == observable)
    }
}

/// Per-sample integrand for every requested component, as complex values.
#[allow(clippy::too_many_arguments)]
fn qmc_sample(
    spec: &InitialStateSpec,
    model: &HamiltonianModel,
    t: f64,
    hbar: f64,
    observables: &[QmcObservable],
    config: &QmcConfig,
    index: u32,
    width: usize,
) -> Result<Option<Vec<C64>>> {
    let n = spec.n();
    let axes = 2 * n;
    let z0 = spec.center().to_z();
    let half = config.box_sigmas * spec.width();
    let seed = sobol_seed(config.seed);
    let mut start = [0.0; 6];
    for a in 0..axes {
        let u = sobol_burley::sample(index, a as u32, seed) as f64;
        start[a] = z0[a] - half + 2.0 * half * u;
    }
    let chi0 = spec.eval(&start[..axes]);

    // forward to z = Phi_t(z0), chi_t(z) = chi_0(z0) exp(-(i/hbar) Theta)
    let mut z = start;
    let theta = {
        let (q, p) = z[..axes].split_at_mut(n);
        match flow_in_place(model, q, p, t, config.flow_dt) {
            Ok(phase) => phase,
            Err(KvhError::SingularAbort { .. }) | Err(KvhError::SingularRegion { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    };
    let chi = chi0 * C64::from_polar(1.0, -theta / hbar);
    let z = &z[..axes];

    let mut grad = [ZERO; 6];
    if observables.iter().any(|o| o.needs_gradient()) {
        let h = config.fd_sigmas * spec.width();
        for a in 0..axes {
            let mut w = [0.0; 6];
            w[..axes].copy_from_slice(z);
            w[a] = z[a] + h;
            let plus = characteristic_value(spec, model, &w[..axes], t, config.flow_dt, hbar)?;
            w[a] = z[a] - h;
            let minus = characteristic_value(spec, model, &w[..axes], t, config.flow_dt, hbar)?;
            match (plus, minus) {
                (Some(p), Some(m)) => grad[a] = (p - m) / (2.0 * h),
                _ => return Ok(None),
            }
        }
    }

    let (q, p) = z.split_at(n);
    let cc = chi.conj();
    let ih = C64::new(0.0, hbar);
    let mut out = Vec::with_capacity(width);
    for obs in observables {
        match obs {
            QmcObservable::Identity => out.push(cc * chi),
            QmcObservable::Position => out.extend(z.iter().map(|za| cc * chi * *za)),
            QmcObservable::Energy => {
                let mut xq = [0.0; 3];
                let mut xp = [0.0; 3];
                model.vector_field(q, p, &mut xq[..n], &mut xp[..n])?;
                let mut x_grad = ZERO;
                for i in 0..n {
                    x_grad += grad[i] * xq[i] + grad[n + i] * xp[i];
                }
                let a = model.phase_term(q, p)?;
                out.push(cc * (-ih * x_grad + chi * a));
            }
            QmcObservable::AngularMomentum => {
                let mut l = [ZERO; 3];
                for &k in angular_components(n) {
                    let (i, j) = ((k + 1) % 3, (k + 2) % 3);
                    // (d chi x v)_k = d_i chi v_j - d_j chi v_i over both blocks
                    l[k] = ih
                        * (grad[n + i] * p[j] - grad[n + j] * p[i] + grad[i] * q[j] - grad[j] * q[i]);
                }
                out.extend(l.iter().map(|v| cc * v));
            }
            QmcObservable::LinearMomentum | QmcObservable::LinearMomentumKvn => {
                let half_p = if *obs == QmcObservable::LinearMomentum { 0.5 } else { 0.0 };
                out.extend((0..n).map(|i| cc * (-ih * grad[i] + chi * (half_p * p[i]))));
            }
        }
    }
    Ok(Some(out))
}

/// Expectations at time `t` from `config.samples` scrambled Sobol points
/// in the box `z0 +- box_sigmas sigma`, carried forward by the flow.
/// Gradients of `chi_t` come from central differences of the
/// characteristics solution. Deterministic for a given seed.
pub fn qmc_expectations(
    spec: &InitialStateSpec,
    model: &HamiltonianModel,
    t: f64,
    hbar: f64,
    observables: &[QmcObservable],
    config: &QmcConfig,
) -> Result<QmcReport> {
    config.validate()?;
    let n = spec.n();
    model.check_n(n)?;
    if observables.contains(&QmcObservable::AngularMomentum) && n == 1 {
        return Err(KvhError::UnsupportedDimension {
            op: "angular momentum",
            n,
        });
    }
    let width: usize = observables.iter().map(|o| o.components(n)).sum();
    let per_sample: Vec<Option<Vec<C64>>> = (0..config.samples as u32)
        .into_par_iter()
        .map(|i| qmc_sample(spec, model, t, hbar, observables, config, i, width))
        .collect::<Result<_>>()?;

    let aborted = per_sample.iter().filter(|s| s.is_none()).count();
    if aborted as f64 > MAX_ABORT_FRACTION * config.samples as f64 {
        return Err(KvhError::TooManyAborts {
            aborted,
            total: config.samples,
        });
    }
    // interleaved halves, summed in index order
    let mut sums = [vec![ZERO; width], vec![ZERO; width]];
    for (i, s) in per_sample.iter().enumerate() {
        if let Some(v) = s {
            for (acc, x) in sums[i % 2].iter_mut().zip(v) {
                *acc += x;
            }
        }
    }
    let volume = (2.0 * config.box_sigmas * spec.width()).powi(2 * n as i32);
    let half_weight = volume / (config.samples / 2) as f64;

    let mut estimates = Vec::with_capacity(observables.len());
    let mut offset = 0;
    for &obs in observables {
        let m = obs.components(n);
        let mut est = QmcEstimate {
            observable: obs,
            value: Vec::with_capacity(m),
            error: Vec::with_capacity(m),
            imag: Vec::with_capacity(m),
        };
        for c in offset..offset + m {
            let (e, o) = (sums[0][c] * half_weight, sums[1][c] * half_weight);
            let mean = (e + o) * 0.5;
            est.value.push(mean.re);
            est.error.push(0.5 * (e.re - o.re).abs());
            est.imag.push(mean.im);
        }
        offset += m;
        estimates.push(est);
    }
    Ok(QmcReport {
        t,
        samples: config.samples,
        aborted,
        estimates,
    })
}

/// Single-observable form of [`qmc_expectations`].
pub fn qmc_expectation(
    observable: QmcObservable,
    spec: &InitialStateSpec,
    model: &HamiltonianModel,
    t: f64,
    hbar: f64,
    config: &QmcConfig,
) -> Result<QmcEstimate> {
    let report = qmc_expectations(spec, model, t, hbar, &[observable], config)?;
    Ok(report.estimates.into_iter().next().expect("one estimate"))
}

/// Converts times to step counts; each must be a non-negative multiple of
/// `dt` and the sequence non-decreasing.
fn times_to_steps(times: &[f64], dt: f64) -> Result<Vec<usize>> {
    let mut last = 0usize;
    times
        .iter()
        .map(|&t| {
            let k = (t / dt).round();
            if !(t >= 0.0 && (t - k * dt).abs() <= 1e-9 * dt.max(t.abs())) {
                return Err(KvhError::InvalidState(format!("time {t} is not a multiple of dt = {dt}")));
            }
            let k = k as usize;
            if k < last {
                return Err(KvhError::InvalidState("times must be non-decreasing".into()));
            }
            last = k;
            Ok(k)
        })
        .collect()
}

/// `<U_t chi_0 | LL_A U_t chi_0>` at each time, in the formalism of
/// `config` (KvN uses `L_A`). `config.steps` is ignored; times must be
/// multiples of `config.dt`.
pub fn heisenberg_expectation<A: PhaseFunction + ?Sized>(
    observable: &A,
    chi0: &GridWaveFunction,
    model: &HamiltonianModel,
    config: &PropagationConfig,
    times: &[f64],
) -> Result<Vec<f64>> {
    PropagationConfig { steps: 1, ..*config }.validate()?;
    chi0.check_decayed()?;
    let grid = Arc::clone(chi0.grid_arc());
    let steps = times_to_steps(times, config.dt)?;
    let mut stepper = GridStepper::new(model, Arc::clone(&grid), config.formalism, chi0.hbar(), config.dt, config.cfl_safety)?;
    let a_kernel = LiouvillianKernel::new(observable, grid, config.formalism)?;
    let mut chi = chi0.clone();
    let mut done = 0;
    let mut out = Vec::with_capacity(times.len());
    for target in steps {
        while done < target {
            stepper.step(chi.values_mut());
            done += 1;
            if !all_finite(chi.values()) {
                return Err(KvhError::NonFinite { step: done });
            }
        }
        let applied = a_kernel.apply(&chi)?;
        let e = inner(&chi, &applied)?;
        let scale = norm(&chi) * norm(&applied);
        if scale > 0.0 && e.im.abs() > HEISENBERG_IMAG_LIMIT * scale {
            return Err(KvhError::ImaginaryExpectation {
                what: "Heisenberg observable".into(),
                ratio: e.im.abs() / scale,
                limit: HEISENBERG_IMAG_LIMIT,
            });
        }
        out.push(e.re);
    }
    Ok(out)
}

/// `||a - b||` by grid quadrature, skipping the listed nodes.
pub fn l2_difference(grid: &PhaseGrid, a: &[C64], b: &[C64], skip: &[usize]) -> Result<f64> {
    crate::phase_space::check_len(grid, a.len())?;
    crate::phase_space::check_len(grid, b.len())?;
    let mut mask = vec![false; grid.len()];
    for &i in skip {
        mask[i] = true;
    }
    let sq: f64 = crate::phase_space::weighted_sum(grid, |i| if mask[i] { 0.0 } else { (a[i] - b[i]).norm_sqr() });
    Ok((sq * grid.cell_volume()).sqrt())
}

/// `int |a - b|` by grid quadrature, skipping the listed nodes.
pub fn l1_difference(grid: &PhaseGrid, a: &[f64], b: &[f64], skip: &[usize]) -> Result<f64> {
    crate::phase_space::check_len(grid, a.len())?;
    crate::phase_space::check_len(grid, b.len())?;
    let mut mask = vec![false; grid.len()];
    for &i in skip {
        mask[i] = true;
    }
    let s: f64 = crate::phase_space::weighted_sum(grid, |i| if mask[i] { 0.0 } else { (a[i] - b[i]).abs() });
    Ok(s * grid.cell_volume())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonians::{flow_to, linear_bracket, Observable};
    use crate::phase_space::integrate_real;
    use crate::wavefunction::{density_kvn, make_initial};

    fn gaussian(q: &[f64], p: &[f64], sigma: f64) -> InitialStateSpec {
        InitialStateSpec::gaussian(PhasePoint::new(q.to_vec(), p.to_vec()).unwrap(), sigma).unwrap()
    }

    fn state_1d(spec: &InitialStateSpec, half: f64, pts: usize, hbar: f64) -> GridWaveFunction {
        let g = Arc::new(PhaseGrid::uniform(1, -half, half, pts).unwrap());
        make_initial(spec, g, hbar).unwrap()
    }

    #[test]
    fn zero_hamiltonian_leaves_state_unchanged() {
        let spec = gaussian(&[0.3], &[-0.2], 0.5).with_phase(vec![0.7, -0.4]).unwrap();
        let chi = state_1d(&spec, 6.0, 64, 1.0);
        let zero = HamiltonianModel::quadratic(vec![0.0], vec![0.0]).unwrap();
        for f in [Formalism::Kvh, Formalism::Kvn] {
            let (out, _) = propagate_grid(&chi, &zero, &PropagationConfig::new(1e-2, 20, f)).unwrap();
            assert_eq!(out.values(), chi.values());
        }
    }

    #[test]
    fn constant_energy_offset_is_a_global_phase_in_kvh_only() {
        // LL = c, so each RK4 step multiplies by the degree-4 Taylor
        // polynomial of exp(-i c dt / hbar)
        let (c, dt, hbar, steps) = (1.7, 1e-2, 0.8, 50);
        let spec = gaussian(&[0.3], &[-0.2], 0.5);
        let chi = state_1d(&spec, 6.0, 64, hbar);
        let model = HamiltonianModel::quadratic_with_offset(vec![0.0], vec![0.0], c).unwrap();
        let z = C64::new(0.0, -c * dt / hbar);
        let r = 1.0 + z + z * z / 2.0 + z * z * z / 6.0 + z * z * z * z / 24.0;
        let factor = r.powu(steps as u32);
        let exact = C64::from_polar(1.0, -c * dt * steps as f64 / hbar);
        assert!((factor - exact).norm() < 1e-8);

        let (kvh, _) = propagate_grid(&chi, &model, &PropagationConfig::new(dt, steps, Formalism::Kvh)).unwrap();
        for (a, b) in kvh.values().iter().zip(chi.values()) {
            assert!((a - b * factor).norm() <= 1e-13);
        }
        let (kvn, _) = propagate_grid(&chi, &model, &PropagationConfig::new(dt, steps, Formalism::Kvn)).unwrap();
        assert_eq!(kvn.values(), chi.values());
    }

    #[test]
    fn one_step_preserves_the_norm() {
        let spec = gaussian(&[1.0], &[0.0], 0.7).with_phase(vec![0.5, 0.5]).unwrap();
        let chi = state_1d(&spec, 8.0, 128, 1.0);
        let model = HamiltonianModel::harmonic(2.0).unwrap();
        for f in [Formalism::Kvh, Formalism::Kvn] {
            let next = step_rk4(&chi, &model, f, 1e-3).unwrap();
            assert!((norm(&next) - norm(&chi)).abs() <= 1e-12);
        }
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let spec = gaussian(&[0.0], &[0.0], 0.7);
        let chi = state_1d(&spec, 8.0, 128, 1.0);
        let model = HamiltonianModel::harmonic(2.0).unwrap();
        let err = step_rk4(&chi, &model, Formalism::Kvh, 0.5).unwrap_err();
        assert!(matches!(err, KvhError::CflViolation { .. }));
        let err = propagate_grid(&chi, &model, &PropagationConfig::new(0.5, 1, Formalism::Kvh)).unwrap_err();
        assert!(matches!(err, KvhError::CflViolation { .. }));
    }

    #[test]
    fn undecayed_state_is_rejected() {
        let spec = gaussian(&[3.0], &[0.0], 0.7);
        let g = Arc::new(PhaseGrid::uniform(1, -4.0, 4.0, 64).unwrap());
        let chi = GridWaveFunction::from_fn(g, 1.0, |z| spec.eval(z)).unwrap();
        let model = HamiltonianModel::harmonic(2.0).unwrap();
        let err = propagate_grid(&chi, &model, &PropagationConfig::new(1e-3, 1, Formalism::Kvh)).unwrap_err();
        assert!(matches!(err, KvhError::BoundaryNotDecayed { .. }));
    }

    #[test]
    fn diagnostics_are_recorded_at_the_requested_cadence() {
        let spec = gaussian(&[1.0], &[0.0], 0.7);
        let chi = state_1d(&spec, 8.0, 128, 1.0);
        let model = HamiltonianModel::harmonic(2.0).unwrap();
        let cfg = PropagationConfig::new(1e-3, 10, Formalism::Kvh).with_diagnostics_every(4);
        let (_, series) = propagate_grid(&chi, &model, &cfg).unwrap();
        let steps: Vec<usize> = series.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 4, 8, 10]);
    }

    #[test]
    fn characteristics_at_time_zero_reproduce_the_initial_state() {
        let spec = gaussian(&[0.4, -0.1], &[0.2, 0.3], 0.6).with_phase(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let model = HamiltonianModel::anharmonic(1.0, 0.3).unwrap();
        let pts: Vec<PhasePoint> = (0..20)
            .map(|i| {
                let s = i as f64 * 0.1;
                PhasePoint::new(vec![s, -s], vec![0.5 - s, s * s]).unwrap()
            })
            .collect();
        for (v, st) in propagate_characteristics(&spec, &model, 0.0, 1e-3, 1.0, &pts).unwrap() {
            assert_eq!(v, spec.eval(&st.z.to_z()));
            assert_eq!(st.theta, 0.0);
        }
    }

    #[test]
    fn quadratic_models_accumulate_no_phase() {
        let model = HamiltonianModel::harmonic(2.0).unwrap();
        let z = PhasePoint::new(vec![1.0, 0.5], vec![-0.3, 0.2]).unwrap();
        let st = backward_characteristic(&model, &z, 1.3, 1e-3).unwrap();
        assert!(st.is_ok());
        assert_eq!(st.theta, 0.0);
        // the anharmonic phase is -b |q|^4 integrated along the orbit
        let anh = HamiltonianModel::anharmonic(1.0, 0.2).unwrap();
        let st = backward_characteristic(&anh, &z, 1.3, 1e-3).unwrap();
        assert!(st.theta < 0.0);
    }

    #[test]
    fn free_particle_characteristics_match_the_shear() {
        // H = p^2 / 2m: Phi_-t(q, p) = (q - p t / m, p), a = 0
        let (m, t) = (1.5, 0.8);
        let spec = gaussian(&[0.2], &[0.4], 0.5).with_phase(vec![0.3, -0.6]).unwrap();
        let model = HamiltonianModel::free(m).unwrap();
        let pts: Vec<PhasePoint> = (0..50)
            .map(|i| PhasePoint::new(vec![-2.0 + 0.08 * i as f64], vec![1.0 - 0.03 * i as f64]).unwrap())
            .collect();
        for (v, st) in propagate_characteristics(&spec, &model, t, 1e-2, 1.0, &pts).unwrap() {
            let (q, p) = (st.z.q[0], st.z.p[0]);
            let want = spec.eval(&[q - p * t / m, p]);
            assert!((v - want).norm() <= 1e-13);
        }
    }

    #[test]
    fn grid_solution_tracks_the_free_shear() {
        let (m, t) = (1.0, 0.5);
        let spec = gaussian(&[0.0], &[0.3], 0.4);
        let chi = state_1d(&spec, 5.0, 96, 1.0);
        let model = HamiltonianModel::free(m).unwrap();
        let (out, _) = propagate_grid(&chi, &model, &PropagationConfig::new(1e-3, 500, Formalism::Kvh)).unwrap();
        let g = out.grid();
        let exact: Vec<C64> = (0..g.len())
            .map(|i| {
                let (q, p) = (g.coord(i, 0), g.coord(i, 1));
                spec.eval(&[q - p * t / m, p])
            })
            .collect();
        assert!(l2_difference(g, out.values(), &exact, &[]).unwrap() < 1e-3);
    }

    #[test]
    fn characteristic_flows_compose() {
        let model = HamiltonianModel::anharmonic(1.0, 0.2).unwrap();
        let z = PhasePoint::new(vec![0.7], vec![-0.4]).unwrap();
        let whole = backward_characteristic(&model, &z, 0.6, 1e-2).unwrap();
        let first = backward_characteristic(&model, &z, 0.3, 1e-2).unwrap();
        let second = backward_characteristic(&model, &first.z_back, 0.3, 1e-2).unwrap();
        assert!((whole.z_back.q[0] - second.z_back.q[0]).abs() < 1e-13);
        assert!((whole.z_back.p[0] - second.z_back.p[0]).abs() < 1e-13);
        assert!((whole.theta - (first.theta + second.theta)).abs() < 1e-13);
        // forward flow undoes the backward one
        let (fwd, phase) = flow_to(&model, &whole.z_back, 0.6, 1e-2).unwrap();
        assert!((fwd.q[0] - 0.7).abs() < 1e-12 && (fwd.p[0] + 0.4).abs() < 1e-12);
        assert!((phase - whole.theta).abs() < 1e-12);
    }

    #[test]
    fn kepler_trajectories_through_the_core_abort() {
        let model = HamiltonianModel::kepler(1.0, 1.0).unwrap();
        let spec = gaussian(&[1.0], &[0.0], 0.2);
        // falls radially into the origin within t = 1
        let pts = vec![
            PhasePoint::new(vec![0.5], vec![0.0]).unwrap(),
            PhasePoint::new(vec![5.0], vec![2.0]).unwrap(),
        ];
        let out = propagate_characteristics(&spec, &model, 1.0, 1e-3, 1.0, &pts).unwrap();
        assert!(matches!(out[0].1.status, FlowStatus::SingularAbort { .. }));
        assert!(out[0].0.re.is_nan());
        assert!(out[1].1.is_ok() && out[1].0.re.is_finite());
    }

    #[test]
    fn transported_density_conserves_mass() {
        let spec = gaussian(&[0.5], &[0.0], 0.25);
        let model = HamiltonianModel::anharmonic(1.0, 0.05).unwrap();
        let g = PhaseGrid::uniform(1, -4.0, 4.0, 128).unwrap();
        let rho = transport_density_on_grid(|z| spec.density_kvn(z), &model, 0.5, 1e-3, &g).unwrap();
        assert!(rho.aborted.is_empty());
        assert!((integrate_real(&g, &rho.values).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn kvn_density_of_grid_solution_matches_transport() {
        let spec = gaussian(&[0.5], &[0.0], 0.25);
        let model = HamiltonianModel::anharmonic(1.0, 0.05).unwrap();
        let chi = state_1d(&spec, 4.0, 128, 1.0);
        let (out, _) = propagate_grid(&chi, &model, &PropagationConfig::new(1e-3, 200, Formalism::Kvn)).unwrap();
        let rho = transport_density_on_grid(|z| spec.density_kvn(z), &model, 0.2, 1e-3, out.grid()).unwrap();
        assert!(l1_difference(out.grid(), &density_kvn(&out), &rho.values, &[]).unwrap() < 1e-3);
    }

    #[test]
    fn qmc_recovers_norm_and_transported_center() {
        let spec = gaussian(&[1.0], &[0.0], 0.3);
        let model = HamiltonianModel::harmonic(2.0).unwrap();
        let t = 0.4;
        let cfg = QmcConfig::new(1 << 12, 3, 1e-3);
        let r = qmc_expectations(&spec, &model, t, 1.0, &[QmcObservable::Identity, QmcObservable::Position], &cfg)
            .unwrap();
        let id = r.get(QmcObservable::Identity).unwrap();
        assert!((id.value[0] - 1.0).abs() < 3.0 * id.error[0] + 1e-3);
        // rotation with omega = 2 moves the center to (cos 2t, -sin 2t)
        let pos = r.get(QmcObservable::Position).unwrap();
        let want = [(2.0 * t).cos(), -(2.0 * t).sin()];
        for k in 0..2 {
            assert!((pos.value[k] - want[k]).abs() < 3.0 * pos.error[k] + 1e-3, "{pos:?}");
        }
    }

    #[test]
    fn qmc_is_deterministic_per_seed() {
        let spec = gaussian(&[1.0], &[0.0], 0.3);
        let model = HamiltonianModel::anharmonic(1.0, 0.1).unwrap();
        let cfg = QmcConfig::new(256, 11, 1e-2);
        let obs = [QmcObservable::Energy, QmcObservable::LinearMomentum];
        let a = qmc_expectations(&spec, &model, 0.3, 1.0, &obs, &cfg).unwrap();
        let b = qmc_expectations(&spec, &model, 0.3, 1.0, &obs, &cfg).unwrap();
        assert_eq!(a, b);
        let c = qmc_expectations(&spec, &model, 0.3, 1.0, &obs, &QmcConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, c);
        assert!(qmc_expectations(&spec, &model, 0.3, 1.0, &obs, &QmcConfig { samples: 3, ..cfg }).is_err());
    }

    #[test]
    fn sobol_seed_folds_both_halves() {
        assert_eq!(sobol_seed(5), 5);
        assert_eq!(sobol_seed(1 << 32), 1);
        assert_ne!(sobol_seed(7), sobol_seed(7 | (1 << 40)));
    }

    #[test]
    fn heisenberg_rate_follows_the_bracket() {
        // harmonic, A = p . xi: d<LL_A>/dt = <LL_{A,H}>
        let hbar = 1.0;
        let spec = gaussian(&[1.0], &[0.2], 0.7).with_phase(vec![0.5, 0.5]).unwrap();
        let chi = state_1d(&spec, 8.0, 128, hbar);
        let model = HamiltonianModel::harmonic(2.0).unwrap();
        let a = Observable::momentum_projection(&[1.0]);
        let ah = linear_bracket(&a, &model).unwrap();
        let dt = 1e-3;
        let cfg = PropagationConfig::new(dt, 1, Formalism::Kvh);
        let times = [0.099, 0.1, 0.101];
        let va = heisenberg_expectation(&a, &chi, &model, &cfg, &times).unwrap();
        let vb = heisenberg_expectation(&ah, &chi, &model, &cfg, &times).unwrap();
        let fd = (va[2] - va[0]) / (2.0 * dt);
        assert!((fd - vb[1]).abs() <= 1e-3 * vb[1].abs(), "{fd} vs {}", vb[1]);
        assert!(heisenberg_expectation(&a, &chi, &model, &cfg, &[0.0005]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PropagationConfig::new(0.0, 1, Formalism::Kvh).validate().is_err());
        assert!(PropagationConfig::new(1e-3, 1, Formalism::Kvh).with_diagnostics_every(0).validate().is_err());
        assert!(PropagationConfig::new(1e-3, 1, Formalism::Kvh).with_cfl_safety(0.0).validate().is_err());
        assert!((PropagationConfig::new(1e-3, 250, Formalism::Kvh).total_time() - 0.25).abs() < 1e-15);
    }
}
