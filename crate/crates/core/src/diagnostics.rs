//! Executable forms of the conservation laws and identities.
//!
//! - [`DiagnosticContext::record`] samples norm, energy, `<L>`, `<P>`,
//!   `<P_kvn>` and the rate decompositions of one state;
//! - [`RateDecomposition`] splits `(2/hbar) Im<O chi|LL_H chi>` into the
//!   four products of (KvN operator, operator delta) with (`L_H`, `a`);
//! - [`rate_identity_check`] compares centered differences of a recorded
//!   series with those rates;
//! - the remaining checks cover quadratic coincidence, planarity, the KvN
//!   energy mismatch, the KvH energy coincidence and the size of the
//!   phase-term contribution.
//!
//! For n = 1 the angular momentum and its rates are recorded as zero, and
//! for n = 2 only the third component can be nonzero.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::hamiltonians::{HamiltonianModel, PhaseFunction};
use crate::operators::{
    angular_components, angular_momentum, linear_momentum, Formalism, LiouvillianKernel, MomentumVariant,
};
use crate::phase_space::{accumulate_derivative, integrate_real, weighted_sum, Coefficient, PhaseGrid};
use crate::wavefunction::{bracket_imaginary_integral, density_kvh, inner, norm, GridWaveFunction};
use crate::{KvhError, Result, C64};

/// Relative imaginary part tolerated in recorded expectations.
pub const RECORD_IMAG_LIMIT: f64 = 1e-6;

/// Relative bound on the planarity quadrature for real states.
pub const PLANARITY_LIMIT: f64 = 1e-6;

/// Fraction of `(2/hbar) ||O chi|| ||LL chi||` below which a rate counts as
/// zero in [`rate_identity_check`].
pub const RATE_FLOOR: f64 = 1e-3;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Which {
    L,
    P,
}

/// Four-way split of `d<O>/dt = (2/hbar) Im<O chi|LL_H chi>` with
/// `O = O_kvn + delta` and `LL_H = L_H + a`:
/// black `(O_kvn, L_H)`, red `(O_kvn, a)`, blue `(delta, L_H)`,
/// green `(delta, a)`. `total` is evaluated from the full operators.
#[derive(Debug, Clone, PartialEq)]
pub struct RateDecomposition {
    pub which: Which,
    pub black: Vec<f64>,
    pub red: Vec<f64>,
    pub blue: Vec<f64>,
    pub green: Vec<f64>,
    pub total: Vec<f64>,
    /// `(2/hbar) ||O chi|| ||LL chi||` per component.
    pub scale: Vec<f64>,
    /// `(2/hbar) (||O_kvn chi|| + ||delta chi||) (||L_H chi|| + ||a chi||)`,
    /// which bounds every term of the component.
    pub term_scale: Vec<f64>,
    /// The Liouvillian carries a phase term that is not identically zero.
    pub phase_present: bool,
    /// The operator has a nonzero delta (true for `P`).
    pub delta_present: bool,
}

impl RateDecomposition {
    fn zeros(which: Which, m: usize, phase_present: bool, delta_present: bool) -> Self {
        Self {
            which,
            black: vec![0.0; m],
            red: vec![0.0; m],
            blue: vec![0.0; m],
            green: vec![0.0; m],
            total: vec![0.0; m],
            scale: vec![0.0; m],
            term_scale: vec![0.0; m],
            phase_present,
            delta_present,
        }
    }

    pub fn sum(&self) -> Vec<f64> {
        (0..self.total.len())
            .map(|k| self.black[k] + self.red[k] + self.blue[k] + self.green[k])
            .collect()
    }

    /// Largest `|black + red + blue + green - total|` relative to the
    /// component's term scale.
    pub fn sum_residual(&self) -> f64 {
        self.sum()
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let d = (s - self.total[k]).abs();
                if self.term_scale[k] > 0.0 {
                    d / self.term_scale[k]
                } else {
                    d
                }
            })
            .fold(0.0, f64::max)
    }

    /// Number of terms beyond black that are present by construction:
    /// red needs a phase term, blue needs a delta, green needs both.
    pub fn extra_terms(&self) -> usize {
        usize::from(self.phase_present)
            + usize::from(self.delta_present)
            + usize::from(self.phase_present && self.delta_present)
    }

    pub fn colors(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("black", &self.black),
            ("red", &self.red),
            ("blue", &self.blue),
            ("green", &self.green),
            ("total", &self.total),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRecord {
    pub step: usize,
    pub t: f64,
    pub norm: f64,
    /// `<chi|LL_H chi>` (KvH) or `<chi|L_H chi>` (KvN).
    pub energy: f64,
    pub angular: [f64; 3],
    pub momentum: Vec<f64>,
    pub momentum_kvn: Vec<f64>,
    pub rate_l: RateDecomposition,
    pub rate_p: RateDecomposition,
    pub residuals: BTreeMap<String, f64>,
}

const AXIS_NAMES: [&str; 3] = ["x", "y", "z"];

impl DiagnosticRecord {
    pub fn rate(&self, which: Which) -> &RateDecomposition {
        match which {
            Which::L => &self.rate_l,
            Which::P => &self.rate_p,
        }
    }

    pub fn expectation(&self, which: Which) -> &[f64] {
        match which {
            Which::L => &self.angular,
            Which::P => &self.momentum,
        }
    }

    /// Values in the order of [`DiagnosticSeries::columns`].
    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![self.t, self.norm, self.energy];
        v.extend_from_slice(&self.angular);
        v.extend_from_slice(&self.momentum);
        v.extend_from_slice(&self.momentum_kvn);
        for c in 0..5 {
            v.extend_from_slice(self.rate_l.colors()[c].1);
            v.extend_from_slice(self.rate_p.colors()[c].1);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticSeries {
    pub n: usize,
    pub dt: f64,
    pub formalism: Formalism,
    pub hbar: f64,
    pub records: Vec<DiagnosticRecord>,
}

impl DiagnosticSeries {
    pub fn new(n: usize, dt: f64, formalism: Formalism, hbar: f64) -> Self {
        Self {
            n,
            dt,
            formalism,
            hbar,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: DiagnosticRecord) {
        self.records.push(record);
    }

    /// `t, norm, energy, Lx, Ly, Lz, Px.., Pkvn_x.., rate_<color>_Lx..,
    /// rate_<color>_Px..` for colors black, red, blue, green, total.
    pub fn columns(&self) -> Vec<String> {
        let mut c: Vec<String> = ["t", "norm", "energy", "Lx", "Ly", "Lz"].iter().map(|s| s.to_string()).collect();
        c.extend(AXIS_NAMES[..self.n].iter().map(|a| format!("P{a}")));
        c.extend(AXIS_NAMES[..self.n].iter().map(|a| format!("Pkvn_{a}")));
        for color in ["black", "red", "blue", "green", "total"] {
            c.extend(AXIS_NAMES.iter().map(|a| format!("rate_{color}_L{a}")));
            c.extend(AXIS_NAMES[..self.n].iter().map(|a| format!("rate_{color}_P{a}")));
        }
        c
    }

    fn max_relative_drift(&self, f: impl Fn(&DiagnosticRecord) -> f64) -> f64 {
        let Some(first) = self.records.first() else {
            return 0.0;
        };
        let f0 = f(first);
        let d = self.records.iter().map(|r| (f(r) - f0).abs()).fold(0.0, f64::max);
        if f0 == 0.0 {
            d
        } else {
            d / f0.abs()
        }
    }

    /// `max |E_i - E_0| / |E_0|`.
    pub fn energy_drift(&self) -> f64 {
        self.max_relative_drift(|r| r.energy)
    }

    /// `max |N_i - N_0| / N_0` for the norm.
    pub fn norm_drift(&self) -> f64 {
        self.max_relative_drift(|r| r.norm)
    }

    /// Largest decomposition sum residual over all records and both splits.
    pub fn max_decomposition_residual(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.rate_l.sum_residual().max(r.rate_p.sum_residual()))
            .fold(0.0, f64::max)
    }
}

/// `(2/hbar) Im <a|b>`.
fn im2(a: &GridWaveFunction, b: &GridWaveFunction, hbar: f64) -> Result<f64> {
    Ok(2.0 / hbar * inner(a, b)?.im)
}

fn relative_imag(e: C64, chi: &GridWaveFunction, applied: &GridWaveFunction) -> f64 {
    let scale = norm(chi) * norm(applied);
    if scale == 0.0 {
        0.0
    } else {
        e.im.abs() / scale
    }
}

struct LiouvillianParts {
    transport: GridWaveFunction,
    phase: Option<GridWaveFunction>,
    full: GridWaveFunction,
}

/// Evaluates diagnostics for one model on one grid.
#[derive(Debug, Clone)]
pub struct DiagnosticContext {
    kernel: LiouvillianKernel,
    formalism: Formalism,
}

impl DiagnosticContext {
    pub fn new<F: PhaseFunction + ?Sized>(f: &F, grid: Arc<PhaseGrid>, formalism: Formalism) -> Result<Self> {
        Ok(Self {
            kernel: LiouvillianKernel::new(f, grid, formalism)?,
            formalism,
        })
    }

    fn parts(&self, chi: &GridWaveFunction) -> Result<LiouvillianParts> {
        if **self.kernel.grid() != *chi.grid() {
            return Err(KvhError::GridMismatch);
        }
        let len = chi.values().len();
        let mut t = vec![ZERO; len];
        self.kernel.accumulate_transport(chi.values(), chi.hbar(), &mut t, C64::new(1.0, 0.0));
        let transport = GridWaveFunction::new(Arc::clone(chi.grid_arc()), t, chi.hbar())?;
        let phase = match (self.formalism, self.kernel.phase()) {
            (Formalism::Kvh, Some(_)) => {
                let mut a = vec![ZERO; len];
                self.kernel.accumulate_phase(chi.values(), &mut a, C64::new(1.0, 0.0));
                Some(GridWaveFunction::new(Arc::clone(chi.grid_arc()), a, chi.hbar())?)
            }
            _ => None,
        };
        let full = match &phase {
            Some(a) => transport.axpy(C64::new(1.0, 0.0), a)?,
            None => transport.clone(),
        };
        Ok(LiouvillianParts { transport, phase, full })
    }

    fn decompose(
        &self,
        chi: &GridWaveFunction,
        parts: &LiouvillianParts,
        which: Which,
    ) -> Result<(RateDecomposition, Vec<f64>, Vec<f64>, f64)> {
        let hbar = chi.hbar();
        let n = chi.n();
        let phase_present = parts.phase.is_some();
        let norm_t = norm(&parts.transport);
        let norm_a = parts.phase.as_ref().map_or(0.0, norm);
        let norm_full = norm(&parts.full);
        let mut max_imag: f64 = 0.0;

        // (operator index, KvN operator, delta, full operator)
        let mut ops: Vec<(usize, GridWaveFunction, Option<GridWaveFunction>, GridWaveFunction)> = Vec::new();
        let m = match which {
            Which::L => {
                if n >= 2 {
                    let l = angular_momentum(chi)?;
                    for &k in angular_components(n) {
                        let op = l[k].clone().expect("component present");
                        ops.push((k, op.clone(), None, op));
                    }
                }
                3
            }
            Which::P => {
                let kvn = linear_momentum(MomentumVariant::Kvn, chi);
                let full = linear_momentum(MomentumVariant::Kvh, chi);
                for (i, (k, f)) in kvn.into_iter().zip(full).enumerate() {
                    let grid = chi.grid();
                    let delta: Vec<f64> = (0..grid.len()).map(|j| 0.5 * grid.coord(j, n + i)).collect();
                    ops.push((i, k, Some(chi.multiplied(&delta)?), f));
                }
                n
            }
        };
        let mut rate = RateDecomposition::zeros(which, m, phase_present, which == Which::P);
        let mut kvh_expect = vec![0.0; m];
        let mut kvn_expect = vec![0.0; m];
        for (k, kvn, delta, full) in &ops {
            let k = *k;
            rate.black[k] = im2(kvn, &parts.transport, hbar)?;
            if let Some(a) = &parts.phase {
                rate.red[k] = im2(kvn, a, hbar)?;
            }
            if let Some(d) = delta {
                rate.blue[k] = im2(d, &parts.transport, hbar)?;
                if let Some(a) = &parts.phase {
                    rate.green[k] = im2(d, a, hbar)?;
                }
            }
            rate.total[k] = im2(full, &parts.full, hbar)?;
            let norm_o = norm(full);
            let norm_split = norm(kvn) + delta.as_ref().map_or(0.0, norm);
            rate.scale[k] = 2.0 / hbar * norm_o * norm_full;
            rate.term_scale[k] = 2.0 / hbar * norm_split * (norm_t + norm_a);

            let e = inner(chi, full)?;
            max_imag = max_imag.max(relative_imag(e, chi, full));
            kvh_expect[k] = e.re;
            let e_kvn = inner(chi, kvn)?;
            max_imag = max_imag.max(relative_imag(e_kvn, chi, kvn));
            kvn_expect[k] = e_kvn.re;
        }
        Ok((rate, kvh_expect, kvn_expect, max_imag))
    }

    /// Rate decomposition of `d<O>/dt` at the state `chi`.
    pub fn decomposition(&self, chi: &GridWaveFunction, which: Which) -> Result<RateDecomposition> {
        let parts = self.parts(chi)?;
        Ok(self.decompose(chi, &parts, which)?.0)
    }

    /// Samples all monitored quantities of `chi`. Errors if an expectation
    /// has a relative imaginary part above [`RECORD_IMAG_LIMIT`] or a value
    /// is not finite.
    pub fn record(&self, chi: &GridWaveFunction, step: usize, t: f64) -> Result<DiagnosticRecord> {
        let parts = self.parts(chi)?;
        let e = inner(chi, &parts.full)?;
        let imag_energy = relative_imag(e, chi, &parts.full);
        let (rate_l, l, _, imag_l) = self.decompose(chi, &parts, Which::L)?;
        let (rate_p, p, p_kvn, imag_p) = self.decompose(chi, &parts, Which::P)?;

        let mut residuals = BTreeMap::new();
        residuals.insert("imag_energy".to_string(), imag_energy);
        residuals.insert("imag_L".to_string(), imag_l);
        residuals.insert("imag_P".to_string(), imag_p);
        residuals.insert("decomposition_L".to_string(), rate_l.sum_residual());
        residuals.insert("decomposition_P".to_string(), rate_p.sum_residual());
        for (what, ratio) in [("energy", imag_energy), ("L", imag_l), ("P", imag_p)] {
            if ratio > RECORD_IMAG_LIMIT {
                return Err(KvhError::ImaginaryExpectation {
                    what: what.into(),
                    ratio,
                    limit: RECORD_IMAG_LIMIT,
                });
            }
        }
        let record = DiagnosticRecord {
            step,
            t,
            norm: norm(chi),
            energy: e.re,
            angular: [l[0], l[1], l[2]],
            momentum: p,
            momentum_kvn: p_kvn,
            rate_l,
            rate_p,
            residuals,
        };
        if record.values().iter().any(|v| !v.is_finite()) {
            return Err(KvhError::NonFinite { step });
        }
        Ok(record)
    }
}

/// One centered-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct RateResidual {
    pub t: f64,
    pub component: usize,
    /// `(O(t + dt) - O(t - dt)) / (2 dt)`
    pub finite_difference: f64,
    /// `(2/hbar) Im<O chi_t|LL chi_t>`
    pub rate: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateIdentityReport {
    pub which: Which,
    pub entries: Vec<RateResidual>,
    pub max_residual: f64,
    /// Largest `|rate|`, to show whether the rate itself is nonzero.
    pub max_rate: f64,
}

/// Compares centered differences of the recorded `<L>` or `<P>` at interior
/// records with the recorded rate at the middle time. Residuals are
/// `|fd - rate| / max(|rate|, RATE_FLOOR * scale)`.
pub fn rate_identity_check(series: &DiagnosticSeries, which: Which) -> Result<RateIdentityReport> {
    let r = &series.records;
    if r.len() < 3 {
        return Err(KvhError::InsufficientSamples { need: 3, have: r.len() });
    }
    let h = r[1].t - r[0].t;
    if h.is_nan() || h <= 0.0 || r.windows(2).any(|w| ((w[1].t - w[0].t) - h).abs() > 1e-9 * h) {
        return Err(KvhError::InvalidState("records are not uniformly spaced in time".into()));
    }
    let mut entries = Vec::new();
    for i in 1..r.len() - 1 {
        let rate = r[i].rate(which);
        let (before, after) = (r[i - 1].expectation(which), r[i + 1].expectation(which));
        for k in 0..rate.total.len() {
            let fd = (after[k] - before[k]) / (r[i + 1].t - r[i - 1].t);
            let denom = rate.total[k].abs().max(RATE_FLOOR * rate.scale[k]);
            let d = (fd - rate.total[k]).abs();
            let residual = if denom > 0.0 {
                d / denom
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            entries.push(RateResidual {
                t: r[i].t,
                component: k,
                finite_difference: fd,
                rate: rate.total[k],
                residual,
            });
        }
    }
    let max_residual = entries.iter().map(|e| e.residual).fold(0.0, f64::max);
    let max_rate = entries.iter().map(|e| e.rate.abs()).fold(0.0, f64::max);
    Ok(RateIdentityReport {
        which,
        entries,
        max_residual,
        max_rate,
    })
}

/// Four-way rate split at one state.
pub fn rate_decomposition(
    chi: &GridWaveFunction,
    model: &HamiltonianModel,
    formalism: Formalism,
    which: Which,
) -> Result<RateDecomposition> {
    DiagnosticContext::new(model, Arc::clone(chi.grid_arc()), formalism)?.decomposition(chi, which)
}

/// `max |LL_H chi - L_H chi|` for a quadratic form.
pub fn quadratic_coincidence_check(model: &HamiltonianModel, chi: &GridWaveFunction) -> Result<f64> {
    if !model.is_quadratic_form() {
        return Err(KvhError::WrongModelKind(format!(
            "{} is not a quadratic form",
            model.name()
        )));
    }
    let grid = Arc::clone(chi.grid_arc());
    let kvh = LiouvillianKernel::new(model, Arc::clone(&grid), Formalism::Kvh)?.apply(chi)?;
    let kvn = LiouvillianKernel::new(model, grid, Formalism::Kvn)?.apply(chi)?;
    Ok(kvh
        .values()
        .par_iter()
        .zip(kvn.values().par_iter())
        .map(|(a, b)| (a - b).norm())
        .reduce(|| 0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanarityReport {
    /// `i hbar int (p x q) . grad_p chi chi chi* dz`
    pub value: C64,
    /// The same quadrature with `|.|` applied to the integrand.
    pub scale: f64,
    /// `|value| / scale`.
    pub relative: f64,
    /// Difference to the integrated-by-parts form
    /// `-i hbar int chi (p x q) . grad_p (chi chi*) dz`.
    pub error_bar: f64,
    pub real_state: bool,
    /// `relative <= PLANARITY_LIMIT`, asserted only for real states.
    pub pass: Option<bool>,
}

/// Quadrature of `w(z) (v . D g)(z)` summed over the three cross-product
/// components, with `v = p x q` and `D` the p-block derivative. Uses
/// `(p x q) . grad = q . (grad x p)`.
fn planarity_sum(chi: &GridWaveFunction, g: &[C64], weight: impl Fn(usize, C64) -> C64 + Sync) -> (C64, f64) {
    let grid = chi.grid();
    let n = grid.n();
    let mut buf = vec![ZERO; g.len()];
    let mut total = ZERO;
    let mut abs_total = 0.0;
    for k in 0..3 {
        let (i, j) = ((k + 1) % 3, (k + 2) % 3);
        buf.par_iter_mut().for_each(|v| *v = ZERO);
        let one = C64::new(1.0, 0.0);
        accumulate_derivative(&mut buf, g, grid, n + i, Coefficient::Coordinate(n + j), one);
        accumulate_derivative(&mut buf, g, grid, n + j, Coefficient::Coordinate(n + i), -one);
        let (s, a): (C64, f64) = weighted_sum(grid, |idx| {
            let v = weight(idx, buf[idx] * grid.coord(idx, k));
            Pair(v, v.norm())
        })
        .into();
        total += s;
        abs_total += a;
    }
    let cv = grid.cell_volume();
    (total * cv, abs_total * cv)
}

#[derive(Debug, Clone, Copy, Default)]
struct Pair(C64, f64);

impl std::ops::Add for Pair {
    type Output = Pair;
    fn add(self, o: Pair) -> Pair {
        Pair(self.0 + o.0, self.1 + o.1)
    }
}

impl std::ops::Mul<f64> for Pair {
    type Output = Pair;
    fn mul(self, w: f64) -> Pair {
        Pair(self.0 * w, self.1 * w)
    }
}

impl From<Pair> for (C64, f64) {
    fn from(p: Pair) -> Self {
        (p.0, p.1)
    }
}

/// Planarity quadrature for n = 3, asserted for real states.
pub fn planarity_report(chi: &GridWaveFunction) -> Result<PlanarityReport> {
    if chi.n() != 3 {
        return Err(KvhError::UnsupportedDimension {
            op: "planarity_report",
            n: chi.n(),
        });
    }
    let ih = C64::new(0.0, chi.hbar());
    let values = chi.values();
    let (literal, scale) = planarity_sum(chi, values, |idx, d| ih * d * values[idx].norm_sqr());
    let sq: Vec<C64> = values.par_iter().map(|v| C64::new(v.norm_sqr(), 0.0)).collect();
    let (parts, _) = planarity_sum(chi, &sq, |idx, d| -ih * values[idx] * d);
    let peak = crate::phase_space::max_norm(values);
    let real_state = values.par_iter().all(|v| v.im.abs() <= 1e-14 * peak);
    let relative = if scale > 0.0 { literal.norm() / scale } else { 0.0 };
    Ok(PlanarityReport {
        value: literal,
        scale,
        relative,
        error_bar: (literal - parts).norm(),
        real_state,
        pass: real_state.then_some(relative <= PLANARITY_LIMIT),
    })
}

fn model_on_grid(model: &HamiltonianModel, grid: &PhaseGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = grid.n();
    model.check_n(n)?;
    let hv: Vec<(f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut z = [0.0; 6];
            grid.coords_into(i, &mut z[..2 * n]);
            let (q, p) = z[..2 * n].split_at(n);
            Ok((model.eval(q, p)?, model.phase_term(q, p)?))
        })
        .collect::<Result<_>>()?;
    Ok(hv.into_iter().unzip())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvnEnergyMismatch {
    /// `<chi|L_H chi>`
    pub h_kvn: f64,
    /// `int H |chi|^2`
    pub physical: f64,
    pub gap: f64,
    /// `int Im{chi*, chi}`
    pub bracket_integral: f64,
}

pub fn kvn_energy_mismatch_report(chi: &GridWaveFunction, model: &HamiltonianModel) -> Result<KvnEnergyMismatch> {
    let grid = chi.grid();
    let (h, _) = model_on_grid(model, grid)?;
    let applied = LiouvillianKernel::new(model, Arc::clone(chi.grid_arc()), Formalism::Kvn)?.apply(chi)?;
    let h_kvn = inner(chi, &applied)?.re;
    let dens: Vec<f64> = chi.values().iter().zip(&h).map(|(v, hv)| hv * v.norm_sqr()).collect();
    let physical = integrate_real(grid, &dens)?;
    Ok(KvnEnergyMismatch {
        h_kvn,
        physical,
        gap: h_kvn - physical,
        bracket_integral: bracket_imaginary_integral(chi),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyCoincidence {
    /// `<chi|LL_H chi>`
    pub lhs: f64,
    /// `int H rho_kvh`
    pub rhs: f64,
    /// `|lhs - rhs| / max(|lhs|, |rhs|)`, or 0 when degenerate.
    pub residual: f64,
    /// Both sides vanish relative to `int |H| |chi|^2`.
    pub degenerate: bool,
}

pub fn kvh_energy_coincidence_check(chi: &GridWaveFunction, model: &HamiltonianModel) -> Result<EnergyCoincidence> {
    let grid = chi.grid();
    let (h, _) = model_on_grid(model, grid)?;
    let applied = LiouvillianKernel::new(model, Arc::clone(chi.grid_arc()), Formalism::Kvh)?.apply(chi)?;
    let lhs = inner(chi, &applied)?.re;
    let rho = density_kvh(chi);
    let hr: Vec<f64> = rho.iter().zip(&h).map(|(r, hv)| hv * r).collect();
    let rhs = integrate_real(grid, &hr)?;
    let abs_moment: Vec<f64> = chi.values().iter().zip(&h).map(|(v, hv)| hv.abs() * v.norm_sqr()).collect();
    let reference = integrate_real(grid, &abs_moment)?;
    let denom = lhs.abs().max(rhs.abs());
    let degenerate = denom <= 1e-12 * reference || denom == 0.0;
    Ok(EnergyCoincidence {
        lhs,
        rhs,
        residual: if degenerate { 0.0 } else { (lhs - rhs).abs() / denom },
        degenerate,
    })
}

/// `||a chi||`, the size of the phase-term contribution to `LL_H chi`.
pub fn extra_term_norm(chi: &GridWaveFunction, model: &HamiltonianModel) -> Result<f64> {
    let grid = chi.grid();
    let (_, a) = model_on_grid(model, grid)?;
    let s: Vec<f64> = chi.values().iter().zip(&a).map(|(v, av)| av * av * v.norm_sqr()).collect();
    Ok(integrate_real(grid, &s)?.sqrt())
}
