//! Operators on grid wavefunctions.
//!
//! - position `Z_a chi = z_a chi`, momentum `Lambda_a chi = -i hbar d_a chi`
//!   and `Zeta_a = Z_a/2 - Lambda_a`;
//! - the KvN Liouvillian `L_F chi = -i hbar X_F . grad chi` and the van Hove
//!   Liouvillian `LL_F = L_F + (F - z . grad F/2)` for any phase function;
//! - angular momentum `L chi = i hbar (d_p chi x p + d_q chi x q)` and linear
//!   momentum `P chi = -i hbar d_q chi + p chi/2` (KvN variant without the
//!   `p/2` term);
//! - momentum-map generators `A_xi`, `B_xi` and the rotation and translation
//!   group actions.
//!
//! For n = 2 the cross products keep only their third component.

use std::sync::Arc;

use rayon::prelude::*;

use crate::hamiltonians::{HamiltonianModel, PhaseFunction};
use crate::interp::{resample_block, BlockMap};
use crate::phase_space::{accumulate_derivative, check_axis, max_norm, Coefficient, PhaseGrid, BAND};
use crate::wavefunction::{inner, norm, GridWaveFunction};
use crate::{KvhError, Result, C64};

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Magnitude (relative to the peak) above which a node counts as support.
pub const SUPPORT_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    /// `Z_a`
    Position,
    /// `Lambda_a`
    Momentum,
    /// `Z_a/2 - Lambda_a`
    Zeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Formalism {
    Kvn,
    Kvh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentumVariant {
    Kvh,
    Kvn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    A,
    B,
}

fn i_hbar(hbar: f64) -> C64 {
    C64::new(0.0, hbar)
}

/// `out += scale * coeff * d_axis chi` on a fresh buffer.
fn derivative_term(chi: &GridWaveFunction, axis: usize, coeff: Coefficient<'_>, scale: C64) -> Vec<C64> {
    let mut out = vec![ZERO; chi.values().len()];
    accumulate_derivative(&mut out, chi.values(), chi.grid(), axis, coeff, scale);
    out
}

fn multiply_coordinate(chi: &GridWaveFunction, axis: usize, scale: f64) -> Vec<C64> {
    let grid = chi.grid();
    chi.values()
        .par_iter()
        .enumerate()
        .map(|(i, v)| v * (scale * grid.coord(i, axis)))
        .collect()
}

pub fn apply_primitive(kind: Primitive, axis: usize, chi: &GridWaveFunction) -> Result<GridWaveFunction> {
    check_axis(chi.grid(), axis)?;
    let hbar = chi.hbar();
    let values = match kind {
        Primitive::Position => multiply_coordinate(chi, axis, 1.0),
        Primitive::Momentum => derivative_term(chi, axis, Coefficient::One, -i_hbar(hbar)),
        Primitive::Zeta => {
            let mut out = multiply_coordinate(chi, axis, 0.5);
            accumulate_derivative(&mut out, chi.values(), chi.grid(), axis, Coefficient::One, i_hbar(hbar));
            out
        }
    };
    Ok(chi.with_values(values))
}

/// Max-norm of `r` over nodes at least `band` layers inside, relative to
/// the peak of `chi`.
fn interior_residual(r: &[C64], chi: &GridWaveFunction, band: usize) -> f64 {
    let peak = max_norm(chi.values());
    if peak == 0.0 {
        return 0.0;
    }
    crate::phase_space::interior_max_norm(chi.grid(), r, band) / peak
}

/// `[Z_m, Lambda_m] chi - i hbar chi`, interior max-norm relative to the
/// peak of `chi`.
pub fn commutator_residual(m: usize, chi: &GridWaveFunction) -> Result<f64> {
    let z = |c: &GridWaveFunction| apply_primitive(Primitive::Position, m, c);
    let l = |c: &GridWaveFunction| apply_primitive(Primitive::Momentum, m, c);
    let zl = z(&l(chi)?)?;
    let lz = l(&z(chi)?)?;
    let ih = i_hbar(chi.hbar());
    let r: Vec<C64> = (0..chi.values().len())
        .map(|i| zl.values()[i] - lz.values()[i] - ih * chi.values()[i])
        .collect();
    Ok(interior_residual(&r, chi, 2 * BAND))
}

fn commutator_with(kind: Primitive, j: usize, k: usize, chi: &GridWaveFunction) -> Result<f64> {
    let jk = apply_primitive(kind, j, &apply_primitive(kind, k, chi)?)?;
    let kj = apply_primitive(kind, k, &apply_primitive(kind, j, chi)?)?;
    let r: Vec<C64> = jk.values().iter().zip(kj.values()).map(|(a, b)| a - b).collect();
    Ok(interior_residual(&r, chi, 2 * BAND))
}

/// `[Z_j, Z_k] chi`, relative interior max-norm.
pub fn position_commutator_residual(j: usize, k: usize, chi: &GridWaveFunction) -> Result<f64> {
    commutator_with(Primitive::Position, j, k, chi)
}

/// `[Lambda_j, Lambda_k] chi`, relative interior max-norm.
pub fn momentum_commutator_residual(j: usize, k: usize, chi: &GridWaveFunction) -> Result<f64> {
    commutator_with(Primitive::Momentum, j, k, chi)
}

/// Vector field and phase term of a phase function sampled on a grid.
#[derive(Debug, Clone)]
pub struct LiouvillianKernel {
    grid: Arc<PhaseGrid>,
    /// `X_a` per axis; `None` where it vanishes identically on the grid.
    field: Vec<Option<Vec<f64>>>,
    phase: Option<Vec<f64>>,
    max_speed: f64,
}

impl LiouvillianKernel {
    pub fn new<F: PhaseFunction + ?Sized>(f: &F, grid: Arc<PhaseGrid>, formalism: Formalism) -> Result<Self> {
        let n = grid.n();
        f.check_n(n)?;
        let axes = 2 * n;
        let samples: Vec<[f64; 7]> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let mut z = [0.0; 6];
                grid.coords_into(i, &mut z[..axes]);
                let (q, p) = z[..axes].split_at(n);
                let mut out = [0.0; 7];
                {
                    let (xq, rest) = out.split_at_mut(n);
                    f.vector_field(q, p, xq, &mut rest[..n])?;
                }
                if formalism == Formalism::Kvh {
                    out[axes] = f.phase_term(q, p)?;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;

        let field = (0..axes)
            .map(|a| {
                let col: Vec<f64> = samples.iter().map(|s| s[a]).collect();
                col.iter().any(|v| *v != 0.0).then_some(col)
            })
            .collect();
        let phase = match formalism {
            Formalism::Kvn => None,
            Formalism::Kvh => {
                let col: Vec<f64> = samples.iter().map(|s| s[axes]).collect();
                col.iter().any(|v| *v != 0.0).then_some(col)
            }
        };
        let max_speed = samples
            .par_iter()
            .map(|s| s[..axes].iter().map(|v| v * v).sum::<f64>().sqrt())
            .reduce(|| 0.0, f64::max);
        Ok(Self {
            grid,
            field,
            phase,
            max_speed,
        })
    }

    pub fn grid(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    /// Largest `|X|` over the grid nodes.
    pub fn max_speed(&self) -> f64 {
        self.max_speed
    }

    /// Phase-term samples, or `None` if they vanish identically.
    pub fn phase(&self) -> Option<&[f64]> {
        self.phase.as_deref()
    }

    /// `out += scale * LL chi`.
    pub fn accumulate(&self, chi: &[C64], hbar: f64, out: &mut [C64], scale: C64) {
        self.accumulate_transport(chi, hbar, out, scale);
        self.accumulate_phase(chi, out, scale);
    }

    /// `out += scale * (-i hbar X . grad chi)`.
    pub fn accumulate_transport(&self, chi: &[C64], hbar: f64, out: &mut [C64], scale: C64) {
        let s = scale * C64::new(0.0, -hbar);
        for (a, x) in self.field.iter().enumerate() {
            if let Some(x) = x {
                accumulate_derivative(out, chi, &self.grid, a, Coefficient::Field(x), s);
            }
        }
    }

    /// `out += scale * a chi`; no-op without a phase term.
    pub fn accumulate_phase(&self, chi: &[C64], out: &mut [C64], scale: C64) {
        if let Some(ph) = &self.phase {
            out.par_iter_mut()
                .zip(chi.par_iter())
                .zip(ph.par_iter())
                .for_each(|((o, c), a)| *o += scale * (c * a));
        }
    }

    pub fn apply(&self, chi: &GridWaveFunction) -> Result<GridWaveFunction> {
        if *self.grid != *chi.grid() {
            return Err(KvhError::GridMismatch);
        }
        let mut out = vec![ZERO; chi.values().len()];
        self.accumulate(chi.values(), chi.hbar(), &mut out, ONE);
        Ok(chi.with_values(out))
    }
}

/// `L_F chi` or `LL_F chi` for a phase function.
pub fn liouvillian<F: PhaseFunction + ?Sized>(
    f: &F,
    formalism: Formalism,
    chi: &GridWaveFunction,
) -> Result<GridWaveFunction> {
    LiouvillianKernel::new(f, Arc::clone(chi.grid_arc()), formalism)?.apply(chi)
}

/// `L_H chi = -i hbar X_H . grad chi`.
pub fn kvn_liouvillian(model: &HamiltonianModel, chi: &GridWaveFunction) -> Result<GridWaveFunction> {
    liouvillian(model, Formalism::Kvn, chi)
}

/// `LL_H chi = L_H chi + (H - z . grad H/2) chi`.
pub fn kvh_liouvillian(model: &HamiltonianModel, chi: &GridWaveFunction) -> Result<GridWaveFunction> {
    liouvillian(model, Formalism::Kvh, chi)
}

/// Cross-product components present for spatial dimension n.
pub fn angular_components(n: usize) -> &'static [usize] {
    match n {
        2 => &[2],
        3 => &[0, 1, 2],
        _ => &[],
    }
}

fn check_angular(chi: &GridWaveFunction, op: &'static str) -> Result<()> {
    if chi.n() == 1 {
        return Err(KvhError::UnsupportedDimension { op, n: 1 });
    }
    Ok(())
}

/// `(d chi x v)_k` summed over both blocks, scaled: each block contributes
/// `d_i chi v_j - d_j chi v_i` with `(i, j, k)` cyclic.
fn cross_component(chi: &GridWaveFunction, k: usize, scale: C64) -> Vec<C64> {
    let n = chi.n();
    let (i, j) = ((k + 1) % 3, (k + 2) % 3);
    let mut out = vec![ZERO; chi.values().len()];
    for block in [n, 0] {
        accumulate_derivative(
            &mut out,
            chi.values(),
            chi.grid(),
            block + i,
            Coefficient::Coordinate(block + j),
            scale,
        );
        accumulate_derivative(
            &mut out,
            chi.values(),
            chi.grid(),
            block + j,
            Coefficient::Coordinate(block + i),
            -scale,
        );
    }
    out
}

/// Components of `L chi = i hbar (d_p chi x p + d_q chi x q)`; for n = 2
/// only the third component is present.
pub fn angular_momentum(chi: &GridWaveFunction) -> Result<[Option<GridWaveFunction>; 3]> {
    check_angular(chi, "angular_momentum")?;
    let mut out: [Option<GridWaveFunction>; 3] = [None, None, None];
    for &k in angular_components(chi.n()) {
        out[k] = Some(chi.with_values(cross_component(chi, k, i_hbar(chi.hbar()))));
    }
    Ok(out)
}

/// Components of `P chi = -i hbar d_q chi + p chi/2` (KvH) or
/// `-i hbar d_q chi` (KvN).
pub fn linear_momentum(variant: MomentumVariant, chi: &GridWaveFunction) -> Vec<GridWaveFunction> {
    let n = chi.n();
    (0..n)
        .map(|i| {
            let mut out = match variant {
                MomentumVariant::Kvh => multiply_coordinate(chi, n + i, 0.5),
                MomentumVariant::Kvn => vec![ZERO; chi.values().len()],
            };
            accumulate_derivative(&mut out, chi.values(), chi.grid(), i, Coefficient::One, -i_hbar(chi.hbar()));
            chi.with_values(out)
        })
        .collect()
}

/// `A_xi chi = xi . (d_q chi x q + d_p chi x p)`.
pub fn generator_a(xi: [f64; 3], chi: &GridWaveFunction) -> Result<GridWaveFunction> {
    check_angular(chi, "generator_a")?;
    if chi.n() == 2 && (xi[0] != 0.0 || xi[1] != 0.0) {
        return Err(KvhError::UnsupportedDimension {
            op: "generator_a with in-plane xi",
            n: 2,
        });
    }
    let mut out = vec![ZERO; chi.values().len()];
    for &k in angular_components(chi.n()) {
        if xi[k] != 0.0 {
            let c = cross_component(chi, k, C64::new(xi[k], 0.0));
            out.par_iter_mut().zip(c.par_iter()).for_each(|(o, v)| *o += v);
        }
    }
    Ok(chi.with_values(out))
}

/// `B_xi chi = (-d_q chi - (i/(2 hbar)) p chi) . xi`, the sign for which
/// `hbar <chi|i B_xi chi> = <P_xi>`.
pub fn generator_b(xi: &[f64], chi: &GridWaveFunction) -> Result<GridWaveFunction> {
    generator_b_with_sign(xi, chi, -1.0)
}

/// `(-d_q chi + sign (i/(2 hbar)) p chi) . xi`; `sign = +1` is the literal
/// form kept for comparison.
pub fn generator_b_with_sign(xi: &[f64], chi: &GridWaveFunction, sign: f64) -> Result<GridWaveFunction> {
    let n = chi.n();
    if xi.len() != n {
        return Err(KvhError::DimensionMismatch(format!(
            "xi has {} components, state has n = {n}",
            xi.len()
        )));
    }
    let grid = chi.grid();
    let hbar = chi.hbar();
    let mut out: Vec<C64> = chi
        .values()
        .par_iter()
        .enumerate()
        .map(|(idx, v)| {
            let mut pxi = 0.0;
            for (i, x) in xi.iter().enumerate() {
                pxi += grid.coord(idx, n + i) * x;
            }
            v * C64::new(0.0, sign * pxi / (2.0 * hbar))
        })
        .collect();
    for (i, x) in xi.iter().enumerate() {
        if *x != 0.0 {
            accumulate_derivative(&mut out, chi.values(), grid, i, Coefficient::One, C64::new(-x, 0.0));
        }
    }
    Ok(chi.with_values(out))
}

pub fn generator(kind: GeneratorKind, xi: [f64; 3], chi: &GridWaveFunction) -> Result<GridWaveFunction> {
    match kind {
        GeneratorKind::A => generator_a(xi, chi),
        GeneratorKind::B => generator_b(&xi[..chi.n()], chi),
    }
}

/// `exp(t xi^)` with `xi^ v = xi x v` (Rodrigues' formula).
pub fn rotation_matrix(xi: [f64; 3], t: f64) -> [[f64; 3]; 3] {
    let norm = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
    let mut r = [[0.0; 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    if norm == 0.0 || t == 0.0 {
        return r;
    }
    let u = [xi[0] / norm, xi[1] / norm, xi[2] / norm];
    let theta = t * norm;
    let (s, c) = theta.sin_cos();
    let k = [[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]];
    for i in 0..3 {
        for j in 0..3 {
            let mut k2 = 0.0;
            for (l, kl) in k.iter().enumerate() {
                k2 += k[i][l] * kl[j];
            }
            r[i][j] += s * k[i][j] + (1.0 - c) * k2;
        }
    }
    r
}

pub fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|l| a[i][l] * b[l][j]).sum();
        }
    }
    out
}

fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

fn check_rotation(r: &[[f64; 3]; 3], n: usize) -> Result<()> {
    let rtr = mat_mul(&transpose(r), r);
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    let orth = (0..3).all(|i| (0..3).all(|j| (rtr[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10));
    if !orth || (det - 1.0).abs() > 1e-10 {
        return Err(KvhError::InvalidState("matrix is not a rotation".into()));
    }
    match n {
        3 => Ok(()),
        2 if r[0][2].abs() < 1e-14 && r[1][2].abs() < 1e-14 && r[2][0].abs() < 1e-14 && r[2][1].abs() < 1e-14 => Ok(()),
        2 => Err(KvhError::UnsupportedDimension {
            op: "rotation_action off the third axis",
            n: 2,
        }),
        _ => Err(KvhError::UnsupportedDimension {
            op: "rotation_action",
            n,
        }),
    }
}

/// Errors if a support node of `chi` would be carried outside the domain by
/// `x -> m x + shift` applied to both blocks (`shift_q` on q only).
fn check_support(chi: &GridWaveFunction, m: &[[f64; 3]; 3], shift_q: &[f64; 3]) -> Result<()> {
    let grid = chi.grid();
    let n = grid.n();
    let thr = SUPPORT_THRESHOLD * max_norm(chi.values());
    let escapes = chi.values().par_iter().enumerate().any(|(idx, v)| {
        if v.norm() <= thr {
            return false;
        }
        for first in [0, n] {
            for k in 0..n {
                let mut y = if first == 0 { shift_q[k] } else { 0.0 };
                for l in 0..n {
                    y += m[k][l] * grid.coord(idx, first + l);
                }
                let a = first + k;
                let tol = 1e-12 * (grid.upper(a) - grid.lower(a));
                if y < grid.lower(a) - tol || y > grid.upper(a) + tol {
                    return true;
                }
            }
        }
        false
    });
    if escapes {
        Err(KvhError::SupportEscapesDomain)
    } else {
        Ok(())
    }
}

/// `chi -> chi(R^-1 q, R^-1 p)`, resampled by cubic Hermite interpolation.
/// n = 3, or n = 2 for rotations about the third axis.
pub fn rotation_action(r: &[[f64; 3]; 3], chi: &GridWaveFunction) -> Result<GridWaveFunction> {
    let n = chi.n();
    check_rotation(r, n)?;
    check_support(chi, r, &[0.0; 3])?;
    let inv = transpose(r);
    let grid = chi.grid();
    let q_map = BlockMap {
        first_axis: 0,
        m: inv,
        shift: [0.0; 3],
    };
    let p_map = BlockMap { first_axis: n, ..q_map };
    let stage = resample_block(chi.values(), grid, &q_map);
    Ok(chi.with_values(resample_block(&stage, grid, &p_map)))
}

/// Translation candidate `chi -> exp(sign (i/(2 hbar)) p.v) chi(q - v, p)`.
pub fn translation_candidate(v: &[f64], sign: f64, chi: &GridWaveFunction) -> Result<GridWaveFunction> {
    let n = chi.n();
    if v.len() != n {
        return Err(KvhError::DimensionMismatch(format!(
            "v has {} components, state has n = {n}",
            v.len()
        )));
    }
    let mut shift = [0.0; 3];
    let mut id = [[0.0; 3]; 3];
    for k in 0..n {
        shift[k] = -v[k];
        id[k][k] = 1.0;
    }
    let mut fwd = [0.0; 3];
    fwd[..n].copy_from_slice(&v[..n]);
    check_support(chi, &id, &fwd)?;
    let grid = chi.grid();
    let shifted = resample_block(
        chi.values(),
        grid,
        &BlockMap {
            first_axis: 0,
            m: id,
            shift,
        },
    );
    let hbar = chi.hbar();
    let values = shifted
        .par_iter()
        .enumerate()
        .map(|(idx, s)| {
            let mut pv = 0.0;
            for (k, vk) in v.iter().enumerate() {
                pv += grid.coord(idx, n + k) * vk;
            }
            s * C64::from_polar(1.0, sign * pv / (2.0 * hbar))
        })
        .collect();
    Ok(chi.with_values(values))
}

/// How closely the translation candidates' difference quotients match the
/// two `B_xi` sign conventions. Reported, never asserted.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationReport {
    pub t: f64,
    /// `[sign of the candidate's phase][sign of B's p-term]`, L2 norm of
    /// `(action(t xi) chi - chi)/t - B chi` relative to `||B chi||`.
    pub residuals: [[f64; 2]; 2],
}

pub fn translation_candidate_report(xi: &[f64], t: f64, chi: &GridWaveFunction) -> Result<TranslationReport> {
    let v: Vec<f64> = xi.iter().map(|x| t * x).collect();
    let mut residuals = [[0.0; 2]; 2];
    for (a, action_sign) in [-1.0, 1.0].into_iter().enumerate() {
        let moved = translation_candidate(&v, action_sign, chi)?;
        let quotient = moved.axpy(C64::new(-1.0, 0.0), chi)?.scaled(C64::new(1.0 / t, 0.0));
        for (b, b_sign) in [-1.0, 1.0].into_iter().enumerate() {
            let gen = generator_b_with_sign(xi, chi, b_sign)?;
            let diff = quotient.axpy(C64::new(-1.0, 0.0), &gen)?;
            residuals[a][b] = norm(&diff) / norm(&gen).max(f64::MIN_POSITIVE);
        }
    }
    Ok(TranslationReport { t, residuals })
}

/// Scale-relative imaginary part of `<chi|A chi>`:
/// `|Im| / (||chi|| ||A chi||)`.
pub fn hermiticity_defect(applied: &GridWaveFunction, chi: &GridWaveFunction) -> Result<f64> {
    let e = inner(chi, applied)?;
    let scale = norm(chi) * norm(applied);
    Ok(if scale == 0.0 { 0.0 } else { e.im.abs() / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonians::{linear_bracket, Observable};
    use crate::phase_space::{interior_max_norm, PhasePoint};
    use crate::wavefunction::{expectation, make_initial, InitialStateSpec};

    fn grid(n: usize, lo: f64, hi: f64, pts: usize) -> Arc<PhaseGrid> {
        Arc::new(PhaseGrid::uniform(n, lo, hi, pts).unwrap())
    }

    fn gaussian(g: &Arc<PhaseGrid>, z0: &[f64], sigma: f64, k: Option<Vec<f64>>, hbar: f64) -> GridWaveFunction {
        let mut s = InitialStateSpec::gaussian(PhasePoint::from_z(z0).unwrap(), sigma).unwrap();
        if let Some(k) = k {
            s = s.with_phase(k).unwrap();
        }
        make_initial(&s, g.clone(), hbar).unwrap()
    }

    /// Plane wave under a wide window, so the window's derivative is
    /// negligible on the interior.
    fn windowed_wave(g: &Arc<PhaseGrid>, k: &[f64], hbar: f64) -> GridWaveFunction {
        let k = k.to_vec();
        GridWaveFunction::from_fn(g.clone(), hbar, move |z| {
            let kz: f64 = k.iter().zip(z).map(|(a, b)| a * b).sum();
            C64::from_polar(1.0, kz)
        })
        .unwrap()
    }

    fn max_diff(a: &[C64], b: &[C64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn primitive_examples() {
        let g = grid(1, -8.0, 8.0, 128);
        let ones = GridWaveFunction::from_fn(g.clone(), 1.0, |_| ONE).unwrap();
        let d = apply_primitive(Primitive::Momentum, 1, &ones).unwrap();
        assert_eq!(interior_max_norm(&g, d.values(), BAND), 0.0);

        let hbar = 0.7;
        let wave = windowed_wave(&g, &[0.6, -0.4], hbar);
        for (axis, k) in [(0, 0.6), (1, -0.4)] {
            let l = apply_primitive(Primitive::Momentum, axis, &wave).unwrap();
            let r: Vec<C64> = (0..g.len()).map(|i| l.values()[i] - hbar * k * wave.values()[i]).collect();
            assert!(interior_max_norm(&g, &r, BAND) < 1e-6);
        }

        let chi = gaussian(&g, &[0.0, 0.0], 1.0, None, 1.0);
        for axis in 0..2 {
            let zc = apply_primitive(Primitive::Position, axis, &chi).unwrap();
            assert!(expectation(&zc, &chi).unwrap().norm() < 1e-8);
        }
        assert!(apply_primitive(Primitive::Zeta, 2, &chi).is_err());
    }

    #[test]
    fn expectation_examples() {
        let g = grid(1, -8.0, 8.0, 128);
        let chi = gaussian(&g, &[0.7, -0.3], 1.0, None, 1.0);
        assert!((expectation(&chi, &chi).unwrap() - ONE).norm() < 1e-12);
        for (axis, want) in [(0, 0.7), (1, -0.3)] {
            let zc = apply_primitive(Primitive::Position, axis, &chi).unwrap();
            assert!((expectation(&zc, &chi).unwrap().re - want).abs() < 1e-8);
            let lc = apply_primitive(Primitive::Momentum, axis, &chi).unwrap();
            assert!(expectation(&lc, &chi).unwrap().norm() < 1e-8);
        }
    }

    #[test]
    fn zeta_is_half_position_minus_momentum() {
        let g = grid(1, -8.0, 8.0, 64);
        let chi = gaussian(&g, &[0.2, 0.1], 1.0, Some(vec![0.4, 0.9]), 1.3);
        let z = apply_primitive(Primitive::Position, 1, &chi).unwrap();
        let l = apply_primitive(Primitive::Momentum, 1, &chi).unwrap();
        let zeta = apply_primitive(Primitive::Zeta, 1, &chi).unwrap();
        let want = z.scaled(C64::new(0.5, 0.0)).axpy(C64::new(-1.0, 0.0), &l).unwrap();
        assert!(max_diff(zeta.values(), want.values()) < 1e-15);
    }

    #[test]
    fn canonical_commutators() {
        let g = grid(1, -8.0, 8.0, 128);
        let chi = gaussian(&g, &[0.0, 0.0], 1.0, None, 1.0);
        for m in 0..2 {
            assert!(commutator_residual(m, &chi).unwrap() <= 1e-6);
        }
        assert!(position_commutator_residual(0, 1, &chi).unwrap() <= 1e-15);
        assert!(momentum_commutator_residual(0, 1, &chi).unwrap() <= 1e-8);
    }

    #[test]
    fn liouvillian_examples() {
        let g = grid(1, -8.0, 8.0, 128);
        let chi = gaussian(&g, &[0.5, -0.4], 1.0, Some(vec![0.3, -0.6]), 1.0);
        let zero = HamiltonianModel::quadratic(vec![0.0], vec![0.0]).unwrap();
        let l = kvn_liouvillian(&zero, &chi).unwrap();
        assert!(l.values().iter().all(|v| *v == ZERO));

        let c = 2.5;
        let constant = HamiltonianModel::quadratic_with_offset(vec![0.0], vec![0.0], c).unwrap();
        let ll = kvh_liouvillian(&constant, &chi).unwrap();
        assert!(max_diff(ll.values(), chi.scaled(C64::new(c, 0.0)).values()) == 0.0);

        let h = HamiltonianModel::harmonic(1.5).unwrap();
        let lh = kvn_liouvillian(&h, &chi).unwrap();
        assert!(hermiticity_defect(&lh, &chi).unwrap() <= 1e-7);
        let llh = kvh_liouvillian(&h, &chi).unwrap();
        assert_eq!(lh.values(), llh.values());

        let b = 0.8;
        let anh = HamiltonianModel::anharmonic(0.6, b).unwrap();
        let l = kvn_liouvillian(&anh, &chi).unwrap();
        let ll = kvh_liouvillian(&anh, &chi).unwrap();
        for i in 0..g.len() {
            let q = g.coord(i, 0);
            let want = chi.values()[i] * (-b * q.powi(4));
            assert!((ll.values()[i] - l.values()[i] - want).norm() <= 1e-12 * (1.0 + want.norm()));
        }
        assert!(hermiticity_defect(&ll, &chi).unwrap() <= 1e-7);
    }

    #[test]
    fn plane_wave_liouvillian() {
        let g = grid(1, -3.0, 3.0, 128);
        let k = [0.5, -0.8];
        let hbar = 1.0;
        let wave = windowed_wave(&g, &k, hbar);
        let h = HamiltonianModel::harmonic(1.0).unwrap();
        let l = kvn_liouvillian(&h, &wave).unwrap();
        let r: Vec<C64> = (0..g.len())
            .map(|i| {
                let (q, p) = (g.coord(i, 0), g.coord(i, 1));
                // X_H = (2p, -q)
                let xk = 2.0 * p * k[0] - q * k[1];
                l.values()[i] - hbar * xk * wave.values()[i]
            })
            .collect();
        assert!(interior_max_norm(&g, &r, BAND) < 1e-5);
    }

    #[test]
    fn conjugation_identity() {
        let g = grid(1, -8.0, 8.0, 96);
        let chi = gaussian(&g, &[0.5, -0.4], 1.0, Some(vec![0.3, -0.6]), 0.9);
        for model in [
            HamiltonianModel::harmonic(1.5).unwrap(),
            HamiltonianModel::anharmonic(0.6, 0.8).unwrap(),
            HamiltonianModel::kepler_with_r_min(1.0, 1.0, 1e-3).unwrap(),
        ] {
            // q = 0 lies between nodes, so the Kepler grid stays off the singularity
            let kvn = kvn_liouvillian(&model, &chi.conj()).unwrap();
            let want = kvn_liouvillian(&model, &chi).unwrap().conj().scaled(-ONE);
            assert_eq!(max_diff(kvn.values(), want.values()), 0.0);
            // with the phase term a: LL(chi*) = -(LL chi)* + 2 a chi*
            let kvh = kvh_liouvillian(&model, &chi.conj()).unwrap();
            let mirror = kvh_liouvillian(&model, &chi).unwrap().conj().scaled(-ONE);
            let peak = max_norm(kvh.values());
            for i in 0..g.len() {
                let z = g.point(i);
                let a = model.phase_term(&z.q, &z.p).unwrap();
                let r = kvh.values()[i] - mirror.values()[i] - 2.0 * a * chi.values()[i].conj();
                assert!(r.norm() <= 1e-12 * peak);
            }
        }
    }

    #[test]
    fn operators_are_linear() {
        let g = grid(2, -6.0, 6.0, 12);
        let a = gaussian(&g, &[0.5, 0.0, 0.0, 0.5], 0.6, Some(vec![0.1, 0.2, 0.3, 0.4]), 1.0);
        let b = gaussian(&g, &[-0.5, 0.3, 0.2, 0.0], 0.6, None, 1.0);
        let (ca, cb) = (C64::new(0.3, -1.2), C64::new(-0.7, 0.4));
        let mix = a.scaled(ca).axpy(cb, &b).unwrap();
        let model = HamiltonianModel::anharmonic(1.0, 0.5).unwrap();
        type Op<'a> = Box<dyn Fn(&GridWaveFunction) -> GridWaveFunction + 'a>;
        let ops: Vec<Op> = vec![
            Box::new(|c| apply_primitive(Primitive::Momentum, 3, c).unwrap()),
            Box::new(|c| apply_primitive(Primitive::Zeta, 1, c).unwrap()),
            Box::new(|c| kvh_liouvillian(&model, c).unwrap()),
            Box::new(|c| angular_momentum(c).unwrap()[2].clone().unwrap()),
            Box::new(|c| linear_momentum(MomentumVariant::Kvh, c)[1].clone()),
            Box::new(|c| generator_b(&[0.3, -0.2], c).unwrap()),
        ];
        for op in ops {
            let lhs = op(&mix);
            let rhs = op(&a).scaled(ca).axpy(cb, &op(&b)).unwrap();
            let scale = max_norm(lhs.values());
            assert!(max_diff(lhs.values(), rhs.values()) <= 1e-13 * scale);
        }
    }

    #[test]
    fn angular_momentum_dimensions() {
        let g = grid(1, -6.0, 6.0, 16);
        let chi = gaussian(&g, &[0.0, 0.0], 0.5, None, 1.0);
        assert!(matches!(
            angular_momentum(&chi),
            Err(KvhError::UnsupportedDimension { n: 1, .. })
        ));
        let g2 = grid(2, -6.0, 6.0, 16);
        let chi2 = gaussian(&g2, &[0.0; 4], 0.5, None, 1.0);
        let l = angular_momentum(&chi2).unwrap();
        assert!(l[0].is_none() && l[1].is_none() && l[2].is_some());
    }

    #[test]
    fn rotation_invariant_state_has_zero_angular_momentum() {
        // f(|q|^2, |p|^2, q.p) broad enough that the interior sees no boundary
        let g = grid(2, -1.5, 1.5, 40);
        let chi = GridWaveFunction::from_fn(g.clone(), 1.0, |z| {
            let (q2, p2, qp) = (z[0] * z[0] + z[1] * z[1], z[2] * z[2] + z[3] * z[3], z[0] * z[2] + z[1] * z[3]);
            C64::new((-(q2 + 0.5 * p2) / 8.0).exp(), 0.3 * qp).exp()
        })
        .unwrap();
        let l = angular_momentum(&chi).unwrap();
        let lz = l[2].as_ref().unwrap();
        let r = interior_max_norm(&g, lz.values(), BAND) / max_norm(chi.values());
        assert!(r <= 1e-6, "{r}");
    }

    #[test]
    fn momentum_map_pairings() {
        let g = grid(2, -6.0, 6.0, 24);
        let chi = gaussian(&g, &[0.8, -0.2, 0.3, 0.6], 0.5, Some(vec![0.4, -0.3, 0.2, 0.5]), 0.9);
        let hbar = chi.hbar();
        let l = angular_momentum(&chi).unwrap();
        let lz = expectation(l[2].as_ref().unwrap(), &chi).unwrap();
        assert!(hermiticity_defect(l[2].as_ref().unwrap(), &chi).unwrap() <= 1e-7);
        for xi3 in [1.0, -0.37, 2.2] {
            let a = generator_a([0.0, 0.0, xi3], &chi).unwrap();
            let pairing = hbar * (C64::new(0.0, 1.0) * expectation(&a, &chi).unwrap()).re;
            assert!((xi3 * lz.re - pairing).abs() <= 1e-8);
        }
        let p = linear_momentum(MomentumVariant::Kvh, &chi);
        for xi in [[1.0, 0.0], [0.3, -0.8]] {
            let pxi: f64 = (0..2).map(|i| xi[i] * expectation(&p[i], &chi).unwrap().re).sum();
            let b = generator_b(&xi, &chi).unwrap();
            let pairing = hbar * (C64::new(0.0, 1.0) * expectation(&b, &chi).unwrap()).re;
            assert!((pxi - pairing).abs() <= 1e-8, "{pxi} {pairing}");
        }
        let zero = generator_a([0.0; 3], &chi).unwrap();
        assert!(zero.values().iter().all(|v| *v == ZERO));
        assert!(generator_a([1.0, 0.0, 0.0], &chi).is_err());
    }

    #[test]
    fn literal_b_sign_misses_the_pairing() {
        let g = grid(1, -6.0, 6.0, 64);
        let chi = gaussian(&g, &[0.3, 0.8], 0.6, None, 1.0);
        let p = linear_momentum(MomentumVariant::Kvh, &chi);
        let want = expectation(&p[0], &chi).unwrap().re;
        assert!((want - 0.4).abs() < 1e-8);
        let literal = generator_b_with_sign(&[1.0], &chi, 1.0).unwrap();
        let pairing = (C64::new(0.0, 1.0) * expectation(&literal, &chi).unwrap()).re;
        assert!((pairing + want).abs() < 1e-8);
    }

    #[test]
    fn linear_momentum_variants() {
        let g = grid(1, -8.0, 8.0, 128);
        let chi = gaussian(&g, &[0.4, 1.2], 1.0, None, 1.0);
        let kvh = linear_momentum(MomentumVariant::Kvh, &chi);
        let kvn = linear_momentum(MomentumVariant::Kvn, &chi);
        assert!((expectation(&kvh[0], &chi).unwrap().re - 0.6).abs() < 1e-8);
        assert!(expectation(&kvn[0], &chi).unwrap().re.abs() < 1e-8);
        for i in 0..g.len() {
            let d = kvh[0].values()[i] - kvn[0].values()[i] - 0.5 * g.coord(i, 1) * chi.values()[i];
            assert_eq!(d, ZERO);
        }
        // -i hbar d_q part on exp(i k q) phi(p)
        let gq = grid(1, -3.0, 3.0, 128);
        let kq = 0.9;
        let wave = GridWaveFunction::from_fn(gq.clone(), 1.0, |z| {
            C64::from_polar((-z[1] * z[1] / 2.0).exp(), kq * z[0])
        })
        .unwrap();
        let pk = linear_momentum(MomentumVariant::Kvn, &wave);
        let r: Vec<C64> = (0..gq.len()).map(|i| pk[0].values()[i] - kq * wave.values()[i]).collect();
        assert!(interior_max_norm(&gq, &r, BAND) < 1e-5);
    }

    #[test]
    fn lie_structure_spot_check() {
        let g = grid(1, -7.0, 7.0, 160);
        let chi = gaussian(&g, &[0.3, -0.2], 0.7, Some(vec![0.2, 0.5]), 1.0);
        let h = HamiltonianModel::harmonic(1.3).unwrap();
        let a = Observable::momentum_projection(&[1.0]);
        let hb = linear_bracket(&a, &h).unwrap();
        let lh = |c: &GridWaveFunction| liouvillian(&h, Formalism::Kvh, c).unwrap();
        let la = |c: &GridWaveFunction| liouvillian(&a, Formalism::Kvh, c).unwrap();
        let comm = lh(&la(&chi)).axpy(-ONE, &la(&lh(&chi))).unwrap();
        let lhs = comm.scaled(C64::new(0.0, 1.0 / chi.hbar()));
        let rhs = liouvillian(&hb, Formalism::Kvh, &chi).unwrap();
        let r: Vec<C64> = lhs.values().iter().zip(rhs.values()).map(|(x, y)| x - y).collect();
        let err = interior_max_norm(&g, &r, 2 * BAND) / max_norm(rhs.values());
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn rotation_identity_and_errors() {
        let g = grid(2, -5.0, 5.0, 20);
        let chi = gaussian(&g, &[0.5, 0.0, 0.0, 0.5], 0.4, Some(vec![0.2, 0.0, 0.1, 0.3]), 1.0);
        let id = rotation_matrix([0.0, 0.0, 1.0], 0.0);
        assert_eq!(rotation_action(&id, &chi).unwrap(), chi);
        let tilt = rotation_matrix([1.0, 0.0, 0.0], 0.3);
        assert!(matches!(
            rotation_action(&tilt, &chi),
            Err(KvhError::UnsupportedDimension { n: 2, .. })
        ));
        let g1 = grid(1, -5.0, 5.0, 20);
        let chi1 = gaussian(&g1, &[0.0, 0.0], 0.4, None, 1.0);
        assert!(rotation_action(&id, &chi1).is_err());
        // a state near one edge leaves the box under a half turn
        let shifted = gaussian(
            &Arc::new(PhaseGrid::new(2, vec![-1.0, -4.0, -4.0, -4.0], vec![4.0, 4.0, 4.0, 4.0], vec![16; 4]).unwrap()),
            &[3.0, 0.0, 0.0, 0.0],
            0.15,
            None,
            1.0,
        );
        let half = rotation_matrix([0.0, 0.0, 1.0], std::f64::consts::PI);
        assert!(matches!(rotation_action(&half, &shifted), Err(KvhError::SupportEscapesDomain)));
    }

    #[test]
    fn rotation_matrix_is_orthogonal() {
        let r = rotation_matrix([0.3, -0.5, 0.8], 0.7);
        let rtr = mat_mul(&transpose(&r), &r);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((rtr[i][j] - want).abs() < 1e-14);
            }
        }
        // generator: d/dt exp(t xi^) v = xi x v at t = 0
        let xi = [0.3, -0.5, 0.8];
        let v = [1.0, 2.0, -0.5];
        let h = 1e-6;
        let (rp, rm) = (rotation_matrix(xi, h), rotation_matrix(xi, -h));
        let cross = [xi[1] * v[2] - xi[2] * v[1], xi[2] * v[0] - xi[0] * v[2], xi[0] * v[1] - xi[1] * v[0]];
        for i in 0..3 {
            let d: f64 = (0..3).map(|j| (rp[i][j] - rm[i][j]) * v[j]).sum::<f64>() / (2.0 * h);
            assert!((d - cross[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn translation_candidate_reproduces_b() {
        let g = grid(1, -6.0, 6.0, 96);
        let chi = gaussian(&g, &[0.2, 0.5], 0.6, Some(vec![0.3, 0.1]), 1.0);
        let rep = translation_candidate_report(&[1.0], 1e-4, &chi).unwrap();
        // exp(-(i/2hbar) p.v) chi(q - v, p) generates the corrected B
        assert!(rep.residuals[0][0] < 1e-3, "{rep:?}");
        assert!(rep.residuals[1][0] > 0.1);
    }
}
