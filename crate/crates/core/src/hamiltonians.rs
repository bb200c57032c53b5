//! Hamiltonian catalogue, vector fields, the canonical Poisson bracket, the
//! van Hove phase term and the leapfrog flow.
//!
//! Bracket convention: `{F, G} = dF/dq . dG/dp - dF/dp . dG/dq`, and
//! `X_H = (dH/dp, -dH/dq)`.
//!
//! Quadratic terms are evaluated so that `z . grad H` is bit-for-bit twice
//! `H`, which makes the phase term of a quadratic form exactly zero.

use crate::phase_space::PhasePoint;
use crate::{KvhError, Result};

/// Default exclusion radius around the Kepler singularity.
pub const DEFAULT_R_MIN: f64 = 1e-3;

/// Largest number of steps `flow_to` accepts.
pub const MAX_FLOW_STEPS: f64 = 1e9;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    /// `H = |p|^2 + k|q|^2/2`
    Harmonic { k: f64 },
    /// `H = |p|^2 - a|q|^2 + b|q|^4`
    Anharmonic { a: f64, b: f64 },
    /// `H = |p|^2/(2 mu) - lambda/|q|`, undefined for `|q| < r_min`
    KeplerReduced { mu: f64, lambda: f64, r_min: f64 },
    /// `H = |p|^2/(2m)`
    Free { m: f64 },
    /// `H = c + sum alpha_i q_i^2 + beta_i p_i^2`
    Quadratic {
        alpha: Vec<f64>,
        beta: Vec<f64>,
        offset: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Harmonic,
    Anharmonic,
    KeplerReduced,
    Free,
    Quadratic,
}

/// A validated catalogue Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianModel {
    params: ModelParams,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(KvhError::InvalidModel(format!("{name} must be finite and > 0, got {v}")))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(KvhError::InvalidModel(format!("{name} must be finite, got {v}")))
    }
}

impl HamiltonianModel {
    pub fn harmonic(k: f64) -> Result<Self> {
        positive("k", k)?;
        Ok(Self {
            params: ModelParams::Harmonic { k },
        })
    }

    pub fn anharmonic(a: f64, b: f64) -> Result<Self> {
        finite("a", a)?;
        positive("b", b)?;
        Ok(Self {
            params: ModelParams::Anharmonic { a, b },
        })
    }

    pub fn kepler(mu: f64, lambda: f64) -> Result<Self> {
        Self::kepler_with_r_min(mu, lambda, DEFAULT_R_MIN)
    }

    pub fn kepler_with_r_min(mu: f64, lambda: f64, r_min: f64) -> Result<Self> {
        positive("mu", mu)?;
        positive("lambda", lambda)?;
        positive("r_min", r_min)?;
        Ok(Self {
            params: ModelParams::KeplerReduced { mu, lambda, r_min },
        })
    }

    pub fn free(m: f64) -> Result<Self> {
        positive("m", m)?;
        Ok(Self {
            params: ModelParams::Free { m },
        })
    }

    pub fn quadratic(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        Self::quadratic_with_offset(alpha, beta, 0.0)
    }

    /// Quadratic form plus a constant energy offset (the offset shows up in
    /// the phase term, the vector field ignores it).
    pub fn quadratic_with_offset(alpha: Vec<f64>, beta: Vec<f64>, offset: f64) -> Result<Self> {
        if alpha.len() != beta.len() || !(1..=3).contains(&alpha.len()) {
            return Err(KvhError::InvalidModel(format!(
                "quadratic needs alpha and beta of equal length 1..=3, got {} and {}",
                alpha.len(),
                beta.len()
            )));
        }
        for v in alpha.iter().chain(beta.iter()) {
            finite("quadratic coefficient", *v)?;
        }
        finite("offset", offset)?;
        Ok(Self {
            params: ModelParams::Quadratic { alpha, beta, offset },
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn kind(&self) -> ModelKind {
        match self.params {
            ModelParams::Harmonic { .. } => ModelKind::Harmonic,
            ModelParams::Anharmonic { .. } => ModelKind::Anharmonic,
            ModelParams::KeplerReduced { .. } => ModelKind::KeplerReduced,
            ModelParams::Free { .. } => ModelKind::Free,
            ModelParams::Quadratic { .. } => ModelKind::Quadratic,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind() {
            ModelKind::Harmonic => "harmonic",
            ModelKind::Anharmonic => "anharmonic",
            ModelKind::KeplerReduced => "kepler_reduced",
            ModelKind::Free => "free",
            ModelKind::Quadratic => "quadratic",
        }
    }

    /// Whether H is a homogeneous quadratic form (harmonic, or quadratic
    /// without offset).
    pub fn is_quadratic_form(&self) -> bool {
        match &self.params {
            ModelParams::Harmonic { .. } => true,
            ModelParams::Quadratic { offset, .. } => *offset == 0.0,
            _ => false,
        }
    }

    /// `dH/dp`, which depends on `p` only.
    #[inline]
    fn grad_p_into(&self, p: &[f64], gp: &mut [f64]) {
        match &self.params {
            ModelParams::Harmonic { .. } | ModelParams::Anharmonic { .. } => {
                for (g, pi) in gp.iter_mut().zip(p) {
                    *g = 2.0 * pi;
                }
            }
            ModelParams::KeplerReduced { mu, .. } => {
                for (g, pi) in gp.iter_mut().zip(p) {
                    *g = pi / mu;
                }
            }
            ModelParams::Free { m } => {
                for (g, pi) in gp.iter_mut().zip(p) {
                    *g = pi / m;
                }
            }
            ModelParams::Quadratic { beta, .. } => {
                for ((g, pi), b) in gp.iter_mut().zip(p).zip(beta) {
                    *g = 2.0 * (b * pi);
                }
            }
        }
    }

    /// `dH/dq`, which depends on `q` only.
    #[inline]
    fn grad_q_into(&self, q: &[f64], gq: &mut [f64]) -> Result<()> {
        match &self.params {
            ModelParams::Harmonic { k } => {
                for (g, qi) in gq.iter_mut().zip(q) {
                    *g = k * qi;
                }
            }
            ModelParams::Anharmonic { a, b } => {
                let r2 = norm_sq(q);
                let c = -2.0 * a + 4.0 * b * r2;
                for (g, qi) in gq.iter_mut().zip(q) {
                    *g = c * qi;
                }
            }
            ModelParams::KeplerReduced { lambda, r_min, .. } => {
                let r = kepler_radius(q, *r_min)?;
                let c = lambda / (r * r * r);
                for (g, qi) in gq.iter_mut().zip(q) {
                    *g = c * qi;
                }
            }
            ModelParams::Free { .. } => gq.iter_mut().for_each(|g| *g = 0.0),
            ModelParams::Quadratic { alpha, .. } => {
                for ((g, qi), a) in gq.iter_mut().zip(q).zip(alpha) {
                    *g = 2.0 * (a * qi);
                }
            }
        }
        Ok(())
    }

    /// One position-Verlet step in place; returns `dt * a(z_mid)` where the
    /// phase term is sampled at `(q_half, (p + p')/2)`.
    fn step_in_place(&self, q: &mut [f64], p: &mut [f64], dt: f64) -> Result<f64> {
        let n = q.len();
        let mut g = [0.0; 3];
        let mut p_mid = [0.0; 3];

        let mut q_start = [0.0; 3];
        q_start[..n].copy_from_slice(q);
        self.grad_p_into(p, &mut g[..n]);
        for i in 0..n {
            q[i] += 0.5 * dt * g[i];
        }
        self.check_drift(&q_start[..n], q)?;
        q_start[..n].copy_from_slice(q);
        self.grad_q_into(q, &mut g[..n])?;
        for i in 0..n {
            let p_new = p[i] - dt * g[i];
            p_mid[i] = 0.5 * (p[i] + p_new);
            p[i] = p_new;
        }
        let a = self.phase_term(q, &p_mid[..n])?;
        self.grad_p_into(p, &mut g[..n]);
        for i in 0..n {
            q[i] += 0.5 * dt * g[i];
        }
        self.check_drift(&q_start[..n], q)?;
        Ok(dt * a)
    }

    /// Rejects a straight drift from `a` to `b` that passes through the
    /// Kepler exclusion ball, even when both endpoints lie outside it.
    fn check_drift(&self, a: &[f64], b: &[f64]) -> Result<()> {
        let ModelParams::KeplerReduced { r_min, .. } = self.params else {
            return Ok(());
        };
        let mut ab = 0.0;
        let mut dd = 0.0;
        for i in 0..a.len() {
            let d = b[i] - a[i];
            ab += a[i] * d;
            dd += d * d;
        }
        let s = if dd > 0.0 { (-ab / dd).clamp(0.0, 1.0) } else { 0.0 };
        let mut r2 = 0.0;
        for i in 0..a.len() {
            let x = a[i] + s * (b[i] - a[i]);
            r2 += x * x;
        }
        if r2.sqrt() < r_min || !r2.is_finite() {
            return Err(KvhError::SingularRegion {
                radius: r2.sqrt(),
                r_min,
            });
        }
        Ok(())
    }

    fn check_point(&self, z: &PhasePoint) -> Result<()> {
        self.check_n(z.n())
    }
}

#[inline]
fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

#[inline]
fn kepler_radius(q: &[f64], r_min: f64) -> Result<f64> {
    let r = norm_sq(q).sqrt();
    if r < r_min || !r.is_finite() {
        Err(KvhError::SingularRegion { radius: r, r_min })
    } else {
        Ok(r)
    }
}

/// A smooth function on phase space with an analytic gradient.
pub trait PhaseFunction: Sync {
    /// Fixed spatial dimension, or `None` when any `n` is accepted.
    fn fixed_n(&self) -> Option<usize>;

    fn eval(&self, q: &[f64], p: &[f64]) -> Result<f64>;

    fn grad(&self, q: &[f64], p: &[f64], gq: &mut [f64], gp: &mut [f64]) -> Result<()>;

    fn check_n(&self, n: usize) -> Result<()> {
        if !(1..=3).contains(&n) {
            return Err(KvhError::UnsupportedDimension { op: "phase function", n });
        }
        match self.fixed_n() {
            Some(m) if m != n => Err(KvhError::DimensionMismatch(format!(
                "function is defined for n = {m}, point has n = {n}"
            ))),
            _ => Ok(()),
        }
    }

    /// `F - z . grad F / 2`, summed q-terms first then p-terms.
    fn phase_term(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        let n = q.len();
        let mut gq = [0.0; 3];
        let mut gp = [0.0; 3];
        let h = self.eval(q, p)?;
        self.grad(q, p, &mut gq[..n], &mut gp[..n])?;
        let mut dot = 0.0;
        for i in 0..n {
            dot += q[i] * gq[i];
        }
        for i in 0..n {
            dot += p[i] * gp[i];
        }
        Ok(h - 0.5 * dot)
    }

    /// `X_F = (dF/dp, -dF/dq)` written into `xq`, `xp`.
    fn vector_field(&self, q: &[f64], p: &[f64], xq: &mut [f64], xp: &mut [f64]) -> Result<()> {
        self.grad(q, p, xp, xq)?;
        xp.iter_mut().for_each(|v| *v = -*v);
        Ok(())
    }
}

impl PhaseFunction for HamiltonianModel {
    fn fixed_n(&self) -> Option<usize> {
        match &self.params {
            ModelParams::Quadratic { alpha, .. } => Some(alpha.len()),
            _ => None,
        }
    }

    fn eval(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        let mut h = 0.0;
        match &self.params {
            ModelParams::Harmonic { k } => {
                for qi in q {
                    h += (0.5 * k * qi) * qi;
                }
                for pi in p {
                    h += pi * pi;
                }
            }
            ModelParams::Anharmonic { a, b } => {
                let r2 = norm_sq(q);
                h = norm_sq(p) - a * r2 + b * r2 * r2;
            }
            ModelParams::KeplerReduced { mu, lambda, r_min } => {
                let r = kepler_radius(q, *r_min)?;
                h = norm_sq(p) / (2.0 * mu) - lambda / r;
            }
            ModelParams::Free { m } => {
                for pi in p {
                    h += (pi / (2.0 * m)) * pi;
                }
            }
            ModelParams::Quadratic { alpha, beta, offset } => {
                for (qi, a) in q.iter().zip(alpha) {
                    h += (a * qi) * qi;
                }
                for (pi, b) in p.iter().zip(beta) {
                    h += (b * pi) * pi;
                }
                if *offset != 0.0 {
                    h += offset;
                }
            }
        }
        Ok(h)
    }

    fn grad(&self, q: &[f64], p: &[f64], gq: &mut [f64], gp: &mut [f64]) -> Result<()> {
        self.grad_q_into(q, gq)?;
        self.grad_p_into(p, gp);
        Ok(())
    }
}

/// Phase functions used as observables.
#[derive(Debug, Clone, PartialEq)]
pub enum Observable {
    /// `c + a_q . q + a_p . p`
    Linear {
        q_coef: Vec<f64>,
        p_coef: Vec<f64>,
        constant: f64,
    },
    /// `xi . (q x p)`, defined for n = 3.
    AngularProjection([f64; 3]),
    Model(HamiltonianModel),
}

impl Observable {
    /// `xi . p` for `xi` of length n.
    pub fn momentum_projection(xi: &[f64]) -> Self {
        Observable::Linear {
            q_coef: vec![0.0; xi.len()],
            p_coef: xi.to_vec(),
            constant: 0.0,
        }
    }
}

impl PhaseFunction for Observable {
    fn fixed_n(&self) -> Option<usize> {
        match self {
            Observable::Linear { q_coef, .. } => Some(q_coef.len()),
            Observable::AngularProjection(_) => Some(3),
            Observable::Model(m) => m.fixed_n(),
        }
    }

    fn eval(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        match self {
            Observable::Linear {
                q_coef,
                p_coef,
                constant,
            } => {
                let mut v = *constant;
                for (a, x) in q_coef.iter().zip(q) {
                    v += a * x;
                }
                for (a, x) in p_coef.iter().zip(p) {
                    v += a * x;
                }
                Ok(v)
            }
            Observable::AngularProjection(xi) => {
                let l = cross(q, p);
                Ok(xi[0] * l[0] + xi[1] * l[1] + xi[2] * l[2])
            }
            Observable::Model(m) => m.eval(q, p),
        }
    }

    fn grad(&self, q: &[f64], p: &[f64], gq: &mut [f64], gp: &mut [f64]) -> Result<()> {
        match self {
            Observable::Linear { q_coef, p_coef, .. } => {
                gq.copy_from_slice(q_coef);
                gp.copy_from_slice(p_coef);
                Ok(())
            }
            Observable::AngularProjection(xi) => {
                // d/dq (xi . q x p) = p x xi, d/dp = xi x q
                gq.copy_from_slice(&cross(p, xi));
                gp.copy_from_slice(&cross(xi, q));
                Ok(())
            }
            Observable::Model(m) => m.grad(q, p, gq, gp),
        }
    }
}

fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// `{A, H}` for a linear observable and a model with linear force, again a
/// linear observable.
pub fn linear_bracket(a: &Observable, model: &HamiltonianModel) -> Result<Observable> {
    let Observable::Linear { q_coef, p_coef, .. } = a else {
        return Err(KvhError::WrongModelKind("linear_bracket needs a linear observable".into()));
    };
    let n = q_coef.len();
    // dH/dq = Kq q, dH/dp = Kp p with diagonal Kq, Kp
    let (kq, kp): (Vec<f64>, Vec<f64>) = match model.params() {
        ModelParams::Harmonic { k } => (vec![*k; n], vec![2.0; n]),
        ModelParams::Free { m } => (vec![0.0; n], vec![1.0 / m; n]),
        ModelParams::Quadratic { alpha, beta, .. } => {
            model.check_n(n)?;
            (
                alpha.iter().map(|a| 2.0 * a).collect(),
                beta.iter().map(|b| 2.0 * b).collect(),
            )
        }
        _ => {
            return Err(KvhError::WrongModelKind(format!(
                "{} has a nonlinear force",
                model.name()
            )))
        }
    };
    // {A,H} = a_q . Kp p - a_p . Kq q
    Ok(Observable::Linear {
        q_coef: (0..n).map(|i| -p_coef[i] * kq[i]).collect(),
        p_coef: (0..n).map(|i| q_coef[i] * kp[i]).collect(),
        constant: 0.0,
    })
}

pub fn h_value(model: &HamiltonianModel, z: &PhasePoint) -> Result<f64> {
    model.check_point(z)?;
    model.eval(&z.q, &z.p)
}

pub fn h_grad(model: &HamiltonianModel, z: &PhasePoint) -> Result<PhasePoint> {
    model.check_point(z)?;
    let mut g = PhasePoint::origin(z.n());
    model.grad(&z.q, &z.p, &mut g.q, &mut g.p)?;
    Ok(g)
}

pub fn hamiltonian_vector_field(model: &HamiltonianModel, z: &PhasePoint) -> Result<PhasePoint> {
    model.check_point(z)?;
    let mut x = PhasePoint::origin(z.n());
    model.vector_field(&z.q, &z.p, &mut x.q, &mut x.p)?;
    Ok(x)
}

/// Canonical bracket of two gradients taken at the same point.
pub fn poisson_bracket(f_grad: &PhasePoint, g_grad: &PhasePoint) -> Result<f64> {
    if f_grad.n() != g_grad.n() {
        return Err(KvhError::DimensionMismatch(format!(
            "gradients have n = {} and n = {}",
            f_grad.n(),
            g_grad.n()
        )));
    }
    let mut s = 0.0;
    for i in 0..f_grad.n() {
        s += f_grad.q[i] * g_grad.p[i] - f_grad.p[i] * g_grad.q[i];
    }
    Ok(s)
}

/// `a(z) = H - z . grad H / 2`.
pub fn kvh_phase_term(model: &HamiltonianModel, z: &PhasePoint) -> Result<f64> {
    model.check_point(z)?;
    model.phase_term(&z.q, &z.p)
}

/// One leapfrog step; `dt` may be negative.
pub fn flow_step(model: &HamiltonianModel, z: &PhasePoint, dt: f64) -> Result<PhasePoint> {
    model.check_point(z)?;
    if !dt.is_finite() {
        return Err(KvhError::InvalidState(format!("dt must be finite, got {dt}")));
    }
    let mut out = z.clone();
    if dt != 0.0 {
        model.step_in_place(&mut out.q, &mut out.p, dt)?;
    }
    Ok(out)
}

/// Flows `z` for time `t` in `ceil(|t|/dt)` equal steps and returns the
/// endpoint with `int_0^t a(z(s)) ds`.
pub fn flow_to(model: &HamiltonianModel, z: &PhasePoint, t: f64, dt: f64) -> Result<(PhasePoint, f64)> {
    model.check_point(z)?;
    let mut q = [0.0; 3];
    let mut p = [0.0; 3];
    let n = z.n();
    q[..n].copy_from_slice(&z.q);
    p[..n].copy_from_slice(&z.p);
    let phase = flow_in_place(model, &mut q[..n], &mut p[..n], t, dt)?;
    Ok((
        PhasePoint {
            q: q[..n].to_vec(),
            p: p[..n].to_vec(),
        },
        phase,
    ))
}

/// Allocation-free core of [`flow_to`].
pub(crate) fn flow_in_place(
    model: &HamiltonianModel,
    q: &mut [f64],
    p: &mut [f64],
    t: f64,
    dt: f64,
) -> Result<f64> {
    if !(t.is_finite() && dt.is_finite() && dt > 0.0) {
        return Err(KvhError::InvalidState(format!(
            "flow needs finite t and dt > 0, got t = {t}, dt = {dt}"
        )));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let steps = (t.abs() / dt).ceil();
    if steps > MAX_FLOW_STEPS {
        return Err(KvhError::InvalidState(format!("{steps} flow steps exceed the limit")));
    }
    let steps = steps as u64;
    let h = t / steps as f64;
    if let ModelParams::KeplerReduced { r_min, .. } = model.params {
        if kepler_radius(q, r_min).is_err() {
            return Err(KvhError::SingularAbort { time: 0.0 });
        }
    }
    let mut phase = 0.0;
    for s in 0..steps {
        match model.step_in_place(q, p, h) {
            Ok(dphi) => phase += dphi,
            Err(KvhError::SingularRegion { .. }) => {
                return Err(KvhError::SingularAbort {
                    time: s as f64 * h,
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(phase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn pt(q: &[f64], p: &[f64]) -> PhasePoint {
        PhasePoint::new(q.to_vec(), p.to_vec()).unwrap()
    }

    fn models(n: usize) -> Vec<HamiltonianModel> {
        vec![
            HamiltonianModel::harmonic(1.3).unwrap(),
            HamiltonianModel::anharmonic(0.7, 0.4).unwrap(),
            HamiltonianModel::kepler(1.2, 0.9).unwrap(),
            HamiltonianModel::free(2.0).unwrap(),
            HamiltonianModel::quadratic(vec![0.5, -1.0, 2.0][..n].to_vec(), vec![1.5, 0.25, -0.75][..n].to_vec())
                .unwrap(),
        ]
    }

    fn random_point(rng: &mut ChaCha8Rng, n: usize) -> PhasePoint {
        loop {
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            if norm_sq(&q).sqrt() > 0.2 {
                return pt(&q, &p);
            }
        }
    }

    #[test]
    fn catalogue_values() {
        let kep = HamiltonianModel::kepler(1.0, 1.0).unwrap();
        let v = h_value(&kep, &pt(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0])).unwrap();
        assert!((v + 0.5).abs() < 1e-15);
        let h = HamiltonianModel::harmonic(1.0).unwrap();
        assert_eq!(h_value(&h, &PhasePoint::origin(2)).unwrap(), 0.0);
        let a = HamiltonianModel::anharmonic(1.0, 1.0).unwrap();
        let s = 1.0 / 3f64.sqrt();
        assert!(h_value(&a, &pt(&[s, s, s], &[0.0; 3])).unwrap().abs() < 1e-15);
    }

    #[test]
    fn catalogue_gradients() {
        let h = HamiltonianModel::harmonic(1.0).unwrap();
        assert_eq!(h_grad(&h, &pt(&[2.0], &[3.0])).unwrap(), pt(&[2.0], &[6.0]));
        let f = HamiltonianModel::free(1.0).unwrap();
        assert_eq!(
            h_grad(&f, &pt(&[4.0, -1.0, 2.0], &[0.0, 1.0, 0.0])).unwrap(),
            pt(&[0.0; 3], &[0.0, 1.0, 0.0])
        );
        let k = HamiltonianModel::kepler(1.0, 1.0).unwrap();
        assert_eq!(
            h_grad(&k, &pt(&[1.0, 0.0, 0.0], &[0.0; 3])).unwrap(),
            pt(&[1.0, 0.0, 0.0], &[0.0; 3])
        );
    }

    #[test]
    fn vector_fields() {
        let h = HamiltonianModel::harmonic(1.0).unwrap();
        let x = hamiltonian_vector_field(&h, &pt(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0])).unwrap();
        assert_eq!(x, pt(&[0.0, 2.0, 0.0], &[-1.0, 0.0, 0.0]));
        let zero = HamiltonianModel::quadratic(vec![0.0; 2], vec![0.0; 2]).unwrap();
        let x = hamiltonian_vector_field(&zero, &pt(&[1.0, 2.0], &[3.0, 4.0])).unwrap();
        assert!(x.to_z().iter().all(|v| *v == 0.0));
        let k = HamiltonianModel::kepler(1.0, 1.0).unwrap();
        let x = hamiltonian_vector_field(&k, &pt(&[1.0, 0.0, 0.0], &[0.0; 3])).unwrap();
        assert_eq!(x, pt(&[0.0; 3], &[-1.0, 0.0, 0.0]));
    }

    #[test]
    fn kepler_singular_region() {
        let k = HamiltonianModel::kepler(1.0, 1.0).unwrap();
        let z = pt(&[1e-4, 0.0, 0.0], &[0.0; 3]);
        assert!(matches!(h_value(&k, &z), Err(KvhError::SingularRegion { .. })));
        assert!(matches!(h_grad(&k, &z), Err(KvhError::SingularRegion { .. })));
        assert!(matches!(kvh_phase_term(&k, &z), Err(KvhError::SingularRegion { .. })));
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(HamiltonianModel::harmonic(0.0).is_err());
        assert!(HamiltonianModel::anharmonic(1.0, 0.0).is_err());
        assert!(HamiltonianModel::kepler_with_r_min(1.0, 1.0, 0.0).is_err());
        assert!(HamiltonianModel::free(-1.0).is_err());
        assert!(HamiltonianModel::quadratic(vec![1.0], vec![1.0, 2.0]).is_err());
        let q = HamiltonianModel::quadratic(vec![1.0], vec![1.0]).unwrap();
        assert!(h_value(&q, &PhasePoint::origin(2)).is_err());
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=3 {
            for model in models(n) {
                for _ in 0..1000 {
                    let z = random_point(&mut rng, n);
                    let g = h_grad(&model, &z).unwrap().to_z();
                    let zz = z.to_z();
                    for a in 0..2 * n {
                        let h = 1e-5;
                        let mut zp = zz.clone();
                        let mut zm = zz.clone();
                        zp[a] += h;
                        zm[a] -= h;
                        let fd = (h_value(&model, &PhasePoint::from_z(&zp).unwrap()).unwrap()
                            - h_value(&model, &PhasePoint::from_z(&zm).unwrap()).unwrap())
                            / (2.0 * h);
                        let scale = g[a].abs().max(1.0);
                        assert!((fd - g[a]).abs() <= 1e-6 * scale, "{:?} axis {a}", model.kind());
                    }
                }
            }
        }
    }

    #[test]
    fn bracket_examples() {
        let gq = pt(&[1.0], &[0.0]);
        let gp = pt(&[0.0], &[1.0]);
        assert_eq!(poisson_bracket(&gq, &gp).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kep = HamiltonianModel::kepler(1.0, 1.0).unwrap();
        for _ in 0..100 {
            let z = random_point(&mut rng, 3);
            let gh = h_grad(&kep, &z).unwrap();
            assert_eq!(poisson_bracket(&gh, &gh).unwrap(), 0.0);
            let xi = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let obs = Observable::AngularProjection(xi);
            let mut gl = PhasePoint::origin(3);
            obs.grad(&z.q, &z.p, &mut gl.q, &mut gl.p).unwrap();
            assert!(poisson_bracket(&gl, &gh).unwrap().abs() <= 1e-12);
        }
        assert!(poisson_bracket(&gq, &PhasePoint::origin(2)).is_err());
    }

    #[test]
    fn phase_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, b) = (0.8, 1.7);
        let anh = HamiltonianModel::anharmonic(a, b).unwrap();
        let kep = HamiltonianModel::kepler(1.0, 1.0).unwrap();
        for n in 1..=3 {
            let quad = HamiltonianModel::quadratic(vec![1.0, 2.0, 3.0][..n].to_vec(), vec![4.0, 5.0, 6.0][..n].to_vec())
                .unwrap();
            let harm = HamiltonianModel::harmonic(2.7).unwrap();
            for _ in 0..1000 {
                let z = random_point(&mut rng, n);
                assert_eq!(kvh_phase_term(&quad, &z).unwrap(), 0.0);
                assert_eq!(kvh_phase_term(&harm, &z).unwrap(), 0.0);
                let r2 = norm_sq(&z.q);
                let want = -b * r2 * r2;
                assert!((kvh_phase_term(&anh, &z).unwrap() - want).abs() < 1e-12 * (1.0 + want.abs()));
            }
        }
        let v = kvh_phase_term(&kep, &pt(&[1.0, 0.0, 0.0], &[0.0; 3])).unwrap();
        assert!((v + 1.5).abs() < 1e-15);
    }

    #[test]
    fn flow_step_basics() {
        let h = HamiltonianModel::harmonic(2.0).unwrap();
        let z = pt(&[0.3, -0.1], &[1.1, 0.4]);
        assert_eq!(flow_step(&h, &z, 0.0).unwrap(), z);
        // dyadic inputs make the drift exact
        let f = HamiltonianModel::free(1.0).unwrap();
        let z = pt(&[1.0, -2.0, 0.5], &[0.25, 0.5, -0.75]);
        let out = flow_step(&f, &z, 0.125).unwrap();
        assert_eq!(out.q, vec![1.0 + 0.25 * 0.125, -2.0 + 0.5 * 0.125, 0.5 - 0.75 * 0.125]);
        assert_eq!(out.p, z.p);
    }

    #[test]
    fn harmonic_quarter_period() {
        let h = HamiltonianModel::harmonic(2.0).unwrap();
        let (end, phase) = flow_to(&h, &pt(&[1.0], &[0.0]), PI / 2.0, 1e-3).unwrap();
        assert!((end.q[0] + 1.0).abs() < 1e-5 && end.p[0].abs() < 1e-5, "{end:?}");
        assert_eq!(phase, 0.0);
    }

    #[test]
    fn kepler_circular_orbit_phase() {
        let k = HamiltonianModel::kepler(1.0, 1.0).unwrap();
        let z = pt(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]);
        let (end, phase) = flow_to(&k, &z, 2.0 * PI, 2e-4).unwrap();
        let err = end
            .to_z()
            .iter()
            .zip(z.to_z())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        assert!((phase + 3.0 * PI).abs() < 1e-6, "{phase}");
        let (_, back) = flow_to(&k, &z, -2.0 * PI, 2e-4).unwrap();
        assert!((back - 3.0 * PI).abs() < 1e-6);
    }

    #[test]
    fn flow_to_zero_time_and_quadratic_phase() {
        let k = HamiltonianModel::kepler(1.0, 1.0).unwrap();
        let z = pt(&[1.0, 0.2, 0.0], &[0.0, 1.0, 0.1]);
        assert_eq!(flow_to(&k, &z, 0.0, 1e-3).unwrap(), (z.clone(), 0.0));
        let q = HamiltonianModel::quadratic(vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(flow_to(&q, &z, 1.7, 1e-2).unwrap().1, 0.0);
    }

    #[test]
    fn singular_abort_reports_time() {
        let k = HamiltonianModel::kepler(1.0, 1.0).unwrap();
        // radial infall
        let z = pt(&[1.0, 0.0, 0.0], &[0.0; 3]);
        match flow_to(&k, &z, 5.0, 1e-3) {
            Err(KvhError::SingularAbort { time }) => assert!(time > 0.5 && time < 1.2, "{time}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn one_step_is_symplectic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for model in models(1) {
            for _ in 0..50 {
                let z = random_point(&mut rng, 1);
                let h = 1e-6;
                let mut jac = [[0.0; 2]; 2];
                for a in 0..2 {
                    let mut zp = z.to_z();
                    let mut zm = z.to_z();
                    zp[a] += h;
                    zm[a] -= h;
                    let fp = flow_step(&model, &PhasePoint::from_z(&zp).unwrap(), 1e-2).unwrap().to_z();
                    let fm = flow_step(&model, &PhasePoint::from_z(&zm).unwrap(), 1e-2).unwrap().to_z();
                    for b in 0..2 {
                        jac[b][a] = (fp[b] - fm[b]) / (2.0 * h);
                    }
                }
                let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
                assert!((det - 1.0).abs() < 1e-8, "{:?} {det}", model.kind());
            }
        }
    }

    #[test]
    fn harmonic_energy_has_no_drift() {
        let h = HamiltonianModel::harmonic(1.0).unwrap();
        let z0 = pt(&[0.7], &[-0.4]);
        let (z, _) = flow_to(&h, &z0, 10.0, 1e-3).unwrap();
        let (e0, e1) = (h_value(&h, &z0).unwrap(), h_value(&h, &z).unwrap());
        assert!(((e1 - e0) / e0).abs() <= 1e-6);
    }

    #[test]
    fn flow_is_reversible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for model in models(2) {
            let z = random_point(&mut rng, 2);
            let (fwd, _) = flow_to(&model, &z, 0.8, 1e-3).unwrap();
            let (back, _) = flow_to(&model, &fwd, -0.8, 1e-3).unwrap();
            for (a, b) in back.to_z().iter().zip(z.to_z()) {
                assert!((a - b).abs() < 1e-9, "{:?}", model.kind());
            }
        }
    }

    #[test]
    fn linear_bracket_for_harmonic() {
        // {xi . p, p^2 + k q^2/2} = -k xi . q
        let h = HamiltonianModel::harmonic(3.0).unwrap();
        let a = Observable::momentum_projection(&[1.0, -2.0]);
        let b = linear_bracket(&a, &h).unwrap();
        assert_eq!(
            b,
            Observable::Linear {
                q_coef: vec![-3.0, 6.0],
                p_coef: vec![0.0, 0.0],
                constant: 0.0
            }
        );
        assert!(linear_bracket(&a, &HamiltonianModel::anharmonic(1.0, 1.0).unwrap()).is_err());
    }
}
