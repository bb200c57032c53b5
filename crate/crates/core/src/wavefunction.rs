//! Classical wavefunctions sampled on a phase-space grid.
//!
//! The KvH density is `rho = |chi|^2 + div J` with the real current
//! `J = z|chi|^2/2 + hbar * JJ Im(chi* grad chi)`, where `JJ v = (v_p, -v_q)`
//! is the symplectic rotation. Its total mass is `int |chi|^2`, its energy
//! moment is `<chi|LL_H chi>`, and it is transported by the Liouville flow.
//! [`literal_current_divergence`] keeps the unrotated complex form
//! `div(chi* (z chi/2 + i hbar grad chi))` for comparison.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::phase_space::{
    accumulate_derivative, boundary_band_ratio, check_len, integrate_real, partial_derivative,
    weighted_sum, Coefficient, PhaseGrid, PhasePoint,
};
use crate::{KvhError, Result, C64};

/// Boundary band magnitude allowed for states entering propagation,
/// relative to the peak magnitude.
pub const BOUNDARY_DECAY_LIMIT: f64 = 1e-10;

/// Half-width of the initial-state support, in units of sigma.
pub const COVERAGE_SIGMAS: f64 = 6.0;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct GridWaveFunction {
    grid: Arc<PhaseGrid>,
    values: Vec<C64>,
    hbar: f64,
}

impl GridWaveFunction {
    pub fn new(grid: Arc<PhaseGrid>, values: Vec<C64>, hbar: f64) -> Result<Self> {
        check_len(&grid, values.len())?;
        if !(hbar.is_finite() && hbar > 0.0) {
            return Err(KvhError::InvalidState(format!("hbar must be > 0, got {hbar}")));
        }
        if let Some(i) = values.iter().position(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(KvhError::InvalidState(format!("non-finite value at node {i}")));
        }
        Ok(Self { grid, values, hbar })
    }

    /// Samples `f(z)` at every node.
    pub fn from_fn<F>(grid: Arc<PhaseGrid>, hbar: f64, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> C64 + Sync,
    {
        let axes = grid.axes();
        let values = (0..grid.len())
            .into_par_iter()
            .map_init(
                || vec![0.0; axes],
                |z, i| {
                    grid.coords_into(i, z);
                    f(z)
                },
            )
            .collect();
        Self::new(grid, values, hbar)
    }

    pub fn zeros(grid: Arc<PhaseGrid>, hbar: f64) -> Result<Self> {
        let len = grid.len();
        Self::new(grid, vec![ZERO; len], hbar)
    }

    /// A state on the same grid and with the same hbar, without the
    /// finiteness scan.
    pub(crate) fn with_values(&self, values: Vec<C64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            grid: Arc::clone(&self.grid),
            values,
            hbar: self.hbar,
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.with_values(vec![ZERO; self.values.len()])
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn is_finite(&self) -> bool {
        self.values.par_iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Errors unless both states live on the same grid with the same hbar.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        let same_grid = Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid;
        if !same_grid || self.hbar != other.hbar {
            return Err(KvhError::GridMismatch);
        }
        Ok(())
    }

    pub fn scaled(&self, c: C64) -> Self {
        self.with_values(self.values.par_iter().map(|v| v * c).collect())
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: C64, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(self.with_values(
            self.values
                .par_iter()
                .zip(other.values.par_iter())
                .map(|(a, b)| a + c * b)
                .collect(),
        ))
    }

    pub fn conj(&self) -> Self {
        self.with_values(self.values.par_iter().map(|v| v.conj()).collect())
    }

    /// Pointwise multiplication by a real field.
    pub fn multiplied(&self, f: &[f64]) -> Result<Self> {
        check_len(&self.grid, f.len())?;
        Ok(self.with_values(
            self.values
                .par_iter()
                .zip(f.par_iter())
                .map(|(v, w)| v * w)
                .collect(),
        ))
    }

    /// Largest boundary-band magnitude over the peak magnitude.
    pub fn boundary_ratio(&self) -> f64 {
        boundary_band_ratio(&self.grid, &self.values)
    }

    /// Decay condition for states admitted to propagation.
    pub fn check_decayed(&self) -> Result<()> {
        let ratio = self.boundary_ratio();
        if ratio > BOUNDARY_DECAY_LIMIT {
            return Err(KvhError::BoundaryNotDecayed {
                ratio,
                limit: BOUNDARY_DECAY_LIMIT,
            });
        }
        Ok(())
    }

    /// Writes `z_1..z_2n, re, im` rows in grid order with 17 significant
    /// digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let axes = self.grid.axes();
        let header: Vec<String> = (1..=axes)
            .map(|a| format!("z{a}"))
            .chain(["re".to_string(), "im".to_string()])
            .collect();
        writeln!(w, "{}", header.join(","))?;
        let mut z = vec![0.0; axes];
        for (i, v) in self.values.iter().enumerate() {
            self.grid.coords_into(i, &mut z);
            for x in &z {
                write!(w, "{},", fmt_f64(*x))?;
            }
            writeln!(w, "{},{}", fmt_f64(v.re), fmt_f64(v.im))?;
        }
        Ok(())
    }
}

/// Exponent form with 17 significant digits, which round-trips any f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Isotropic Gaussian `chi(z) = N exp(-|z - z0|^2/(4 sigma^2)) exp(i k.z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialStateSpec {
    center: PhasePoint,
    width: f64,
    wavevector: Vec<f64>,
}

impl InitialStateSpec {
    pub fn gaussian(center: PhasePoint, width: f64) -> Result<Self> {
        if !(width.is_finite() && width > 0.0) {
            return Err(KvhError::InvalidState(format!("sigma must be > 0, got {width}")));
        }
        let wavevector = vec![0.0; 2 * center.n()];
        Ok(Self {
            center,
            width,
            wavevector,
        })
    }

    /// Adds the linear phase `exp(i k.z)`; `k` has 2n components.
    pub fn with_phase(mut self, k: Vec<f64>) -> Result<Self> {
        if k.len() != 2 * self.center.n() {
            return Err(KvhError::DimensionMismatch(format!(
                "wavevector has {} components, expected {}",
                k.len(),
                2 * self.center.n()
            )));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(KvhError::InvalidState("non-finite wavevector".into()));
        }
        self.wavevector = k;
        Ok(self)
    }

    pub fn center(&self) -> &PhasePoint {
        &self.center
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn wavevector(&self) -> &[f64] {
        &self.wavevector
    }

    pub fn n(&self) -> usize {
        self.center.n()
    }

    /// Analytic normalization `(2 pi sigma^2)^(-n/2)`.
    pub fn norm_constant(&self) -> f64 {
        (2.0 * std::f64::consts::PI * self.width * self.width).powf(-(self.n() as f64) / 2.0)
    }

    #[inline]
    fn offset_sq_and_phase(&self, z: &[f64]) -> (f64, f64) {
        let n = self.n();
        let mut w2 = 0.0;
        let mut kz = 0.0;
        for a in 0..2 * n {
            let c = if a < n { self.center.q[a] } else { self.center.p[a - n] };
            let w = z[a] - c;
            w2 += w * w;
            kz += self.wavevector[a] * z[a];
        }
        (w2, kz)
    }

    /// Closed-form value at `z` (length 2n), normalized analytically.
    #[inline]
    pub fn eval(&self, z: &[f64]) -> C64 {
        let (w2, kz) = self.offset_sq_and_phase(z);
        let r = self.norm_constant() * (-w2 / (4.0 * self.width * self.width)).exp();
        C64::from_polar(r, kz)
    }

    /// Closed-form gradient `chi (-(z - z0)/(2 sigma^2) + i k)`.
    pub fn gradient(&self, z: &[f64], out: &mut [C64]) -> C64 {
        let chi = self.eval(z);
        let n = self.n();
        let s2 = 2.0 * self.width * self.width;
        for a in 0..2 * n {
            let c = if a < n { self.center.q[a] } else { self.center.p[a - n] };
            out[a] = chi * C64::new(-(z[a] - c) / s2, self.wavevector[a]);
        }
        chi
    }

    /// Closed-form KvH density
    /// `|chi|^2 (1 + n - (z - z0).(z/2 + hbar JJ k)/sigma^2)`.
    pub fn density_kvh(&self, z: &[f64], hbar: f64) -> f64 {
        let n = self.n();
        let (w2, _) = self.offset_sq_and_phase(z);
        let nc = self.norm_constant();
        let r2 = nc * nc * (-w2 / (2.0 * self.width * self.width)).exp();
        let mut dot = 0.0;
        for a in 0..2 * n {
            let (c, jk) = if a < n {
                (self.center.q[a], self.wavevector[a + n])
            } else {
                (self.center.p[a - n], -self.wavevector[a - n])
            };
            dot += (z[a] - c) * (0.5 * z[a] + hbar * jk);
        }
        r2 * (1.0 + n as f64 - dot / (self.width * self.width))
    }

    /// Closed-form KvN density `|chi|^2`.
    pub fn density_kvn(&self, z: &[f64]) -> f64 {
        self.eval(z).norm_sqr()
    }

    /// Errors unless the grid covers `z0 +- 6 sigma` on every axis.
    pub fn check_coverage(&self, grid: &PhaseGrid) -> Result<()> {
        if grid.n() != self.n() {
            return Err(KvhError::DimensionMismatch(format!(
                "state has n = {}, grid has n = {}",
                self.n(),
                grid.n()
            )));
        }
        let z0 = self.center.to_z();
        for (a, c) in z0.iter().enumerate() {
            let need_lo = c - COVERAGE_SIGMAS * self.width;
            let need_hi = c + COVERAGE_SIGMAS * self.width;
            if grid.lower(a) > need_lo || grid.upper(a) < need_hi {
                return Err(KvhError::DomainTooSmall {
                    axis: a,
                    need_lo,
                    need_hi,
                    have_lo: grid.lower(a),
                    have_hi: grid.upper(a),
                });
            }
        }
        Ok(())
    }
}

/// Samples the Gaussian of `spec` on the grid and normalizes by quadrature.
pub fn make_initial(spec: &InitialStateSpec, grid: Arc<PhaseGrid>, hbar: f64) -> Result<GridWaveFunction> {
    spec.check_coverage(&grid)?;
    grid.check_stencil_resolution()?;
    let raw = GridWaveFunction::from_fn(grid, hbar, |z| spec.eval(z))?;
    let norm = norm_sq(&raw).sqrt();
    if norm == 0.0 {
        return Err(KvhError::InvalidState("initial state vanishes on the grid".into()));
    }
    Ok(raw.scaled(C64::new(1.0 / norm, 0.0)))
}

/// `<a|b> = int conj(a) b dz`.
pub fn inner(a: &GridWaveFunction, b: &GridWaveFunction) -> Result<C64> {
    a.check_compatible(b)?;
    let (x, y) = (&a.values, &b.values);
    Ok(weighted_sum(&a.grid, |i| x[i].conj() * y[i]) * a.grid.cell_volume())
}

/// `int |chi|^2 dz`.
pub fn norm_sq(chi: &GridWaveFunction) -> f64 {
    let v = &chi.values;
    weighted_sum(&chi.grid, |i| v[i].norm_sqr()) * chi.grid.cell_volume()
}

pub fn norm(chi: &GridWaveFunction) -> f64 {
    norm_sq(chi).sqrt()
}

/// `<chi|applied>`, with `applied = A chi`.
pub fn expectation(applied: &GridWaveFunction, chi: &GridWaveFunction) -> Result<C64> {
    inner(chi, applied)
}

pub fn density_kvn(chi: &GridWaveFunction) -> Vec<f64> {
    chi.values.par_iter().map(|v| v.norm_sqr()).collect()
}

/// All 2n first derivatives of the state.
pub fn gradient(chi: &GridWaveFunction) -> Vec<Vec<C64>> {
    (0..chi.grid.axes())
        .map(|a| partial_derivative(&chi.values, &chi.grid, a).expect("axis in range"))
        .collect()
}

fn divergence(grid: &PhaseGrid, components: &[Vec<C64>]) -> Vec<C64> {
    let mut out = vec![ZERO; grid.len()];
    for (a, f) in components.iter().enumerate() {
        accumulate_derivative(&mut out, f, grid, a, Coefficient::One, C64::new(1.0, 0.0));
    }
    out
}

/// KvH density `|chi|^2 + div J` with the real symplectic current.
pub fn density_kvh(chi: &GridWaveFunction) -> Vec<f64> {
    let grid = &chi.grid;
    let n = grid.n();
    let hbar = chi.hbar;
    let grads = gradient(chi);
    let current: Vec<Vec<C64>> = (0..2 * n)
        .map(|a| {
            // J_q = q|chi|^2/2 + hbar Im(chi* d_p chi), J_p = p|chi|^2/2 - hbar Im(chi* d_q chi)
            let (partner, sign) = if a < n { (a + n, 1.0) } else { (a - n, -1.0) };
            let dp = &grads[partner];
            chi.values
                .par_iter()
                .enumerate()
                .map(|(i, v)| {
                    let j = 0.5 * grid.coord(i, a) * v.norm_sqr() + sign * hbar * (v.conj() * dp[i]).im;
                    C64::new(j, 0.0)
                })
                .collect()
        })
        .collect();
    let div = divergence(grid, &current);
    chi.values
        .par_iter()
        .zip(div.par_iter())
        .map(|(v, d)| v.norm_sqr() + d.re)
        .collect()
}

/// `div(chi* (z chi/2 + i hbar grad chi))` without taking a real part. Its
/// imaginary part is `(hbar/2) Laplacian |chi|^2`.
pub fn literal_current_divergence(chi: &GridWaveFunction) -> Vec<C64> {
    let grid = &chi.grid;
    let hbar = chi.hbar;
    let grads = gradient(chi);
    let current: Vec<Vec<C64>> = (0..grid.axes())
        .map(|a| {
            let d = &grads[a];
            chi.values
                .par_iter()
                .enumerate()
                .map(|(i, v)| v.conj() * (0.5 * grid.coord(i, a) * v + C64::new(0.0, hbar) * d[i]))
                .collect()
        })
        .collect();
    divergence(grid, &current)
}

/// Discrete Laplacian of a real field (composed first differences).
pub fn laplacian(grid: &PhaseGrid, f: &[f64]) -> Result<Vec<f64>> {
    check_len(grid, f.len())?;
    let fc: Vec<C64> = f.iter().map(|v| C64::new(*v, 0.0)).collect();
    let mut out = vec![ZERO; grid.len()];
    for a in 0..grid.axes() {
        let d = partial_derivative(&fc, grid, a)?;
        accumulate_derivative(&mut out, &d, grid, a, Coefficient::One, C64::new(1.0, 0.0));
    }
    Ok(out.into_iter().map(|v| v.re).collect())
}

/// `int Im{chi*, chi} dz` with the canonical bracket applied to fields.
pub fn bracket_imaginary_integral(chi: &GridWaveFunction) -> f64 {
    let n = chi.n();
    let grads = gradient(chi);
    let field: Vec<f64> = (0..chi.grid.len())
        .into_par_iter()
        .map(|i| {
            let mut s = ZERO;
            for j in 0..n {
                s += grads[j][i].conj() * grads[j + n][i] - grads[j + n][i].conj() * grads[j][i];
            }
            s.im
        })
        .collect();
    integrate_real(&chi.grid, &field).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_space::{interior_max_norm, BAND};

    fn grid(n: usize, lo: f64, hi: f64, pts: usize) -> Arc<PhaseGrid> {
        Arc::new(PhaseGrid::uniform(n, lo, hi, pts).unwrap())
    }

    fn spec(z: &[f64], sigma: f64) -> InitialStateSpec {
        InitialStateSpec::gaussian(PhasePoint::from_z(z).unwrap(), sigma).unwrap()
    }

    #[test]
    fn initial_state_is_normalized() {
        let g = grid(1, -8.0, 8.0, 128);
        let chi = make_initial(&spec(&[0.0, 0.0], 1.0), g.clone(), 1.0).unwrap();
        assert!((norm_sq(&chi) - 1.0).abs() < 1e-10);
        // the analytic constant agrees with quadrature
        let raw = GridWaveFunction::from_fn(g, 1.0, |z| spec(&[0.0, 0.0], 1.0).eval(z)).unwrap();
        assert!((norm_sq(&raw) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn shifted_centers_have_equal_norms() {
        let g = grid(1, -8.0, 8.0, 96);
        let a = GridWaveFunction::from_fn(g.clone(), 1.0, |z| spec(&[0.5, -0.25], 1.0).eval(z)).unwrap();
        let b = GridWaveFunction::from_fn(g, 1.0, |z| spec(&[-0.5, 0.25], 1.0).eval(z)).unwrap();
        assert!((norm_sq(&a) - norm_sq(&b)).abs() < 1e-12);
    }

    #[test]
    fn linear_phase_leaves_modulus_unchanged() {
        let g = grid(1, -7.0, 7.0, 64);
        let s0 = spec(&[0.3, 0.1], 1.0);
        let s1 = s0.clone().with_phase(vec![1.5, -0.7]).unwrap();
        let a = make_initial(&s0, g.clone(), 1.0).unwrap();
        let b = make_initial(&s1, g, 1.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x.norm() - y.norm()).abs() <= 1e-15 * x.norm().max(1e-300));
        }
    }

    #[test]
    fn make_initial_checks_coverage() {
        let g = grid(1, -5.0, 5.0, 64);
        assert!(matches!(
            make_initial(&spec(&[0.0, 0.0], 1.0), g, 1.0),
            Err(KvhError::DomainTooSmall { axis: 0, .. })
        ));
    }

    #[test]
    fn inner_product_properties() {
        let g = grid(1, -8.0, 8.0, 64);
        let a = make_initial(&spec(&[0.5, 0.0], 1.0).with_phase(vec![0.3, 1.0]).unwrap(), g.clone(), 1.0).unwrap();
        let b = make_initial(&spec(&[-0.5, 0.2], 1.2).with_phase(vec![-1.0, 0.4]).unwrap(), g.clone(), 1.0).unwrap();
        let aa = inner(&a, &a).unwrap();
        assert!(aa.re > 0.0 && aa.im.abs() <= 1e-14);
        assert_eq!(inner(&a, &b).unwrap(), inner(&b, &a).unwrap().conj());
        // disjoint bumps
        let g2 = grid(1, -10.0, 10.0, 96);
        let bump = |c: f64| {
            move |z: &[f64]| {
                let r2 = (z[0] - c).powi(2) + z[1].powi(2);
                if r2 < 1.0 {
                    C64::new((-1.0 / (1.0 - r2)).exp(), 0.0)
                } else {
                    ZERO
                }
            }
        };
        let x = GridWaveFunction::from_fn(g2.clone(), 1.0, bump(-5.0)).unwrap();
        let y = GridWaveFunction::from_fn(g2, 1.0, bump(5.0)).unwrap();
        assert!(inner(&x, &y).unwrap().norm() <= 1e-14);
        let other = GridWaveFunction::zeros(grid(1, -8.0, 8.0, 64), 2.0).unwrap();
        assert_eq!(inner(&a, &other), Err(KvhError::GridMismatch));
    }

    #[test]
    fn kvn_density_examples() {
        let g = grid(1, -8.0, 8.0, 128);
        let chi = make_initial(&spec(&[0.0, 0.0], 1.0), g.clone(), 1.0).unwrap();
        let rho = density_kvn(&chi);
        assert!((integrate_real(&g, &rho).unwrap() - 1.0).abs() < 1e-10);
        let rotated = chi.scaled(C64::from_polar(1.0, 0.77));
        for (x, y) in rho.iter().zip(density_kvn(&rotated)) {
            assert!((x - y).abs() <= 1e-15 * x.max(1e-300));
        }
        let zero = GridWaveFunction::zeros(g, 1.0).unwrap();
        assert!(density_kvn(&zero).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kvh_density_of_real_gaussian() {
        let g = grid(1, -8.0, 8.0, 128);
        let s = spec(&[0.0, 0.0], 1.0);
        let chi = make_initial(&s, g.clone(), 1.0).unwrap();
        let rho = density_kvh(&chi);
        let centre = g.nearest_index(&[0.0, 0.0]);
        // 128 nodes on a symmetric axis have no node at 0; compare with the
        // closed form at every interior node instead
        assert!(centre.is_some());
        let mut z = [0.0; 2];
        let mut err: f64 = 0.0;
        for i in 0..g.len() {
            if g.is_interior(i, BAND) {
                g.coords_into(i, &mut z);
                err = err.max((rho[i] - s.density_kvh(&z, 1.0)).abs());
            }
        }
        assert!(err < 1e-4, "{err}");
        // closed form at the origin is twice |chi|^2
        let at0 = s.density_kvh(&[0.0, 0.0], 1.0);
        assert!((at0 - 2.0 * s.density_kvn(&[0.0, 0.0])).abs() < 1e-15);
        let total = integrate_real(&g, &rho).unwrap();
        assert!((total - norm_sq(&chi)).abs() < 1e-8);
    }

    #[test]
    fn kvh_density_with_phase_matches_closed_form() {
        let g = grid(1, -7.0, 7.0, 200);
        let s = spec(&[0.4, -0.3], 0.9).with_phase(vec![0.8, -1.1]).unwrap();
        let chi = GridWaveFunction::from_fn(g.clone(), 0.7, |z| s.eval(z)).unwrap();
        let rho = density_kvh(&chi);
        let mut z = [0.0; 2];
        let peak = s.density_kvn(&s.center().to_z());
        let mut err: f64 = 0.0;
        for i in 0..g.len() {
            if g.is_interior(i, BAND) {
                g.coords_into(i, &mut z);
                err = err.max((rho[i] - s.density_kvh(&z, 0.7)).abs());
            }
        }
        assert!(err < 1e-6 * peak, "{err} {peak}");
        let rotated = chi.scaled(C64::from_polar(1.0, -2.1));
        for (x, y) in rho.iter().zip(density_kvh(&rotated)) {
            assert!((x - y).abs() <= 1e-13 * peak);
        }
    }

    #[test]
    fn literal_residue_is_half_hbar_laplacian() {
        let g = grid(1, -8.0, 8.0, 128);
        let s = spec(&[0.2, 0.1], 1.0).with_phase(vec![0.5, 0.3]).unwrap();
        let hbar = 0.8;
        let chi = make_initial(&s, g.clone(), hbar).unwrap();
        let lit = literal_current_divergence(&chi);
        let lap = laplacian(&g, &density_kvn(&chi)).unwrap();
        let resid: Vec<C64> = lit
            .iter()
            .zip(&lap)
            .map(|(l, d)| C64::new(l.im - 0.5 * hbar * d, 0.0))
            .collect();
        assert!(interior_max_norm(&g, &resid, 2 * BAND) < 1e-6);
    }

    #[test]
    fn bracket_integral_vanishes() {
        let g = grid(1, -8.0, 8.0, 96);
        let s = spec(&[0.3, -0.2], 1.0).with_phase(vec![1.0, -0.5]).unwrap();
        let chi = make_initial(&s, g, 1.0).unwrap();
        assert!(bracket_imaginary_integral(&chi).abs() <= 1e-8);
    }

    #[test]
    fn decay_check() {
        let g = grid(1, -8.0, 8.0, 64);
        let ok = make_initial(&spec(&[0.0, 0.0], 0.7), g.clone(), 1.0).unwrap();
        assert!(ok.check_decayed().is_ok());
        let wide = GridWaveFunction::from_fn(g, 1.0, |z| spec(&[0.0, 0.0], 3.0).eval(z)).unwrap();
        assert!(matches!(wide.check_decayed(), Err(KvhError::BoundaryNotDecayed { .. })));
    }

    #[test]
    fn csv_export_has_one_row_per_node() {
        let g = Arc::new(PhaseGrid::uniform(1, 0.0, 1.0, 2).unwrap());
        let chi = GridWaveFunction::from_fn(g, 1.0, |z| C64::new(z[0], z[1])).unwrap();
        let mut buf = Vec::new();
        chi.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "z1,z2,re,im");
        assert_eq!(lines.len(), 5);
        let last: Vec<f64> = lines[4].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(last, vec![1.0, 1.0, 1.0, 1.0]);
    }
}
