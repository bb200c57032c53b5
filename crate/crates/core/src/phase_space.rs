//! Discretized phase space: points, rectangular grids, quadrature and
//! sixth-order central differences.
//!
//! Axes are ordered `q_1..q_n, p_1..p_n` and flattened row-major, so axis 0
//! varies slowest. Fields are treated as zero outside the domain.

use std::ops::{Add, Mul};

use rayon::prelude::*;

use crate::{KvhError, Result, C64};

/// Width of the stencil half-band; the outermost `BAND` layers on each axis
/// are the boundary band.
pub const BAND: usize = STENCIL_HALF;

/// Half-width of the central-difference stencil.
pub const STENCIL_HALF: usize = 3;
const STENCIL_WEIGHTS: [f64; STENCIL_HALF] = [45.0 / 60.0, -9.0 / 60.0, 1.0 / 60.0];

/// Smallest per-axis node count accepted for states.
pub const MIN_STENCIL_POINTS: usize = 8;

/// A point `z = (q, p)` of phase space with `n` spatial dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhasePoint {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if q.len() != p.len() {
            return Err(KvhError::DimensionMismatch(format!(
                "q has {} components, p has {}",
                q.len(),
                p.len()
            )));
        }
        if !(1..=3).contains(&q.len()) {
            return Err(KvhError::UnsupportedDimension {
                op: "PhasePoint",
                n: q.len(),
            });
        }
        if q.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(KvhError::InvalidState("non-finite phase-space coordinate".into()));
        }
        Ok(Self { q, p })
    }

    /// Builds a point from the concatenated coordinates `(q, p)`.
    pub fn from_z(z: &[f64]) -> Result<Self> {
        if !z.len().is_multiple_of(2) {
            return Err(KvhError::DimensionMismatch(format!(
                "phase-space vector has odd length {}",
                z.len()
            )));
        }
        let n = z.len() / 2;
        Self::new(z[..n].to_vec(), z[n..].to_vec())
    }

    pub fn origin(n: usize) -> Self {
        Self {
            q: vec![0.0; n],
            p: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn to_z(&self) -> Vec<f64> {
        let mut z = self.q.clone();
        z.extend_from_slice(&self.p);
        z
    }
}

/// Rectangular node grid over the 2n phase-space axes.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    n: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    points: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    coords: Vec<Vec<f64>>,
    len: usize,
}

impl PhaseGrid {
    pub fn new(n: usize, lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        if !(1..=3).contains(&n) {
            return Err(KvhError::UnsupportedDimension { op: "PhaseGrid", n });
        }
        let axes = 2 * n;
        for (name, len) in [("lower", lower.len()), ("upper", upper.len()), ("points", points.len())] {
            if len != axes {
                return Err(KvhError::InvalidGrid(format!(
                    "{name} has {len} entries, expected {axes}"
                )));
            }
        }
        for a in 0..axes {
            if !(lower[a].is_finite() && upper[a].is_finite()) || lower[a] >= upper[a] {
                return Err(KvhError::InvalidGrid(format!(
                    "axis {a}: bounds [{}, {}] are not strictly ordered",
                    lower[a], upper[a]
                )));
            }
            if points[a] < 2 {
                return Err(KvhError::InvalidGrid(format!(
                    "axis {a}: {} points, at least 2 required",
                    points[a]
                )));
            }
        }
        let len = points
            .iter()
            .try_fold(1usize, |acc, &m| acc.checked_mul(m))
            .ok_or_else(|| KvhError::InvalidGrid("grid size overflows".into()))?;

        let spacing: Vec<f64> = (0..axes)
            .map(|a| (upper[a] - lower[a]) / (points[a] - 1) as f64)
            .collect();
        let mut strides = vec![1usize; axes];
        for a in (0..axes - 1).rev() {
            strides[a] = strides[a + 1] * points[a + 1];
        }
        let coords = (0..axes)
            .map(|a| {
                let center = 0.5 * (lower[a] + upper[a]);
                let mid = 0.5 * (points[a] - 1) as f64;
                (0..points[a])
                    .map(|i| center + (i as f64 - mid) * spacing[a])
                    .collect()
            })
            .collect();

        Ok(Self {
            n,
            lower,
            upper,
            points,
            spacing,
            strides,
            coords,
            len,
        })
    }

    /// Grids that carry states for differentiation or propagation need at
    /// least [`MIN_STENCIL_POINTS`] nodes per axis.
    pub fn check_stencil_resolution(&self) -> Result<()> {
        match self.points.iter().position(|&m| m < MIN_STENCIL_POINTS) {
            Some(a) => Err(KvhError::InvalidGrid(format!(
                "axis {a}: {} points, at least {MIN_STENCIL_POINTS} required",
                self.points[a]
            ))),
            None => Ok(()),
        }
    }

    /// Same bounds and point count on every axis.
    pub fn uniform(n: usize, lower: f64, upper: f64, points: usize) -> Result<Self> {
        Self::new(n, vec![lower; 2 * n], vec![upper; 2 * n], vec![points; 2 * n])
    }

    /// Grid centred on `center` with half-width `half_width` on every axis.
    pub fn centered(center: &PhasePoint, half_width: f64, points: usize) -> Result<Self> {
        let z = center.to_z();
        Self::new(
            center.n(),
            z.iter().map(|c| c - half_width).collect(),
            z.iter().map(|c| c + half_width).collect(),
            vec![points; z.len()],
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn axes(&self) -> usize {
        2 * self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lower(&self, axis: usize) -> f64 {
        self.lower[axis]
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.upper[axis]
    }

    pub fn points(&self, axis: usize) -> usize {
        self.points[axis]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.spacing[axis]
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Node coordinates along one axis.
    pub fn axis_coords(&self, axis: usize) -> &[f64] {
        &self.coords[axis]
    }

    #[inline]
    pub fn axis_index(&self, idx: usize, axis: usize) -> usize {
        (idx / self.strides[axis]) % self.points[axis]
    }

    #[inline]
    pub fn coord(&self, idx: usize, axis: usize) -> f64 {
        self.coords[axis][self.axis_index(idx, axis)]
    }

    /// Writes the coordinates of node `idx` into `z` (length 2n).
    #[inline]
    pub fn coords_into(&self, idx: usize, z: &mut [f64]) {
        for (a, slot) in z.iter_mut().enumerate().take(self.axes()) {
            *slot = self.coord(idx, a);
        }
    }

    pub fn point(&self, idx: usize) -> PhasePoint {
        let mut z = vec![0.0; self.axes()];
        self.coords_into(idx, &mut z);
        PhasePoint {
            q: z[..self.n].to_vec(),
            p: z[self.n..].to_vec(),
        }
    }

    /// Rectangle-rule weight of an interior node.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn volume(&self) -> f64 {
        (0..self.axes()).map(|a| self.upper[a] - self.lower[a]).product()
    }

    /// Whether the node lies within `band` layers of any face.
    pub fn in_band(&self, idx: usize, band: usize) -> bool {
        (0..self.axes()).any(|a| {
            let i = self.axis_index(idx, a);
            i < band || i + band >= self.points[a]
        })
    }

    /// Whether the node lies at least `band` layers away from every face.
    pub fn is_interior(&self, idx: usize, band: usize) -> bool {
        !self.in_band(idx, band)
    }

    /// Finds the node nearest to `z`, if `z` lies inside the domain.
    pub fn nearest_index(&self, z: &[f64]) -> Option<usize> {
        let mut idx = 0;
        for a in 0..self.axes() {
            let t = (z[a] - self.coords[a][0]) / self.spacing[a];
            if !(-0.5..=(self.points[a] as f64 - 0.5)).contains(&t) {
                return None;
            }
            idx += (t.round() as usize).min(self.points[a] - 1) * self.strides[a];
        }
        Some(idx)
    }
}

/// All nodes in lexicographic order, q-axes first.
pub fn grid_points(grid: &PhaseGrid) -> Vec<PhasePoint> {
    (0..grid.len()).map(|i| grid.point(i)).collect()
}

fn pairwise<T: Copy + Add<Output = T>>(v: &[T], zero: T) -> T {
    match v.len() {
        0 => zero,
        1 => v[0],
        len if len <= 8 => v[1..].iter().fold(v[0], |acc, &x| acc + x),
        len => {
            let mid = len / 2;
            pairwise(&v[..mid], zero) + pairwise(&v[mid..], zero)
        }
    }
}

/// Quadrature sum `sum_i omega_i f(i)` with unit interior weights and halved
/// weights on boundary faces (so the total weight is the domain volume once
/// scaled by [`PhaseGrid::cell_volume`]).
///
/// Lines along the fastest axis are summed sequentially, line sums combine in
/// a fixed pairwise tree. The result does not depend on the worker count.
pub fn weighted_sum<T, F>(grid: &PhaseGrid, f: F) -> T
where
    T: Copy + Default + Send + Sync + Add<Output = T> + Mul<f64, Output = T>,
    F: Fn(usize) -> T + Sync,
{
    let axes = grid.axes();
    let line = grid.points(axes - 1);
    let lines = grid.len() / line;
    let line_sums: Vec<T> = (0..lines)
        .into_par_iter()
        .map(|r| {
            let base = r * line;
            let mut outer = 1.0;
            for a in 0..axes - 1 {
                let i = grid.axis_index(base, a);
                if i == 0 || i + 1 == grid.points(a) {
                    outer *= 0.5;
                }
            }
            let mut acc = f(base) * 0.5;
            for j in 1..line - 1 {
                acc = acc + f(base + j);
            }
            acc = acc + f(base + line - 1) * 0.5;
            acc * outer
        })
        .collect();
    pairwise(&line_sums, T::default())
}

/// Quadrature of a complex field over the grid.
pub fn integrate(grid: &PhaseGrid, samples: &[C64]) -> Result<C64> {
    check_len(grid, samples.len())?;
    Ok(weighted_sum(grid, |i| samples[i]) * grid.cell_volume())
}

/// Quadrature of a real field over the grid.
pub fn integrate_real(grid: &PhaseGrid, samples: &[f64]) -> Result<f64> {
    check_len(grid, samples.len())?;
    Ok(weighted_sum(grid, |i| samples[i]) * grid.cell_volume())
}

pub(crate) fn check_len(grid: &PhaseGrid, found: usize) -> Result<()> {
    if found != grid.len() {
        return Err(KvhError::LengthMismatch {
            expected: grid.len(),
            found,
        });
    }
    Ok(())
}

pub(crate) fn check_axis(grid: &PhaseGrid, axis: usize) -> Result<()> {
    if axis >= grid.axes() {
        return Err(KvhError::AxisOutOfRange {
            axis,
            axes: grid.axes(),
        });
    }
    Ok(())
}

/// Pointwise multiplier applied to a derivative before accumulation.
#[derive(Debug, Clone, Copy)]
pub enum Coefficient<'a> {
    One,
    /// One value per grid node.
    Field(&'a [f64]),
    /// The node's coordinate along the given axis.
    Coordinate(usize),
}

/// Coefficient over one contiguous run of nodes.
#[derive(Clone, Copy)]
enum RunCoef<'a> {
    Const(f64),
    Slice(&'a [f64]),
}

/// Central-difference weights `w_k` for offsets `k = 1..=HALF`, so that
/// `D f_i = sum_k w_k (f_{i+k} - f_{i-k}) / h`.
const WEIGHTS: [f64; STENCIL_HALF] = STENCIL_WEIGHTS;

const CZERO: C64 = C64::new(0.0, 0.0);

#[inline]
fn as_reals(x: &[C64]) -> &[f64] {
    bytemuck::cast_slice(x)
}

/// `out[j] += factor * c_j * sum_k w_k (hi_k[j] - lo_k[j])`; missing
/// neighbours are zero ghost cells.
#[inline]
fn accumulate_run(
    out: &mut [C64],
    hi: [Option<&[C64]>; STENCIL_HALF],
    lo: [Option<&[C64]>; STENCIL_HALF],
    coef: RunCoef<'_>,
    factor: C64,
) {
    let len = out.len();
    if let ([Some(h1), Some(h2), Some(h3)], [Some(l1), Some(l2), Some(l3)]) = (hi, lo) {
        let (h1, h2, h3) = (&h1[..len], &h2[..len], &h3[..len]);
        let (l1, l2, l3) = (&l1[..len], &l2[..len], &l3[..len]);
        let d = |j: usize| {
            (h1[j] - l1[j]) * WEIGHTS[0] + (h2[j] - l2[j]) * WEIGHTS[1] + (h3[j] - l3[j]) * WEIGHTS[2]
        };
        match (coef, factor.im == 0.0) {
            (RunCoef::Const(c), true) => {
                // interleaved re/im view: the same real stencil on 2 len values
                let fc = factor.re * c;
                let o: &mut [f64] = bytemuck::cast_slice_mut(out);
                let (h1, h2, h3, l1, l2, l3) = (as_reals(h1), as_reals(h2), as_reals(h3), as_reals(l1), as_reals(l2), as_reals(l3));
                let m = o.len();
                let (h1, h2, h3, l1, l2, l3) = (&h1[..m], &h2[..m], &h3[..m], &l1[..m], &l2[..m], &l3[..m]);
                for j in 0..m {
                    o[j] += fc * ((h1[j] - l1[j]) * WEIGHTS[0] + (h2[j] - l2[j]) * WEIGHTS[1] + (h3[j] - l3[j]) * WEIGHTS[2]);
                }
            }
            (RunCoef::Const(c), false) => {
                let fc = factor * c;
                for (j, o) in out.iter_mut().enumerate() {
                    *o += fc * d(j);
                }
            }
            (RunCoef::Slice(c), true) => {
                let c = &c[..len];
                let fr = factor.re;
                let o: &mut [f64] = bytemuck::cast_slice_mut(out);
                let (h1, h2, h3, l1, l2, l3) = (as_reals(h1), as_reals(h2), as_reals(h3), as_reals(l1), as_reals(l2), as_reals(l3));
                let m = o.len();
                let (h1, h2, h3, l1, l2, l3) = (&h1[..m], &h2[..m], &h3[..m], &l1[..m], &l2[..m], &l3[..m]);
                for j in 0..m {
                    let cj = fr * c[j / 2];
                    o[j] += cj * ((h1[j] - l1[j]) * WEIGHTS[0] + (h2[j] - l2[j]) * WEIGHTS[1] + (h3[j] - l3[j]) * WEIGHTS[2]);
                }
            }
            (RunCoef::Slice(c), false) => {
                let c = &c[..len];
                for (j, o) in out.iter_mut().enumerate() {
                    *o += factor * (d(j) * c[j]);
                }
            }
        }
        return;
    }
    for (j, o) in out.iter_mut().enumerate() {
        let mut d = CZERO;
        for k in 0..STENCIL_HALF {
            if let Some(h) = hi[k] {
                d += h[j] * WEIGHTS[k];
            }
            if let Some(l) = lo[k] {
                d -= l[j] * WEIGHTS[k];
            }
        }
        let c = match coef {
            RunCoef::Const(c) => c,
            RunCoef::Slice(c) => c[j],
        };
        *o += factor * (d * c);
    }
}

/// `out += scale * c(z) * D_axis f`, with `D_axis` the central difference
/// and zero ghost cells.
pub fn accumulate_derivative(
    out: &mut [C64],
    f: &[C64],
    grid: &PhaseGrid,
    axis: usize,
    coeff: Coefficient<'_>,
    scale: C64,
) {
    let n_a = grid.points(axis);
    let s = grid.stride(axis);
    let factor = scale / grid.spacing(axis);
    let axis_coords = grid.axis_coords(axis);

    if s == 1 {
        // contiguous lines along the last axis; a run is one node
        out.par_chunks_mut(n_a).enumerate().for_each(|(b, out_line)| {
            let base = b * n_a;
            let line = &f[base..base + n_a];
            let (lead, interior_and_tail) = out_line.split_at_mut(STENCIL_HALF.min(n_a));
            let line_coef = |i: usize| -> f64 {
                match coeff {
                    Coefficient::One => 1.0,
                    Coefficient::Field(v) => v[base + i],
                    Coefficient::Coordinate(c) if c == axis => axis_coords[i],
                    Coefficient::Coordinate(c) => grid.coord(base, c),
                }
            };
            let edge = |i: usize, o: &mut C64| {
                let mut d = CZERO;
                for (k, w) in WEIGHTS.iter().enumerate() {
                    let hi = if i + k + 1 < n_a { line[i + k + 1] } else { CZERO };
                    let lo = if i > k { line[i - k - 1] } else { CZERO };
                    d += (hi - lo) * *w;
                }
                *o += factor * (d * line_coef(i));
            };
            for (i, o) in lead.iter_mut().enumerate() {
                edge(i, o);
            }
            if n_a <= 2 * STENCIL_HALF {
                for (i, o) in interior_and_tail.iter_mut().enumerate() {
                    edge(i + STENCIL_HALF, o);
                }
                return;
            }
            let m = n_a - 2 * STENCIL_HALF;
            let (interior, tail) = interior_and_tail.split_at_mut(m);
            let coef = match coeff {
                Coefficient::One => RunCoef::Const(1.0),
                Coefficient::Field(v) => RunCoef::Slice(&v[base + STENCIL_HALF..base + STENCIL_HALF + m]),
                Coefficient::Coordinate(c) if c == axis => RunCoef::Slice(&axis_coords[STENCIL_HALF..STENCIL_HALF + m]),
                Coefficient::Coordinate(c) => RunCoef::Const(grid.coord(base, c)),
            };
            let at = |off: isize| Some(&line[(STENCIL_HALF as isize + off) as usize..][..m]);
            accumulate_run(interior, [at(1), at(2), at(3)], [at(-1), at(-2), at(-3)], coef, factor);
            for (i, o) in tail.iter_mut().enumerate() {
                edge(STENCIL_HALF + m + i, o);
            }
        });
        return;
    }

    // rows of `s` contiguous nodes sharing the index along `axis`
    let faster: Option<Vec<f64>> = match coeff {
        Coefficient::Coordinate(c) if c > axis => {
            let sc = grid.stride(c);
            let nc = grid.points(c);
            let coords = grid.axis_coords(c);
            Some((0..s).map(|j| coords[(j / sc) % nc]).collect())
        }
        _ => None,
    };
    let row = |out_row: &mut [C64], block_base: usize, i: usize| {
        let base = block_base + i * s;
        let mut hi = [None; STENCIL_HALF];
        let mut lo = [None; STENCIL_HALF];
        for k in 0..STENCIL_HALF {
            if i + k + 1 < n_a {
                hi[k] = Some(&f[base + (k + 1) * s..base + (k + 2) * s]);
            }
            if i > k {
                lo[k] = Some(&f[base - (k + 1) * s..base - k * s]);
            }
        }
        let coef = match coeff {
            Coefficient::One => RunCoef::Const(1.0),
            Coefficient::Field(v) => RunCoef::Slice(&v[base..base + s]),
            Coefficient::Coordinate(c) if c == axis => RunCoef::Const(axis_coords[i]),
            Coefficient::Coordinate(c) if c < axis => RunCoef::Const(grid.coord(base, c)),
            Coefficient::Coordinate(_) => RunCoef::Slice(faster.as_deref().expect("precomputed")),
        };
        accumulate_run(out_row, hi, lo, coef, factor);
    };

    if s >= 256 {
        out.par_chunks_mut(s).enumerate().for_each(|(r, out_row)| {
            let block = r / n_a;
            row(out_row, block * n_a * s, r % n_a);
        });
    } else {
        out.par_chunks_mut(n_a * s)
            .enumerate()
            .for_each(|(b, out_block)| {
                for (i, out_row) in out_block.chunks_mut(s).enumerate() {
                    row(out_row, b * n_a * s, i);
                }
            });
    }
}

/// Sixth-order central derivative along `axis` with zero ghost cells.
pub fn partial_derivative(field: &[C64], grid: &PhaseGrid, axis: usize) -> Result<Vec<C64>> {
    check_len(grid, field.len())?;
    check_axis(grid, axis)?;
    let mut out = vec![C64::new(0.0, 0.0); field.len()];
    accumulate_derivative(&mut out, field, grid, axis, Coefficient::One, C64::new(1.0, 0.0));
    Ok(out)
}

/// Largest magnitude in the boundary band divided by the largest magnitude
/// overall (0 for the zero field).
pub fn boundary_band_ratio(grid: &PhaseGrid, values: &[C64]) -> f64 {
    let (band, all) = values
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let m = v.norm();
            (if grid.in_band(i, BAND) { m } else { 0.0 }, m)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    if all == 0.0 {
        0.0
    } else {
        band / all
    }
}

/// Largest magnitude over nodes at least `band` layers from every face.
pub fn interior_max_norm(grid: &PhaseGrid, values: &[C64], band: usize) -> f64 {
    values
        .par_iter()
        .enumerate()
        .filter(|(i, _)| grid.is_interior(*i, band))
        .map(|(_, v)| v.norm())
        .reduce(|| 0.0, f64::max)
}

pub fn max_norm(values: &[C64]) -> f64 {
    values.par_iter().map(|v| v.norm()).reduce(|| 0.0, f64::max)
}
