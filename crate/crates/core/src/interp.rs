//! Tensor-product cubic Hermite resampling over one coordinate block.
//!
//! Slopes and mixed slopes at the nodes come from the same central
//! differences as every other derivative, so a small displacement
//! reproduces the grid's own first-order operators.

use rayon::prelude::*;

use crate::phase_space::{accumulate_derivative, Coefficient, PhaseGrid};
use crate::C64;

/// Offsets below this fraction of a cell snap onto the node.
const SNAP: f64 = 1e-9;

/// Affine map `x -> m x + shift` acting on the q-block or the p-block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockMap {
    pub first_axis: usize,
    pub m: [[f64; 3]; 3],
    pub shift: [f64; 3],
}

#[inline]
fn hermite(s: f64) -> [[f64; 2]; 2] {
    let s2 = s * s;
    let s3 = s2 * s;
    // [corner][0 = value basis, 1 = slope basis]
    [
        [2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s],
        [-2.0 * s3 + 3.0 * s2, s3 - s2],
    ]
}

/// Returns `g(z) = f(..., m x + shift, ...)` where `x` is the block of `z`
/// selected by the map. Source points outside the domain read zero.
pub(crate) fn resample_block(values: &[C64], grid: &PhaseGrid, map: &BlockMap) -> Vec<C64> {
    let d = grid.n();
    let axes: Vec<usize> = (map.first_axis..map.first_axis + d).collect();

    // slope fields for every subset of the block axes, indexed by bitmask
    let mut fields: Vec<Vec<C64>> = Vec::with_capacity(1 << d);
    fields.push(values.to_vec());
    for mask in 1usize..(1 << d) {
        let low = mask.trailing_zeros() as usize;
        let parent = &fields[mask & (mask - 1)];
        let mut out = vec![C64::new(0.0, 0.0); values.len()];
        accumulate_derivative(&mut out, parent, grid, axes[low], Coefficient::One, C64::new(1.0, 0.0));
        fields.push(out);
    }

    let spacing: Vec<f64> = axes.iter().map(|&a| grid.spacing(a)).collect();
    let origin: Vec<f64> = axes.iter().map(|&a| grid.axis_coords(a)[0]).collect();

    (0..values.len())
        .into_par_iter()
        .map(|idx| {
            let mut x = [0.0; 3];
            for (k, &a) in axes.iter().enumerate() {
                x[k] = grid.coord(idx, a);
            }
            // node index of idx with the block coordinates removed
            let mut base = idx;
            for &a in &axes {
                base -= grid.axis_index(idx, a) * grid.stride(a);
            }
            let mut cell = [0usize; 3];
            let mut basis = [[[0.0; 2]; 2]; 3];
            for k in 0..d {
                let mut src = map.shift[k];
                for (l, xl) in x.iter().enumerate().take(d) {
                    src += map.m[k][l] * xl;
                }
                let npts = grid.points(axes[k]);
                let mut t = (src - origin[k]) / spacing[k];
                let nearest = t.round();
                if (t - nearest).abs() < SNAP {
                    t = nearest;
                }
                if t < 0.0 || t > (npts - 1) as f64 {
                    return C64::new(0.0, 0.0);
                }
                let i0 = (t.floor() as usize).min(npts - 2);
                cell[k] = i0;
                basis[k] = hermite(t - i0 as f64);
            }

            let mut acc = C64::new(0.0, 0.0);
            for corner in 0usize..(1 << d) {
                let mut node = base;
                for k in 0..d {
                    node += (cell[k] + ((corner >> k) & 1)) * grid.stride(axes[k]);
                }
                for (mask, field) in fields.iter().enumerate() {
                    let mut w = 1.0;
                    for k in 0..d {
                        let c = (corner >> k) & 1;
                        w *= if (mask >> k) & 1 == 1 {
                            basis[k][c][1] * spacing[k]
                        } else {
                            basis[k][c][0]
                        };
                    }
                    if w != 0.0 {
                        acc += field[node] * w;
                    }
                }
            }
            acc
        })
        .collect()
}
