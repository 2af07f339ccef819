//! Cubic B-spline interpolation with a linear-extrapolation boundary.
//!
//! Coefficients outside the grid are ghosts reflected through the end
//! coefficient (`c[-k] = 2·c[0] - c[k]`), which makes the end rows of the
//! interpolation system collapse to `c[0] = f[0]` and lets the spline
//! reproduce constants and linear ramps exactly up to the border.

use crate::volume::Volume;

use super::{PreprocessError, Result};

/// Solve the cubic interpolation system along one line in place.
///
/// Rows: `c[0] = f[0]`, `c[n-1] = f[n-1]`, and `(c[i-1] + 4c[i] + c[i+1]) / 6 = f[i]`.
fn prefilter_line(f: &mut [f64], scratch: &mut Vec<f64>) {
    let n = f.len();
    if n < 3 {
        return;
    }
    // Unknowns c[1..n-1]; move the known end coefficients to the right side.
    let m = n - 2;
    let mut rhs: Vec<f64> = (1..n - 1).map(|i| 6.0 * f[i]).collect();
    rhs[0] -= f[0];
    rhs[m - 1] -= f[n - 1];
    // Thomas algorithm for the constant tridiagonal (1, 4, 1).
    scratch.clear();
    scratch.resize(m, 0.0);
    let mut denom = 4.0;
    scratch[0] = 1.0 / denom;
    rhs[0] /= denom;
    for i in 1..m {
        denom = 4.0 - scratch[i - 1];
        scratch[i] = 1.0 / denom;
        rhs[i] = (rhs[i] - rhs[i - 1]) / denom;
    }
    for i in (0..m - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
    f[1..n - 1].copy_from_slice(&rhs);
}

/// Interpolation coefficients whose cubic B-spline passes through every sample.
pub fn bspline_prefilter(vol: &Volume) -> Result<Volume> {
    let dims = vol.dims();
    if let Some(axis) = dims.iter().position(|&d| d < 2) {
        return Err(PreprocessError::DegenerateAxis { axis, len: dims[axis] });
    }
    let mut c: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    let [nx, ny, nz] = dims;
    let stride = [1, nx, nx * ny];
    let mut line = Vec::new();
    let mut scratch = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let s = stride[axis];
        let lines: Vec<usize> = (0..nx * ny * nz)
            .filter(|&i| (i / s) % n == 0)
            .collect();
        for start in lines {
            line.clear();
            line.extend((0..n).map(|k| c[start + k * s]));
            prefilter_line(&mut line, &mut scratch);
            for (k, v) in line.iter().enumerate() {
                c[start + k * s] = *v;
            }
        }
    }
    Ok(vol.with_data(c.into_iter().map(|v| v as f32).collect())?)
}

/// Cubic B-spline basis weights for fractional offset `t ∈ [0, 1)`, taps -1..=2.
#[inline]
pub(crate) fn cubic_weights(t: f64) -> [f64; 4] {
    let u = 1.0 - t;
    [
        u * u * u / 6.0,
        (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0,
        (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
        t * t * t / 6.0,
    ]
}

/// Coefficient lookup along one axis with linear-extrapolation ghosts.
/// Returns `(index, anchor)`: the value is `c[index]`, or `2·c[anchor] - c[index]` for a ghost.
#[inline]
pub(crate) fn ghost(i: isize, n: usize) -> (usize, Option<usize>) {
    let last = n as isize - 1;
    if i < 0 {
        ((-i).min(last) as usize, Some(0))
    } else if i > last {
        ((2 * last - i).max(0) as usize, Some(last as usize))
    } else {
        (i as usize, None)
    }
}

/// Sample the spline defined by coefficient volume `c` at a continuous index
/// already clamped into the grid.
pub(crate) fn sample_bspline(c: &Volume, idx: [f64; 3]) -> f64 {
    let dims = c.dims();
    let data = c.data();
    let mut base = [0isize; 3];
    let mut w = [[0.0; 4]; 3];
    for a in 0..3 {
        let f = idx[a].floor();
        base[a] = f as isize;
        w[a] = cubic_weights(idx[a] - f);
    }
    // Gather the 4 taps per axis via ghost indices, then separable sum.
    let taps = |a: usize| -> [(usize, Option<usize>); 4] {
        std::array::from_fn(|k| ghost(base[a] + k as isize - 1, dims[a]))
    };
    let tx = taps(0);
    let ty = taps(1);
    let tz = taps(2);
    let at = |x: usize, y: usize, z: usize| data[(z * dims[1] + y) * dims[0] + x] as f64;
    // Value of the x-extended line at (y, z) for tap kx.
    let line_val = |kx: usize, y: usize, z: usize| -> f64 {
        let (ix, anchor) = tx[kx];
        match anchor {
            None => at(ix, y, z),
            Some(a) => 2.0 * at(a, y, z) - at(ix, y, z),
        }
    };
    let plane_val = |kx: usize, ky: usize, z: usize| -> f64 {
        let (iy, anchor) = ty[ky];
        match anchor {
            None => line_val(kx, iy, z),
            Some(a) => 2.0 * line_val(kx, a, z) - line_val(kx, iy, z),
        }
    };
    let vol_val = |kx: usize, ky: usize, kz: usize| -> f64 {
        let (iz, anchor) = tz[kz];
        match anchor {
            None => plane_val(kx, ky, iz),
            Some(a) => 2.0 * plane_val(kx, ky, a) - plane_val(kx, ky, iz),
        }
    };
    let mut sum = 0.0;
    for kz in 0..4 {
        if w[2][kz] == 0.0 {
            continue;
        }
        let mut sy = 0.0;
        for ky in 0..4 {
            if w[1][ky] == 0.0 {
                continue;
            }
            let mut sx = 0.0;
            for kx in 0..4 {
                if w[0][kx] != 0.0 {
                    sx += w[0][kx] * vol_val(kx, ky, kz);
                }
            }
            sy += w[1][ky] * sx;
        }
        sum += w[2][kz] * sy;
    }
    sum
}
