//! Dense kernels behind the tape operations: a checked GEMM wrapper and the
//! im2col / col2im pair that lowers 3D (transposed) convolution onto it.

use crate::scalar::Scalar;

/// Row-major `C = A' * B' + beta * C` where `A'` is `A` or `Aᵀ`.
///
/// `A'` is `m×k`, `B'` is `k×n`, `C` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, a, [rsa, csa], b, [rsb, csb], beta, c, n);
}

/// General-stride GEMM: `A'[i][p] = a[i*sa[0] + p*sa[1]]`, likewise for `B'`;
/// `C` is row-major with leading dimension `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: [usize; 2],
    b: &[T],
    sb: [usize; 2],
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * sa[0] + (k - 1) * sa[1] < a.len(), "gemm: A too small");
        assert!((k - 1) * sb[0] + (n - 1) * sb[1] < b.len(), "gemm: B too small");
    }
    assert!(ldc >= n && (m - 1) * ldc + n <= c.len(), "gemm: C too small");
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            sa[0] as isize,
            sa[1] as isize,
            b.as_ptr(),
            sb[0] as isize,
            sb[1] as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Geometry of a strided, zero-padded 3D cross-correlation from an input
/// grid with `channels` channels onto an output grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || kernel[a] == 0 {
                return None;
            }
            let padded = input[a] + 2 * pad[a];
            if padded < kernel[a] {
                return None;
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Some(Self {
            channels,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    /// True when im2col would be the identity (1×1×1 kernel, unit stride).
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap `k`:
    /// output positions whose input index `o*s + k - p` is inside the grid.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.stride[axis];
        let p = self.pad[axis];
        let n_in = self.input[axis];
        let n_out = self.output[axis];
        // o*s + k >= p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // o*s + k - p <= n_in - 1
        let hi = if n_in + p > k {
            ((n_in + p - k - 1) / s + 1).min(n_out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Number of output lines (runs of `W_out` positions) lowered per chunk so the
/// column buffer stays near the L2 cache size.
pub(crate) fn lines_per_chunk(g: &ConvGeom) -> usize {
    const TARGET_ELEMS: usize = 1 << 17;
    let [od, oh, ow] = g.output;
    (TARGET_ELEMS / (g.rows() * ow).max(1)).clamp(1, od * oh)
}

/// Lower output lines `[l0, l1)` of one sample `(channels, D, H, W)` to a
/// `(rows × (l1 - l0)·W_out)` matrix. Line `l` is output `(l / H_out, l % H_out)`.
pub(crate) fn im2col_lines<T: Scalar>(x: &[T], g: &ConvGeom, l0: usize, l1: usize, cols: &mut [T]) {
    let [kd, kh, kw] = g.kernel;
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let in_len = g.in_len();
    let width = (l1 - l0) * ow;
    debug_assert_eq!(x.len(), g.channels * in_len);
    debug_assert!(cols.len() >= g.rows() * width);
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * in_len..(c + 1) * in_len];
        for kz in 0..kd {
            let (z_lo, z_hi) = g.valid_range(0, kz);
            for ky in 0..kh {
                let (y_lo, y_hi) = g.valid_range(1, ky);
                for kx in 0..kw {
                    let (x_lo, x_hi) = g.valid_range(2, kx);
                    let dst = &mut cols[row * width..(row + 1) * width];
                    for l in l0..l1 {
                        let (oz, oy) = (l / oh, l % oh);
                        let dst_row = &mut dst[(l - l0) * ow..(l - l0 + 1) * ow];
                        if oz < z_lo || oz >= z_hi || oy < y_lo || oy >= y_hi {
                            dst_row.fill(T::zero());
                            continue;
                        }
                        let iz = oz * g.stride[0] + kz - g.pad[0];
                        let iy = oy * g.stride[1] + ky - g.pad[1];
                        let src_row = &xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                        dst_row[..x_lo].fill(T::zero());
                        dst_row[x_hi..].fill(T::zero());
                        if g.stride[2] == 1 {
                            let ix0 = x_lo + kx - g.pad[2];
                            dst_row[x_lo..x_hi].copy_from_slice(&src_row[ix0..ix0 + (x_hi - x_lo)]);
                        } else {
                            for ox in x_lo..x_hi {
                                dst_row[ox] = src_row[ox * g.stride[2] + kx - g.pad[2]];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Whole-sample [`im2col_lines`].
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    im2col_lines(x, g, 0, g.output[0] * g.output[1], cols);
}

/// Adjoint of [`im2col_lines`]: scatter-add a `(rows × (l1 - l0)·W_out)`
/// matrix back onto one sample `(channels, D, H, W)`.
pub(crate) fn col2im_lines<T: Scalar>(cols: &[T], g: &ConvGeom, l0: usize, l1: usize, x: &mut [T]) {
    let [kd, kh, kw] = g.kernel;
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let in_len = g.in_len();
    let width = (l1 - l0) * ow;
    debug_assert_eq!(x.len(), g.channels * in_len);
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &mut x[c * in_len..(c + 1) * in_len];
        for kz in 0..kd {
            let (z_lo, z_hi) = g.valid_range(0, kz);
            for ky in 0..kh {
                let (y_lo, y_hi) = g.valid_range(1, ky);
                for kx in 0..kw {
                    let (x_lo, x_hi) = g.valid_range(2, kx);
                    let src = &cols[row * width..(row + 1) * width];
                    for l in l0..l1 {
                        let (oz, oy) = (l / oh, l % oh);
                        if oz < z_lo || oz >= z_hi || oy < y_lo || oy >= y_hi {
                            continue;
                        }
                        let iz = oz * g.stride[0] + kz - g.pad[0];
                        let iy = oy * g.stride[1] + ky - g.pad[1];
                        let dst_row = &mut xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                        let src_row = &src[(l - l0) * ow..(l - l0 + 1) * ow];
                        if g.stride[2] == 1 {
                            let ix0 = x_lo + kx - g.pad[2];
                            for (d, &v) in dst_row[ix0..ix0 + (x_hi - x_lo)]
                                .iter_mut()
                                .zip(&src_row[x_lo..x_hi])
                            {
                                *d = *d + v;
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                let ix = ox * g.stride[2] + kx - g.pad[2];
                                dst_row[ix] = dst_row[ix] + src_row[ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Whole-sample [`col2im_lines`].
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    col2im_lines(cols, g, 0, g.output[0] * g.output[1], x);
}
