//! Slice-level forward and backward kernels. Shapes are validated by the tape
//! before these are called.

use super::Float;

/// Batchnorm variance guard.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch statistic in the running estimates.
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities are clamped to this floor before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Output extent of a convolution along one spatial axis, `None` if the kernel
/// does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input + 2 * pad {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Rows of the unfolded input: one per (input channel, kernel tap).
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Columns of the unfolded input: one per (example, output pixel).
    pub fn cols_width(&self) -> usize {
        self.n * self.out_plane()
    }

    pub fn macs_per_example(&self) -> u64 {
        (self.c_out * self.out_plane() * self.patch_len()) as u64
    }
}

/// Unfold `x` into a `[patch_len, n * ho * wo]` matrix (zero padding).
pub(crate) fn im2col<F: Float>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let plane = g.out_plane();
    let width = g.cols_width();
    let mut cols = vec![F::ZERO; g.patch_len() * width];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let row_base = row * width;
                for b in 0..g.n {
                    let x_base = (b * g.c_in + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let x_row = x_base + iy as usize * g.w;
                        let dst = row_base + b * plane + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                cols[dst + ox] = x[x_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add unfolded gradients back onto the input.
pub(crate) fn col2im<F: Float>(dcols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let plane = g.out_plane();
    let width = g.cols_width();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let row_base = row * width;
                for b in 0..g.n {
                    let x_base = (b * g.c_in + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let x_row = x_base + iy as usize * g.w;
                        let src = row_base + b * plane + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dx[x_row + ix as usize] += dcols[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `cols` (from [`im2col`]) with `weight`, output NCHW.
pub(crate) fn conv_forward<F: Float>(
    cols: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    g: &ConvGeom,
) -> Vec<F> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let width = g.cols_width();
    let mut out = vec![F::ZERO; g.n * g.c_out * plane];
    for b in 0..g.n {
        // SAFETY: weight is [c_out, k]; the column block of cols is [k, plane]
        // with row stride `width`; the output block is [c_out, plane].
        unsafe {
            F::gemm(
                g.c_out,
                k,
                plane,
                F::ONE,
                weight.as_ptr(),
                k as isize,
                1,
                cols.as_ptr().add(b * plane),
                width as isize,
                1,
                F::ZERO,
                out.as_mut_ptr().add(b * g.c_out * plane),
                plane as isize,
                1,
            );
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.n {
            for (o, &bo) in bias.iter().enumerate() {
                let base = (b * g.c_out + o) * plane;
                for v in &mut out[base..base + plane] {
                    *v += bo;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution: returns `(dx, dweight, dbias)`.
pub(crate) fn conv_backward<F: Float>(
    cols: &[F],
    weight: &[F],
    dy: &[F],
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let plane = g.out_plane();
    let k = g.patch_len();
    let width = g.cols_width();
    let mut dw = vec![F::ZERO; g.c_out * k];
    let mut db = vec![F::ZERO; g.c_out];
    let mut dcols = if want_dx {
        vec![F::ZERO; k * width]
    } else {
        Vec::new()
    };
    for b in 0..g.n {
        let dy_b = &dy[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        for o in 0..g.c_out {
            db[o] += dy_b[o * plane..(o + 1) * plane].iter().copied().sum::<F>();
        }
        // SAFETY: dy_b is [c_out, plane]; cols^T block is [plane, k] addressed
        // with row stride 1 and column stride `width`; dw is [c_out, k].
        unsafe {
            F::gemm(
                g.c_out,
                plane,
                k,
                F::ONE,
                dy_b.as_ptr(),
                plane as isize,
                1,
                cols.as_ptr().add(b * plane),
                1,
                width as isize,
                F::ONE,
                dw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        if want_dx {
            // SAFETY: weight^T is [k, c_out] (row stride 1, column stride k);
            // dy_b is [c_out, plane]; the dcols block is [k, plane] with row
            // stride `width`.
            unsafe {
                F::gemm(
                    k,
                    g.c_out,
                    plane,
                    F::ONE,
                    weight.as_ptr(),
                    1,
                    k as isize,
                    dy_b.as_ptr(),
                    plane as isize,
                    1,
                    F::ZERO,
                    dcols.as_mut_ptr().add(b * plane),
                    width as isize,
                    1,
                );
            }
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = vec![F::ZERO; g.n * g.c_in * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}

/// `x[n, d] * w[d, k] (+ b[k])`.
pub(crate) fn linear_forward<F: Float>(
    x: &[F],
    w: &[F],
    b: Option<&[F]>,
    n: usize,
    d: usize,
    k: usize,
) -> Vec<F> {
    let mut out = vec![F::ZERO; n * k];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(k) {
            row.copy_from_slice(b);
        }
    }
    // SAFETY: x is [n, d], w is [d, k], out is [n, k], all row-major.
    unsafe {
        F::gemm(
            n,
            d,
            k,
            F::ONE,
            x.as_ptr(),
            d as isize,
            1,
            w.as_ptr(),
            k as isize,
            1,
            F::ONE,
            out.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    out
}

/// Returns `(dx, dw, db)` for [`linear_forward`].
pub(crate) fn linear_backward<F: Float>(
    x: &[F],
    w: &[F],
    dy: &[F],
    n: usize,
    d: usize,
    k: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dx = vec![F::ZERO; n * d];
    let mut dw = vec![F::ZERO; d * k];
    let mut db = vec![F::ZERO; k];
    // SAFETY: dy is [n, k]; w^T is [k, d] (row stride 1, column stride k).
    unsafe {
        F::gemm(
            n,
            k,
            d,
            F::ONE,
            dy.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            F::ZERO,
            dx.as_mut_ptr(),
            d as isize,
            1,
        );
        // x^T is [d, n] (row stride 1, column stride d).
        F::gemm(
            d,
            n,
            k,
            F::ONE,
            x.as_ptr(),
            1,
            d as isize,
            dy.as_ptr(),
            k as isize,
            1,
            F::ZERO,
            dw.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    for row in dy.chunks_exact(k) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (dx, dw, db)
}

/// Normalized activations and per-channel inverse deviations kept for backward.
pub(crate) struct BnForward<F> {
    pub y: Vec<F>,
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
    /// Batch mean and unbiased batch variance, present in training mode.
    pub batch_stats: Option<(Vec<F>, Vec<F>)>,
}

pub(crate) fn batchnorm_forward<F: Float>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    n: usize,
    c: usize,
    plane: usize,
    running: Option<(&[F], &[F])>,
) -> BnForward<F> {
    let eps = F::from_f64(BN_EPS);
    let count = n * plane;
    let (mean, var, batch_stats) = match running {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
        None => {
            let inv_count = F::from_f64(1.0 / count as f64);
            let mut mean = vec![F::ZERO; c];
            let mut var = vec![F::ZERO; c];
            for ch in 0..c {
                let mut s = F::ZERO;
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    s += x[base..base + plane].iter().copied().sum::<F>();
                }
                let m = s * inv_count;
                let mut ss = F::ZERO;
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    for &v in &x[base..base + plane] {
                        let d = v - m;
                        ss += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = ss * inv_count;
            }
            let unbias = F::from_f64(count as f64 / (count as f64 - 1.0));
            let unbiased = var.iter().map(|&v| v * unbias).collect();
            let stats = Some((mean.clone(), unbiased));
            (mean, var, stats)
        }
    };
    let inv_std: Vec<F> = var.iter().map(|&v| F::ONE / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::ZERO; x.len()];
    let mut y = vec![F::ZERO; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in base..base + plane {
                let xh = (x[i] - m) * is;
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    BnForward {
        y,
        xhat,
        inv_std,
        batch_stats,
    }
}

/// Returns `(dx, dgamma, dbeta)`. `train` selects batch-statistics gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<F: Float>(
    dy: &[F],
    xhat: &[F],
    inv_std: &[F],
    gamma: &[F],
    n: usize,
    c: usize,
    plane: usize,
    train: bool,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dgamma = vec![F::ZERO; c];
    let mut dbeta = vec![F::ZERO; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![F::ZERO; dy.len()];
    let count = F::from_f64((n * plane) as f64);
    for ch in 0..c {
        let scale = gamma[ch] * inv_std[ch];
        if train {
            // dx = g*inv_std/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
            let (sum_dy, sum_dy_xhat) = (dbeta[ch], dgamma[ch]);
            let k = scale / count;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    dx[i] = k * (count * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
                }
            }
        } else {
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    dx[i] = scale * dy[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn softmax_rows<F: Float>(x: &[F], k: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; x.len()];
    for (row, dst) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().copied().fold(row[0], F::max);
        let mut total = F::ZERO;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        let inv = F::ONE / total;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    out
}

pub(crate) fn sigmoid<F: Float>(v: F) -> F {
    // Evaluate on the side where exp cannot overflow.
    if v >= F::ZERO {
        F::ONE / (F::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::ONE + e)
    }
}
