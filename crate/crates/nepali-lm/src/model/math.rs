//! Dense kernels for the transformer: matrix products, layer norm, GELU,
//! and softmax. Everything is sequential with a fixed operation order, so
//! results are bit-reproducible run to run; loops are arranged so the
//! innermost dimension streams contiguously for auto-vectorization.
//!
//! All matrices are row-major flat slices.

use super::float::Float;

/// Numerical floor inside layer norm's variance square root.
pub const LN_EPS: f64 = 1e-5;

/// `out[m,n] = a[m,k] @ b[k,n]`, overwriting `out`.
pub fn matmul<T: Float>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(T::ZERO);
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += d[m,n] @ transpose(w[k,n])`. The backward pass through a
/// right-multiplication by `w`.
pub fn matmul_acc_bt<T: Float>(out: &mut [T], d: &[T], w: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(d.len(), m * n);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for kk in 0..k {
            let wrow = &w[kk * n..(kk + 1) * n];
            let mut s = T::ZERO;
            for (&dv, &wv) in drow.iter().zip(wrow) {
                s += dv * wv;
            }
            out[i * k + kk] += s;
        }
    }
}

/// `out[k,n] += transpose(a[m,k]) @ d[m,n]`. Accumulates a weight gradient.
pub fn matmul_acc_at<T: Float>(out: &mut [T], a: &[T], d: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(d.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for r in 0..m {
        let drow = &d[r * n..(r + 1) * n];
        for i in 0..k {
            let av = a[r * k + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &dv) in orow.iter_mut().zip(drow) {
                *o += av * dv;
            }
        }
    }
}

/// Adds `bias[n]` to every row of `out[m,n]`.
pub fn add_bias<T: Float>(out: &mut [T], bias: &[T], m: usize, n: usize) {
    debug_assert_eq!(bias.len(), n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (o, &bv) in row.iter_mut().zip(bias) {
            *o += bv;
        }
    }
}

/// Column sums of `d[m,n]` accumulated into `out[n]`; the bias gradient.
pub fn acc_column_sums<T: Float>(out: &mut [T], d: &[T], m: usize, n: usize) {
    debug_assert_eq!(out.len(), n);
    debug_assert_eq!(d.len(), m * n);
    for i in 0..m {
        let row = &d[i * n..(i + 1) * n];
        for (o, &dv) in out.iter_mut().zip(row) {
            *o += dv;
        }
    }
}

/// Per-row statistics layer norm keeps for its backward pass.
pub struct LnCache<T> {
    /// Normalized activations before gain and offset, `[rows, n]`.
    pub xhat: Vec<T>,
    /// `1 / sqrt(var + eps)` per row.
    pub inv_std: Vec<T>,
}

/// `out[r] = gain * (x[r] - mean) / sqrt(var + eps) + offset`, per row.
pub fn layernorm_forward<T: Float>(
    out: &mut [T],
    x: &[T],
    gain: &[T],
    offset: &[T],
    rows: usize,
    n: usize,
) -> LnCache<T> {
    debug_assert_eq!(x.len(), rows * n);
    debug_assert_eq!(out.len(), rows * n);
    let eps = T::from_f64(LN_EPS);
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut xhat = vec![T::ZERO; rows * n];
    let mut inv_std = vec![T::ZERO; rows];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mut mean = T::ZERO;
        for &v in xr {
            mean += v;
        }
        mean *= inv_n;
        let mut var = T::ZERO;
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv = T::ONE / (var + eps).sqrt();
        inv_std[r] = inv;
        let xh = &mut xhat[r * n..(r + 1) * n];
        let or = &mut out[r * n..(r + 1) * n];
        for i in 0..n {
            let h = (xr[i] - mean) * inv;
            xh[i] = h;
            or[i] = gain[i] * h + offset[i];
        }
    }
    LnCache { xhat, inv_std }
}

/// Backward of [`layernorm_forward`]: accumulates `d_gain`/`d_offset` and
/// adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Float>(
    dx: &mut [T],
    d_gain: &mut [T],
    d_offset: &mut [T],
    dout: &[T],
    cache: &LnCache<T>,
    gain: &[T],
    rows: usize,
    n: usize,
) {
    let inv_n = T::ONE / T::from_f64(n as f64);
    for r in 0..rows {
        let dr = &dout[r * n..(r + 1) * n];
        let xh = &cache.xhat[r * n..(r + 1) * n];
        let inv = cache.inv_std[r];
        let mut mean_dxhat = T::ZERO;
        let mut mean_dxhat_xhat = T::ZERO;
        for i in 0..n {
            let dxhat = dr[i] * gain[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xh[i];
            d_gain[i] += dr[i] * xh[i];
            d_offset[i] += dr[i];
        }
        mean_dxhat *= inv_n;
        mean_dxhat_xhat *= inv_n;
        let dxr = &mut dx[r * n..(r + 1) * n];
        for i in 0..n {
            let dxhat = dr[i] * gain[i];
            dxr[i] += inv * (dxhat - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

/// GELU with the tanh approximation used by GPT-2.
pub fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

/// In-place, numerically stabilized softmax over one row.
pub fn softmax_in_place<T: Float>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
