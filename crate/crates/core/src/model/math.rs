//! Dense kernels on row-major `f64` buffers.

/// `c = alpha * a·b + beta * c` with explicit row/column strides.
///
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`. Each slice starts at element
/// (0, 0) of its matrix and must cover the last addressed element.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: a too short");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: b too short");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: c too short");
    // SAFETY: bounds of every addressed element were checked above and the
    // output does not alias the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major strides of an `r×c` matrix and of its transpose view.
pub(crate) const fn rm(cols: usize) -> (usize, usize) {
    (cols, 1)
}

pub(crate) const fn tr(cols: usize) -> (usize, usize) {
    (1, cols)
}

/// `out (m×n) = x (m×k) · w (k×n) + bias`.
pub(crate) fn linear(x: &[f64], w: &[f64], bias: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for row in out.chunks_exact_mut(n).take(m) {
        row.copy_from_slice(bias);
    }
    gemm(m, k, n, 1.0, x, rm(k), w, rm(n), 1.0, out, rm(n));
}

/// Backward of [`linear`]: accumulates `dw += xᵀ·dy`, `db += Σ dy`, and writes
/// or accumulates `dx = dy·wᵀ` depending on `dx_beta`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    m: usize,
    k: usize,
    n: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<(&mut [f64], f64)>,
) {
    gemm(k, m, n, 1.0, x, tr(k), dy, rm(n), 1.0, dw, rm(n));
    for row in dy.chunks_exact(n).take(m) {
        for (b, g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    if let Some((dx, beta)) = dx {
        gemm(m, n, k, 1.0, dy, rm(n), w, tr(n), beta, dx, rm(k));
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Layer normalization over rows of width `d`. Stores the normalized input
/// and reciprocal standard deviation for the backward pass.
pub(crate) fn layer_norm(
    x: &[f64],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
) {
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * rs;
            o[j] = xh[j] * gain[j] + bias[j];
        }
    }
}

/// Accumulates the input gradient of [`layer_norm`] into `dx`.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    d: usize,
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for (r, dyr) in dy.chunks_exact(d).enumerate() {
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] += rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// In-place softmax of one row; returns log of the normalizer (log-sum-exp).
pub(crate) fn softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
    max + z.ln()
}
