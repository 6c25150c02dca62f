//! Slice-level numeric kernels shared by the tape and the incremental
//! decoder. Matrix products accumulate in the working precision; other
//! reductions accumulate in `f64`. Every loop runs in a fixed order.

use crate::scalar::Scalar;

/// `out = a * b` for row-major `a: [m x k]`, `b: [k x n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// `out += a * b` for row-major `a: [m x k]`, `b: [k x n]`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    gemm_acc(a, k, 1, b, m, k, n, out);
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 16;

/// `out[i][j] += sum_p A(i, p) * b[p][j]` where `A(i, p) = a[i * rs + p * cs]`.
/// Output tiles of `TILE_ROWS x TILE_COLS` stay in registers across `p`;
/// every entry sums over `p` in increasing order.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Scalar>(a: &[T], rs: usize, cs: usize, b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let full_cols = n / TILE_COLS * TILE_COLS;
    let mut i = 0;
    while i + TILE_ROWS <= m {
        let mut j0 = 0;
        while j0 < full_cols {
            let mut acc = [[T::zero(); TILE_COLS]; TILE_ROWS];
            for p in 0..k {
                let br: &[T; TILE_COLS] = b[p * n + j0..p * n + j0 + TILE_COLS].try_into().expect("tile width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * rs + p * cs];
                    for (x, &bv) in row.iter_mut().zip(br) {
                        *x += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                for (o, &x) in out[(i + r) * n + j0..(i + r) * n + j0 + TILE_COLS].iter_mut().zip(row) {
                    *o += x;
                }
            }
            j0 += TILE_COLS;
        }
        if full_cols < n {
            gemm_edge(a, rs, cs, b, i..i + TILE_ROWS, k, n, full_cols, out);
        }
        i += TILE_ROWS;
    }
    if i < m {
        gemm_edge(a, rs, cs, b, i..m, k, n, 0, out);
    }
}

/// Rows `rows`, columns `j0..n` of [`gemm_acc`], without tiling.
#[allow(clippy::too_many_arguments)]
fn gemm_edge<T: Scalar>(
    a: &[T],
    rs: usize,
    cs: usize,
    b: &[T],
    rows: std::ops::Range<usize>,
    k: usize,
    n: usize,
    j0: usize,
    out: &mut [T],
) {
    let mut acc = vec![T::zero(); n - j0];
    for i in rows {
        acc.fill(T::zero());
        for p in 0..k {
            let av = a[i * rs + p * cs];
            for (x, &bv) in acc.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
                *x += av * bv;
            }
        }
        for (o, &x) in out[i * n + j0..(i + 1) * n].iter_mut().zip(&acc) {
            *o += x;
        }
    }
}

/// `out += a * b^T` for `a: [m x n]`, `b: [k x n]`, `out: [m x k]`.
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    debug_assert_eq!(b.len(), k * n);
    matmul_acc(a, &transpose(b, k, n), m, n, k, out);
}

pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    matmul_bt_acc(a, b, m, n, k, &mut out);
    out
}

/// `out += a^T * b` for `a: [m x k]`, `b: [m x n]`, `out: [k x n]`.
pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    gemm_acc(a, 1, k, b, k, m, n, out);
}

pub fn matmul_at<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    matmul_at_acc(a, b, m, k, n, &mut out);
    out
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Copies columns `[start, start + width)` of a `[rows x cols]` matrix.
pub fn take_cols<T: Scalar>(x: &[T], rows: usize, cols: usize, start: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * width);
    for i in 0..rows {
        out.extend_from_slice(&x[i * cols + start..i * cols + start + width]);
    }
    out
}

/// Adds a `[rows x width]` block into columns `[start, start + width)`.
pub fn add_cols<T: Scalar>(dst: &mut [T], cols: usize, src: &[T], start: usize, width: usize) {
    for (i, chunk) in src.chunks_exact(width).enumerate() {
        for (d, &s) in dst[i * cols + start..i * cols + start + width].iter_mut().zip(chunk) {
            *d += s;
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.f64() * y.f64()).sum()
}

/// Numerically stable softmax over the first `len` entries of `row`; the
/// rest are set to zero. `len == 0` is reported as `None`.
pub fn softmax_prefix(row: &[f64], len: usize, out: &mut [f64]) -> Option<()> {
    if len == 0 {
        return None;
    }
    let max = row[..len].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out[..len].iter_mut().zip(&row[..len]) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in &mut out[..len] {
        *o /= z;
    }
    out[len..].fill(0.0);
    Some(())
}

/// Softmax with an additive mask whose entries are `0` or `-inf`. Masked
/// entries get exactly zero weight. `None` when every entry is masked.
pub fn softmax_masked(row: &[f64], out: &mut [f64]) -> Option<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = if x == f64::NEG_INFINITY {
            0.0
        } else {
            (x - max).exp()
        };
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    Some(())
}

/// Indices of the `k` largest entries, ties broken by lowest index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k.min(row.len()));
    idx
}

/// Multiplies the `k` largest weights by `1 + boost` and renormalises in
/// place. Returns the per-entry multipliers and the normaliser.
pub fn boost_top_k(row: &mut [f64], k: usize, boost: f64) -> (Vec<f64>, f64) {
    let mut mult = vec![1.0; row.len()];
    for i in top_k_indices(row, k) {
        mult[i] = 1.0 + boost;
    }
    let mut z = 0.0;
    for (w, &m) in row.iter_mut().zip(&mult) {
        *w *= m;
        z += *w;
    }
    if z > 0.0 {
        for w in row.iter_mut() {
            *w /= z;
        }
    }
    (mult, z)
}

/// Row statistics `(mean, 1 / sqrt(var + eps))` with population variance.
pub fn row_moments<T: Scalar>(row: &[T], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n;
    let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `log(sum(exp(row)))`, shifted by the row max.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln()
}
