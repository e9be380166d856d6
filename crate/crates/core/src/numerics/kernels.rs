//! Slice-level kernels shared by the graph forward/backward passes and the
//! plain (untracked) helpers. All matrices are row-major.

use super::scalar::Real;

const MR: usize = 4;
const NR: usize = 16;

/// Register-tiled `c += op(a) · b` where `op(a)[i][p] = a[i * rs + p * cs]`.
///
/// Every output element is summed over `p` in ascending order from zero and
/// then added to `c`, whatever the tile or vector width, so results do not
/// depend on which instruction set runs the loop.
#[inline(always)]
fn gemm_strided<T: Real>(a: &[T], rs: usize, cs: usize, b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let m_main = m / MR * MR;
    let mut pack = vec![T::zero(); k * MR];
    for i0 in (0..m_main).step_by(MR) {
        pack_rows::<T, MR>(a, rs, cs, i0, k, &mut pack);
        row_tile::<T, MR>(&pack, b, &mut c[i0 * n..(i0 + MR) * n], n);
    }
    for i in m_main..m {
        pack_rows::<T, 1>(a, rs, cs, i, k, &mut pack[..k]);
        row_tile::<T, 1>(&pack[..k], b, &mut c[i * n..(i + 1) * n], n);
    }
}

/// Copies rows `i0..i0 + R` of `op(a)` into `pack[p * R + r]`.
#[inline(always)]
fn pack_rows<T: Real, const R: usize>(a: &[T], rs: usize, cs: usize, i0: usize, k: usize, pack: &mut [T]) {
    if rs == 1 {
        for (p, dst) in pack.chunks_exact_mut(R).enumerate() {
            dst.copy_from_slice(&a[p * cs + i0..p * cs + i0 + R]);
        }
    } else {
        for r in 0..R {
            let row = &a[(i0 + r) * rs..];
            for (p, dst) in pack.chunks_exact_mut(R).enumerate().take(k) {
                dst[r] = row[p * cs];
            }
        }
    }
}

/// `c[R×n] += pack[k×R]ᵀ · b[k×n]`, vectorized over `NR` output columns.
#[inline(always)]
fn row_tile<T: Real, const R: usize>(pack: &[T], b: &[T], c: &mut [T], n: usize) {
    let n_main = n / NR * NR;
    for j0 in (0..n_main).step_by(NR) {
        let mut acc = [[T::zero(); NR]; R];
        for (ap, b_row) in pack.chunks_exact(R).zip(b.chunks_exact(n)) {
            let br: &[T; NR] = b_row[j0..j0 + NR].try_into().expect("tile width");
            for (acc_r, &av) in acc.iter_mut().zip(ap) {
                for (x, &bv) in acc_r.iter_mut().zip(br) {
                    *x += av * bv;
                }
            }
        }
        for (acc_r, c_row) in acc.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, x) in c_row[j0..j0 + NR].iter_mut().zip(acc_r) {
                *cv += *x;
            }
        }
    }
    for j in n_main..n {
        let mut acc = [T::zero(); R];
        for (ap, b_row) in pack.chunks_exact(R).zip(b.chunks_exact(n)) {
            let bv = b_row[j];
            for (x, &av) in acc.iter_mut().zip(ap) {
                *x += av * bv;
            }
        }
        for (x, c_row) in acc.iter().zip(c.chunks_exact_mut(n)) {
            c_row[j] += *x;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_strided_avx2<T: Real>(
    a: &[T],
    rs: usize,
    cs: usize,
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    gemm_strided(a, rs, cs, b, c, m, k, n)
}

#[allow(clippy::too_many_arguments)]
fn gemm_dispatch<T: Real>(a: &[T], rs: usize, cs: usize, b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_strided_avx2(a, rs, cs, b, c, m, k, n) };
            return;
        }
    }
    gemm_strided(a, rs, cs, b, c, m, k, n)
}

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    gemm_dispatch(a, k, 1, b, c, m, k, n)
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_dispatch(a, k, 1, &bt, c, m, k, n)
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    gemm_dispatch(a, 1, m, b, c, m, k, n)
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four independent accumulators let the compiler vectorize without
    // reassociating a single running sum.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row
        .iter()
        .map(|&v| {
            let c = v - mean;
            c * c
        })
        .sum::<T>()
        / n;
    (mean, (var + eps).sqrt().recip())
}

pub fn layer_norm_rows<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T, cols: usize, out: &mut [T]) {
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let (mean, rstd) = row_moments(xr, eps);
        for j in 0..cols {
            yr[j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
        }
    }
}

/// Accumulates input, gain and bias gradients of a row-wise layer norm.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows_backward<T: Real>(
    x: &[T],
    gain: &[T],
    eps: T,
    cols: usize,
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let n = T::lit(cols as f64);
    let mut xhat = vec![T::zero(); cols];
    let mut dxhat = vec![T::zero(); cols];
    for ((xr, dyr), dxr) in x
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let (mean, rstd) = row_moments(xr, eps);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..cols {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = dyr[j] * gain[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
            dgain[j] += dyr[j] * xhat[j];
            dbias[j] += dyr[j];
        }
        let mean_d = sum_dxhat / n;
        let mean_dx = sum_dxhat_xhat / n;
        for j in 0..cols {
            dxr[j] += rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    max + values.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

const GELU_CUBIC: f64 = 0.044715;

/// tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_CUBIC);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}
