//! Loop kernels shared by the tape's forward and backward passes.
//!
//! Every output element accumulates its terms in ascending index order, so a
//! row's result never depends on how many other rows are in the batch.

use super::Scalar;

const MR: usize = 4;
const NR: usize = 16;

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Register-blocked over `MR×NR` tiles; each `c[i][j]` still receives its
/// `k` terms one at a time in ascending order, so the wider AVX2 build of
/// the same loop gives bitwise-identical results.
pub(crate) fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { gemm_acc_avx2(m, k, n, a, b, c) };
        return;
    }
    gemm_body(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_acc_avx2<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_body(m, k, n, a, b, c);
}

#[inline(always)]
fn gemm_body<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    for i0 in (0..full_rows).step_by(MR) {
        let a_rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
        for j0 in (0..full_cols).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, acc_r) in acc.iter_mut().enumerate() {
                acc_r.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for (p, b_row) in b.chunks_exact(n).enumerate() {
                let b_tile: &[T; NR] = b_row[j0..j0 + NR].try_into().unwrap();
                let av: [T; MR] = std::array::from_fn(|r| a_rows[r][p]);
                tile_update(&mut acc, &av, b_tile);
            }
            for (r, acc_r) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_r);
            }
        }
        if full_cols < n {
            gemm_rows(i0, i0 + MR, full_cols, k, n, a, b, c);
        }
    }
    gemm_rows(full_rows, m, 0, k, n, a, b, c);
}

#[inline(always)]
fn tile_update<T: Scalar>(acc: &mut [[T; NR]; MR], av: &[T; MR], b: &[T; NR]) {
    for r in 0..MR {
        for j in 0..NR {
            acc[r][j] += av[r] * b[j];
        }
    }
}

/// Plain i-k-j loop over rows `lo..hi`, columns `j0..n`.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn gemm_rows<T: Scalar>(lo: usize, hi: usize, j0: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in lo..hi {
        let c_row = &mut c[i * n + j0..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (cj, &bj) in c_row.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub(crate) fn gemm_tn_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], g: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let at = transpose(m, k, a);
    gemm_acc(k, m, n, &at, g, c);
}

/// Transposed copy of a row-major `rows×cols` matrix.
pub(crate) fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `c[m×n] += a · bᵀ` where `b` is `n×k`.
pub(crate) fn gemm_nt_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose(n, k, b);
    gemm_acc(m, k, n, a, &bt, c);
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Inner `tanh` of the tanh-approximated GELU.
#[inline]
pub(crate) fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    (c * (x + a * x * x * x)).tanh()
}

/// GELU given `t = gelu_tanh(x)`.
#[inline]
pub(crate) fn gelu_with<T: Scalar>(x: T, t: T) -> T {
    T::from_f64_lossy(0.5) * x * (T::one() + t)
}

/// GELU derivative given `t = gelu_tanh(x)`.
#[inline]
pub(crate) fn gelu_grad_with<T: Scalar>(x: T, t: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let three = T::from_f64_lossy(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Tanh-approximated GELU.
#[cfg(test)]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    gelu_with(x, gelu_tanh(x))
}

#[cfg(test)]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_grad_with(x, gelu_tanh(x))
}

/// Row strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with `shape`) into permuted order: output axis `i` is
/// input axis `axes[i]`.
pub(crate) fn permute<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = out_shape[rank - 1];
    let inner_stride = gather[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        for j in 0..inner {
            out.push(src[offset + j * inner_stride]);
        }
        // advance the outer multi-index
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            offset += gather[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= gather[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
