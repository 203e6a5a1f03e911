//! Raw numeric kernels behind the graph ops.
//!
//! These are plain-slice routines with no autodiff bookkeeping. The hot ones
//! (matmul, conv1d) go through [`crate::parallel`] so large calls fan out
//! across threads; each output element is still produced by one fixed
//! sequential inner loop, so results do not depend on thread count.

use crate::parallel;
use crate::Real;

/// C[m×n] = A[m×k] · B[k×n], optionally transposing either input in place.
/// `ta` reads A as [k×m] transposed; `tb` reads B as [n×k] transposed.
pub fn gemm(
    a: &[Real],
    b: &[Real],
    out: &mut [Real],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(out.len(), m * n);
    let work_per_row = k * n;
    parallel::fill_chunks(out, n, work_per_row, |i, row| {
        row.fill(0.0);
        match (ta, tb) {
            (false, false) => {
                // row_i(C) = sum_p A[i,p] * row_p(B); streams B rows, vectorizes on n.
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..p * n + n];
                    for (r, bv) in row.iter_mut().zip(brow) {
                        *r += aip * bv;
                    }
                }
            }
            (true, false) => {
                for p in 0..k {
                    let aip = a[p * m + i];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..p * n + n];
                    for (r, bv) in row.iter_mut().zip(brow) {
                        *r += aip * bv;
                    }
                }
            }
            (false, true) => {
                // B is [n×k]; C[i,j] = dot(A_row_i, B_row_j).
                let arow = &a[i * k..i * k + k];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = dot(arow, &b[j * k..j * k + k]);
                }
            }
            (true, true) => {
                for p in 0..k {
                    let aip = a[p * m + i];
                    if aip == 0.0 {
                        continue;
                    }
                    for (j, r) in row.iter_mut().enumerate() {
                        *r += aip * b[j * k + p];
                    }
                }
            }
        }
    });
}

/// Dot product with 8-lane unrolling; fixed accumulation order.
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 8;
    let mut acc = [0.0 as Real; 8];
    for c in 0..chunks {
        let i = c * 8;
        let (ax, bx) = (&a[i..i + 8], &b[i..i + 8]);
        for l in 0..8 {
            acc[l] += ax[l] * bx[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in chunks * 8..n {
        s += a[i] * b[i];
    }
    s
}

/// axpy: y += alpha * x.
pub fn axpy(alpha: Real, x: &[Real], y: &mut [Real]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// 1-D convolution, stride 1, "same" padding (zero padded), odd kernel.
///
/// x: [t × c_in], w: [c_out × c_in × kw], bias: [c_out] optional,
/// out: [t × c_out].
pub fn conv1d_same(
    x: &[Real],
    w: &[Real],
    bias: Option<&[Real]>,
    out: &mut [Real],
    t: usize,
    c_in: usize,
    c_out: usize,
    kw: usize,
) {
    debug_assert!(kw % 2 == 1);
    debug_assert_eq!(out.len(), t * c_out);
    let half = kw / 2;
    let work = c_in * kw * c_out;
    parallel::fill_chunks(out, c_out, work, |p, row| {
        match bias {
            Some(b) => row.copy_from_slice(b),
            None => row.fill(0.0),
        }
        let lo = p.saturating_sub(half);
        let hi = (p + half).min(t - 1);
        for q in lo..=hi {
            let tap = q + half - p; // kernel index in 0..kw
            let xrow = &x[q * c_in..(q + 1) * c_in];
            for (o, r) in row.iter_mut().enumerate() {
                let wrow = &w[(o * kw + tap) * c_in..(o * kw + tap + 1) * c_in];
                *r += dot(xrow, wrow);
            }
        }
    });
}

/// Gradients for [`conv1d_same`]. Accumulates into `dx`, `dw`, `db`.
pub fn conv1d_same_backward(
    x: &[Real],
    w: &[Real],
    dout: &[Real],
    dx: &mut [Real],
    dw: &mut [Real],
    db: Option<&mut [Real]>,
    t: usize,
    c_in: usize,
    c_out: usize,
    kw: usize,
) {
    let half = kw / 2;
    // dx[q] += sum_{p,o} dout[p,o] * w[o, tap(p,q), :]
    for p in 0..t {
        let dorow = &dout[p * c_out..(p + 1) * c_out];
        let lo = p.saturating_sub(half);
        let hi = (p + half).min(t - 1);
        for q in lo..=hi {
            let tap = q + half - p;
            let dxrow = &mut dx[q * c_in..(q + 1) * c_in];
            for (o, &g) in dorow.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let wrow = &w[(o * kw + tap) * c_in..(o * kw + tap + 1) * c_in];
                axpy(g, wrow, dxrow);
            }
        }
    }
    // dw[o, tap, :] += sum_p dout[p,o] * x[q, :]
    for p in 0..t {
        let dorow = &dout[p * c_out..(p + 1) * c_out];
        let lo = p.saturating_sub(half);
        let hi = (p + half).min(t - 1);
        for q in lo..=hi {
            let tap = q + half - p;
            let xrow = &x[q * c_in..(q + 1) * c_in];
            for (o, &g) in dorow.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let dwrow = &mut dw[(o * kw + tap) * c_in..(o * kw + tap + 1) * c_in];
                axpy(g, xrow, dwrow);
            }
        }
    }
    if let Some(db) = db {
        for p in 0..t {
            let dorow = &dout[p * c_out..(p + 1) * c_out];
            axpy(1.0, dorow, db);
        }
    }
}

/// Numerically stable softmax over contiguous rows of length `n`.
pub fn softmax_rows(x: &[Real], out: &mut [Real], n: usize) {
    debug_assert_eq!(x.len(), out.len());
    debug_assert!(n > 0 && x.len() % n == 0);
    for (xr, or) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = xr.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_all_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<Real> = (0..m * k).map(|i| (i as Real * 0.37).sin()).collect();
        let b: Vec<Real> = (0..k * n).map(|i| (i as Real * 0.11).cos()).collect();
        let want = naive_matmul(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm(&a, &b, &mut c, m, k, n, false, false);
        assert_eq!(c, want);

        // A stored transposed as [k×m]
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        gemm(&at, &b, &mut c, m, k, n, true, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }

        // B stored transposed as [n×k]
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        gemm(&a, &bt, &mut c, m, k, n, false, true);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }

        gemm(&at, &bt, &mut c, m, k, n, true, true);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn gemm_parallel_matches_sequential() {
        let (m, k, n) = (64, 128, 96);
        let a: Vec<Real> = (0..m * k).map(|i| ((i * 31 % 97) as Real - 48.0) / 48.0).collect();
        let b: Vec<Real> = (0..k * n).map(|i| ((i * 17 % 89) as Real - 44.0) / 44.0).collect();
        let mut c_par = vec![0.0; m * n];
        let mut c_seq = vec![0.0; m * n];
        gemm(&a, &b, &mut c_par, m, k, n, false, false);
        parallel::run_sequential(|| gemm(&a, &b, &mut c_seq, m, k, n, false, false));
        assert_eq!(c_par, c_seq);
    }

    #[test]
    fn conv1d_identity_kernel() {
        // kernel [1], c_in = c_out = 1 leaves the signal unchanged
        let x = vec![1.0, -2.0, 3.0, 0.5];
        let w = vec![1.0];
        let mut out = vec![0.0; 4];
        conv1d_same(&x, &w, None, &mut out, 4, 1, 1, 1);
        assert_eq!(out, x);
    }

    /// Independent oracle: direct sliding-window convolution, zero padded.
    fn hand_conv_same(x: &[Real], w: &[Real]) -> Vec<Real> {
        let half = w.len() / 2;
        (0..x.len())
            .map(|p| {
                w.iter()
                    .enumerate()
                    .map(|(tap, &wv)| {
                        let q = p as isize + tap as isize - half as isize;
                        if q < 0 || q >= x.len() as isize {
                            0.0
                        } else {
                            wv * x[q as usize]
                        }
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn conv1d_box_filter_matches_hand_oracle() {
        // kernel [1,1,1]/3 on [0,3,0,3,0], same padding; the oracle gives
        // [1,1,2,1,1] (a box filter conserves the input mass of 6)
        let x = vec![0.0, 3.0, 0.0, 3.0, 0.0];
        let w = vec![1.0 / 3.0; 3];
        let want = hand_conv_same(&x, &w);
        assert_eq!(want, vec![1.0, 1.0, 2.0, 1.0, 1.0]);
        let mut out = vec![0.0; 5];
        conv1d_same(&x, &w, None, &mut out, 5, 1, 1, 3);
        for (o, want) in out.iter().zip(want) {
            assert!((o - want).abs() < 1e-6, "{out:?}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = vec![1000.0, 0.0, -5.0, 2.0, 2.0, 2.0];
        let mut out = vec![0.0; 6];
        softmax_rows(&x, &mut out, 3);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-6); // stabilization forced
        let s1: Real = out[3..].iter().sum();
        assert!((s1 - 1.0).abs() < 1e-6);
    }
}
