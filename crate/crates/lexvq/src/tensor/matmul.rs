//! Row-parallel matrix multiply kernel shared by matmul, conv2d (im2col) and
//! the quantizer's distance scan.

use rayon::prelude::*;

/// Work below this many multiply-adds stays single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

/// `out[m x n] = a[m x k] * b[k x n]`, overwriting `out`.
///
/// Each output row is produced by one thread with a fixed k-ascending
/// accumulation order, so results are bit-identical for any thread count.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert_eq!(a.len(), m * k, "lhs buffer size");
    assert_eq!(b.len(), k * n, "rhs buffer size");
    assert_eq!(out.len(), m * n, "out buffer size");
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| mul_row(&a[i * k..(i + 1) * k], b, k, n, row));
    } else {
        for i in 0..m {
            mul_row(&a[i * k..(i + 1) * k], b, k, n, &mut out[i * n..(i + 1) * n]);
        }
    }
}

#[inline]
fn mul_row(a_row: &[f64], b: &[f64], k: usize, n: usize, out_row: &mut [f64]) {
    out_row.fill(0.0);
    for (p, &a_ip) in a_row.iter().enumerate().take(k) {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += a_ip * bv;
        }
    }
}

/// `out[m x n] += a^T[m x k] * b[k x n]` where `a` is stored `k x m`.
/// Used for the `grad_b = a^T * g` backward rule without materializing `a^T`.
pub fn matmul_at_b_into(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for p in 0..k {
                let a_pi = a[p * m + i];
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o += a_pi * bv;
                }
            }
        });
    } else {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_pi = a[p * m + i];
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o += a_pi * bv;
                }
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b^T[k x n]` where `b` is stored `n x k`.
/// Backward rule `grad_a = g * b^T`.
pub fn matmul_a_bt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(out.len(), m * n);
    let body = |i: usize, row: &mut [f64]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            *o += s;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for i in 0..m {
            body(i, &mut out[i * n..(i + 1) * n]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive_loops() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut got = vec![0.0; m * n];
        matmul_into(&a, &b, m, k, n, &mut got);
        assert_eq!(got, want);

        // a^T route: store a transposed (k x m became m x k input here)
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut got2 = vec![0.0; m * n];
        matmul_at_b_into(&at, &b, k, m, n, &mut got2);
        assert_eq!(got2, want);

        // b^T route
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut got3 = vec![0.0; m * n];
        matmul_a_bt_into(&a, &bt, m, k, n, &mut got3);
        assert_eq!(got3, want);
    }

    #[test]
    fn parallel_split_is_bit_identical() {
        // Large enough to cross PAR_THRESHOLD.
        let (m, k, n) = (64, 40, 64);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut par = vec![0.0; m * n];
        matmul_into(&a, &b, m, k, n, &mut par);
        let mut ser = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut ser[i * n..(i + 1) * n];
            row.fill(0.0);
            for p in 0..k {
                for j in 0..n {
                    row[j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        assert!(par
            .iter()
            .zip(&ser)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
