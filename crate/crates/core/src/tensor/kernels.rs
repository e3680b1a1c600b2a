//! Dense matrix kernels in sequential and rayon-parallel flavours.
//!
//! Every output element is reduced over its inner index in increasing order in
//! both flavours, so results are bitwise identical whichever path runs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the parallel path is not worth the overhead.
pub const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
fn nn_row(a_row: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (l, &s) in a_row.iter().enumerate() {
        let b_row = &b[l * n..(l + 1) * n];
        for (o, &x) in out.iter_mut().zip(b_row) {
            *o += s * x;
        }
    }
}

#[inline]
fn nt_row(a_row: &[f64], b: &[f64], k: usize, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        let b_row = &b[j * k..(j + 1) * k];
        let mut acc = 0.0;
        for (x, y) in a_row.iter().zip(b_row) {
            acc += x * y;
        }
        *o = acc;
    }
}

#[inline]
fn tn_row(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, kk: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let s = a[i * k + kk];
        let c_row = &c[i * n..(i + 1) * n];
        for (o, &x) in out.iter_mut().zip(c_row) {
            *o += s * x;
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn seq_matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        nn_row(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn seq_matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        nt_row(&a[i * k..(i + 1) * k], b, k, &mut out[i * n..(i + 1) * n]);
    }
}

/// `out[k×n] = a[m×k]ᵀ · c[m×n]`.
pub fn seq_matmul_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // i-outer walks memory contiguously; per element the sum over i still runs
    // in increasing order, matching the row kernel.
    out.fill(0.0);
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        for kk in 0..k {
            let s = a[i * k + kk];
            let o_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &x) in o_row.iter_mut().zip(c_row) {
                *o += s * x;
            }
        }
    }
}

#[cfg(feature = "parallel")]
pub fn par_matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let _ = m;
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| nn_row(&a[i * k..(i + 1) * k], b, n, row));
}

#[cfg(feature = "parallel")]
pub fn par_matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let _ = m;
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| nt_row(&a[i * k..(i + 1) * k], b, k, row));
}

#[cfg(feature = "parallel")]
pub fn par_matmul_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.par_chunks_mut(n).enumerate().for_each(|(kk, row)| tn_row(a, c, m, k, n, kk, row));
}

fn use_par(work: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        work >= PAR_THRESHOLD && rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = work;
        false
    }
}

macro_rules! dispatch {
    ($name:ident, $seq:ident, $par:ident) => {
        pub fn $name(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
            #[cfg(feature = "parallel")]
            if use_par(m * k * n) {
                return $par(a, b, m, k, n, out);
            }
            let _ = use_par;
            $seq(a, b, m, k, n, out)
        }
    };
}

dispatch!(matmul_nn, seq_matmul_nn, par_matmul_nn);
dispatch!(matmul_nt, seq_matmul_nt, par_matmul_nt);
dispatch!(matmul_tn, seq_matmul_tn, par_matmul_tn);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_naive() {
        let (m, k, n) = (7, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut out = vec![0.0; m * n];
        seq_matmul_nn(&a, &b, m, k, n, &mut out);
        assert_eq!(out, want);
        seq_matmul_nt(&a, &transpose(&b, k, n), m, k, n, &mut out);
        assert_eq!(out, want);
        let mut tn = vec![0.0; m * n];
        seq_matmul_tn(&transpose(&a, m, k), &b, k, m, n, &mut tn);
        assert_eq!(tn, want);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_is_bitwise_sequential() {
        let (m, k, n) = (33, 17, 29);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.731).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.173).cos()).collect();
        let c: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.5).sin()).collect();
        let bt = transpose(&b, k, n);
        let (mut s, mut p) = (vec![0.0; m * n], vec![0.0; m * n]);
        seq_matmul_nn(&a, &b, m, k, n, &mut s);
        crate::par::with_pool(4, || par_matmul_nn(&a, &b, m, k, n, &mut p));
        assert_eq!(s, p);
        seq_matmul_nt(&a, &bt, m, k, n, &mut s);
        crate::par::with_pool(4, || par_matmul_nt(&a, &bt, m, k, n, &mut p));
        assert_eq!(s, p);
        let (mut s, mut p) = (vec![0.0; k * n], vec![0.0; k * n]);
        seq_matmul_tn(&a, &c, m, k, n, &mut s);
        crate::par::with_pool(4, || par_matmul_tn(&a, &c, m, k, n, &mut p));
        assert_eq!(s, p);
    }
}
