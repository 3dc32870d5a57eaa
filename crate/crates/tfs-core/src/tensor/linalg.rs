//! Dense row-major f64 matmul kernels.
//!
//! Three layouts cover forward and both backward products without ever
//! materializing a transpose:
//!
//! - [`mm_nn`]: `a[n,k] . b[k,m]`
//! - [`mm_nt`]: `a[n,k] . b[m,k]^T`
//! - [`mm_tn`]: `a[k,n]^T . b[k,m]`
//!
//! Each kernel has a `_seq` variant and a dispatching wrapper that, with the
//! `parallel` feature, splits the output rows across rayon tasks once the
//! multiply count passes [`PAR_MIN_FLOPS`]. Every output row is produced by
//! exactly one task with the same inner loop as the sequential code, so both
//! paths return bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum `n*k*m` before the parallel path engages; below this the
/// scheduling overhead dominates.
pub const PAR_MIN_FLOPS: usize = 1 << 16;

#[inline]
fn nn_row(out_row: &mut [f64], a_row: &[f64], b: &[f64], k: usize, m: usize) {
    out_row.fill(0.0);
    for (p, &aip) in a_row.iter().enumerate().take(k) {
        let b_row = &b[p * m..(p + 1) * m];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += aip * bv;
        }
    }
}

#[inline]
fn nt_row(out_row: &mut [f64], a_row: &[f64], b: &[f64], k: usize) {
    for (j, o) in out_row.iter_mut().enumerate() {
        let b_row = &b[j * k..(j + 1) * k];
        let mut acc = 0.0;
        for (&av, &bv) in a_row.iter().zip(b_row) {
            acc += av * bv;
        }
        *o = acc;
    }
}

#[inline]
fn tn_row(out_row: &mut [f64], a: &[f64], b: &[f64], i: usize, n: usize, k: usize, m: usize) {
    out_row.fill(0.0);
    for p in 0..k {
        let api = a[p * n + i];
        let b_row = &b[p * m..(p + 1) * m];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += api * bv;
        }
    }
}

/// `out[n,m] = a[n,k] . b[k,m]`, sequential.
pub fn mm_nn_seq(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for (i, out_row) in out.chunks_mut(m).enumerate() {
        nn_row(out_row, &a[i * k..(i + 1) * k], b, k, m);
    }
}

/// `out[n,m] = a[n,k] . b[m,k]^T`, sequential.
pub fn mm_nt_seq(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for (i, out_row) in out.chunks_mut(m).enumerate() {
        nt_row(out_row, &a[i * k..(i + 1) * k], b, k);
    }
}

/// `out[n,m] = a[k,n]^T . b[k,m]`, sequential.
pub fn mm_tn_seq(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * n);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for (i, out_row) in out.chunks_mut(m).enumerate() {
        tn_row(out_row, a, b, i, n, k, m);
    }
}

/// `out[n,m] = a[n,k] . b[k,m]`; parallel over output rows when profitable.
pub fn mm_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if n * k * m >= PAR_MIN_FLOPS {
        out.par_chunks_mut(m).enumerate().for_each(|(i, out_row)| {
            nn_row(out_row, &a[i * k..(i + 1) * k], b, k, m);
        });
        return;
    }
    mm_nn_seq(a, b, n, k, m, out);
}

/// `out[n,m] = a[n,k] . b[m,k]^T`; parallel over output rows when profitable.
pub fn mm_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if n * k * m >= PAR_MIN_FLOPS {
        out.par_chunks_mut(m).enumerate().for_each(|(i, out_row)| {
            nt_row(out_row, &a[i * k..(i + 1) * k], b, k);
        });
        return;
    }
    mm_nt_seq(a, b, n, k, m, out);
}

/// `out[n,m] = a[k,n]^T . b[k,m]`; parallel over output rows when profitable.
pub fn mm_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if n * k * m >= PAR_MIN_FLOPS {
        out.par_chunks_mut(m).enumerate().for_each(|(i, out_row)| {
            tn_row(out_row, a, b, i, n, k, m);
        });
        return;
    }
    mm_tn_seq(a, b, n, k, m, out);
}
