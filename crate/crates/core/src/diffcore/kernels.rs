//! Flat-slice matrix kernels. Row-parallel via rayon; each output element is
//! produced by exactly one thread with a fixed-order inner loop, so results
//! are bitwise deterministic regardless of scheduling.

use rayon::prelude::*;

/// Rows below this stay serial; rayon overhead dominates otherwise.
const PAR_THRESHOLD: usize = 64;

/// out[m,q] = a[m,p] · b[p,q], out pre-zeroed.
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(out.len(), m * q);
    let row = |arow: &[f64], orow: &mut [f64]| {
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * q..(k + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if m >= PAR_THRESHOLD {
        out.par_chunks_mut(q)
            .zip(a.par_chunks(p))
            .for_each(|(orow, arow)| row(arow, orow));
    } else {
        for (orow, arow) in out.chunks_mut(q).zip(a.chunks(p)) {
            row(arow, orow);
        }
    }
}

/// out[m,q] = a[m,p] · bᵀ where b is stored as [q,p]. Dot-product form.
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), q * p);
    debug_assert_eq!(out.len(), m * q);
    let row = |arow: &[f64], orow: &mut [f64]| {
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    };
    if m >= PAR_THRESHOLD {
        out.par_chunks_mut(q)
            .zip(a.par_chunks(p))
            .for_each(|(orow, arow)| row(arow, orow));
    } else {
        for (orow, arow) in out.chunks_mut(q).zip(a.chunks(p)) {
            row(arow, orow);
        }
    }
}

/// out[p,q] = aᵀ · g where a is stored as [m,p] and g as [m,q].
/// Parallel over output rows k; each thread scans all m rows of its slice.
pub fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(g.len(), m * q);
    debug_assert_eq!(out.len(), p * q);
    let fill = |k0: usize, chunk: &mut [f64]| {
        let rows = chunk.len() / q;
        for i in 0..m {
            let grow = &g[i * q..(i + 1) * q];
            for r in 0..rows {
                let aik = a[i * p + k0 + r];
                let orow = &mut chunk[r * q..(r + 1) * q];
                for (o, &gv) in orow.iter_mut().zip(grow) {
                    *o += aik * gv;
                }
            }
        }
    };
    if p >= 8 && m >= PAR_THRESHOLD {
        let nthreads = rayon::current_num_threads().max(1);
        let rows_per = p.div_ceil(nthreads);
        out.par_chunks_mut(rows_per * q)
            .enumerate()
            .for_each(|(ci, chunk)| fill(ci * rows_per, chunk));
    } else {
        fill(0, out);
    }
}
