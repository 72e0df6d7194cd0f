//! Row-major f64 matrix kernels backing conv2d and linear layers.
//!
//! Kernels process four output rows per pass so each streamed B row is
//! reused four times, with a fixed k-order per output element: results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

/// Work threshold below which the serial path is used.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;
/// Column block: 4 rows x 512 columns of f64 accumulators stay in L1.
const BLOCK_N: usize = 512;
/// Output rows per pass.
const MR: usize = 4;

#[inline]
fn add_assign(dst: &mut [f64], src: &[f64], accumulate: bool) {
    if accumulate {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        dst.copy_from_slice(src);
    }
}

/// Four-row axpy panel: C[r, jb] (+)= sum_k a(k, r) * B[k, jb] where
/// `a(k, r)` is supplied by the caller (plain or transposed A access).
#[inline]
fn panel4<F: Fn(usize, usize) -> f64>(
    rows: &mut [&mut [f64]],
    aval: F,
    b: &[f64],
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let mut j0 = 0;
    while j0 < n {
        let jn = (j0 + BLOCK_N).min(n);
        let w = jn - j0;
        let mut acc = [[0.0f64; BLOCK_N]; MR];
        for ki in 0..k {
            let brow = &b[ki * n + j0..ki * n + jn];
            match rows.len() {
                1 => {
                    let a0 = aval(ki, 0);
                    for (j, &bv) in brow.iter().enumerate() {
                        acc[0][j] += a0 * bv;
                    }
                }
                2 => {
                    let (a0, a1) = (aval(ki, 0), aval(ki, 1));
                    for (j, &bv) in brow.iter().enumerate() {
                        acc[0][j] += a0 * bv;
                        acc[1][j] += a1 * bv;
                    }
                }
                3 => {
                    let (a0, a1, a2) = (aval(ki, 0), aval(ki, 1), aval(ki, 2));
                    for (j, &bv) in brow.iter().enumerate() {
                        acc[0][j] += a0 * bv;
                        acc[1][j] += a1 * bv;
                        acc[2][j] += a2 * bv;
                    }
                }
                _ => {
                    let (a0, a1, a2, a3) = (aval(ki, 0), aval(ki, 1), aval(ki, 2), aval(ki, 3));
                    for (j, &bv) in brow.iter().enumerate() {
                        acc[0][j] += a0 * bv;
                        acc[1][j] += a1 * bv;
                        acc[2][j] += a2 * bv;
                        acc[3][j] += a3 * bv;
                    }
                }
            }
        }
        for (r, row) in rows.iter_mut().enumerate() {
            add_assign(&mut row[j0..jn], &acc[r][..w], accumulate);
        }
        j0 = jn;
    }
}

fn run_panels(
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    parallel: bool,
    f: impl Fn(usize, &mut [&mut [f64]]) + Sync,
) {
    debug_assert_eq!(c.len(), m * n);
    let work = |(p, chunk): (usize, &mut [f64])| {
        let mut rows: Vec<&mut [f64]> = chunk.chunks_mut(n).collect();
        f(p * MR, &mut rows);
    };
    if parallel {
        c.par_chunks_mut(MR * n).enumerate().for_each(work);
    } else {
        c.chunks_mut(MR * n).enumerate().for_each(work);
    }
}

/// C[m,n] = A[m,k] * B[k,n], overwriting or accumulating into `c`.
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let parallel = m * k * n >= PAR_FLOP_THRESHOLD;
    run_panels(c, m, k, n, parallel, |i0, rows| {
        panel4(rows, |ki, r| a[(i0 + r) * k + ki], b, k, n, accumulate);
    });
}

/// C[m,n] = A^T * B where A is [k,m] row-major.
pub fn gemm_at_b(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let parallel = m * k * n >= PAR_FLOP_THRESHOLD;
    run_panels(c, m, k, n, parallel, |i0, rows| {
        panel4(rows, |ki, r| a[ki * m + i0 + r], b, k, n, accumulate);
    });
}

/// Four dot products sharing one pass over `b`, eight accumulator lanes
/// each; a single-chain `zip().sum()` would be latency-bound because FP
/// addition cannot be reassociated.
#[inline]
fn dot4(a: [&[f64]; 4], b: &[f64], nrows: usize, out: &mut [f64; 4]) {
    const LANES: usize = 4;
    let k = b.len();
    let chunks = k / LANES;
    let mut acc = [[0.0f64; LANES]; 4];
    for ch in 0..chunks {
        let bo = &b[ch * LANES..(ch + 1) * LANES];
        for r in 0..nrows {
            let ao = &a[r][ch * LANES..(ch + 1) * LANES];
            for l in 0..LANES {
                acc[r][l] += ao[l] * bo[l];
            }
        }
    }
    for r in 0..nrows {
        let mut tail = 0.0;
        for i in chunks * LANES..k {
            tail += a[r][i] * b[i];
        }
        out[r] = ((acc[r][0] + acc[r][2]) + (acc[r][1] + acc[r][3])) + tail;
    }
}

/// C[m,n] = A * B^T where B is [n,k] row-major.
pub fn gemm_a_bt(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let parallel = m * k * n >= PAR_FLOP_THRESHOLD;
    run_panels(c, m, k, n, parallel, |i0, rows| {
        let nrows = rows.len();
        let arow = |r: usize| &a[(i0 + r.min(nrows - 1)) * k..(i0 + r.min(nrows - 1) + 1) * k];
        let asel = [arow(0), arow(1), arow(2), arow(3)];
        let mut out = [0.0f64; 4];
        for j in 0..n {
            dot4(asel, &b[j * k..(j + 1) * k], nrows, &mut out);
            for (r, row) in rows.iter_mut().enumerate() {
                if accumulate {
                    row[j] += out[r];
                } else {
                    row[j] = out[r];
                }
            }
        }
    });
}
