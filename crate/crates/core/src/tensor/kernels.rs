//! Raw slice kernels shared by [`Tensor`](super::Tensor) and the tape.

use super::Real;

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub(crate) fn matmul<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = R::zero());
    matmul_acc(a, b, out, m, k, n);
}

/// `out += a · b`; row-saxpy ordering so the inner loop vectorizes.
pub(crate) fn matmul_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == R::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += s * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub(crate) fn matmul_nt_acc<R: Real>(g: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = R::zero();
            for (&x, &y) in g_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn matmul_tn_acc<R: Real>(a: &[R], g: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == R::zero() {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in row.iter_mut().zip(g_row) {
                *o += s * gv;
            }
        }
    }
}

/// Softmax of an `m×n` matrix along rows (`axis == 1`) or columns (`axis == 0`).
pub(crate) fn softmax<R: Real>(x: &[R], out: &mut [R], m: usize, n: usize, axis: usize) {
    let (lines, len, stride, step) = if axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
    for line in 0..lines {
        let base = line * stride;
        let mut max = f64::NEG_INFINITY;
        for j in 0..len {
            max = max.max(x[base + j * step].f64());
        }
        let mut sum = 0.0f64;
        for j in 0..len {
            let e = (x[base + j * step].f64() - max).exp();
            out[base + j * step] = R::of(e);
            sum += e;
        }
        for j in 0..len {
            let idx = base + j * step;
            out[idx] = R::of(out[idx].f64() / sum);
        }
    }
}
