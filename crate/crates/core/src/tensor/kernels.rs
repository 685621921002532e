//! Row-major matrix kernels.
//!
//! `affine_rows` accumulates each output element as `((0 + x0*w0) + x1*w1) + ... + b`,
//! the same sequence the naive triple loop produces, so the two agree bit for bit.
//! The backward kernels carry no such constraint and use split accumulators.

/// Naive reference: `y[r, j] = sum_i x[r, i] * w[i, j] + b[j]`.
pub fn affine_rows_naive(x: &[f64], in_dim: usize, w: &[f64], b: &[f64], y: &mut [f64]) {
    let out = b.len();
    let rows = if in_dim == 0 { y.len() / out.max(1) } else { x.len() / in_dim };
    for r in 0..rows {
        for j in 0..out {
            let mut s = 0.0;
            for i in 0..in_dim {
                s += x[r * in_dim + i] * w[i * out + j];
            }
            y[r * out + j] = s + b[j];
        }
    }
}

/// Blocked `y = x W + b` over rows of `x`.
pub fn affine_rows(x: &[f64], in_dim: usize, w: &[f64], b: &[f64], y: &mut [f64]) {
    let out = b.len();
    if out == 0 {
        return;
    }
    let rows = y.len() / out;
    debug_assert_eq!(x.len(), rows * in_dim);
    debug_assert_eq!(w.len(), in_dim * out);
    y.fill(0.0);

    let mut r = 0;
    while r + 4 <= rows {
        let block = &mut y[r * out..(r + 4) * out];
        let (y01, y23) = block.split_at_mut(2 * out);
        let (y0, y1) = y01.split_at_mut(out);
        let (y2, y3) = y23.split_at_mut(out);
        let x0 = &x[r * in_dim..(r + 1) * in_dim];
        let x1 = &x[(r + 1) * in_dim..(r + 2) * in_dim];
        let x2 = &x[(r + 2) * in_dim..(r + 3) * in_dim];
        let x3 = &x[(r + 3) * in_dim..(r + 4) * in_dim];
        for (i, wi) in w.chunks_exact(out).enumerate() {
            let (a0, a1, a2, a3) = (x0[i], x1[i], x2[i], x3[i]);
            for ((((o0, o1), o2), o3), &wv) in y0
                .iter_mut()
                .zip(y1.iter_mut())
                .zip(y2.iter_mut())
                .zip(y3.iter_mut())
                .zip(wi)
            {
                *o0 += a0 * wv;
                *o1 += a1 * wv;
                *o2 += a2 * wv;
                *o3 += a3 * wv;
            }
        }
        r += 4;
    }
    while r < rows {
        let yr = &mut y[r * out..(r + 1) * out];
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for (wi, &a) in w.chunks_exact(out).zip(xr) {
            for (o, &wv) in yr.iter_mut().zip(wi) {
                *o += a * wv;
            }
        }
        r += 1;
    }
    for yr in y.chunks_exact_mut(out) {
        for (o, &bv) in yr.iter_mut().zip(b) {
            *o += bv;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `dx = dy W^T` where `w` is `[in_dim, out]` and `dy` is `[rows, out]`.
pub fn matmul_a_bt(dy: &[f64], out: usize, w: &[f64], in_dim: usize, dx: &mut [f64]) {
    if out == 0 {
        dx.fill(0.0);
        return;
    }
    let rows = dy.len() / out;
    debug_assert_eq!(dx.len(), rows * in_dim);
    for r in 0..rows {
        let g = &dy[r * out..(r + 1) * out];
        let dr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for (d, wi) in dr.iter_mut().zip(w.chunks_exact(out)) {
            *d = dot(g, wi);
        }
    }
}

/// `dw += x^T dy`, `x` is `[rows, in_dim]`, `dy` is `[rows, out]`.
pub fn matmul_at_b_acc(x: &[f64], in_dim: usize, dy: &[f64], out: usize, dw: &mut [f64]) {
    if out == 0 || in_dim == 0 {
        return;
    }
    let rows = dy.len() / out;
    for (i, dwi) in dw.chunks_exact_mut(out).enumerate() {
        let mut r = 0;
        while r + 4 <= rows {
            let (a0, a1, a2, a3) = (
                x[r * in_dim + i],
                x[(r + 1) * in_dim + i],
                x[(r + 2) * in_dim + i],
                x[(r + 3) * in_dim + i],
            );
            let g0 = &dy[r * out..(r + 1) * out];
            let g1 = &dy[(r + 1) * out..(r + 2) * out];
            let g2 = &dy[(r + 2) * out..(r + 3) * out];
            let g3 = &dy[(r + 3) * out..(r + 4) * out];
            for ((((d, &v0), &v1), &v2), &v3) in
                dwi.iter_mut().zip(g0).zip(g1).zip(g2).zip(g3)
            {
                *d += (a0 * v0 + a1 * v1) + (a2 * v2 + a3 * v3);
            }
            r += 4;
        }
        while r < rows {
            let a = x[r * in_dim + i];
            for (d, &v) in dwi.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
                *d += a * v;
            }
            r += 1;
        }
    }
}
