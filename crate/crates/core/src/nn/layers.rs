//! Single-sample layer kernels. Tensors are flat `[channel][row][col]`.

use crate::Scalar;

/// 3x3 convolution, stride 1, zero padding 1.
pub(crate) fn conv3x3_forward<T: Scalar>(
    input: &[T],
    weights: &[T],
    bias: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    out: &mut [T],
) {
    let plane = h * w;
    for co in 0..cout {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        out_c.fill(bias[co]);
        for ci in 0..cin {
            let in_c = &input[ci * plane..(ci + 1) * plane];
            let k = &weights[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    let (x0, x1) = col_range(kx, w);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let iy = y + ky;
                        if iy == 0 || iy > h {
                            continue;
                        }
                        let src = &in_c[(iy - 1) * w + x0 + kx - 1..(iy - 1) * w + x1 + kx - 1];
                        let dst = &mut out_c[y * w + x0..y * w + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `x` for which `x + kx - 1` is a valid input column.
fn col_range(kx: usize, w: usize) -> (usize, usize) {
    let x0 = if kx == 0 { 1 } else { 0 };
    let x1 = if kx == 2 { w.saturating_sub(1) } else { w };
    (x0, x1)
}

/// Accumulates weight and bias gradients and writes the input gradient.
pub(crate) fn conv3x3_backward<T: Scalar>(
    input: &[T],
    weights: &[T],
    d_out: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    d_weights: &mut [T],
    d_bias: &mut [T],
    d_input: Option<&mut [T]>,
) {
    let plane = h * w;
    let mut d_input = d_input;
    if let Some(di) = d_input.as_deref_mut() {
        di.fill(T::zero());
    }
    for co in 0..cout {
        let g_c = &d_out[co * plane..(co + 1) * plane];
        d_bias[co] += g_c.iter().copied().sum::<T>();
        for ci in 0..cin {
            let in_c = &input[ci * plane..(ci + 1) * plane];
            let base = (co * cin + ci) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (x0, x1) = col_range(kx, w);
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = weights[base + ky * 3 + kx];
                    let mut acc = T::zero();
                    for y in 0..h {
                        let iy = y + ky;
                        if iy == 0 || iy > h {
                            continue;
                        }
                        let start = (iy - 1) * w + x0 + kx - 1;
                        let len = x1 - x0;
                        let src = &in_c[start..start + len];
                        let g = &g_c[y * w + x0..y * w + x1];
                        for (&s, &gv) in src.iter().zip(g) {
                            acc += s * gv;
                        }
                        if let Some(di) = d_input.as_deref_mut() {
                            let dst = &mut di[ci * plane + start..ci * plane + start + len];
                            for (d, &gv) in dst.iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    }
                    d_weights[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

pub(crate) fn relu_forward<T: Scalar>(input: &[T], out: &mut [T]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = if x > T::zero() { x } else { T::zero() };
    }
}

pub(crate) fn relu_backward<T: Scalar>(input: &[T], d_out: &[T], d_input: &mut [T]) {
    for ((d, &x), &g) in d_input.iter_mut().zip(input).zip(d_out) {
        *d = if x > T::zero() { g } else { T::zero() };
    }
}

/// 2x2 max pool, stride 2, trailing odd row/column dropped. Records the
/// flat input index of each winner (first maximum on ties).
pub(crate) fn maxpool_forward<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, out: &mut [T], argmax: &mut [u32]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let mut best = ch * h * w + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = ch * ho * wo + y * wo + x;
                out[o] = input[best];
                argmax[o] = best as u32;
            }
        }
    }
}

pub(crate) fn maxpool_backward<T: Scalar>(d_out: &[T], argmax: &[u32], d_input: &mut [T]) {
    d_input.fill(T::zero());
    for (&g, &idx) in d_out.iter().zip(argmax) {
        d_input[idx as usize] += g;
    }
}

pub(crate) fn gap_forward<T: Scalar>(input: &[T], c: usize, plane: usize, out: &mut [T]) {
    let inv = T::one() / T::of(plane as f64);
    for ch in 0..c {
        out[ch] = input[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>() * inv;
    }
}

pub(crate) fn gap_backward<T: Scalar>(d_out: &[T], c: usize, plane: usize, d_input: &mut [T]) {
    let inv = T::one() / T::of(plane as f64);
    for ch in 0..c {
        d_input[ch * plane..(ch + 1) * plane].fill(d_out[ch] * inv);
    }
}

/// `out = W x + b` with `W` stored `[out][in]`.
pub(crate) fn dense_forward<T: Scalar>(input: &[T], weights: &[T], bias: &[T], n_in: usize, out: &mut [T]) {
    for (o, (row, &b)) in out.iter_mut().zip(weights.chunks_exact(n_in).zip(bias)) {
        *o = b + row.iter().zip(input).map(|(&wv, &x)| wv * x).sum::<T>();
    }
}

pub(crate) fn dense_backward<T: Scalar>(
    input: &[T],
    weights: &[T],
    d_out: &[T],
    n_in: usize,
    d_weights: &mut [T],
    d_bias: &mut [T],
    d_input: &mut [T],
) {
    d_input.fill(T::zero());
    for (o, &g) in d_out.iter().enumerate() {
        d_bias[o] += g;
        let row = &weights[o * n_in..(o + 1) * n_in];
        let d_row = &mut d_weights[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            d_row[i] += g * input[i];
            d_input[i] += g * row[i];
        }
    }
}
