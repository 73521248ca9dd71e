//! Low-level compute kernels for the spatial ops (conv3x3 stride 1 pad 1,
//! maxpool2x2, nearest-neighbor upsample2x2) and the dense layer.
//!
//! Parallelism is per output plane only: every element is accumulated by
//! exactly one task in a fixed order, so results are bitwise deterministic
//! regardless of thread count.

use rayon::prelude::*;

use crate::scalar::Real;

/// dst[y][x] += w * src[y+dy][x+dx] over the valid intersection of an
/// (h, w)-plane with its (dy, dx)-shifted copy.
#[inline]
fn accum_shifted<T: Real>(dst: &mut [T], src: &[T], wv: T, dy: isize, dx: isize, h: usize, w: usize) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize).min(h as isize - dy).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize).min(w as isize - dx).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let s = &src[sy * w + (x0 as isize + dx) as usize..];
        for (di, si) in d.iter_mut().zip(s) {
            *di += wv * *si;
        }
    }
}

/// sum over the valid intersection of a[y][x] * b[y+dy][x+dx].
#[inline]
fn dot_shifted<T: Real>(a: &[T], b: &[T], dy: isize, dx: isize, h: usize, w: usize) -> T {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize).min(h as isize - dy).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize).min(w as isize - dx).max(0) as usize;
    let mut acc = T::zero();
    if x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let ar = &a[y * w + x0..y * w + x1];
        let br = &b[sy * w + (x0 as isize + dx) as usize..sy * w + (x0 as isize + dx) as usize + (x1 - x0)];
        for (ai, bi) in ar.iter().zip(br) {
            acc += *ai * *bi;
        }
    }
    acc
}

fn parallel_worthwhile(out_ch: usize, plane: usize, in_ch: usize) -> bool {
    out_ch >= 4 && plane * in_ch >= 2048
}

/// Forward conv3x3: x (ic, h, w), weight (oc, ic, 3, 3), bias (oc) -> (oc, h, w).
pub fn conv3x3_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    ic: usize,
    oc: usize,
    h: usize,
    w: usize,
    out: &mut [T],
) {
    let plane = h * w;
    let run = |o: usize, out_plane: &mut [T]| {
        out_plane.fill(bias[o]);
        for i in 0..ic {
            let src = &x[i * plane..(i + 1) * plane];
            let wbase = (o * ic + i) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = weight[wbase + ky * 3 + kx];
                    accum_shifted(out_plane, src, wv, ky as isize - 1, kx as isize - 1, h, w);
                }
            }
        }
    };
    if parallel_worthwhile(oc, plane, ic) {
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(o, chunk)| run(o, chunk));
    } else {
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            run(o, chunk);
        }
    }
}

/// Backward conv3x3. Returns gradients w.r.t. input, weight, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    ic: usize,
    oc: usize,
    h: usize,
    w: usize,
    grad_x: &mut [T],
    grad_w: &mut [T],
    grad_b: &mut [T],
) {
    let plane = h * w;

    for o in 0..oc {
        let g = &grad_out[o * plane..(o + 1) * plane];
        grad_b[o] = g.iter().fold(T::zero(), |acc, &v| acc + v);
    }

    let dw_run = |o: usize, dw_oc: &mut [T]| {
        let g = &grad_out[o * plane..(o + 1) * plane];
        for i in 0..ic {
            let src = &x[i * plane..(i + 1) * plane];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    dw_oc[i * 9 + ky * 3 + kx] =
                        dot_shifted(g, src, ky as isize - 1, kx as isize - 1, h, w);
                }
            }
        }
    };
    let dx_run = |i: usize, dx_ic: &mut [T]| {
        dx_ic.fill(T::zero());
        for o in 0..oc {
            let g = &grad_out[o * plane..(o + 1) * plane];
            let wbase = (o * ic + i) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = weight[wbase + ky * 3 + kx];
                    accum_shifted(dx_ic, g, wv, 1 - ky as isize, 1 - kx as isize, h, w);
                }
            }
        }
    };

    if parallel_worthwhile(oc, plane, ic) {
        grad_w
            .par_chunks_mut(ic * 9)
            .enumerate()
            .for_each(|(o, chunk)| dw_run(o, chunk));
        grad_x
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, chunk)| dx_run(i, chunk));
    } else {
        for (o, chunk) in grad_w.chunks_mut(ic * 9).enumerate() {
            dw_run(o, chunk);
        }
        for (i, chunk) in grad_x.chunks_mut(plane).enumerate() {
            dx_run(i, chunk);
        }
    }
}

/// maxpool2x2 with stride 2; h and w must be even. Stores the flat input
/// index of each maximum for the backward pass.
pub fn maxpool2x2_forward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [T],
    argmax: &mut Vec<u32>,
) {
    let (oh, ow) = (h / 2, w / 2);
    argmax.clear();
    argmax.resize(c * oh * ow, 0);
    for ch in 0..c {
        let src = &x[ch * h * w..];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (2 * oy) * w + 2 * ox;
                let idx4 = [base, base + 1, base + w, base + w + 1];
                let mut best = idx4[0];
                let mut bv = src[idx4[0]];
                for &i in &idx4[1..] {
                    if src[i] > bv {
                        bv = src[i];
                        best = i;
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = bv;
                argmax[ch * oh * ow + oy * ow + ox] = (ch * h * w + best) as u32;
            }
        }
    }
}

pub fn maxpool2x2_backward<T: Real>(grad_out: &[T], argmax: &[u32], grad_x: &mut [T]) {
    for (g, &idx) in grad_out.iter().zip(argmax) {
        grad_x[idx as usize] += *g;
    }
}

/// Nearest-neighbor upsample by 2 in both spatial dims.
pub fn upsample2x2_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..oh {
            let src_row = &x[ch * h * w + (y / 2) * w..];
            let dst_row = &mut out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            for (xo, d) in dst_row.iter_mut().enumerate() {
                *d = src_row[xo / 2];
            }
        }
    }
}

pub fn upsample2x2_backward<T: Real>(grad_out: &[T], c: usize, h: usize, w: usize, grad_x: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..oh {
            let g_row = &grad_out[ch * oh * ow + y * ow..];
            let d_row = &mut grad_x[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            for xo in 0..ow {
                d_row[xo / 2] += g_row[xo];
            }
        }
    }
}

/// Dense layer y = W x + b with W (out, in) row-major.
pub fn dense_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], n_in: usize, n_out: usize, out: &mut [T]) {
    for o in 0..n_out {
        let row = &weight[o * n_in..(o + 1) * n_in];
        let mut acc = bias[o];
        for (wi, xi) in row.iter().zip(x) {
            acc += *wi * *xi;
        }
        out[o] = acc;
    }
}

pub fn dense_backward<T: Real>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    n_in: usize,
    n_out: usize,
    grad_x: &mut [T],
    grad_w: &mut [T],
    grad_b: &mut [T],
) {
    for o in 0..n_out {
        let g = grad_out[o];
        grad_b[o] = g;
        let wrow = &weight[o * n_in..(o + 1) * n_in];
        let dwrow = &mut grad_w[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            dwrow[i] = g * x[i];
            grad_x[i] += g * wrow[i];
        }
    }
}
