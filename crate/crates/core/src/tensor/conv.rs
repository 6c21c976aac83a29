//! im2col-based convolution kernels (forward and adjoints).
//!
//! Cross-correlation convention, square kernels. The tape ops in
//! `tape.rs` wrap these with shape checking and gradient bookkeeping.

use super::linalg::{matmul, matmul_nt, matmul_tn};
use rayon::prelude::*;

/// Output extent of a convolution along one axis, if positive.
pub fn conv2d_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose2d_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    let grown = (input - 1) * stride + kernel + output_padding;
    if grown <= 2 * padding {
        return None;
    }
    Some(grown - 2 * padding)
}

/// Gather patches of `src` (shape `[c, sh, sw]`) into a `[c*k*k, gh*gw]`
/// matrix. Column `(gr, gc)` holds `src[ch, gr*stride - pad + kr, gc*stride - pad + kc]`
/// with zeros outside the image.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    c: usize,
    sh: usize,
    sw: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Vec<f64> {
    let cols = gh * gw;
    let mut out = vec![0.0; c * k * k * cols];
    for ch in 0..c {
        let plane = &src[ch * sh * sw..(ch + 1) * sh * sw];
        for kr in 0..k {
            for kc in 0..k {
                let row = &mut out[((ch * k + kr) * k + kc) * cols..][..cols];
                for gr in 0..gh {
                    let sr = (gr * stride + kr) as isize - pad as isize;
                    if sr < 0 || sr >= sh as isize {
                        continue;
                    }
                    let src_row = &plane[sr as usize * sw..(sr as usize + 1) * sw];
                    let dst_row = &mut row[gr * gw..(gr + 1) * gw];
                    for (gc, d) in dst_row.iter_mut().enumerate() {
                        let sc = (gc * stride + kc) as isize - pad as isize;
                        if sc >= 0 && sc < sw as isize {
                            *d = src_row[sc as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `im2col`: scatter-add a `[c*k*k, gh*gw]` matrix back into a
/// `[c, th, tw]` image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols_mat: &[f64],
    c: usize,
    th: usize,
    tw: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Vec<f64> {
    let cols = gh * gw;
    let mut out = vec![0.0; c * th * tw];
    for ch in 0..c {
        let plane = &mut out[ch * th * tw..(ch + 1) * th * tw];
        for kr in 0..k {
            for kc in 0..k {
                let row = &cols_mat[((ch * k + kr) * k + kc) * cols..][..cols];
                for gr in 0..gh {
                    let tr = (gr * stride + kr) as isize - pad as isize;
                    if tr < 0 || tr >= th as isize {
                        continue;
                    }
                    let dst_row = &mut plane[tr as usize * tw..(tr as usize + 1) * tw];
                    let src_row = &row[gr * gw..(gr + 1) * gw];
                    for (gc, &v) in src_row.iter().enumerate() {
                        let tc = (gc * stride + kc) as isize - pad as isize;
                        if tc >= 0 && tc < tw as isize {
                            dst_row[tc as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Batched conv2d forward. `x: [b, cin, h, w]`, `w: [cout, cin, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let in_sz = cin * h * wd;
    let out_sz = cout * oh * ow;
    let mut out = vec![0.0; b * out_sz];
    out.par_chunks_mut(out_sz)
        .zip(x.par_chunks(in_sz))
        .for_each(|(ob, xb)| {
            let cols = im2col(xb, cin, h, wd, k, stride, pad, oh, ow);
            let prod = matmul(w, &cols, cout, cin * k * k, oh * ow);
            ob.copy_from_slice(&prod);
        });
    out
}

/// Gradients of conv2d w.r.t. input and weight.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<f64>) {
    let in_sz = cin * h * wd;
    let out_sz = cout * oh * ow;
    let kk = cin * k * k;
    let mut dx = vec![0.0; b * in_sz];
    // Per-sample weight gradients, reduced in index order afterwards so the
    // result is independent of scheduling.
    let per_sample: Vec<Vec<f64>> = dx
        .par_chunks_mut(in_sz)
        .zip(x.par_chunks(in_sz))
        .zip(grad_out.par_chunks(out_sz))
        .map(|((dxb, xb), gb)| {
            let gcols = matmul_tn(w, gb, kk, cout, oh * ow);
            dxb.copy_from_slice(&col2im(&gcols, cin, h, wd, k, stride, pad, oh, ow));
            let cols = im2col(xb, cin, h, wd, k, stride, pad, oh, ow);
            matmul_nt(gb, &cols, cout, oh * ow, kk)
        })
        .collect();
    let mut dw = vec![0.0; cout * kk];
    for sample in per_sample {
        for (acc, v) in dw.iter_mut().zip(sample) {
            *acc += v;
        }
    }
    (dx, dw)
}

/// Batched transposed conv2d forward. `x: [b, cin, h, w]`, `w: [cin, cout, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_forward(
    x: &[f64],
    w: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let in_sz = cin * h * wd;
    let out_sz = cout * oh * ow;
    let kk = cout * k * k;
    let mut out = vec![0.0; b * out_sz];
    out.par_chunks_mut(out_sz)
        .zip(x.par_chunks(in_sz))
        .for_each(|(ob, xb)| {
            let cols = matmul_tn(w, xb, kk, cin, h * wd);
            ob.copy_from_slice(&col2im(&cols, cout, oh, ow, k, stride, pad, h, wd));
        });
    out
}

/// Gradients of conv_transpose2d w.r.t. input and weight.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<f64>) {
    let in_sz = cin * h * wd;
    let out_sz = cout * oh * ow;
    let kk = cout * k * k;
    let mut dx = vec![0.0; b * in_sz];
    let per_sample: Vec<Vec<f64>> = dx
        .par_chunks_mut(in_sz)
        .zip(x.par_chunks(in_sz))
        .zip(grad_out.par_chunks(out_sz))
        .map(|((dxb, xb), gb)| {
            let gcols = im2col(gb, cout, oh, ow, k, stride, pad, h, wd);
            dxb.copy_from_slice(&matmul(w, &gcols, cin, kk, h * wd));
            matmul_nt(xb, &gcols, cin, h * wd, kk)
        })
        .collect();
    let mut dw = vec![0.0; cin * kk];
    for sample in per_sample {
        for (acc, v) in dw.iter_mut().zip(sample) {
            *acc += v;
        }
    }
    (dx, dw)
}
