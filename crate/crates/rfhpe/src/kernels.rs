//! Compute kernels behind the autodiff graph: GEMM-backed 2D convolution,
//! max pooling, and nearest-neighbor upsampling.
//!
//! Batched activations are `[B, C, H, W]` row-major, weights `[O, C, KH, KW]`.
//! Convolution lowers each sample to a column matrix and multiplies with
//! `matrixmultiply::dgemm`. Parallel paths split work across batch samples
//! (or weight slices for the kernel gradient) so every output element is
//! written by exactly one task and results are bitwise independent of the
//! thread schedule. The `par: bool` argument selects the rayon path; without
//! the `parallel` feature it falls back to the sequential loop.

use crate::par;

/// Output spatial size for one axis.
pub fn conv_out_dim(input: usize, kernel: usize, pad: usize, stride: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lower one `[C, H, W]` sample into a `[C*KH*KW, OH*OW]` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    pad: usize,
    (sh, sw): (usize, usize),
    col: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, pad, sh);
    let ow = conv_out_dim(w, kw, pad, sw);
    let plane = oh * ow;
    debug_assert_eq!(col.len(), c * kh * kw * plane);
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ch * kh + u) * kw + v) * plane;
                for i in 0..oh {
                    let src_i = (i * sh + u) as isize - pad as isize;
                    let dst = row + i * ow;
                    if src_i < 0 || src_i >= h as isize {
                        col[dst..dst + ow].fill(0.0);
                        continue;
                    }
                    let src_row = src_i as usize * w;
                    for j in 0..ow {
                        let src_j = (j * sw + v) as isize - pad as isize;
                        col[dst + j] = if src_j < 0 || src_j >= w as isize {
                            0.0
                        } else {
                            xc[src_row + src_j as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column-matrix gradient back onto a `[C, H, W]` sample.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    dcol: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    pad: usize,
    (sh, sw): (usize, usize),
    dx: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, pad, sh);
    let ow = conv_out_dim(w, kw, pad, sw);
    let plane = oh * ow;
    for ch in 0..c {
        let base = ch * h * w;
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ch * kh + u) * kw + v) * plane;
                for i in 0..oh {
                    let src_i = (i * sh + u) as isize - pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        continue;
                    }
                    let dst_row = base + src_i as usize * w;
                    for j in 0..ow {
                        let src_j = (j * sw + v) as isize - pad as isize;
                        if src_j < 0 || src_j >= w as isize {
                            continue;
                        }
                        dx[dst_row + src_j as usize] += dcol[row + i * ow + j];
                    }
                }
            }
        }
    }
}

/// C[m,n] += alpha * A[m,k] * B[k,n] with explicit strides, row-major slices.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad: usize,
    pub stride: (usize, usize),
}

impl ConvDims {
    pub fn infer(x_shape: &[usize], w_shape: &[usize], pad: usize, stride: (usize, usize)) -> ConvDims {
        ConvDims {
            batch: x_shape[0],
            in_ch: x_shape[1],
            h: x_shape[2],
            w: x_shape[3],
            out_ch: w_shape[0],
            kh: w_shape[2],
            kw: w_shape[3],
            oh: conv_out_dim(x_shape[2], w_shape[2], pad, stride.0),
            ow: conv_out_dim(x_shape[3], w_shape[3], pad, stride.1),
            pad,
            stride,
        }
    }

    pub fn ckk(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

/// Batched convolution forward. Returns the output buffer and, when
/// `keep_cols` is set, the per-sample column matrices for reuse in backward.
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
    keep_cols: bool,
    par: bool,
) -> (Vec<f64>, Option<Vec<Vec<f64>>>) {
    let ckk = d.ckk();
    let plane = d.oh * d.ow;
    let in_plane = d.in_ch * d.h * d.w;
    let out_plane = d.out_ch * plane;

    let per_sample = |b: usize| -> (Vec<f64>, Option<Vec<f64>>) {
        let mut col = vec![0.0; ckk * plane];
        im2col(
            &x[b * in_plane..(b + 1) * in_plane],
            (d.in_ch, d.h, d.w),
            (d.kh, d.kw),
            d.pad,
            d.stride,
            &mut col,
        );
        let mut out = vec![0.0; out_plane];
        dgemm(
            d.out_ch,
            ckk,
            plane,
            1.0,
            weight,
            ckk as isize,
            1,
            &col,
            plane as isize,
            1,
            0.0,
            &mut out,
        );
        if let Some(bias) = bias {
            for o in 0..d.out_ch {
                let bo = bias[o];
                for v in &mut out[o * plane..(o + 1) * plane] {
                    *v += bo;
                }
            }
        }
        (out, if keep_cols { Some(col) } else { None })
    };

    let results = par::map_indexed(d.batch, par, per_sample);
    let mut out = Vec::with_capacity(d.batch * out_plane);
    let mut cols = if keep_cols { Some(Vec::with_capacity(d.batch)) } else { None };
    for (o, c) in results {
        out.extend_from_slice(&o);
        if let (Some(cols), Some(c)) = (cols.as_mut(), c) {
            cols.push(c);
        }
    }
    (out, cols)
}

/// Batched convolution backward.
///
/// `cols` may carry the forward column matrices; when absent they are
/// recomputed. The kernel gradient is accumulated over samples in batch
/// order regardless of `par`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    gout: &[f64],
    x: &[f64],
    weight: &[f64],
    d: &ConvDims,
    cols: Option<&[Vec<f64>]>,
    need_dx: bool,
    need_dw: bool,
    par: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let ckk = d.ckk();
    let plane = d.oh * d.ow;
    let in_plane = d.in_ch * d.h * d.w;
    let out_plane = d.out_ch * plane;

    let sample_col = |b: usize| -> Vec<f64> {
        match cols {
            Some(cs) => cs[b].clone(),
            None => {
                let mut col = vec![0.0; ckk * plane];
                im2col(
                    &x[b * in_plane..(b + 1) * in_plane],
                    (d.in_ch, d.h, d.w),
                    (d.kh, d.kw),
                    d.pad,
                    d.stride,
                    &mut col,
                );
                col
            }
        }
    };

    // dW: per-sample partials, then a fixed-order reduction.
    let dw = if need_dw {
        let partials = par::map_indexed(d.batch, par, |b| {
            let col = sample_col(b);
            let mut dwb = vec![0.0; d.out_ch * ckk];
            // dW[o, ckk] = gout[o, plane] * col[ckk, plane]^T
            dgemm(
                d.out_ch,
                plane,
                ckk,
                1.0,
                &gout[b * out_plane..(b + 1) * out_plane],
                plane as isize,
                1,
                &col,
                1,
                plane as isize,
                0.0,
                &mut dwb,
            );
            dwb
        });
        let mut dw = vec![0.0; d.out_ch * ckk];
        for p in partials {
            for (a, b) in dw.iter_mut().zip(p.iter()) {
                *a += b;
            }
        }
        Some(dw)
    } else {
        None
    };

    let db = if need_dw {
        let mut db = vec![0.0; d.out_ch];
        for b in 0..d.batch {
            for o in 0..d.out_ch {
                let s: f64 = gout[b * out_plane + o * plane..b * out_plane + (o + 1) * plane]
                    .iter()
                    .sum();
                db[o] += s;
            }
        }
        Some(db)
    } else {
        None
    };

    let dx = if need_dx {
        let grads = par::map_indexed(d.batch, par, |b| {
            // dcol[ckk, plane] = W^T[ckk, out_ch] * gout[out_ch, plane]
            let mut dcol = vec![0.0; ckk * plane];
            dgemm(
                ckk,
                d.out_ch,
                plane,
                1.0,
                weight,
                1,
                ckk as isize,
                &gout[b * out_plane..(b + 1) * out_plane],
                plane as isize,
                1,
                0.0,
                &mut dcol,
            );
            let mut dxb = vec![0.0; in_plane];
            col2im_add(
                &dcol,
                (d.in_ch, d.h, d.w),
                (d.kh, d.kw),
                d.pad,
                d.stride,
                &mut dxb,
            );
            dxb
        });
        let mut dx = Vec::with_capacity(d.batch * in_plane);
        for g in grads {
            dx.extend_from_slice(&g);
        }
        Some(dx)
    } else {
        None
    };

    (dx, dw, db)
}

/// k x k stride-k max pooling over `[B, C, H, W]`. Returns pooled values and
/// the flat input index of each selected element (first occurrence wins on
/// ties, scanning row-major).
pub fn maxpool_forward(x: &[f64], shape: &[usize], k: usize, par: bool) -> (Vec<f64>, Vec<u32>) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let in_plane = h * w;
    let out_plane = oh * ow;
    let mut out = vec![0.0; b * c * out_plane];
    let mut arg = vec![0u32; b * c * out_plane];

    // Each (b, c) plane is an independent task.
    let planes = b * c;
    let results = par::map_indexed(planes, par, |p| {
        let src = &x[p * in_plane..(p + 1) * in_plane];
        let mut o = vec![0.0; out_plane];
        let mut a = vec![0u32; out_plane];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for di in 0..k {
                    for dj in 0..k {
                        let idx = (k * i + di) * w + (k * j + dj);
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                o[i * ow + j] = best;
                a[i * ow + j] = (p * in_plane + best_idx) as u32;
            }
        }
        (o, a)
    });
    for (p, (o, a)) in results.into_iter().enumerate() {
        out[p * out_plane..(p + 1) * out_plane].copy_from_slice(&o);
        arg[p * out_plane..(p + 1) * out_plane].copy_from_slice(&a);
    }
    (out, arg)
}

pub fn maxpool_backward(gout: &[f64], argmax: &[u32], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (g, &idx) in gout.iter().zip(argmax.iter()) {
        dx[idx as usize] += g;
    }
    dx
}

/// Nearest-neighbor upsampling of `[B, C, H, W]` by per-axis factors.
pub fn upsample_forward(x: &[f64], shape: &[usize], (fh, fw): (usize, usize)) -> Vec<f64> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * fh, w * fw);
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let si = i / fh;
            for j in 0..ow {
                dst[i * ow + j] = src[si * w + j / fw];
            }
        }
    }
    out
}

pub fn upsample_backward(gout: &[f64], in_shape: &[usize], (fh, fw): (usize, usize)) -> Vec<f64> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h * fh, w * fw);
    let mut dx = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        let g = &gout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let si = i / fh;
            for j in 0..ow {
                dst[si * w + j / fw] += g[i * ow + j];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_1x1_kernel() {
        // 1x1 kernel of weight 1.0 reproduces the input exactly.
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let d = ConvDims::infer(&[1, 1, 4, 4], &[1, 1, 1, 1], 0, (1, 1));
        let (out, _) = conv2d_forward(&x, &[1.0], None, &d, false, false);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_matches_naive_loop() {
        let d = ConvDims::infer(&[2, 3, 5, 6], &[4, 3, 3, 3], 1, (1, 1));
        let x: Vec<f64> = (0..2 * 3 * 5 * 6).map(|v| (v as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..4 * 3 * 3 * 3).map(|v| (v as f64 * 0.11).cos()).collect();
        let bias: Vec<f64> = vec![0.5, -0.25, 0.0, 1.0];
        let (out, _) = conv2d_forward(&x, &w, Some(&bias), &d, false, false);

        for b in 0..d.batch {
            for o in 0..d.out_ch {
                for i in 0..d.oh {
                    for j in 0..d.ow {
                        let mut acc = bias[o];
                        for c in 0..d.in_ch {
                            for u in 0..d.kh {
                                for v in 0..d.kw {
                                    let si = (i * d.stride.0 + u) as isize - d.pad as isize;
                                    let sj = (j * d.stride.1 + v) as isize - d.pad as isize;
                                    if si < 0 || sj < 0 || si >= d.h as isize || sj >= d.w as isize {
                                        continue;
                                    }
                                    acc += x[((b * d.in_ch + c) * d.h + si as usize) * d.w
                                        + sj as usize]
                                        * w[((o * d.in_ch + c) * d.kh + u) * d.kw + v];
                                }
                            }
                        }
                        let got = out[((b * d.out_ch + o) * d.oh + i) * d.ow + j];
                        assert!((got - acc).abs() < 1e-12, "mismatch at {b},{o},{i},{j}");
                    }
                }
            }
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let d = ConvDims::infer(&[4, 3, 8, 8], &[5, 3, 3, 3], 1, (1, 1));
        let x: Vec<f64> = (0..4 * 3 * 64).map(|v| (v as f64 * 0.13).sin()).collect();
        let w: Vec<f64> = (0..5 * 3 * 9).map(|v| (v as f64 * 0.29).cos()).collect();
        let (seq, _) = conv2d_forward(&x, &w, None, &d, false, false);
        let (par, _) = conv2d_forward(&x, &w, None, &d, false, true);
        assert_eq!(seq, par);

        let gout = vec![0.5; seq.len()];
        let (dxs, dws, dbs) = conv2d_backward(&gout, &x, &w, &d, None, true, true, false);
        let (dxp, dwp, dbp) = conv2d_backward(&gout, &x, &w, &d, None, true, true, true);
        assert_eq!(dxs, dxp);
        assert_eq!(dws, dwp);
        assert_eq!(dbs, dbp);
    }

    #[test]
    fn maxpool_tracks_argmax() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let (out, arg) = maxpool_forward(&x, &[1, 1, 2, 2], 2, false);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![3]);
        let dx = maxpool_backward(&[2.0], &arg, 4);
        assert_eq!(dx, vec![0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn upsample_round_trip_gradient() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let up = upsample_forward(&x, &[1, 1, 2, 2], (2, 2));
        assert_eq!(up.len(), 16);
        assert_eq!(up[0], 1.0);
        assert_eq!(up[1], 1.0);
        assert_eq!(up[5], 1.0);
        let g = vec![1.0; 16];
        let dx = upsample_backward(&g, &[1, 1, 2, 2], (2, 2));
        assert_eq!(dx, vec![4.0; 4]);
    }
}
