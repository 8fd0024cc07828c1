//! 2-d convolution via per-sample im2col + GEMM.
//!
//! The batch axis is the parallelism unit: every sample owns a contiguous
//! im2col block and output plane, so rayon scheduling cannot change any
//! result bit. Weight gradients are reduced over samples in index order.

use crate::autograd::{Tape, Var};
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView1, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;

pub(crate) fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

pub(crate) fn as4(a: &ArrayD<f32>) -> ArrayView4<'_, f32> {
    a.view().into_dimensionality().expect("expected 4-d tensor")
}

pub(crate) fn as1(a: &ArrayD<f32>) -> ArrayView1<'_, f32> {
    a.view().into_dimensionality().expect("expected 1-d tensor")
}

/// Fill `col` (`[C*KH*KW, OH*OW]`, contiguous) from one `[C, H, W]` sample.
fn im2col_sample(
    x: &ArrayView3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [f32],
) {
    let (c, h, w) = x.dim();
    let oh = out_dim(h, kh, stride, pad);
    let ow = out_dim(w, kw, stride, pad);
    let ohow = oh * ow;
    col.fill(0.0);
    let xs = x.as_slice().expect("im2col: input must be contiguous");
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ohow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    let dst_row = row + oy * ow;
                    if stride == 1 {
                        // Contiguous span of valid ox: ix = ox + kj - pad in [0, w)
                        let ox_start = pad.saturating_sub(kj);
                        let ox_end = (w + pad).saturating_sub(kj).min(ow);
                        if ox_start >= ox_end {
                            continue;
                        }
                        let ix_start = ox_start + kj - pad;
                        let len = ox_end - ox_start;
                        col[dst_row + ox_start..dst_row + ox_start + len]
                            .copy_from_slice(&plane[src_row + ix_start..src_row + ix_start + len]);
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[dst_row + ox] = plane[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `col` (`[C*KH*KW, OH*OW]`) back into one `[C, H, W]` gradient
/// sample; the adjoint of [`im2col_sample`].
fn col2im_sample(
    col: &[f32],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f32],
    c: usize,
    h: usize,
    w: usize,
) {
    let oh = out_dim(h, kh, stride, pad);
    let ow = out_dim(w, kw, stride, pad);
    let ohow = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ohow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = row + oy * ow;
                    let dst_row = iy as usize * w;
                    if stride == 1 {
                        let ox_start = pad.saturating_sub(kj);
                        let ox_end = (w + pad).saturating_sub(kj).min(ow);
                        if ox_start >= ox_end {
                            continue;
                        }
                        let ix_start = ox_start + kj - pad;
                        for i in 0..ox_end - ox_start {
                            plane[dst_row + ix_start + i] += col[src_row + ox_start + i];
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            plane[dst_row + ix as usize] += col[src_row + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Plain forward convolution: `x [N,C,H,W] * w [O,C,KH,KW] + b [O]`.
pub fn conv2d_forward(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    b: Option<&ArrayView1<f32>>,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (n, c, h, iw) = x.dim();
    let (o, wc, kh, kw) = w.dim();
    assert_eq!(c, wc, "conv2d: channel mismatch");
    let oh = out_dim(h, kh, stride, pad);
    let ow = out_dim(iw, kw, stride, pad);
    let ck = c * kh * kw;
    let ohow = oh * ow;
    let mut y = Array4::<f32>::zeros((n, o, oh, ow));
    let w2 = w.to_shape((o, ck)).expect("conv2d: weight reshape");
    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ni, yn)| {
            let xn = x.index_axis(Axis(0), ni);
            let mut col = vec![0.0f32; ck * ohow];
            im2col_sample(&xn, kh, kw, stride, pad, &mut col);
            let colm = ndarray::ArrayView2::from_shape((ck, ohow), &col[..]).unwrap();
            let mut y2 = yn
                .into_shape_with_order((o, ohow))
                .expect("conv2d: output reshape");
            ndarray::linalg::general_mat_mul(1.0, &w2, &colm, 0.0, &mut y2);
            if let Some(bias) = b {
                let ys = y2.as_slice_mut().unwrap();
                for oi in 0..o {
                    let bv = bias[oi];
                    for v in &mut ys[oi * ohow..(oi + 1) * ohow] {
                        *v += bv;
                    }
                }
            }
        });
    y
}

/// Which gradients [`conv2d_backward`] should produce.
#[derive(Clone, Copy)]
pub struct ConvGradMask {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

/// Gradients of a forward convolution. Returns `(dx, dw, db)` with entries
/// present according to `mask`.
pub fn conv2d_backward(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    dy: &ArrayView4<f32>,
    stride: usize,
    pad: usize,
    mask: ConvGradMask,
) -> (Option<Array4<f32>>, Option<Array4<f32>>, Option<Array1<f32>>) {
    let (n, c, h, iw) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let oh = out_dim(h, kh, stride, pad);
    let ow = out_dim(iw, kw, stride, pad);
    let ck = c * kh * kw;
    let ohow = oh * ow;

    let mut dx = mask.input.then(|| Array4::<f32>::zeros((n, c, h, iw)));
    // Per-sample weight-gradient partials, reduced in index order afterwards.
    let mut dw_parts = mask.weight.then(|| vec![Array2::<f32>::zeros((o, ck)); n]);

    {
        let dx_chunks: Vec<Option<ndarray::ArrayViewMut3<f32>>> = match dx.as_mut() {
            Some(d) => d.axis_iter_mut(Axis(0)).map(Some).collect(),
            None => (0..n).map(|_| None).collect(),
        };
        let dw_slots: Vec<Option<&mut Array2<f32>>> = match dw_parts.as_mut() {
            Some(parts) => parts.iter_mut().map(Some).collect(),
            None => (0..n).map(|_| None).collect(),
        };
        let w2 = w.to_shape((o, ck)).expect("conv2d: weight reshape");
        dx_chunks
            .into_par_iter()
            .zip(dw_slots.into_par_iter())
            .enumerate()
            .for_each(|(ni, (dx_n, dw_n))| {
                let dyn_ = dy.index_axis(Axis(0), ni);
                let dy2 = dyn_
                    .to_shape((o, ohow))
                    .expect("conv2d: dy reshape");
                if let Some(dw_acc) = dw_n {
                    let xn = x.index_axis(Axis(0), ni);
                    let mut col = vec![0.0f32; ck * ohow];
                    im2col_sample(&xn, kh, kw, stride, pad, &mut col);
                    let colm = ndarray::ArrayView2::from_shape((ck, ohow), &col[..]).unwrap();
                    // [O, OH*OW] x [OH*OW, CK]
                    ndarray::linalg::general_mat_mul(1.0, &dy2, &colm.t(), 0.0, dw_acc);
                }
                if let Some(mut dx_plane) = dx_n {
                    let mut dcol = Array2::<f32>::zeros((ck, ohow));
                    ndarray::linalg::general_mat_mul(1.0, &w2.t(), &dy2, 0.0, &mut dcol);
                    col2im_sample(
                        dcol.as_slice().unwrap(),
                        kh,
                        kw,
                        stride,
                        pad,
                        dx_plane.as_slice_mut().unwrap(),
                        c,
                        h,
                        iw,
                    );
                }
            });
    }

    let dw = dw_parts.map(|parts| {
        let mut acc = Array2::<f32>::zeros((o, ck));
        for p in parts {
            acc += &p;
        }
        acc.into_shape_with_order((o, c, kh, kw)).expect("dw reshape")
    });

    let db = mask.bias.then(|| {
        let mut acc = vec![0.0f64; o];
        for ni in 0..n {
            let dyn_ = dy.index_axis(Axis(0), ni);
            for oi in 0..o {
                let plane = dyn_.index_axis(Axis(0), oi);
                acc[oi] += plane.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        Array1::from(acc.into_iter().map(|v| v as f32).collect::<Vec<f32>>())
    });

    (dx, dw, db)
}

/// Differentiable convolution node.
pub fn conv2d(tape: &mut Tape, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
    let vx = tape.value_rc(x);
    let vw = tape.value_rc(w);
    let vb = tape.value_rc(b);
    let y = conv2d_forward(&as4(&vx), &as4(&vw), Some(&as1(&vb)), stride, pad);
    let needs = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
    tape.push_op(
        y.into_dyn(),
        needs,
        Box::new(move |g, store| {
            let g4 = as4(g);
            let mask = ConvGradMask {
                input: store.wants(x),
                weight: store.wants(w),
                bias: store.wants(b),
            };
            let (dx, dw, db) = conv2d_backward(&as4(&vx), &as4(&vw), &g4, stride, pad, mask);
            if let Some(dx) = dx {
                store.accumulate(x, dx.into_dyn());
            }
            if let Some(dw) = dw {
                store.accumulate(w, dw.into_dyn());
            }
            if let Some(db) = db {
                store.accumulate(b, db.into_dyn());
            }
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array4};

    /// Direct O(n^7) convolution for cross-checking the im2col path.
    fn conv2d_naive(
        x: &Array4<f32>,
        w: &Array4<f32>,
        b: &[f32],
        stride: usize,
        pad: usize,
    ) -> Array4<f32> {
        let (n, c, h, iw) = x.dim();
        let (o, _, kh, kw) = w.dim();
        let oh = out_dim(h, kh, stride, pad);
        let ow = out_dim(iw, kw, stride, pad);
        let mut y = Array4::<f32>::zeros((n, o, oh, ow));
        for ni in 0..n {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oi];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= iw as isize {
                                        continue;
                                    }
                                    acc += x[[ni, ci, iy as usize, ix as usize]]
                                        * w[[oi, ci, ki, kj]];
                                }
                            }
                        }
                        y[[ni, oi, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: (usize, usize, usize, usize), scale: f32) -> Array4<f32> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Array4::from_shape_vec(
            shape,
            (0..len).map(|i| ((i * 37 % 101) as f32 - 50.0) * scale).collect(),
        )
        .unwrap()
    }

    #[test]
    fn im2col_path_matches_naive() {
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
            let x = ramp((2, 3, 7, 6), 0.01);
            let w = ramp((4, 3, k, k), 0.05);
            let b = arr1(&[0.1, -0.2, 0.3, 0.0]);
            let fast = conv2d_forward(&x.view(), &w.view(), Some(&b.view()), stride, pad);
            let slow = conv2d_naive(&x, &w, b.as_slice().unwrap(), stride, pad);
            let max_err = (&fast - &slow)
                .iter()
                .fold(0.0f32, |m, &v| m.max(v.abs()));
            assert!(max_err < 1e-4, "stride={stride} pad={pad} k={k}: err {max_err}");
        }
    }

    #[test]
    fn backward_matches_finite_difference_on_small_case() {
        let x = ramp((1, 2, 5, 5), 0.02);
        let w = ramp((3, 2, 3, 3), 0.04);
        let b = arr1(&[0.0, 0.1, -0.1]);
        let stride = 1;
        let pad = 1;
        let loss = |x: &Array4<f32>, w: &Array4<f32>, b: &ndarray::Array1<f32>| -> f64 {
            conv2d_forward(&x.view(), &w.view(), Some(&b.view()), stride, pad)
                .iter()
                .map(|&v| v as f64)
                .sum()
        };
        let y = conv2d_forward(&x.view(), &w.view(), Some(&b.view()), stride, pad);
        let dy = Array4::<f32>::ones(y.dim());
        let (dx, dw, db) = conv2d_backward(
            &x.view(),
            &w.view(),
            &dy.view(),
            stride,
            pad,
            ConvGradMask { input: true, weight: true, bias: true },
        );
        let (dx, dw, db) = (dx.unwrap(), dw.unwrap(), db.unwrap());
        let h = 1e-2f32;
        // Spot-check a scattering of coordinates in each gradient.
        for (idx, g) in dx.indexed_iter().step_by(7) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h as f64);
            assert!((fd - *g as f64).abs() < 1e-2, "dx {idx:?}: fd={fd} a={g}");
        }
        for (idx, g) in dw.indexed_iter().step_by(5) {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h as f64);
            assert!((fd - *g as f64).abs() < 1e-1 * (1.0 + fd.abs()), "dw {idx:?}: fd={fd} a={g}");
        }
        for (i, g) in db.iter().enumerate() {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h as f64);
            assert!((fd - *g as f64).abs() < 1e-1, "db {i}: fd={fd} a={g}");
        }
    }
}
