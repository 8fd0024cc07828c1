//! Pooling, nearest upsampling and bilinear resizing.

use crate::autograd::{Tape, Var};
use crate::nn::conv::as4;
use ndarray::{Array4, ArrayView4, Axis};
use std::rc::Rc;

/// 2x2 max pooling with stride 2. Requires even spatial dims. Ties resolve
/// to the first maximum in scan order so results are reproducible.
pub fn maxpool2(tape: &mut Tape, x: Var) -> Var {
    let vx = tape.value_rc(x);
    let x4 = as4(&vx);
    let (n, c, h, w) = x4.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2: odd spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<f32>::zeros((n, c, oh, ow));
    let mut argmax = vec![0u32; n * c * oh * ow];
    {
        let mut slot = 0usize;
        for ni in 0..n {
            for ci in 0..c {
                let plane = x4.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), ci);
                let ps = plane.as_slice().unwrap();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = (2 * oy) * w + 2 * ox;
                        let cands = [base, base + 1, base + w, base + w + 1];
                        let mut best = cands[0];
                        let mut best_v = ps[cands[0]];
                        for &cand in &cands[1..] {
                            if ps[cand] > best_v {
                                best_v = ps[cand];
                                best = cand;
                            }
                        }
                        y[[ni, ci, oy, ox]] = best_v;
                        argmax[slot] = best as u32;
                        slot += 1;
                    }
                }
            }
        }
    }
    let needs = tape.needs_grad(x);
    let argmax = Rc::new(argmax);
    tape.push_op(
        y.into_dyn(),
        needs,
        Box::new(move |g, store| {
            let g4 = as4(g);
            let mut dx = Array4::<f32>::zeros((n, c, h, w));
            let mut slot = 0usize;
            for ni in 0..n {
                for ci in 0..c {
                    let mut plane = dx.index_axis_mut(Axis(0), ni);
                    let mut plane = plane.index_axis_mut(Axis(0), ci);
                    let ds = plane.as_slice_mut().unwrap();
                    for oy in 0..oh {
                        for ox in 0..ow {
                            ds[argmax[slot] as usize] += g4[[ni, ci, oy, ox]];
                            slot += 1;
                        }
                    }
                }
            }
            store.accumulate(x, dx.into_dyn());
        }),
    )
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(tape: &mut Tape, x: Var) -> Var {
    let vx = tape.value_rc(x);
    let x4 = as4(&vx);
    let (n, c, h, w) = x4.dim();
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Array4::<f32>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let src = x4.index_axis(Axis(0), ni);
            let src = src.index_axis(Axis(0), ci);
            let ss = src.as_slice().unwrap();
            let mut dst = y.index_axis_mut(Axis(0), ni);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            let ds = dst.as_slice_mut().unwrap();
            for iy in 0..h {
                for ix in 0..w {
                    let v = ss[iy * w + ix];
                    let base = (2 * iy) * ow + 2 * ix;
                    ds[base] = v;
                    ds[base + 1] = v;
                    ds[base + ow] = v;
                    ds[base + ow + 1] = v;
                }
            }
        }
    }
    let needs = tape.needs_grad(x);
    tape.push_op(
        y.into_dyn(),
        needs,
        Box::new(move |g, store| {
            let g4 = as4(g);
            let mut dx = Array4::<f32>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let src = g4.index_axis(Axis(0), ni);
                    let src = src.index_axis(Axis(0), ci);
                    let gs = src.as_slice().unwrap();
                    let mut dst = dx.index_axis_mut(Axis(0), ni);
                    let mut dst = dst.index_axis_mut(Axis(0), ci);
                    let ds = dst.as_slice_mut().unwrap();
                    for iy in 0..h {
                        for ix in 0..w {
                            let base = (2 * iy) * ow + 2 * ix;
                            ds[iy * w + ix] = gs[base] + gs[base + 1] + gs[base + ow] + gs[base + ow + 1];
                        }
                    }
                }
            }
            store.accumulate(x, dx.into_dyn());
        }),
    )
}

/// Per-axis bilinear resampling weights under the half-pixel-center
/// convention. Maps identically when sizes match and clamps at borders.
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f32>,
}

pub(crate) fn axis_taps(src: usize, dst: usize) -> AxisTaps {
    let scale = src as f32 / dst as f32;
    let mut lo = Vec::with_capacity(dst);
    let mut hi = Vec::with_capacity(dst);
    let mut frac = Vec::with_capacity(dst);
    for t in 0..dst {
        let s = (t as f32 + 0.5) * scale - 0.5;
        let f = s.floor();
        let mut w = s - f;
        let mut i0 = f as isize;
        let mut i1 = i0 + 1;
        if i0 < 0 {
            i0 = 0;
            i1 = 0;
            w = 0.0;
        }
        if i1 > src as isize - 1 {
            i1 = src as isize - 1;
            if i0 > src as isize - 1 {
                i0 = src as isize - 1;
            }
            if i0 == i1 {
                w = 0.0;
            }
        }
        lo.push(i0 as usize);
        hi.push(i1 as usize);
        frac.push(w);
    }
    AxisTaps { lo, hi, frac }
}

/// Bilinear spatial resize of `[N, C, H, W]` to `[N, C, th, tw]`.
pub fn bilinear_resize(tape: &mut Tape, x: Var, th: usize, tw: usize) -> Var {
    let vx = tape.value_rc(x);
    let x4 = as4(&vx);
    let (n, c, h, w) = x4.dim();
    if (th, tw) == (h, w) {
        // Identity resize is exact by contract; still record a pass-through
        // node so gradients flow unchanged.
        let y = vx.as_ref().clone();
        let needs = tape.needs_grad(x);
        return tape.push_op(
            y,
            needs,
            Box::new(move |g, store| store.accumulate(x, g.clone())),
        );
    }
    let ty = axis_taps(h, th);
    let tx = axis_taps(w, tw);
    let mut y = Array4::<f32>::zeros((n, c, th, tw));
    for ni in 0..n {
        for ci in 0..c {
            let src = x4.index_axis(Axis(0), ni);
            let src = src.index_axis(Axis(0), ci);
            let ss = src.as_slice().unwrap();
            let mut dst = y.index_axis_mut(Axis(0), ni);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            let ds = dst.as_slice_mut().unwrap();
            for oy in 0..th {
                let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                for ox in 0..tw {
                    let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let v00 = ss[y0 * w + x0];
                    let v01 = ss[y0 * w + x1];
                    let v10 = ss[y1 * w + x0];
                    let v11 = ss[y1 * w + x1];
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    ds[oy * tw + ox] = top + fy * (bot - top);
                }
            }
        }
    }
    let needs = tape.needs_grad(x);
    tape.push_op(
        y.into_dyn(),
        needs,
        Box::new(move |g, store| {
            let g4 = as4(g);
            let ty = axis_taps(h, th);
            let tx = axis_taps(w, tw);
            let mut dx = Array4::<f32>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let src = g4.index_axis(Axis(0), ni);
                    let src = src.index_axis(Axis(0), ci);
                    let gs = src.as_slice().unwrap();
                    let mut dst = dx.index_axis_mut(Axis(0), ni);
                    let mut dst = dst.index_axis_mut(Axis(0), ci);
                    let ds = dst.as_slice_mut().unwrap();
                    for oy in 0..th {
                        let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                        for ox in 0..tw {
                            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                            let gv = gs[oy * tw + ox];
                            ds[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            ds[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            ds[y1 * w + x0] += gv * fy * (1.0 - fx);
                            ds[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
            }
            store.accumulate(x, dx.into_dyn());
        }),
    )
}

/// Non-tape bilinear resize for plain arrays.
pub fn bilinear_resize_array(x: &ArrayView4<f32>, th: usize, tw: usize) -> Array4<f32> {
    let mut tape = Tape::new();
    let v = tape.constant(x.to_owned().into_dyn());
    let y = bilinear_resize(&mut tape, v, th, tw);
    tape.value(y)
        .clone()
        .into_dimensionality()
        .expect("bilinear_resize_array: 4-d output")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(x: Array4<f32>, needs: bool) -> (Tape, Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.into_dyn(), needs);
        (tape, v)
    }

    #[test]
    fn maxpool_picks_block_maxima() {
        let x = Array4::from_shape_vec(
            (1, 1, 2, 4),
            vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 2.0, 9.0],
        )
        .unwrap();
        let (mut tape, v) = tape_with(x, true);
        let y = maxpool2(&mut tape, v);
        assert_eq!(tape.value(y).as_slice().unwrap(), &[5.0, 9.0]);
        let s = crate::autograd::ops::mean_all(&mut tape, y);
        let grads = tape.backward(s);
        let g = grads.get(v).unwrap();
        let gs = g.as_slice().unwrap();
        assert_eq!(gs.iter().filter(|&&x| x != 0.0).count(), 2);
        assert_eq!(gs[1], 0.5);
        assert_eq!(gs[7], 0.5);
    }

    #[test]
    fn upsample_then_downsample_grad_is_identity_times_four() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (mut tape, v) = tape_with(x, true);
        let y = upsample_nearest2(&mut tape, v);
        assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
        let s = crate::autograd::ops::mean_all(&mut tape, y);
        let grads = tape.backward(s);
        let g = grads.get(v).unwrap();
        // Each input feeds 4 outputs of weight 1/16.
        assert!(g.iter().all(|&v| (v - 4.0 / 16.0).abs() < 1e-7));
    }

    #[test]
    fn resize_to_same_size_is_exact_identity() {
        let x = Array4::from_shape_vec((1, 2, 3, 3), (0..18).map(|i| i as f32 * 0.37).collect())
            .unwrap();
        let (mut tape, v) = tape_with(x.clone(), false);
        let y = bilinear_resize(&mut tape, v, 3, 3);
        assert_eq!(tape.value(y).as_slice().unwrap(), x.as_slice().unwrap());
    }

    #[test]
    fn resize_preserves_constant_fields() {
        let x = Array4::from_elem((1, 2, 8, 8), 3.25f32);
        let (mut tape, v) = tape_with(x, false);
        let y = bilinear_resize(&mut tape, v, 5, 3);
        assert!(tape.value(y).iter().all(|&v| (v - 3.25).abs() < 1e-6));
    }

    #[test]
    fn resize_halving_averages_neighbours() {
        // 1-d-like case: [1, 1, 1, 4] -> [1, 1, 1, 2]; half-pixel centers
        // sample at source coordinates 0.5 and 2.5.
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let (mut tape, v) = tape_with(x, false);
        let y = bilinear_resize(&mut tape, v, 1, 2);
        assert_eq!(tape.value(y).as_slice().unwrap(), &[1.0, 5.0]);
    }
}
