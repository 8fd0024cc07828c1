//! Shape-generic differentiable operations.
//!
//! Spatial kernels (convolution, pooling, resampling, renormalization) live
//! in [`crate::nn`]; this module holds the elementwise, linear and reduction
//! ops shared by every network.

use super::{Tape, Var};
use ndarray::{Array1, Array2, ArrayD, Axis, Ix2};

/// Clone `a` into a new shape with the same number of elements.
pub(crate) fn reshape_clone(a: &ArrayD<f32>, shape: &[usize]) -> ArrayD<f32> {
    let flat: Vec<f32> = a.iter().copied().collect();
    ArrayD::from_shape_vec(shape.to_vec(), flat).expect("reshape: element count mismatch")
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Var {
    let va = tape.value(a);
    let vb = tape.value(b);
    assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
    let out = va + vb;
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| {
            store.accumulate(a, g.clone());
            store.accumulate(b, g.clone());
        }),
    )
}

pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Var {
    let out = tape.value(a) - tape.value(b);
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| {
            store.accumulate(a, g.clone());
            store.accumulate(b, -g);
        }),
    )
}

pub fn neg(tape: &mut Tape, a: Var) -> Var {
    let out = tape.value(a).mapv(|v| -v);
    let needs = tape.needs_grad(a);
    tape.push_op(out, needs, Box::new(move |g, store| store.accumulate(a, -g)))
}

pub fn scale(tape: &mut Tape, a: Var, c: f32) -> Var {
    let out = tape.value(a).mapv(|v| c * v);
    let needs = tape.needs_grad(a);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| store.accumulate(a, g.mapv(|v| c * v))),
    )
}

/// Multiply channel `c` of an `[N, C, ...]` tensor by `factors[c]`.
pub fn scale_channels(tape: &mut Tape, a: Var, factors: Vec<f32>) -> Var {
    let va = tape.value(a);
    assert_eq!(va.shape()[1], factors.len(), "scale_channels: channel count");
    let mut out = va.clone();
    for (c, &f) in factors.iter().enumerate() {
        out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * f);
    }
    let needs = tape.needs_grad(a);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| {
            let mut dg = g.clone();
            for (c, &f) in factors.iter().enumerate() {
                dg.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * f);
            }
            store.accumulate(a, dg);
        }),
    )
}

pub fn relu(tape: &mut Tape, a: Var) -> Var {
    let va = tape.value_rc(a);
    let out = va.mapv(|v| v.max(0.0));
    let needs = tape.needs_grad(a);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| {
            let mut dg = g.clone();
            dg.zip_mut_with(&va, |d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
            store.accumulate(a, dg);
        }),
    )
}

pub fn sigmoid(tape: &mut Tape, a: Var) -> Var {
    let out = tape.value(a).mapv(|v| 1.0 / (1.0 + (-v).exp()));
    let needs = tape.needs_grad(a);
    let saved = std::rc::Rc::new(out.clone());
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| {
            let mut dg = g.clone();
            dg.zip_mut_with(&saved, |d, &y| *d *= y * (1.0 - y));
            store.accumulate(a, dg);
        }),
    )
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(tape: &mut Tape, a: Var) -> Var {
    let va = tape.value_rc(a);
    let out = va.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
    let needs = tape.needs_grad(a);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| {
            let mut dg = g.clone();
            dg.zip_mut_with(&va, |d, &x| *d *= 1.0 / (1.0 + (-x).exp()));
            store.accumulate(a, dg);
        }),
    )
}

/// Fully connected layer: `x [N, I] · w [O, I]ᵀ + b [O]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let vx = tape.value_rc(x);
    let vw = tape.value_rc(w);
    let x2 = vx.view().into_dimensionality::<Ix2>().expect("linear: x must be 2-d");
    let w2 = vw.view().into_dimensionality::<Ix2>().expect("linear: w must be 2-d");
    assert_eq!(x2.shape()[1], w2.shape()[1], "linear: inner dim mismatch");
    let vb = tape.value(b);
    let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().expect("linear: b must be 1-d");
    let mut out = x2.dot(&w2.t());
    out += &b1;
    let needs = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
    tape.push_op(
        out.into_dyn(),
        needs,
        Box::new(move |g, store| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
            let w2 = vw.view().into_dimensionality::<Ix2>().unwrap();
            if store.wants(x) {
                store.accumulate(x, g2.dot(&w2).into_dyn());
            }
            if store.wants(w) {
                store.accumulate(w, g2.t().dot(&x2).into_dyn());
            }
            if store.wants(b) {
                store.accumulate(b, g2.sum_axis(Axis(0)).into_dyn());
            }
        }),
    )
}

/// Reshape preserving element order.
pub fn reshape(tape: &mut Tape, a: Var, shape: &[usize]) -> Var {
    let va = tape.value(a);
    let old_shape: Vec<usize> = va.shape().to_vec();
    let out = reshape_clone(va, shape);
    let needs = tape.needs_grad(a);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| store.accumulate(a, reshape_clone(g, &old_shape))),
    )
}

/// Concatenate two `[N, C, H, W]` tensors along the channel axis.
pub fn concat_channels(tape: &mut Tape, a: Var, b: Var) -> Var {
    let va = tape.value(a);
    let vb = tape.value(b);
    let ca = va.shape()[1];
    // concatenate() yields a non-standard layout; downstream kernels rely on
    // contiguous samples, so restore standard order here.
    let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()])
        .expect("concat_channels")
        .as_standard_layout()
        .into_owned();
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| {
            let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..ca)).to_owned();
            let gb = g.slice_axis(Axis(1), ndarray::Slice::from(ca..)).to_owned();
            store.accumulate(a, ga);
            store.accumulate(b, gb);
        }),
    )
}

/// Mean over the spatial axes of `[N, C, H, W]`, producing `[N, C]`.
pub fn global_avg_pool(tape: &mut Tape, a: Var) -> Var {
    let va = tape.value(a);
    let (n, c, h, w) = {
        let s = va.shape();
        (s[0], s[1], s[2], s[3])
    };
    let inv = 1.0 / (h * w) as f64;
    let mut out = Array2::<f32>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let plane = va.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            let sum: f64 = plane.iter().map(|&v| v as f64).sum();
            out[[ni, ci]] = (sum * inv) as f32;
        }
    }
    let needs = tape.needs_grad(a);
    tape.push_op(
        out.into_dyn(),
        needs,
        Box::new(move |g, store| {
            let mut dg = ArrayD::<f32>::zeros(ndarray::IxDyn(&[n, c, h, w]));
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let v = g2[[ni, ci]] * inv as f32;
                    dg.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), ci)
                        .fill(v);
                }
            }
            store.accumulate(a, dg);
        }),
    )
}

/// Contiguous views of two same-shape arrays; all tape values are standard
/// layout by construction.
fn paired_slices<'a>(a: &'a ArrayD<f32>, b: &'a ArrayD<f32>) -> (&'a [f32], &'a [f32]) {
    (
        a.as_slice().expect("tape value not contiguous"),
        b.as_slice().expect("tape value not contiguous"),
    )
}

/// Mean absolute difference, reduced over every element.
pub fn l1_mean(tape: &mut Tape, a: Var, b: Var) -> Var {
    let va = tape.value_rc(a);
    let vb = tape.value_rc(b);
    assert_eq!(va.shape(), vb.shape(), "l1_mean: shape mismatch");
    let n = va.len() as f64;
    let sum: f64 = {
        let (xs, ys) = paired_slices(&va, &vb);
        xs.iter().zip(ys).map(|(&x, &y)| (x - y).abs() as f64).sum()
    };
    let out = ndarray::arr0((sum / n) as f32).into_dyn();
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| {
            let gs = g.iter().copied().next().unwrap() / n as f32;
            let mut da = ArrayD::<f32>::zeros(va.raw_dim());
            {
                let (xs, ys) = paired_slices(&va, &vb);
                let ds = da.as_slice_mut().unwrap();
                for i in 0..ds.len() {
                    ds[i] = gs * (xs[i] - ys[i]).signum_or_zero();
                }
            }
            if store.wants(b) {
                store.accumulate(b, da.mapv(|v| -v));
            }
            store.accumulate(a, da);
        }),
    )
}

/// Mean squared difference, reduced over every element.
pub fn sq_diff_mean(tape: &mut Tape, a: Var, b: Var) -> Var {
    let va = tape.value_rc(a);
    let vb = tape.value_rc(b);
    assert_eq!(va.shape(), vb.shape(), "sq_diff_mean: shape mismatch");
    let n = va.len() as f64;
    let sum: f64 = {
        let (xs, ys) = paired_slices(&va, &vb);
        xs.iter()
            .zip(ys)
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum()
    };
    let out = ndarray::arr0((sum / n) as f32).into_dyn();
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| {
            let gs = g.iter().copied().next().unwrap() * 2.0 / n as f32;
            let mut da = ArrayD::<f32>::zeros(va.raw_dim());
            {
                let (xs, ys) = paired_slices(&va, &vb);
                let ds = da.as_slice_mut().unwrap();
                for i in 0..ds.len() {
                    ds[i] = gs * (xs[i] - ys[i]);
                }
            }
            if store.wants(b) {
                store.accumulate(b, da.mapv(|v| -v));
            }
            store.accumulate(a, da);
        }),
    )
}

/// Mean over every element.
pub fn mean_all(tape: &mut Tape, a: Var) -> Var {
    let va = tape.value(a);
    let n = va.len() as f64;
    let shape = va.raw_dim();
    let sum: f64 = va.iter().map(|&v| v as f64).sum();
    let out = ndarray::arr0((sum / n) as f32).into_dyn();
    let needs = tape.needs_grad(a);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| {
            let gs = g.iter().copied().next().unwrap() / n as f32;
            store.accumulate(a, ArrayD::from_elem(shape.clone(), gs));
        }),
    )
}

/// Sum of scalar terms, used to assemble weighted loss totals.
pub fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Var {
    assert!(!terms.is_empty());
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = add(tape, acc, t);
    }
    acc
}

/// Split a `[N, 2C]` tensor into two `[N, C]` halves along axis 1.
pub fn split_half(tape: &mut Tape, a: Var) -> (Var, Var) {
    let va = tape.value(a);
    assert_eq!(va.ndim(), 2, "split_half: expected 2-d input");
    let cols = va.shape()[1];
    assert_eq!(cols % 2, 0, "split_half: odd column count");
    let half = cols / 2;
    let lo = va.slice_axis(Axis(1), ndarray::Slice::from(0..half)).to_owned();
    let hi = va.slice_axis(Axis(1), ndarray::Slice::from(half..)).to_owned();
    let needs = tape.needs_grad(a);
    let n = va.shape()[0];
    let left = tape.push_op(
        lo,
        needs,
        Box::new(move |g, store| {
            let mut dg = Array2::<f32>::zeros((n, cols));
            dg.slice_axis_mut(Axis(1), ndarray::Slice::from(0..half))
                .assign(&g.view().into_dimensionality::<Ix2>().unwrap());
            store.accumulate(a, dg.into_dyn());
        }),
    );
    let right = tape.push_op(
        hi,
        needs,
        Box::new(move |g, store| {
            let mut dg = Array2::<f32>::zeros((n, cols));
            dg.slice_axis_mut(Axis(1), ndarray::Slice::from(half..))
                .assign(&g.view().into_dimensionality::<Ix2>().unwrap());
            store.accumulate(a, dg.into_dyn());
        }),
    );
    (left, right)
}

/// Swap the two halves of the batch axis: `[a; b] -> [b; a]`. Requires an
/// even batch. Self-inverse, so the backward pass applies the same swap.
pub fn swap_batch_halves(tape: &mut Tape, a: Var) -> Var {
    let va = tape.value(a);
    let n = va.shape()[0];
    assert_eq!(n % 2, 0, "swap_batch_halves: odd batch size");
    let half = n / 2;
    let swap = |src: &ArrayD<f32>| {
        let mut out = ArrayD::<f32>::zeros(src.raw_dim());
        let lo = ndarray::Slice::from(0..half as isize);
        let hi = ndarray::Slice::from(half as isize..);
        out.slice_axis_mut(Axis(0), lo)
            .assign(&src.slice_axis(Axis(0), hi));
        out.slice_axis_mut(Axis(0), hi)
            .assign(&src.slice_axis(Axis(0), lo));
        out
    };
    let out = swap(va);
    let needs = tape.needs_grad(a);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| {
            let mut back = ArrayD::<f32>::zeros(g.raw_dim());
            let lo = ndarray::Slice::from(0..half as isize);
            let hi = ndarray::Slice::from(half as isize..);
            back.slice_axis_mut(Axis(0), lo)
                .assign(&g.slice_axis(Axis(0), hi));
            back.slice_axis_mut(Axis(0), hi)
                .assign(&g.slice_axis(Axis(0), lo));
            store.accumulate(a, back);
        }),
    )
}

/// Add `offsets[c]` to channel `c` of an `[N, C, ...]` tensor; the offsets
/// are constants.
pub fn add_channel_const(tape: &mut Tape, a: Var, offsets: &[f32]) -> Var {
    let va = tape.value(a);
    assert_eq!(va.shape()[1], offsets.len(), "add_channel_const: channel count");
    let mut out = va.clone();
    for (c, &o) in offsets.iter().enumerate() {
        out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + o);
    }
    let needs = tape.needs_grad(a);
    tape.push_op(out, needs, Box::new(move |g, store| store.accumulate(a, g.clone())))
}

/// Add a scalar constant elementwise.
pub fn add_scalar(tape: &mut Tape, a: Var, c: f32) -> Var {
    let out = tape.value(a).mapv(|v| v + c);
    let needs = tape.needs_grad(a);
    tape.push_op(out, needs, Box::new(move |g, store| store.accumulate(a, g.clone())))
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f32;
}

impl SignumOrZero for f32 {
    /// `signum` with the subgradient convention sign(0) = 0.
    fn signum_or_zero(self) -> f32 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Convenience: 1-d constant from a slice.
pub fn constant_vec(tape: &mut Tape, v: &[f32]) -> Var {
    tape.constant(Array1::from(v.to_vec()).into_dyn())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn scalar_grad(store: &crate::autograd::GradStore, v: Var) -> Vec<f32> {
        store.get(v).map(|g| g.iter().copied().collect()).unwrap_or_default()
    }

    #[test]
    fn linear_matches_manual() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.0f32, 2.0]]).into_dyn(), true);
        let w = tape.leaf(arr2(&[[3.0f32, 4.0], [5.0, 6.0]]).into_dyn(), true);
        let b = tape.leaf(arr1(&[0.5f32, -0.5]).into_dyn(), true);
        let y = linear(&mut tape, x, w, b);
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 2]);
        assert_eq!(v[[0, 0]], 1.0 * 3.0 + 2.0 * 4.0 + 0.5);
        assert_eq!(v[[0, 1]], 1.0 * 5.0 + 2.0 * 6.0 - 0.5);
        let total = mean_all(&mut tape, y);
        let grads = tape.backward(total);
        // d(mean)/dy = 0.5 each; dx = 0.5*(w0 + w1)
        assert_eq!(scalar_grad(&grads, x), vec![0.5 * (3.0 + 5.0), 0.5 * (4.0 + 6.0)]);
        assert_eq!(scalar_grad(&grads, b), vec![0.5, 0.5]);
    }

    #[test]
    fn l1_mean_value_and_sign() {
        let mut tape = Tape::new();
        let a = tape.leaf(arr1(&[1.0f32, -2.0, 0.0]).into_dyn(), true);
        let b = tape.leaf(arr1(&[0.0f32, 0.0, 0.0]).into_dyn(), false);
        let l = l1_mean(&mut tape, a, b);
        assert!((tape.scalar(l) - 1.0).abs() < 1e-7);
        let grads = tape.backward(l);
        let ga = grads.get(a).unwrap();
        assert_eq!(ga.as_slice().unwrap(), &[1.0 / 3.0, -1.0 / 3.0, 0.0]);
    }

    #[test]
    fn softplus_is_positive_and_monotone() {
        let mut tape = Tape::new();
        let a = tape.leaf(arr1(&[-40.0f32, -1.0, 0.0, 1.0, 40.0]).into_dyn(), false);
        let y = softplus(&mut tape, a);
        let v: Vec<f32> = tape.value(y).iter().copied().collect();
        assert!(v.iter().all(|&x| x >= 0.0));
        assert!(v.windows(2).all(|w| w[0] <= w[1]));
        assert!((v[2] - (2.0f32).ln()).abs() < 1e-6);
        assert!((v[4] - 40.0).abs() < 1e-5);
    }

    #[test]
    fn split_half_roundtrip_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(arr2(&[[1.0f32, 2.0, 3.0, 4.0]]).into_dyn(), true);
        let (lo, hi) = split_half(&mut tape, a);
        assert_eq!(tape.value(lo).as_slice().unwrap(), &[1.0, 2.0]);
        assert_eq!(tape.value(hi).as_slice().unwrap(), &[3.0, 4.0]);
        let slo = mean_all(&mut tape, lo);
        let shi = mean_all(&mut tape, hi);
        let tot = add(&mut tape, slo, shi);
        let grads = tape.backward(tot);
        assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[0.5, 0.5, 0.5, 0.5]);
    }
}
