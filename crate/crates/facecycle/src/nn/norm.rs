//! Feature-statistics renormalization.
//!
//! One kernel serves two callers: instance normalization inside the encoders
//! (per-channel affine parameters shared across the batch) and the
//! de-/re-identity renormalization where the target statistics are predicted
//! per sample. Spatial mean and standard deviation are accumulated in `f64`;
//! the denominator is `std + EPS` so constant channels stay finite.

use crate::autograd::{Tape, Var};
use crate::nn::conv::as4;
use ndarray::{Array2, Array4, ArrayD, Axis, Ix1, Ix2};

pub const NORM_EPS: f32 = 1e-5;

/// Spatial mean and population standard deviation of one plane.
fn plane_stats(plane: &[f32]) -> (f32, f32) {
    let n = plane.len() as f64;
    let mean: f64 = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = plane
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean as f32, var.sqrt() as f32)
}

struct PlaneGrad<'a> {
    x: &'a [f32],
    g: &'a [f32],
    dx: &'a mut [f32],
    mean: f32,
    std: f32,
    scale: f32,
}

/// Backward of `y = (x - mean) / (std + eps) * scale + shift` for one plane.
/// Returns `(sum_g, sum_g_xhat)` for the scale/shift gradients.
fn plane_backward(p: PlaneGrad<'_>) -> (f32, f32) {
    let n = p.x.len() as f64;
    let denom = p.std + NORM_EPS;
    let mut sum_g = 0.0f64;
    let mut sum_gx = 0.0f64;
    for i in 0..p.x.len() {
        let xhat = (p.x[i] - p.mean) / denom;
        sum_g += p.g[i] as f64;
        sum_gx += p.g[i] as f64 * xhat as f64;
    }
    let mean_gs = (sum_g / n) as f32 * p.scale;
    let mean_gxs = (sum_gx / n) as f32 * p.scale;
    // d/dx_j = scale/denom * (g_j - mean(g)) - xhat_j * mean(g*xhat) * scale / std
    // (the second term vanishes for a constant plane, where xhat = 0).
    let std_safe = if p.std > 1e-12 { p.std } else { f32::INFINITY };
    for i in 0..p.x.len() {
        let xhat = (p.x[i] - p.mean) / denom;
        p.dx[i] += (p.g[i] * p.scale - mean_gs) / denom - xhat * mean_gxs / std_safe;
    }
    (sum_g as f32, sum_gx as f32)
}

fn normalize_plane(x: &[f32], out: &mut [f32], mean: f32, std: f32, scale: f32, shift: f32) {
    let denom = std + NORM_EPS;
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = (v - mean) / denom * scale + shift;
    }
}

/// Instance normalization with learned per-channel affine parameters.
/// `gamma`, `beta`: `[C]`.
pub fn instance_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Var {
    let vx = tape.value_rc(x);
    let vgamma = tape.value_rc(gamma);
    let vbeta = tape.value_rc(beta);
    let x4 = as4(&vx);
    let (n, c, h, w) = x4.dim();
    let g1 = vgamma.view().into_dimensionality::<Ix1>().expect("gamma 1-d");
    let b1 = vbeta.view().into_dimensionality::<Ix1>().expect("beta 1-d");
    assert_eq!(g1.len(), c, "instance_norm: gamma length");
    let mut y = Array4::<f32>::zeros((n, c, h, w));
    let mut stats = vec![(0.0f32, 0.0f32); n * c];
    for ni in 0..n {
        for ci in 0..c {
            let plane = x4.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            let ps = plane.as_slice().unwrap();
            let (mean, std) = plane_stats(ps);
            stats[ni * c + ci] = (mean, std);
            let mut out = y.index_axis_mut(Axis(0), ni);
            let mut out = out.index_axis_mut(Axis(0), ci);
            normalize_plane(ps, out.as_slice_mut().unwrap(), mean, std, g1[ci], b1[ci]);
        }
    }
    let needs = tape.needs_grad(x) || tape.needs_grad(gamma) || tape.needs_grad(beta);
    tape.push_op(
        y.into_dyn(),
        needs,
        Box::new(move |g, store| {
            let g4 = as4(g);
            let x4 = as4(&vx);
            let g1 = vgamma.view().into_dimensionality::<Ix1>().unwrap();
            let mut dx = Array4::<f32>::zeros((n, c, h, w));
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for ni in 0..n {
                for ci in 0..c {
                    let (mean, std) = stats[ni * c + ci];
                    let xp = x4.index_axis(Axis(0), ni);
                    let xp = xp.index_axis(Axis(0), ci);
                    let gp = g4.index_axis(Axis(0), ni);
                    let gp = gp.index_axis(Axis(0), ci);
                    let mut dp = dx.index_axis_mut(Axis(0), ni);
                    let mut dp = dp.index_axis_mut(Axis(0), ci);
                    let (sum_g, sum_gx) = plane_backward(PlaneGrad {
                        x: xp.as_slice().unwrap(),
                        g: gp.as_slice().unwrap(),
                        dx: dp.as_slice_mut().unwrap(),
                        mean,
                        std,
                        scale: g1[ci],
                    });
                    dgamma[ci] += sum_gx;
                    dbeta[ci] += sum_g;
                }
            }
            if store.wants(x) {
                store.accumulate(x, dx.into_dyn());
            }
            store.accumulate(gamma, ArrayD::from_shape_vec(vec![c], dgamma).unwrap());
            store.accumulate(beta, ArrayD::from_shape_vec(vec![c], dbeta).unwrap());
        }),
    )
}

/// Adaptive renormalization: replace each channel's spatial statistics with
/// per-sample targets. `target_mean`, `target_std`: `[N, C]`.
pub fn adain(tape: &mut Tape, x: Var, target_mean: Var, target_std: Var) -> Var {
    let vx = tape.value_rc(x);
    let vm = tape.value_rc(target_mean);
    let vs = tape.value_rc(target_std);
    let x4 = as4(&vx);
    let (n, c, h, w) = x4.dim();
    {
        let m2 = vm.view().into_dimensionality::<Ix2>().expect("target_mean 2-d");
        assert_eq!(m2.dim(), (n, c), "adain: target_mean shape");
        let s2 = vs.view().into_dimensionality::<Ix2>().expect("target_std 2-d");
        assert_eq!(s2.dim(), (n, c), "adain: target_std shape");
    }
    let mut y = Array4::<f32>::zeros((n, c, h, w));
    let mut stats = vec![(0.0f32, 0.0f32); n * c];
    {
        let m2 = vm.view().into_dimensionality::<Ix2>().unwrap();
        let s2 = vs.view().into_dimensionality::<Ix2>().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let plane = x4.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), ci);
                let ps = plane.as_slice().unwrap();
                let (mean, std) = plane_stats(ps);
                stats[ni * c + ci] = (mean, std);
                let mut out = y.index_axis_mut(Axis(0), ni);
                let mut out = out.index_axis_mut(Axis(0), ci);
                normalize_plane(
                    ps,
                    out.as_slice_mut().unwrap(),
                    mean,
                    std,
                    s2[[ni, ci]],
                    m2[[ni, ci]],
                );
            }
        }
    }
    let needs = tape.needs_grad(x) || tape.needs_grad(target_mean) || tape.needs_grad(target_std);
    tape.push_op(
        y.into_dyn(),
        needs,
        Box::new(move |g, store| {
            let g4 = as4(g);
            let x4 = as4(&vx);
            let s2 = vs.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = Array4::<f32>::zeros((n, c, h, w));
            let mut dmean = Array2::<f32>::zeros((n, c));
            let mut dstd = Array2::<f32>::zeros((n, c));
            for ni in 0..n {
                for ci in 0..c {
                    let (mean, std) = stats[ni * c + ci];
                    let xp = x4.index_axis(Axis(0), ni);
                    let xp = xp.index_axis(Axis(0), ci);
                    let gp = g4.index_axis(Axis(0), ni);
                    let gp = gp.index_axis(Axis(0), ci);
                    let mut dp = dx.index_axis_mut(Axis(0), ni);
                    let mut dp = dp.index_axis_mut(Axis(0), ci);
                    let (sum_g, sum_gx) = plane_backward(PlaneGrad {
                        x: xp.as_slice().unwrap(),
                        g: gp.as_slice().unwrap(),
                        dx: dp.as_slice_mut().unwrap(),
                        mean,
                        std,
                        scale: s2[[ni, ci]],
                    });
                    dmean[[ni, ci]] = sum_g;
                    dstd[[ni, ci]] = sum_gx;
                }
            }
            if store.wants(x) {
                store.accumulate(x, dx.into_dyn());
            }
            store.accumulate(target_mean, dmean.into_dyn());
            store.accumulate(target_std, dstd.into_dyn());
        }),
    )
}
