//! Training objectives: flow cycle loss, expression/identity cycle losses
//! with perceptual and Gram terms, and the mean-face margin loss.
//!
//! Reductions are means over elements so the loss weights keep their meaning
//! at any resolution. Perceptual distances use the mean of squared
//! differences per level (feature maps and Gram matrices), which keeps
//! gradients smooth at zero.

use crate::autograd::{ops, Tape, Var};
use crate::dataset::FaceImage;
use crate::error::{FaceCycleError, Result};
use crate::nets::{forward, BackboneDepth, Model};
use crate::warpflow::{invert_flow_var, warp, FlowField};
use ndarray::{Array2, Array3, ArrayD, Axis, Ix3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Loss weighting. `lambda_perc` balances L1 against perceptual terms;
/// `alpha_margin` is the mean-face margin; the per-term weights default to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_perc: f32,
    pub alpha_margin: f32,
    pub w_flow: f32,
    pub w_exp: f32,
    pub w_id: f32,
    pub w_margin: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_perc: 0.05,
            alpha_margin: 0.1,
            w_flow: 1.0,
            w_exp: 1.0,
            w_id: 1.0,
            w_margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_perc,
            self.alpha_margin,
            self.w_flow,
            self.w_exp,
            self.w_id,
            self.w_margin,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FaceCycleError::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Named loss terms with their weights; `total` is the weighted sum.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f32>,
    pub weights: BTreeMap<String, f32>,
    pub total: f32,
}

impl LossReport {
    pub fn push(&mut self, name: &str, value: f32, weight: f32) {
        self.terms.insert(name.to_string(), value);
        self.weights.insert(name.to_string(), weight);
        self.total += weight * value;
    }

    pub fn term(&self, name: &str) -> f32 {
        *self.terms.get(name).unwrap_or(&f32::NAN)
    }

    /// Recompute the weighted sum; the invariant `total == weighted_sum`
    /// holds to rounding.
    pub fn weighted_sum(&self) -> f32 {
        self.terms
            .iter()
            .map(|(k, v)| v * self.weights.get(k).copied().unwrap_or(1.0))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.values().all(|v| v.is_finite())
    }
}

/// Gram matrix node: `[N, C, H, W] -> [N, C, C]`, `G = A Aᵀ / (C·H·W)` with
/// `A` the `C x (H·W)` flattening of each sample.
pub fn gram_var(tape: &mut Tape, feat: Var) -> Var {
    let vf = tape.value_rc(feat);
    let (n, c, h, w) = {
        let s = vf.shape();
        (s[0], s[1], s[2], s[3])
    };
    let norm = 1.0 / (c * h * w) as f32;
    let mut out = ndarray::Array3::<f32>::zeros((n, c, c));
    for ni in 0..n {
        let sample = vf.index_axis(Axis(0), ni);
        let a = sample
            .to_shape((c, h * w))
            .expect("gram: contiguous feature");
        let g = a.dot(&a.t());
        out.index_axis_mut(Axis(0), ni).assign(&(g * norm));
    }
    let needs = tape.needs_grad(feat);
    tape.push_op(
        out.into_dyn(),
        needs,
        Box::new(move |g, store| {
            let mut df = ArrayD::<f32>::zeros(vf.raw_dim());
            for ni in 0..n {
                let gm = g.index_axis(Axis(0), ni);
                let gm = gm.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let sample = vf.index_axis(Axis(0), ni);
                let a = sample.to_shape((c, h * w)).unwrap();
                // d/dA of tr(Gᵀ·(A Aᵀ)·norm) = (G + Gᵀ)·A·norm
                let sym = &gm + &gm.t();
                let da = sym.dot(&a) * norm;
                df.index_axis_mut(Axis(0), ni)
                    .assign(&da.into_shape_with_order((c, h, w)).unwrap());
            }
            store.accumulate(feat, df);
        }),
    )
}

/// Sum over pyramid levels of feature and Gram mean-squared distances.
pub fn perceptual_var(tape: &mut Tape, a_levels: &[Var], b_levels: &[Var]) -> Var {
    assert_eq!(a_levels.len(), b_levels.len());
    let mut terms = Vec::new();
    for (&a, &b) in a_levels.iter().zip(b_levels.iter()) {
        terms.push(ops::sq_diff_mean(tape, a, b));
        let ga = gram_var(tape, a);
        let gb = gram_var(tape, b);
        terms.push(ops::sq_diff_mean(tape, ga, gb));
    }
    ops::sum_scalars(tape, &terms)
}

/// Flow cycle loss: warp forward, warp back through the inverted field, and
/// compare with the original (mean absolute error).
pub fn loss_flow_var(tape: &mut Tape, face: Var, fw: Var) -> Var {
    let bw = invert_flow_var(tape, fw);
    let there = warp(tape, face, fw);
    let back = warp(tape, there, bw);
    ops::l1_mean(tape, face, back)
}

/// Margin loss on mean faces: per-sample RMS distance over all elements,
/// hinged at `alpha`, averaged over the batch.
pub fn loss_margin_var(tape: &mut Tape, a: Var, b: Var, alpha: f32) -> Var {
    let va = tape.value_rc(a);
    let vb = tape.value_rc(b);
    assert_eq!(va.shape(), vb.shape(), "loss_margin: shape mismatch");
    let n = va.shape()[0];
    let per = va.len() / n;
    let mut rms = vec![0.0f32; n];
    let mut total = 0.0f64;
    {
        let af = va.as_slice().expect("margin: contiguous");
        let bf = vb.as_slice().expect("margin: contiguous");
        for ni in 0..n {
            let mut acc = 0.0f64;
            for i in ni * per..(ni + 1) * per {
                let d = (af[i] - bf[i]) as f64;
                acc += d * d;
            }
            let r = (acc / per as f64).sqrt();
            rms[ni] = r as f32;
            total += (r - alpha as f64).max(0.0);
        }
    }
    let out = ndarray::arr0((total / n as f64) as f32).into_dyn();
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    tape.push_op(
        out,
        needs,
        Box::new(move |g, store| {
            let gs = g.iter().copied().next().unwrap();
            let af = va.as_slice().unwrap();
            let bf = vb.as_slice().unwrap();
            let mut da = ArrayD::<f32>::zeros(va.raw_dim());
            {
                let ds = da.as_slice_mut().unwrap();
                for ni in 0..n {
                    if rms[ni] <= alpha || rms[ni] == 0.0 {
                        continue;
                    }
                    let coef = gs / (n as f32 * per as f32 * rms[ni]);
                    for i in ni * per..(ni + 1) * per {
                        ds[i] = coef * (af[i] - bf[i]);
                    }
                }
            }
            if store.wants(b) {
                store.accumulate(b, da.mapv(|v| -v));
            }
            store.accumulate(a, da);
        }),
    )
}

fn batch1(a: &Array3<f32>) -> ArrayD<f32> {
    a.clone().insert_axis(Axis(0)).into_dyn()
}

/// Flow cycle loss on one face (value level).
pub fn loss_flow(face: &FaceImage, fw: &FlowField) -> Result<f32> {
    if (fw.height(), fw.width()) != (face.size(), face.size()) {
        return Err(FaceCycleError::ShapeMismatch(format!(
            "flow is {}x{} but the face is {sz}x{sz}",
            fw.height(),
            fw.width(),
            sz = face.size()
        )));
    }
    let mut tape = Tape::new();
    let f = tape.constant(batch1(face.pixels()));
    let flow = tape.constant(batch1(fw.values()));
    let loss = loss_flow_var(&mut tape, f, flow);
    Ok(tape.scalar(loss))
}

/// Gram matrix of a single `C x H x W` feature map.
pub fn gram(feature: &Array3<f32>) -> Array2<f32> {
    let mut tape = Tape::new();
    let f = tape.constant(batch1(feature));
    let g = gram_var(&mut tape, f);
    let v: ndarray::Array3<f32> = tape
        .value(g)
        .clone()
        .into_dimensionality::<Ix3>()
        .unwrap()
        .into_dimensionality()
        .unwrap();
    v.index_axis(Axis(0), 0).to_owned()
}

/// Perceptual distance between two faces through the model's frozen
/// backbone (three levels, feature + Gram mean-squared distances).
pub fn perceptual_loss(model: &Model, a: &FaceImage, b: &FaceImage) -> Result<f32> {
    if a.size() != b.size() {
        return Err(FaceCycleError::ShapeMismatch(
            "perceptual_loss: image sizes differ".into(),
        ));
    }
    let mut tape = Tape::new();
    let p = model.bind_frozen(&mut tape);
    let va = tape.constant(batch1(a.pixels()));
    let vb = tape.constant(batch1(b.pixels()));
    let fa = forward::backbone(&model.arch, &mut tape, &p, va, BackboneDepth::Loss);
    let fb = forward::backbone(&model.arch, &mut tape, &p, vb, BackboneDepth::Loss);
    let loss = perceptual_var(
        &mut tape,
        &[fa.fine, fa.coarse, fa.deep.unwrap()],
        &[fb.fine, fb.coarse, fb.deep.unwrap()],
    );
    Ok(tape.scalar(loss))
}

fn cycle_report(
    model: &Model,
    originals: (&FaceImage, &FaceImage),
    reconstructions: (&FaceImage, &FaceImage),
    w: &LossWeights,
    l1_name: &str,
    perc_name: &str,
) -> Result<LossReport> {
    let l1 = {
        let mut tape = Tape::new();
        let a0 = tape.constant(batch1(originals.0.pixels()));
        let r0 = tape.constant(batch1(reconstructions.0.pixels()));
        let a1 = tape.constant(batch1(originals.1.pixels()));
        let r1 = tape.constant(batch1(reconstructions.1.pixels()));
        let d0 = ops::l1_mean(&mut tape, a0, r0);
        let d1 = ops::l1_mean(&mut tape, a1, r1);
        let s = ops::add(&mut tape, d0, d1);
        tape.scalar(s)
    };
    let perc = perceptual_loss(model, originals.0, reconstructions.0)?
        + perceptual_loss(model, originals.1, reconstructions.1)?;
    let mut report = LossReport::default();
    report.push(l1_name, l1, 1.0);
    report.push(perc_name, perc, w.lambda_perc);
    Ok(report)
}

/// Expression cycle objective: L1 plus weighted perceptual distance between
/// each face and its cross-reconstruction.
pub fn loss_expression(
    model: &Model,
    f: &FaceImage,
    f_t: &FaceImage,
    f_cross: &FaceImage,
    f_t_cross: &FaceImage,
    w: &LossWeights,
) -> Result<LossReport> {
    cycle_report(model, (f, f_t), (f_cross, f_t_cross), w, "exp_l1", "exp_perc")
}

/// Identity cycle objective: same structure on neutral faces and their
/// cross-identity reconstructions.
pub fn loss_identity(
    model: &Model,
    n1: &FaceImage,
    n2: &FaceImage,
    n1_cross: &FaceImage,
    n2_cross: &FaceImage,
    w: &LossWeights,
) -> Result<LossReport> {
    cycle_report(model, (n1, n2), (n1_cross, n2_cross), w, "id_l1", "id_perc")
}

/// Margin loss between one generated mean face and its neutral face.
pub fn loss_margin(mean_face: &FaceImage, neutral: &FaceImage, alpha: f32) -> f32 {
    let mut tape = Tape::new();
    let a = tape.constant(batch1(mean_face.pixels()));
    let b = tape.constant(batch1(neutral.pixels()));
    let loss = loss_margin_var(&mut tape, a, b, alpha);
    tape.scalar(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn face_from_fn(f: impl Fn(usize, usize, usize) -> f32) -> FaceImage {
        FaceImage::new(Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
            f(c, y, x).clamp(0.0, 1.0)
        }))
        .unwrap()
    }

    #[test]
    fn gram_matches_hand_computed_example() {
        // Channel 0 all ones, channel 1 all twos on a 2x2 map:
        // A = [[1,1,1,1],[2,2,2,2]], A·Aᵀ = [[4,8],[8,16]], /(C·H·W = 8).
        let mut feat = Array3::<f32>::zeros((2, 2, 2));
        feat.index_axis_mut(Axis(0), 0).fill(1.0);
        feat.index_axis_mut(Axis(0), 1).fill(2.0);
        let g = gram(&feat);
        assert_eq!(g, ndarray::arr2(&[[0.5, 1.0], [1.0, 2.0]]));
    }

    #[test]
    fn gram_of_zero_is_zero_and_result_is_symmetric_psd() {
        let zero = Array3::<f32>::zeros((3, 4, 4));
        assert!(gram(&zero).iter().all(|&v| v == 0.0));

        let feat = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| {
            ((c * 17 + y * 5 + x * 3) % 13) as f32 / 6.5 - 1.0
        });
        let g = gram(&feat);
        let gt = g.t();
        assert!(g.iter().zip(gt.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
        // PSD: xᵀGx >= 0 for a few probes.
        for probe in [[1.0f32, 0.0, 0.0], [1.0, -1.0, 0.5], [0.3, 0.3, 0.3]] {
            let x = ndarray::arr1(&probe);
            let q = x.dot(&g.dot(&x));
            assert!(q >= -1e-6, "negative quadratic form {q}");
        }
    }

    #[test]
    fn gram_is_invariant_to_spatial_permutation() {
        let feat = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| {
            ((c * 31 + y * 7 + x) % 11) as f32 * 0.2
        });
        let mut permuted = feat.clone();
        // Swap two spatial columns in every channel.
        for c in 0..2 {
            for y in 0..3 {
                permuted.swap([c, y, 0], [c, y, 2]);
            }
        }
        let d = (&gram(&feat) - &gram(&permuted))
            .iter()
            .fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!(d < 1e-6);
    }

    #[test]
    fn margin_hand_values() {
        // RMS distance 0.05 with alpha 0.1 -> 0; RMS 0.3 -> 0.2.
        let base = face_from_fn(|_, _, _| 0.5);
        let near = face_from_fn(|_, _, _| 0.55);
        let far = face_from_fn(|_, _, _| 0.8);
        assert_eq!(loss_margin(&near, &base, 0.1), 0.0);
        let v = loss_margin(&far, &base, 0.1);
        assert!((v - 0.2).abs() < 1e-6, "margin {v}");
        assert_eq!(loss_margin(&base, &base, 0.1), 0.0);
    }

    #[test]
    fn flow_loss_is_zero_for_zero_flow_and_constants() {
        let face = face_from_fn(|c, y, x| c as f32 * 0.1 + y as f32 * 0.01 + x as f32 * 0.002);
        let zero = FlowField::zeros(64, 64);
        assert_eq!(loss_flow(&face, &zero).unwrap(), 0.0);

        let constant = face_from_fn(|_, _, _| 0.42);
        let wild = FlowField::constant(64, 64, 5.0, -7.0);
        let v = loss_flow(&constant, &wild).unwrap();
        assert!(v.abs() < 1e-6, "constant image flow loss {v}");
    }

    #[test]
    fn report_total_is_the_weighted_sum() {
        let mut r = LossReport::default();
        r.push("a", 2.0, 1.0);
        r.push("b", 3.0, 0.05);
        assert!((r.total - r.weighted_sum()).abs() < 1e-6);
        assert!((r.total - 2.15).abs() < 1e-6);
        assert!(r.is_finite());
    }
}
