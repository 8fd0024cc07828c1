//! Differentiable geometric core: bilinear warping, flow-field inversion and
//! flow rescaling.
//!
//! Warping uses backward sampling: `out(p) = input(p + flow(p))`, bilinearly
//! interpolated with sample coordinates clamped to the image border. Border
//! clamping keeps constant images invariant under any flow and avoids dark
//! halos in reconstructions. The warp is differentiable w.r.t. both the
//! image and the flow; at clamped samples the flow gradient is zero.

use crate::autograd::{ops, Tape, Var};
use crate::error::{FaceCycleError, Result};
use crate::nn::conv::as4;
use crate::nn::spatial::bilinear_resize;
use ndarray::{Array3, Array4, ArrayView4, Axis};
use std::io::{Read, Write};
use std::path::Path;

/// Per-pixel displacement field in pixel units. Channel 0 is horizontal
/// (positive rightward), channel 1 vertical (positive downward).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    values: Array3<f32>,
}

impl FlowField {
    pub fn new(values: Array3<f32>) -> Result<Self> {
        if values.shape()[0] != 2 {
            return Err(FaceCycleError::ShapeMismatch(format!(
                "flow field needs 2 channels, got {}",
                values.shape()[0]
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(FaceCycleError::Other("flow field contains non-finite values".into()));
        }
        Ok(FlowField { values })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            values: Array3::zeros((2, h, w)),
        }
    }

    pub fn constant(h: usize, w: usize, dx: f32, dy: f32) -> Self {
        let mut values = Array3::zeros((2, h, w));
        values.index_axis_mut(Axis(0), 0).fill(dx);
        values.index_axis_mut(Axis(0), 1).fill(dy);
        FlowField { values }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f32> {
        self.values
    }

    pub fn max_magnitude(&self) -> f32 {
        let u = self.values.index_axis(Axis(0), 0);
        let v = self.values.index_axis(Axis(0), 1);
        u.iter()
            .zip(v.iter())
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .fold(0.0, f32::max)
    }

    /// Serialize as raw little-endian f32 with a 16-byte header:
    /// magic `FLW1`, u32 height, u32 width, u32 reserved.
    pub fn write_flw(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| FaceCycleError::io(path, e))?;
        let mut buf = Vec::with_capacity(16 + self.values.len() * 4);
        buf.extend_from_slice(b"FLW1");
        buf.extend_from_slice(&(self.height() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width() as u32).to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        for v in self.values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf).map_err(|e| FaceCycleError::io(path, e))
    }

    pub fn read_flw(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| FaceCycleError::io(path, e))?;
        let mut header = [0u8; 16];
        file.read_exact(&mut header)
            .map_err(|e| FaceCycleError::io(path, e))?;
        if &header[0..4] != b"FLW1" {
            return Err(FaceCycleError::Other(format!(
                "{}: bad flow-file magic",
                path.display()
            )));
        }
        let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw).map_err(|e| FaceCycleError::io(path, e))?;
        if raw.len() != 2 * h * w * 4 {
            return Err(FaceCycleError::Other(format!(
                "{}: expected {} bytes of flow data, got {}",
                path.display(),
                2 * h * w * 4,
                raw.len()
            )));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values = Array3::from_shape_vec((2, h, w), data)
            .map_err(|e| FaceCycleError::Other(e.to_string()))?;
        FlowField::new(values)
    }
}

struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f32,
    wy: f32,
    // Whether the clamp was inactive, i.e. the sample coordinate gradient
    // is nonzero.
    live_x: bool,
    live_y: bool,
}

#[inline]
fn taps(x: usize, y: usize, u: f32, v: f32, h: usize, w: usize) -> Taps {
    let sx_raw = x as f32 + u;
    let sy_raw = y as f32 + v;
    let max_x = (w - 1) as f32;
    let max_y = (h - 1) as f32;
    let sx = sx_raw.clamp(0.0, max_x);
    let sy = sy_raw.clamp(0.0, max_y);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let wx = sx - x0;
    let wy = sy - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    Taps {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        wx,
        wy,
        live_x: sx_raw > 0.0 && sx_raw < max_x,
        live_y: sy_raw > 0.0 && sy_raw < max_y,
    }
}

/// Plain forward warp on `[N, C, H, W]` input with `[N, 2, H, W]` flow.
pub fn warp_forward(x: &ArrayView4<f32>, flow: &ArrayView4<f32>) -> Array4<f32> {
    use rayon::prelude::*;
    let (n, c, h, w) = x.dim();
    assert_eq!(flow.dim(), (n, 2, h, w), "warp: flow shape mismatch");
    let hw = h * w;
    let mut y = Array4::<f32>::zeros((n, c, h, w));
    y.axis_chunks_iter_mut(Axis(0), 1)
        .into_par_iter()
        .enumerate()
        .for_each(|(ni, mut yn)| {
            let xn = x.index_axis(Axis(0), ni);
            let xs = xn.to_slice().expect("warp: contiguous input");
            let fn_ = flow.index_axis(Axis(0), ni);
            let fs = fn_.to_slice().expect("warp: contiguous flow");
            let (us, vs) = fs.split_at(hw);
            let ys = yn.as_slice_mut().unwrap();
            for yy in 0..h {
                for xx in 0..w {
                    let base = yy * w + xx;
                    let t = taps(xx, yy, us[base], vs[base], h, w);
                    let o00 = t.y0 * w + t.x0;
                    let o01 = t.y0 * w + t.x1;
                    let o10 = t.y1 * w + t.x0;
                    let o11 = t.y1 * w + t.x1;
                    for ci in 0..c {
                        let p = &xs[ci * hw..(ci + 1) * hw];
                        let top = p[o00] + t.wx * (p[o01] - p[o00]);
                        let bot = p[o10] + t.wx * (p[o11] - p[o10]);
                        ys[ci * hw + base] = top + t.wy * (bot - top);
                    }
                }
            }
        });
    y
}

/// Differentiable warp node; gradients flow to both image and flow.
pub fn warp(tape: &mut Tape, x: Var, flow: Var) -> Var {
    let vx = tape.value_rc(x);
    let vf = tape.value_rc(flow);
    let y = warp_forward(&as4(&vx), &as4(&vf));
    let needs = tape.needs_grad(x) || tape.needs_grad(flow);
    tape.push_op(
        y.into_dyn(),
        needs,
        Box::new(move |g, store| {
            use rayon::prelude::*;
            let g4 = as4(g);
            let x4 = as4(&vx);
            let f4 = as4(&vf);
            let (n, c, h, w) = x4.dim();
            let hw = h * w;
            let want_x = store.wants(x);
            let want_f = store.wants(flow);
            let mut dx = want_x.then(|| Array4::<f32>::zeros((n, c, h, w)));
            let mut df = want_f.then(|| Array4::<f32>::zeros((n, 2, h, w)));
            // Per-sample gradient planes are independent.
            let dx_rows: Vec<Option<ndarray::ArrayViewMut3<f32>>> = match dx.as_mut() {
                Some(d) => d.axis_iter_mut(Axis(0)).map(Some).collect(),
                None => (0..n).map(|_| None).collect(),
            };
            let df_rows: Vec<Option<ndarray::ArrayViewMut3<f32>>> = match df.as_mut() {
                Some(d) => d.axis_iter_mut(Axis(0)).map(Some).collect(),
                None => (0..n).map(|_| None).collect(),
            };
            dx_rows
                .into_par_iter()
                .zip(df_rows.into_par_iter())
                .enumerate()
                .for_each(|(ni, (dx_n, df_n))| {
                    let xn = x4.index_axis(Axis(0), ni);
                    let xs = xn.to_slice().unwrap();
                    let fnv = f4.index_axis(Axis(0), ni);
                    let fs = fnv.to_slice().unwrap();
                    let (us, vs) = fs.split_at(hw);
                    let gn = g4.index_axis(Axis(0), ni);
                    let gs = gn.to_slice().unwrap();
                    let mut dxs = dx_n;
                    let mut dfs = df_n;
                    let dx_slice: Option<&mut [f32]> =
                        dxs.as_mut().map(|v| v.as_slice_mut().unwrap());
                    let df_slice: Option<&mut [f32]> =
                        dfs.as_mut().map(|v| v.as_slice_mut().unwrap());
                    let mut dx_slice = dx_slice;
                    let mut df_slice = df_slice;
                    for yy in 0..h {
                        for xx in 0..w {
                            let base = yy * w + xx;
                            let t = taps(xx, yy, us[base], vs[base], h, w);
                            let o00 = t.y0 * w + t.x0;
                            let o01 = t.y0 * w + t.x1;
                            let o10 = t.y1 * w + t.x0;
                            let o11 = t.y1 * w + t.x1;
                            let w00 = (1.0 - t.wy) * (1.0 - t.wx);
                            let w01 = (1.0 - t.wy) * t.wx;
                            let w10 = t.wy * (1.0 - t.wx);
                            let w11 = t.wy * t.wx;
                            let mut du = 0.0f32;
                            let mut dv = 0.0f32;
                            for ci in 0..c {
                                let gv = gs[ci * hw + base];
                                let p = &xs[ci * hw..(ci + 1) * hw];
                                if let Some(ds) = dx_slice.as_mut() {
                                    let o = ci * hw;
                                    ds[o + o00] += gv * w00;
                                    ds[o + o01] += gv * w01;
                                    ds[o + o10] += gv * w10;
                                    ds[o + o11] += gv * w11;
                                }
                                if want_f {
                                    // d(out)/d(sx), d(out)/d(sy) of the bilinear kernel.
                                    du += gv * ((1.0 - t.wy) * (p[o01] - p[o00]) + t.wy * (p[o11] - p[o10]));
                                    dv += gv * ((1.0 - t.wx) * (p[o10] - p[o00]) + t.wx * (p[o11] - p[o01]));
                                }
                            }
                            if let Some(ds) = df_slice.as_mut() {
                                if t.live_x {
                                    ds[base] = du;
                                }
                                if t.live_y {
                                    ds[hw + base] = dv;
                                }
                            }
                        }
                    }
                });
            if let Some(dx) = dx {
                store.accumulate(x, dx.into_dyn());
            }
            if let Some(df) = df {
                store.accumulate(flow, df.into_dyn());
            }
        }),
    )
}

/// Backward flow from a forward flow: resample the field through itself and
/// negate.
pub fn invert_flow_var(tape: &mut Tape, flow: Var) -> Var {
    let warped = warp(tape, flow, flow);
    ops::neg(tape, warped)
}

/// Bilinear spatial resize of a flow; displacement values are multiplied by
/// the size ratio per axis so they remain valid pixel units afterwards.
pub fn rescale_flow_var(tape: &mut Tape, flow: Var, th: usize, tw: usize) -> Var {
    let (h, w) = {
        let s = tape.value(flow).shape();
        (s[2], s[3])
    };
    let resized = bilinear_resize(tape, flow, th, tw);
    if (th, tw) == (h, w) {
        return resized;
    }
    ops::scale_channels(
        tape,
        resized,
        vec![tw as f32 / w as f32, th as f32 / h as f32],
    )
}

fn single(field: &Array3<f32>) -> Array4<f32> {
    field
        .clone()
        .insert_axis(Axis(0))
        .into_dimensionality()
        .unwrap()
}

/// Warp a single `C x H x W` image by a flow field.
pub fn warp_image(input: &Array3<f32>, flow: &FlowField) -> Result<Array3<f32>> {
    let (_, h, w) = input.dim();
    if (flow.height(), flow.width()) != (h, w) {
        return Err(FaceCycleError::ShapeMismatch(format!(
            "warp: image is {h}x{w} but flow is {}x{}",
            flow.height(),
            flow.width()
        )));
    }
    let x = single(input);
    let f = single(flow.values());
    let y = warp_forward(&x.view(), &f.view());
    Ok(y.index_axis(Axis(0), 0).to_owned())
}

/// Invert a single flow field.
pub fn invert_flow(fw: &FlowField) -> FlowField {
    let f = single(fw.values());
    let mut warped = warp_forward(&f.view(), &f.view());
    warped.mapv_inplace(|v| -v);
    FlowField {
        values: warped.index_axis(Axis(0), 0).to_owned(),
    }
}

/// Rescale a single flow field to `target_h x target_w`.
pub fn rescale_flow(flow: &FlowField, target_h: usize, target_w: usize) -> FlowField {
    assert!(target_h >= 1 && target_w >= 1, "rescale_flow: target dims");
    let mut tape = Tape::new();
    let f = tape.constant(single(flow.values()).into_dyn());
    let out = rescale_flow_var(&mut tape, f, target_h, target_w);
    let v4: Array4<f32> = tape.value(out).clone().into_dimensionality().unwrap();
    FlowField {
        values: v4.index_axis(Axis(0), 0).to_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    fn image_2x2() -> Array3<f32> {
        Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn zero_flow_is_exact_identity() {
        let img = image_2x2();
        let flow = FlowField::zeros(2, 2);
        let out = warp_image(&img, &flow).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn half_pixel_shift_matches_hand_computed_bilinear() {
        // Hand oracle: sampling at x+0.5 averages horizontal neighbours and
        // clamps at the right border.
        let img = image_2x2();
        let flow = FlowField::constant(2, 2, 0.5, 0.0);
        let out = warp_image(&img, &flow).unwrap();
        assert_eq!(
            out,
            Array3::from_shape_vec((1, 2, 2), vec![1.5, 2.0, 3.5, 4.0]).unwrap()
        );
    }

    #[test]
    fn constant_image_is_invariant_under_any_flow() {
        let img = Array3::from_elem((3, 8, 8), 0.62f32);
        let flow = FlowField::constant(8, 8, -3.7, 5.2);
        let out = warp_image(&img, &flow).unwrap();
        assert!(out.iter().all(|&v| (v - 0.62).abs() < 1e-6));
    }

    #[test]
    fn constant_flow_inverts_to_its_negation() {
        let fw = FlowField::constant(8, 8, 3.0, 0.0);
        let bw = invert_flow(&fw);
        assert!(bw
            .values()
            .index_axis(Axis(0), 0)
            .iter()
            .all(|&v| (v + 3.0).abs() < 1e-6));
        assert!(bw.values().index_axis(Axis(0), 1).iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn zero_flow_inverts_to_zero() {
        let bw = invert_flow(&FlowField::zeros(4, 4));
        assert!(bw.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rescale_constant_field_scales_displacements() {
        let fw = FlowField::constant(64, 64, 4.0, 2.0);
        let down = rescale_flow(&fw, 32, 32);
        assert_eq!(down.height(), 32);
        assert!(down
            .values()
            .index_axis(Axis(0), 0)
            .iter()
            .all(|&v| (v - 2.0).abs() < 1e-5));
        assert!(down
            .values()
            .index_axis(Axis(0), 1)
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn rescale_to_same_dims_is_identity() {
        let mut values = Array3::zeros((2, 6, 5));
        for (i, v) in values.iter_mut().enumerate() {
            *v = (i as f32 * 0.13).sin();
        }
        let fw = FlowField::new(values.clone()).unwrap();
        let same = rescale_flow(&fw, 6, 5);
        assert_eq!(same.values(), &values);
    }

    #[test]
    fn warp_shape_mismatch_is_an_error() {
        let img = Array3::<f32>::zeros((1, 4, 4));
        let flow = FlowField::zeros(2, 2);
        assert!(matches!(
            warp_image(&img, &flow),
            Err(FaceCycleError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn warp_is_linear_in_the_image() {
        let a = Array3::from_shape_fn((2, 6, 6), |(c, y, x)| (c + 2 * y + 3 * x) as f32 * 0.05);
        let b = Array3::from_shape_fn((2, 6, 6), |(c, y, x)| ((c * y) as f32 - x as f32) * 0.07);
        let mut values = Array3::zeros((2, 6, 6));
        for (i, v) in values.iter_mut().enumerate() {
            *v = ((i * 7 % 13) as f32 - 6.0) * 0.2;
        }
        let flow = FlowField::new(values).unwrap();
        let lhs = warp_image(&(2.0 * &a + 3.0 * &b), &flow).unwrap();
        let rhs = 2.0 * warp_image(&a, &flow).unwrap() + 3.0 * warp_image(&b, &flow).unwrap();
        let max_err = (&lhs - &rhs).iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!(max_err < 1e-5, "linearity violated by {max_err}");
    }

    #[test]
    fn flw_roundtrip() {
        let dir = std::env::temp_dir().join("facecycle_flw_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.flw");
        let mut values = Array3::zeros((2, 3, 5));
        for (i, v) in values.iter_mut().enumerate() {
            *v = i as f32 * 0.25 - 2.0;
        }
        let fw = FlowField::new(values).unwrap();
        fw.write_flw(&path).unwrap();
        let back = FlowField::read_flw(&path).unwrap();
        assert_eq!(&fw, &back);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn batched_warp_matches_single_warp() {
        let img = Array3::from_shape_fn((3, 5, 5), |(c, y, x)| (c + y * x) as f32 * 0.1);
        let flow = FlowField::constant(5, 5, 0.3, -0.6);
        let single_out = warp_image(&img, &flow).unwrap();
        let mut batch = Array4::zeros((2, 3, 5, 5));
        batch.index_axis_mut(Axis(0), 0).assign(&img);
        batch.index_axis_mut(Axis(0), 1).assign(&img);
        let mut flows = Array4::zeros((2, 2, 5, 5));
        flows.index_axis_mut(Axis(0), 0).assign(flow.values());
        flows.index_axis_mut(Axis(0), 1).assign(flow.values());
        let out = warp_forward(&batch.view(), &flows.view());
        assert_eq!(out.index_axis(Axis(0), 0), single_out.view());
        assert_eq!(out.index_axis(Axis(0), 1), single_out.view());
    }
}
