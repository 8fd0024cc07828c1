use facecycle::autograd::{ops, Tape};
use ndarray::{Array1, Array4};
use std::time::Instant;

fn timed(name: &str, mut f: impl FnMut()) {
    f();
    let t0 = Instant::now();
    let n = 20;
    for _ in 0..n {
        f();
    }
    println!("{name}: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / n as f64);
}

#[test]
fn op_timing() {
    let x = Array4::<f32>::from_elem((8, 8, 64, 64), 0.3);
    let w = Array4::<f32>::from_elem((8, 8, 3, 3), 0.01);
    let b = Array1::<f32>::zeros(8);
    let flow = Array4::<f32>::from_elem((8, 2, 64, 64), 0.3);

    timed("conv 8x8x64x64 fwd", || {
        let mut t = Tape::new();
        let xv = t.constant(x.clone().into_dyn());
        let wv = t.leaf(w.clone().into_dyn(), true);
        let bv = t.leaf(b.clone().into_dyn(), true);
        let _ = facecycle::nn::conv::conv2d(&mut t, xv, wv, bv, 1, 1);
    });
    timed("conv fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone().into_dyn(), true);
        let wv = t.leaf(w.clone().into_dyn(), true);
        let bv = t.leaf(b.clone().into_dyn(), true);
        let y = facecycle::nn::conv::conv2d(&mut t, xv, wv, bv, 1, 1);
        let s = ops::mean_all(&mut t, y);
        let _ = t.backward(s);
    });
    timed("warp fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone().into_dyn(), true);
        let fv = t.leaf(flow.clone().into_dyn(), true);
        let y = facecycle::warpflow::warp(&mut t, xv, fv);
        let s = ops::mean_all(&mut t, y);
        let _ = t.backward(s);
    });
    timed("maxpool fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone().into_dyn(), true);
        let y = facecycle::nn::spatial::maxpool2(&mut t, xv);
        let s = ops::mean_all(&mut t, y);
        let _ = t.backward(s);
    });
    timed("instance_norm fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone().into_dyn(), true);
        let g = t.leaf(Array1::<f32>::ones(8).into_dyn(), true);
        let be = t.leaf(Array1::<f32>::zeros(8).into_dyn(), true);
        let y = facecycle::nn::norm::instance_norm(&mut t, xv, g, be);
        let s = ops::mean_all(&mut t, y);
        let _ = t.backward(s);
    });
    timed("upsample fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone().into_dyn(), true);
        let y = facecycle::nn::spatial::upsample_nearest2(&mut t, xv);
        let s = ops::mean_all(&mut t, y);
        let _ = t.backward(s);
    });
    timed("bilinear_resize 64->32 fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone().into_dyn(), true);
        let y = facecycle::nn::spatial::bilinear_resize(&mut t, xv, 32, 32);
        let s = ops::mean_all(&mut t, y);
        let _ = t.backward(s);
    });
    timed("l1_mean fwd+bwd", || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone().into_dyn(), true);
        let yv = t.constant(flow.clone().into_dyn().into_shape_with_order(vec![8,2,64,64]).unwrap().into_dyn());
        let xs = ops::scale(&mut t, xv, 1.0);
        let _ = xs;
        let a = t.leaf(x.clone().into_dyn(), true);
        let bq = t.constant(x.clone().into_dyn());
        let s = ops::l1_mean(&mut t, a, bq);
        let _ = t.backward(s);
        let _ = yv;
    });
    timed("gram fwd+bwd 8x16x16x16", || {
        let f = Array4::<f32>::from_elem((8, 16, 16, 16), 0.3);
        let mut t = Tape::new();
        let xv = t.leaf(f.into_dyn(), true);
        let g = facecycle::losses::gram_var(&mut t, xv);
        let s = ops::mean_all(&mut t, g);
        let _ = t.backward(s);
    });
}
