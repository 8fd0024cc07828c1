use ndarray::{Array1, Array4};
use std::time::Instant;

#[test]
fn conv_internal_timing() {
    // Direct kernel timing without tape overhead.
    let x = Array4::<f32>::from_elem((8, 8, 64, 64), 0.3);
    let w = Array4::<f32>::from_elem((8, 8, 3, 3), 0.01);
    let b = Array1::<f32>::zeros(8);
    let dy = Array4::<f32>::from_elem((8, 8, 64, 64), 0.001);

    let n = 30;
    facecycle::nn::conv::conv2d_forward(&x.view(), &w.view(), Some(&b.view()), 1, 1);
    let t0 = Instant::now();
    for _ in 0..n {
        facecycle::nn::conv::conv2d_forward(&x.view(), &w.view(), Some(&b.view()), 1, 1);
    }
    println!("conv2d_forward kernel: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / n as f64);

    let mask = facecycle::nn::conv::ConvGradMask { input: true, weight: true, bias: true };
    facecycle::nn::conv::conv2d_backward(&x.view(), &w.view(), &dy.view(), 1, 1, mask);
    let t0 = Instant::now();
    for _ in 0..n {
        facecycle::nn::conv::conv2d_backward(&x.view(), &w.view(), &dy.view(), 1, 1, mask);
    }
    println!("conv2d_backward kernel: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / n as f64);

    // A bigger gemm shape for reference: what does ndarray dot sustain?
    let a = ndarray::Array2::<f32>::from_elem((72, 4096), 0.1);
    let wb = ndarray::Array2::<f32>::from_elem((8, 72), 0.1);
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = wb.dot(&a);
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("gemm 8x72x4096: {:.3} ms = {:.1} GFLOP/s", dt * 1e3, 2.0 * 8.0 * 72.0 * 4096.0 / dt / 1e9);
    let big = ndarray::Array2::<f32>::from_elem((256, 1024), 0.1);
    let wbig = ndarray::Array2::<f32>::from_elem((256, 256), 0.1);
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = wbig.dot(&big);
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("gemm 256x256x1024: {:.3} ms = {:.1} GFLOP/s", dt * 1e3, 2.0 * 256.0 * 256.0 * 1024.0 / dt / 1e9);
}
