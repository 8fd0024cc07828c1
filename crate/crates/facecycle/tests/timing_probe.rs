use facecycle::dataset::{FaceImage, PairKind, PairSample};
use facecycle::losses::LossWeights;
use facecycle::nets::{ArchSpec, BackboneSource, Model};
use facecycle::train::Trainer;
use ndarray::Array3;

fn face(seed: u32) -> FaceImage {
    let px = Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
        let v = ((c as u32 * 97 + y as u32 * 31 + x as u32 * 7 + seed * 131) % 256) as f32 / 255.0;
        v
    });
    FaceImage::new(px).unwrap()
}

#[test]
fn timing_probe() {
    let model = Model::new(ArchSpec::tiny(), &BackboneSource::Synthetic { seed: 1 }, 2).unwrap();
    let mut trainer = Trainer::new(model, 1, LossWeights::default(), 0.5, 0.999, 10.0);
    let pairs: Vec<PairSample> = (0..8)
        .map(|i| PairSample {
            face_a: face(i),
            face_b: face(i + 100),
            pair_kind: PairKind::SameIdentityFrames,
        })
        .collect();
    // warmup
    trainer.stage1_step(&pairs, 5e-5).unwrap();
    let t0 = std::time::Instant::now();
    let n = 10;
    for _ in 0..n {
        trainer.stage1_step(&pairs, 5e-5).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("stage1_step batch=8 tiny: {:.1} ms/step -> 2000 steps = {:.1} min", dt * 1e3, dt * 2000.0 / 60.0);

    let mut model2 = trainer.model.clone();
    model2.ensure_stage2(3);
    let mut trainer2 = Trainer::new(model2, 2, LossWeights::default(), 0.5, 0.999, 10.0);
    trainer2.stage2_step(&pairs, 1e-4).unwrap();
    let t0 = std::time::Instant::now();
    for _ in 0..n {
        trainer2.stage2_step(&pairs, 1e-4).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("stage2_step batch=8 tiny: {:.1} ms/step -> 2000 steps = {:.1} min", dt * 1e3, dt * 2000.0 / 60.0);
}
