use facecycle::autograd::{ops, Tape};
use facecycle::nets::{forward, ArchSpec, BackboneDepth, BackboneSource, Model};
use ndarray::Array4;
use std::time::Instant;

#[test]
fn step_breakdown() {
    let arch = ArchSpec::tiny();
    let model = Model::new(arch.clone(), &BackboneSource::Synthetic { seed: 1 }, 2).unwrap();
    let batch = Array4::<f32>::from_elem((8, 3, 64, 64), 0.4);

    let timed = |name: &str, f: &mut dyn FnMut()| {
        f();
        let t0 = Instant::now();
        let n = 10;
        for _ in 0..n {
            f();
        }
        println!("{name}: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3 / n as f64);
    };

    // Encoder forward only (constant params, needs no grad)
    timed("encoder fwd (const)", &mut || {
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, &|_| false);
        let x = t.constant(batch.clone().into_dyn());
        let _ = forward::encoder(&arch, &mut t, &p, "e_exp", x);
    });
    // Encoder fwd+bwd (trainable)
    timed("encoder fwd+bwd", &mut || {
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, &|n| n.starts_with("e_exp."));
        let x = t.constant(batch.clone().into_dyn());
        let code = forward::encoder(&arch, &mut t, &p, "e_exp", x);
        let s = ops::mean_all(&mut t, code);
        let _ = t.backward(s);
    });
    // Backbone Loss fwd (const)
    timed("backbone Loss fwd (const)", &mut || {
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, &|_| false);
        let x = t.constant(batch.clone().into_dyn());
        let _ = forward::backbone(&arch, &mut t, &p, x, BackboneDepth::Loss);
    });
    // Backbone Loss fwd+bwd through activations (x needs grad)
    timed("backbone Loss fwd+bwd(act)", &mut || {
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, &|_| false);
        let x = t.leaf(batch.clone().into_dyn(), true);
        let f = forward::backbone(&arch, &mut t, &p, x, BackboneDepth::Loss);
        let s = ops::mean_all(&mut t, f.deep.unwrap());
        let s2 = ops::mean_all(&mut t, f.fine);
        let s3 = ops::mean_all(&mut t, f.coarse);
        let a = ops::add(&mut t, s, s2);
        let a = ops::add(&mut t, a, s3);
        let _ = t.backward(a);
    });
    // Flow decoder fwd+bwd
    timed("flow decoder fwd+bwd", &mut || {
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, &|n| n.starts_with("d_flow."));
        let code = t.constant(ndarray::Array2::<f32>::from_elem((8, arch.code_dim), 0.1).into_dyn());
        let f = forward::flow_decoder(&arch, &mut t, &p, code);
        let s = ops::mean_all(&mut t, f);
        let _ = t.backward(s);
    });
    // Face decoder fwd+bwd
    timed("face decoder fwd+bwd", &mut || {
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, &|n| n.starts_with("d_exp."));
        let fine = t.leaf(Array4::<f32>::from_elem((8, arch.backbone_channels[1], 32, 32), 0.2).into_dyn(), true);
        let coarse = t.leaf(Array4::<f32>::from_elem((8, arch.backbone_channels[2], 16, 16), 0.2).into_dyn(), true);
        let img = forward::face_decoder(&mut t, &p, "d_exp", fine, coarse, false);
        let s = ops::mean_all(&mut t, img);
        let _ = t.backward(s);
    });
    // bind cost alone
    timed("bind params", &mut || {
        let mut t = Tape::new();
        let _ = model.params.bind(&mut t, &|_| false);
    });
}
