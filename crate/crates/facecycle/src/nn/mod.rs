//! Neural-network building blocks: parameter storage, initialization,
//! convolution / pooling / resampling / renormalization kernels and the
//! Adam optimizer.

pub mod conv;
pub mod norm;
pub mod spatial;

use crate::autograd::{GradStore, Tape, Var};
use ndarray::ArrayD;
use rand_chacha::rand_core::RngCore;
use std::collections::BTreeMap;

/// Named parameter tensors. `BTreeMap` keeps every iteration order (and so
/// every floating-point reduction that follows one) independent of insertion
/// history.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, ArrayD<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f32>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f32> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f32>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Insert every tensor of this set into a tape. Parameters whose name
    /// satisfies `trainable` are marked as requiring gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.map {
            let v = tape.leaf(value.clone(), trainable(name));
            vars.insert(name.clone(), v);
        }
        BoundParams { vars }
    }

    /// Merge another set under a prefix; used when assembling checkpoints.
    pub fn absorb(&mut self, other: ParamSet) {
        for (name, value) in other.map {
            self.insert(name, value);
        }
    }
}

/// Tape handles for one bound [`ParamSet`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collect the gradients of every trainable bound parameter.
    pub fn collect_grads(&self, store: &mut GradStore) -> BTreeMap<String, ArrayD<f32>> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.vars {
            if let Some(g) = store.take(var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Standard normal sampler (Box-Muller) driven by any `RngCore`, so
/// initialization depends only on the seed, not on distribution-crate
/// internals.
pub fn randn(rng: &mut dyn RngCore) -> f64 {
    loop {
        let u1 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// He-normal tensor: std = sqrt(2 / fan_in).
pub fn he_normal(rng: &mut dyn RngCore, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data: Vec<f32> = (0..len).map(|_| (randn(rng) * std) as f32).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(ndarray::IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::ones(ndarray::IxDyn(shape))
}

/// Rescale gradients in place when their global L2 norm exceeds `max_norm`.
/// Returns `(norm, clipped)`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, ArrayD<f32>>, max_norm: f32) -> (f32, bool) {
    let mut sq = 0.0f64;
    for g in grads.values() {
        sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

/// Adam optimizer with bias correction. Moment tensors are created lazily on
/// first update of each parameter, and serialize with the `optim.` prefix for
/// checkpoint resume.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step_count: u64,
    m: BTreeMap<String, ArrayD<f32>>,
    v: BTreeMap<String, ArrayD<f32>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, ArrayD<f32>>,
        lr: f32,
    ) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    /// Export moment tensors for checkpointing (`optim.m.<name>` /
    /// `optim.v.<name>`).
    pub fn export_state(&self) -> BTreeMap<String, ArrayD<f32>> {
        let mut out = BTreeMap::new();
        for (name, m) in &self.m {
            out.insert(format!("optim.m.{name}"), m.clone());
        }
        for (name, v) in &self.v {
            out.insert(format!("optim.v.{name}"), v.clone());
        }
        out
    }

    pub fn import_state(&mut self, state: BTreeMap<String, ArrayD<f32>>, step_count: u64) {
        self.step_count = step_count;
        for (name, tensor) in state {
            if let Some(rest) = name.strip_prefix("optim.m.") {
                self.m.insert(rest.to_string(), tensor);
            } else if let Some(rest) = name.strip_prefix("optim.v.") {
                self.v.insert(rest.to_string(), tensor);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn randn_moments_are_plausible() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| randn(&mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamSet::new();
        params.insert("x", arr1(&[5.0f32, -3.0]).into_dyn());
        let mut opt = Adam::new(0.9, 0.999);
        for _ in 0..500 {
            let x = params.get("x").clone();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), x.mapv(|v| 2.0 * v));
            opt.step(&mut params, &grads, 0.05);
        }
        assert!(params.get("x").iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clip_rescales_only_large_gradients() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), arr1(&[3.0f32, 4.0]).into_dyn());
        let (norm, clipped) = clip_global_norm(&mut grads, 10.0);
        assert!((norm - 5.0).abs() < 1e-6);
        assert!(!clipped);
        let (_, clipped) = clip_global_norm(&mut grads, 1.0);
        assert!(clipped);
        let new_norm: f32 = grads["a"].iter().map(|v| v * v).sum::<f32>();
        assert!((new_norm.sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn duplicate_parameter_panics() {
        let result = std::panic::catch_unwind(|| {
            let mut p = ParamSet::new();
            p.insert("w", arr1(&[1.0f32]).into_dyn());
            p.insert("w", arr1(&[2.0f32]).into_dyn());
        });
        assert!(result.is_err());
    }
}
