#![allow(dead_code)]

use fam_core::model::{init_params, Batch, Model, ModelSpec, ParameterSet};
use fam_core::tasks::{Episode, ExampleId};
use fam_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error with an absolute floor of 1e-6 on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length");
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(*a, *n);
        assert!(e <= tol, "{what}[{i}]: analytic {a} vs numeric {n} (rel err {e:.3e})");
    }
}

pub fn random_batch(spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.input_shape);
    let labels = (0..n).map(|i| i % spec.num_classes).collect();
    Batch::new(random_tensor(&shape, rng), labels).unwrap()
}

pub fn random_episode(spec: &ModelSpec, shot: usize, query: usize, rng: &mut ChaCha8Rng) -> Episode {
    let way = spec.num_classes;
    let support = random_batch(spec, way * shot, rng);
    let query = random_batch(spec, way * query, rng);
    Episode {
        way,
        classes: (0..way).collect(),
        support,
        query,
        support_ids: Vec::<ExampleId>::new(),
        query_ids: Vec::<ExampleId>::new(),
    }
}

pub fn tiny_mlp(seed: u64) -> (Model, ParameterSet) {
    let spec = ModelSpec::mlp(&[1, 2, 3], &[5], 3).unwrap();
    let params = init_params(&spec, seed).unwrap();
    (Model::new(spec).unwrap(), params)
}
