//! Finite-difference checks for every differentiable primitive, the full
//! networks and the meta-objective.

mod common;

use common::*;
use fam_core::meta::{inner_adapt, meta_gradient, MetaConfig, Order};
use fam_core::model::{init_params, Model, ModelSpec, Objective, ParameterSet};
use fam_core::tensor::{Tape, Tensor, Var};
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

/// Checks the tape gradient of `sum(weights ⊙ build(inputs))` against
/// central differences for every input.
fn check_op(name: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |vals: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::from_vec(&shape, (0..n).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect()).unwrap();
        let w = tape.leaf(w);
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| grads.wrt(v)).collect())
    };
    let (_, analytic) = eval(&inputs);
    for (i, x) in inputs.iter().enumerate() {
        let numeric = numeric_grad(x.data(), H, |p| {
            let mut vals = inputs.clone();
            vals[i] = Tensor::from_vec(x.shape(), p.to_vec()).unwrap();
            eval(&vals).0
        });
        assert_close(analytic[i].data(), &numeric, TOL, &format!("{name} input {i}"));
    }
}

/// Values bounded away from zero so kinks of relu and ties of max stay out of
/// reach of the finite-difference step.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let m = r.gen_range(0.1..1.0) + 0.01 * i as f64;
            if r.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn matmul_gradient() {
    let mut r = rng(1);
    check_op("matmul", vec![random_tensor(&[3, 4], &mut r), random_tensor(&[4, 2], &mut r)], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
}

#[test]
fn add_and_mul_gradients() {
    let mut r = rng(2);
    let xs = vec![random_tensor(&[2, 3], &mut r), random_tensor(&[2, 3], &mut r)];
    check_op("add", xs.clone(), |t, v| t.add(v[0], v[1]).unwrap());
    check_op("mul", xs.clone(), |t, v| t.mul(v[0], v[1]).unwrap());
    check_op("scale", xs, |t, v| t.scale(v[0], -1.7));
}

#[test]
fn bias_gradients() {
    let mut r = rng(3);
    check_op("add_bias", vec![random_tensor(&[4, 3], &mut r), random_tensor(&[3], &mut r)], |t, v| {
        t.add_bias(v[0], v[1]).unwrap()
    });
    check_op(
        "add_channel_bias",
        vec![random_tensor(&[2, 3, 2, 2], &mut r), random_tensor(&[3], &mut r)],
        |t, v| t.add_channel_bias(v[0], v[1]).unwrap(),
    );
}

#[test]
fn relu_gradient() {
    check_op("relu", vec![away_from_zero(&[3, 5], 4)], |t, v| t.relu(v[0]));
}

#[test]
fn conv2d_gradient() {
    let mut r = rng(5);
    check_op(
        "conv2d",
        vec![random_tensor(&[2, 2, 4, 3], &mut r), random_tensor(&[3, 2, 3, 3], &mut r)],
        |t, v| t.conv2d(v[0], v[1]).unwrap(),
    );
}

#[test]
fn max_pool_gradient() {
    // Odd and unit dimensions exercise the clipped windows.
    check_op("max_pool", vec![away_from_zero(&[2, 2, 5, 4], 6)], |t, v| t.max_pool_2x2(v[0]).unwrap());
    check_op("max_pool_1x1", vec![away_from_zero(&[1, 3, 1, 1], 7)], |t, v| t.max_pool_2x2(v[0]).unwrap());
}

#[test]
fn reshape_and_sum_gradients() {
    let mut r = rng(8);
    check_op("reshape", vec![random_tensor(&[2, 3, 2], &mut r)], |t, v| t.reshape(v[0], &[3, 4]).unwrap());
    check_op("sum", vec![random_tensor(&[5], &mut r)], |t, v| t.sum(v[0]));
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut r = rng(9);
    let logits = random_tensor(&[4, 3], &mut r).map(|x| 3.0 * x);
    check_op("softmax_ce", vec![logits], |t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]).unwrap());
}

fn check_model_gradient(model: &Model, params: &ParameterSet, seed: u64) {
    let mut r = rng(seed);
    let batch = random_batch(model.spec(), 6, &mut r);
    let (_, grad) = model.loss_and_grad(params, &batch).unwrap();
    let numeric = numeric_grad(&params.flatten(), H, |p| {
        model.forward_loss(&params.unflatten(p).unwrap(), &batch).unwrap().0
    });
    assert_close(&grad.flatten(), &numeric, TOL, model.spec().describe().as_str());
}

fn with_random_biases(params: &ParameterSet, seed: u64) -> ParameterSet {
    let mut r = rng(seed);
    let flat: Vec<f64> = params.flatten().iter().map(|&v| if v == 0.0 { r.gen_range(-0.2..0.2) } else { v }).collect();
    params.unflatten(&flat).unwrap()
}

#[test]
fn two_layer_mlp_gradient() {
    let (model, params) = tiny_mlp(10);
    check_model_gradient(&model, &with_random_biases(&params, 11), 12);
}

#[test]
fn conv4_gradient() {
    let spec = ModelSpec::conv4(&[1, 5, 5], 2, 3).unwrap();
    let params = with_random_biases(&init_params(&spec, 13).unwrap(), 14);
    check_model_gradient(&Model::new(spec).unwrap(), &params, 15);
}

#[test]
fn hessian_vector_matches_gradient_differences() {
    let (model, params) = tiny_mlp(16);
    let params = with_random_biases(&params, 17);
    let mut r = rng(18);
    let batch = random_batch(model.spec(), 6, &mut r);
    let v = params.unflatten(&random_tensor(&[params.total_count()], &mut r).into_data()).unwrap();
    let hv = model.hessian_vector(&params, &batch, &v).unwrap();
    let eps = 1e-5;
    let shifted = |c: f64| {
        let mut p = params.clone();
        p.axpy(c, &v).unwrap();
        model.loss_and_grad(&p, &batch).unwrap().1.flatten()
    };
    let (up, down) = (shifted(eps), shifted(-eps));
    let numeric: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    assert_close(&hv.flatten(), &numeric, TOL, "hessian_vector");
}

/// Query loss after `inner_steps` support steps, as a plain function of θ.
fn adapted_query_loss(model: &Model, theta: &ParameterSet, ep: &fam_core::tasks::Episode, cfg: &MetaConfig) -> f64 {
    let adapted = inner_adapt(model, theta, &ep.support, cfg).unwrap();
    model.forward_loss(&adapted, &ep.query).unwrap().0
}

#[test]
fn second_order_meta_gradient_matches_composed_objective() {
    let (model, params) = tiny_mlp(19);
    let params = with_random_biases(&params, 20);
    let mut r = rng(21);
    let ep = random_episode(model.spec(), 2, 2, &mut r);
    for steps in [1, 2] {
        let cfg = MetaConfig {
            alpha: 0.3,
            inner_steps: steps,
            order: Order::Second,
            ..MetaConfig::default()
        };
        let (_, grad) = meta_gradient(&model, &params, &ep, &cfg).unwrap();
        let numeric = numeric_grad(&params.flatten(), H, |p| {
            adapted_query_loss(&model, &params.unflatten(p).unwrap(), &ep, &cfg)
        });
        assert_close(&grad.flatten(), &numeric, TOL, &format!("second-order meta-gradient, {steps} steps"));
    }
}

#[test]
fn first_order_meta_gradient_is_query_gradient_at_adapted_point() {
    let (model, params) = tiny_mlp(22);
    let mut r = rng(23);
    let ep = random_episode(model.spec(), 2, 2, &mut r);
    let cfg = MetaConfig {
        alpha: 0.3,
        inner_steps: 2,
        ..MetaConfig::default()
    };
    let (loss, grad) = meta_gradient(&model, &params, &ep, &cfg).unwrap();
    let adapted = inner_adapt(&model, &params, &ep.support, &cfg).unwrap();
    assert_eq!(loss, model.forward_loss(&adapted, &ep.query).unwrap().0);
    let numeric = numeric_grad(&adapted.flatten(), H, |p| {
        model.forward_loss(&adapted.unflatten(p).unwrap(), &ep.query).unwrap().0
    });
    assert_close(&grad.flatten(), &numeric, TOL, "first-order meta-gradient");
}
