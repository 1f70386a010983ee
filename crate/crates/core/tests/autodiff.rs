mod common;

use std::sync::Arc;

use common::{away_from_zero, max_fd_error, rand_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use routefuse_core::autodiff::{cosine_lr, optimizer_step, AdamConfig, AdamState, Neighbors, ParamStore, Rulebook, Tape, Tensor};
use routefuse_core::Error;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[routefuse_core::autodiff::Var]) -> routefuse_core::autodiff::Var) {
    let err = max_fd_error(inputs, H, f);
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let z = tape.matmul(x, y).unwrap();
    let out = tape.value(z).data();
    for i in 0..2 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a.data()[i * 3 + k] * b.data()[k * 2 + j];
            }
            assert!((out[i * 2 + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn trivial_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0; 3]));
    let s = tape.softmax(x, 0).unwrap();
    assert!(tape.value(s).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    let z = tape.constant(Tensor::scalar(0.0));
    let g = tape.sigmoid(z);
    assert_eq!(tape.value(g).item(), 0.5);
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { op, shapes, .. }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = tape.constant(Tensor::zeros(&[4]));
    assert!(matches!(tape.add(a, c), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn backward_of_sum_is_ones_and_rejects_non_scalar_roots() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[2, 3, 2], 0.7));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[3]));
    assert_eq!(tape.backward(x).unwrap_err(), Error::NonScalarRoot(vec![3]));
}

#[test]
fn softmax_dot_composite() {
    let mut r = rng(2);
    let x = rand_tensor(&mut r, &[2, 5], -2.0, 2.0);
    let w = rand_tensor(&mut r, &[2, 5], -1.0, 1.0);
    check("softmax-dot", &[x, w], |t, v| {
        let s = t.softmax(v[0], 1).unwrap();
        let p = t.mul(s, v[1]).unwrap();
        t.sum(p)
    });
}

#[test]
fn elementwise_and_broadcast_primitives() {
    let mut r = rng(3);
    let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let row = rand_tensor(&mut r, &[4], -1.0, 1.0);
    let sc = rand_tensor(&mut r, &[1], -1.0, 1.0);
    check("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check("add row", &[a.clone(), row.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check("sub scalar", &[a.clone(), sc.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check("mul row", &[a.clone(), row.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check("mul scalar", &[a.clone(), sc.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check("scale", &[a.clone()], |t, v| t.scale(v[0], -1.7));
    check("add_scalar", &[a.clone()], |t, v| t.add_scalar(v[0], 0.3));
    check("sigmoid", &[a.clone()], |t, v| t.sigmoid(v[0]));
    check("exp", &[a.clone()], |t, v| t.exp(v[0]));
    let pos = rand_tensor(&mut r, &[3, 4], 0.2, 2.0);
    check("log", &[pos.clone()], |t, v| t.log(v[0]));
    check("sqrt", &[pos.clone()], |t, v| t.sqrt(v[0]));
    let k = away_from_zero(&mut r, &[3, 4]);
    check("relu", &[k.clone()], |t, v| t.relu(v[0]));
    check("norm2", &[a.clone()], |t, v| t.norm2(v[0]));
    // keep entries clear of the clamp bounds at +-0.5
    let c = Tensor::new(vec![6], vec![-0.9, -0.3, 0.1, 0.45, 0.8, -0.7]).unwrap();
    check("clamp", &[c], |t, v| t.clamp(v[0], -0.5, 0.5));
}

#[test]
fn structural_primitives() {
    let mut r = rng(4);
    let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 4], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    let m = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);
    let t3 = rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    check("matmul", &[a.clone(), m.clone()], |t, v| t.matmul(v[0], v[1]).unwrap());
    check("concat0", &[a.clone(), b.clone()], |t, v| t.concat(&[v[0], v[1]], 0).unwrap());
    check("concat1", &[a.clone(), c.clone()], |t, v| t.concat(&[v[0], v[1]], 1).unwrap());
    check("slice", &[t3.clone()], |t, v| t.slice(v[0], 2, 1, 2).unwrap());
    check("reshape", &[t3.clone()], |t, v| t.reshape(v[0], &[6, 4]).unwrap());
    check("transpose2", &[a.clone()], |t, v| t.transpose(v[0]).unwrap());
    check("transpose3", &[t3.clone()], |t, v| t.transpose(v[0]).unwrap());
    check("sum", &[a.clone()], |t, v| t.sum(v[0]));
    check("mean", &[a.clone()], |t, v| t.mean(v[0]).unwrap());
    check("mean_rows", &[a.clone()], |t, v| t.mean_rows(v[0]).unwrap());
    check("gap", &[t3.clone()], |t, v| t.global_average_pool(v[0]).unwrap());
    // distinct values so the arg-max is stable under perturbation
    let distinct = Tensor::new(vec![2, 3], vec![0.1, 0.9, -0.4, 0.5, -0.2, 0.3]).unwrap();
    check("max0", &[distinct.clone()], |t, v| t.max(v[0], 0).unwrap());
    check("max1", &[distinct], |t, v| t.max(v[0], 1).unwrap());
    check("softmax0", &[a.clone()], |t, v| t.softmax(v[0], 0).unwrap());
    check("softmax1", &[a.clone()], |t, v| t.softmax(v[0], 1).unwrap());
    check("layer_norm", &[a.clone()], |t, v| t.layer_norm(v[0], 1e-5).unwrap());
    let idx = Arc::new(vec![2u32, 0, 2, 1]);
    check("gather_rows", &[a.clone()], |t, v| t.gather_rows(v[0], idx.clone()).unwrap());
    let sidx = Arc::new(vec![1u32, 1, 0]);
    check("scatter_add", &[a.clone()], |t, v| t.scatter_add(v[0], sidx.clone(), 3).unwrap());
}

#[test]
fn convolution_and_loss_primitives() {
    let mut r = rng(5);
    let img = rand_tensor(&mut r, &[2, 5, 6], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3], -1.0, 1.0);
    check("conv2d s1", &[img.clone(), w.clone(), b.clone()], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap());
    check("conv2d s2", &[img.clone(), w.clone()], |t, v| t.conv2d(v[0], v[1], None, 2, 1).unwrap());
    let small = rand_tensor(&mut r, &[2, 3, 3], -1.0, 1.0);
    let uw = rand_tensor(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
    check("upsample", &[small.clone(), uw.clone()], |t, v| t.upsample_transpose(v[0], v[1], 2, 5, 6).unwrap());
    let pred = rand_tensor(&mut r, &[8], -2.0, 2.0);
    // targets keep |pred - target| away from beta = 1
    let target: Vec<f64> = pred.data().iter().enumerate().map(|(i, p)| p + if i % 2 == 0 { 0.4 } else { -1.7 }).collect();
    let target = Arc::new(target);
    check("smooth_l1", &[pred.clone()], |t, v| t.smooth_l1(v[0], target.clone(), 1.0).unwrap());
    let labels = Arc::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    let weights = Arc::new(vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    check("focal", &[pred], |t, v| t.focal(v[0], labels.clone(), weights.clone(), 0.25, 2.0).unwrap());
}

#[test]
fn sparse_primitives() {
    let mut r = rng(6);
    let x = rand_tensor(&mut r, &[5, 3], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[4, 3, 2], -1.0, 1.0);
    let rb = Arc::new(Rulebook {
        n_in: 5,
        n_out: 3,
        taps: vec![vec![(0, 0), (1, 1)], vec![(2, 0), (4, 2)], vec![], vec![(3, 1), (0, 2), (1, 0)]],
    });
    check("sparse_conv", &[x.clone(), w], |t, v| t.sparse_conv(v[0], v[1], rb.clone()).unwrap());
    let q = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
    let vals = rand_tensor(&mut r, &[5, 2], -1.0, 1.0);
    let nb = Arc::new(Neighbors::from_lists(&[vec![0, 2, 4], vec![1], vec![], vec![3, 0]]));
    check("knn_attention", &[q, x.clone(), vals], |t, v| t.knn_attention(v[0], v[1], v[2], nb.clone(), 0.6).unwrap());
    check("neighbor_mean", &[x], |t, v| t.neighbor_mean(v[0], nb.clone()).unwrap());
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut r = rng(7);
        let mut tape = Tape::new();
        let a = tape.param(rand_tensor(&mut r, &[4, 6], -1.0, 1.0));
        let b = tape.param(rand_tensor(&mut r, &[6, 3], -1.0, 1.0));
        let m = tape.matmul(a, b).unwrap();
        let s = tape.softmax(m, 1).unwrap();
        let l = tape.layer_norm(s, 1e-5).unwrap();
        let e = tape.exp(l);
        let root = tape.sum(e);
        tape.backward(root).unwrap();
        (tape.grad(a).unwrap().to_vec(), tape.grad(b).unwrap().to_vec())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn adam_one_step_matches_hand_update() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::scalar(1.0));
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let s = tape.sum(bound[id]);
    tape.backward(s).unwrap();
    store.accumulate_grads(&tape, &bound);
    let cfg = AdamConfig::default();
    let mut state = AdamState::new(&store);
    optimizer_step(&mut store, &mut state, &cfg, 0.1).unwrap();
    // decoupled decay, then m_hat = v_hat = 1 after bias correction
    let expect = (1.0 - 0.1 * 0.01) - 0.1 * 1.0 / (1.0 + 1e-8);
    let p = store.value(id).item();
    assert!((p - expect).abs() < 1e-15, "{p} vs {expect}");
    assert!(p < 1.0);
    assert!((state.m[0][0] - 0.1).abs() < 1e-15 && (state.v[0][0] - 0.001).abs() < 1e-15);
}

#[test]
fn adam_zero_gradient_without_decay_is_identity() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::vector(vec![0.3, -2.0]));
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let s = tape.sum(bound[id]);
    let s = tape.scale(s, 0.0);
    tape.backward(s).unwrap();
    store.accumulate_grads(&tape, &bound);
    let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
    let mut state = AdamState::new(&store);
    optimizer_step(&mut store, &mut state, &cfg, 0.1).unwrap();
    assert_eq!(store.value(id).data(), &[0.3, -2.0]);
}

#[test]
fn adam_requires_gradients() {
    let mut store = ParamStore::new();
    store.add("lonely", Tensor::scalar(1.0));
    let mut state = AdamState::new(&store);
    let err = optimizer_step(&mut store, &mut state, &AdamConfig::default(), 0.1).unwrap_err();
    assert_eq!(err, Error::MissingGrad("lonely".into()));
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0, 20, 5e-4, 1e-4), 5e-4);
    assert!((cosine_lr(19, 20, 5e-4, 1e-4) - 1e-4).abs() < 1e-18);
    let mid = cosine_lr(10, 20, 5e-4, 1e-4);
    assert!(mid < 5e-4 && mid > 1e-4);
    assert!((1..20).all(|e| cosine_lr(e, 20, 5e-4, 1e-4) <= cosine_lr(e - 1, 20, 5e-4, 1e-4)));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        for row in tape.value(s).data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(vals in prop::collection::vec(-10.0f64..10.0, 16), shift in -100.0f64..100.0) {
        let spread = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1.0);
        let mut tape = Tape::new();
        let data: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let x = tape.constant(Tensor::new(vec![2, 8], data).unwrap());
        let y = tape.layer_norm(x, 1e-5).unwrap();
        for (row, src) in tape.value(y).data().chunks(8).zip(vals.chunks(8)) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            let mu = src.iter().sum::<f64>() / 8.0;
            let raw_var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-10);
            // the 1e-5 epsilon shrinks the variance by raw / (raw + eps)
            prop_assume!(raw_var > 1e-2);
            prop_assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-8);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn primitive_gradients_on_random_inputs(seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
        let scale: f64 = r.gen_range(0.5..2.0);
        let err = max_fd_error(&[a, b], H, |t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            let m = t.scale(m, scale);
            let s = t.softmax(m, 1).unwrap();
            t.sigmoid(s)
        });
        prop_assert!(err < TOL, "relative error {}", err);
    }
}
