mod common;

use std::collections::BTreeSet;

use common::graphs::{max_relative_error, trial_seeds, Program};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recbench::nn::{Linear, Session};
use recbench::params::{ParamRole, ParamStore};
use recbench::Tensor;

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-3;

#[test]
fn random_graphs_match_finite_differences() {
    let mut covered = BTreeSet::new();
    for seed in trial_seeds(100, 1) {
        let p = Program::random(seed);
        covered.extend(p.op_names());
        let err = max_relative_error(&p, FD_STEP, FD_FLOOR);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e} in {:?}", p.op_names());
    }
    for op in [
        "matmul", "bmm", "add", "sub", "mul", "add_row", "scale", "neg", "mul_const", "mul_rows", "gelu",
        "sigmoid", "log_sigmoid", "tanh", "layer_norm", "gather_rows", "softmax", "split_heads",
        "merge_heads", "concat_cols", "reshape", "sum", "mean", "row_dot", "cross_entropy",
    ] {
        assert!(covered.contains(op), "op {op} never exercised");
    }
}

fn two_layer_loss(store: &ParamStore<f64>, l1: &Linear, l2: &Linear, x: &Tensor<f64>) -> (f64, recbench::autodiff::Gradients<f64>) {
    let mut s = Session::train(&[store], 0.0, 0);
    let xv = s.constant(x.clone());
    let h = l1.forward(&mut s, xv).unwrap();
    let h = s.gelu(h).unwrap();
    let y = l2.forward(&mut s, h).unwrap();
    let y = s.tanh(y).unwrap();
    let sq = s.mul(y, y).unwrap();
    let loss = s.mean(sq).unwrap();
    let v = s.value(loss).item();
    (v, s.backward(loss).unwrap())
}

#[test]
fn two_layer_network_parameters_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let l1 = Linear::new(&mut store, "l1", 5, 7, ParamRole::Backbone, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 7, 3, ParamRole::Backbone, &mut rng);
    // larger weights than the 0.02 init so curvature is not negligible
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id).unwrap();
        for v in p.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let x = Tensor::new(vec![4, 5], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (_, grads) = two_layer_loss(&store, &l1, &l2, &x);
    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        let g = grads.param(id).unwrap().clone();
        for e in 0..g.len() {
            let orig = store.value(id).data()[e];
            store.get_mut(id).unwrap().value.data_mut()[e] = orig + FD_STEP;
            let up = two_layer_loss(&store, &l1, &l2, &x).0;
            store.get_mut(id).unwrap().value.data_mut()[e] = orig - FD_STEP;
            let down = two_layer_loss(&store, &l1, &l2, &x).0;
            store.get_mut(id).unwrap().value.data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max((g.data()[e] - fd).abs() / g.data()[e].abs().max(fd.abs()).max(FD_FLOOR));
        }
    }
    assert!(worst < 1e-4, "{worst:e}");
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let p = Program::random(99);
    let run = || {
        let (t, loss, vars) = p.build(&p.leaves);
        let value = t.value(loss).item();
        let g = t.backward(loss).unwrap();
        let grads: Vec<Option<Tensor<f64>>> = vars.iter().map(|v| g.wrt(*v).cloned()).collect();
        (value.to_bits(), grads)
    };
    assert_eq!(run(), run());
}
