//! Randomised computation graphs and a central finite-difference oracle.
//!
//! A `Program` is a chain of ops with every random constant drawn up front, so
//! it can be re-evaluated on perturbed leaf values.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recbench::autodiff::{Tape, Var};
use recbench::Tensor;

#[derive(Clone, Debug)]
enum Step {
    MatMul { w: usize },
    AddRow { b: usize },
    Gelu,
    Tanh,
    Sigmoid,
    LogSigmoid,
    LayerNorm { g: usize, b: usize },
    Scale(f64),
    Neg,
    MulConst(Vec<f64>),
    MulRows(Vec<f64>),
    Add { other: usize },
    Sub { other: usize },
    Mul { other: usize },
    Gather(Vec<usize>),
    Concat { other: usize },
    Softmax(Option<Vec<bool>>),
    Reshape,
    Attention { heads: usize },
}

#[derive(Clone, Copy, Debug)]
enum Finish {
    Sum,
    Mean,
    RowDot { other: usize },
    CrossEntropy,
}

#[derive(Clone, Debug)]
pub struct Program {
    input: usize,
    steps: Vec<Step>,
    finish: Finish,
    targets: Vec<usize>,
    weights: Vec<f64>,
    pub leaves: Vec<Tensor<f64>>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

impl Program {
    pub fn random(seed: u64) -> Program {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut leaves = Vec::new();
        let mut rows = rng.random_range(2..5usize);
        let mut cols = 2 * rng.random_range(1..3usize);
        leaves.push(rand_tensor(&mut rng, &[rows, cols]));
        let input = 0;
        let mut steps = Vec::new();
        let n_steps = rng.random_range(4..9);
        for _ in 0..n_steps {
            let pick = rng.random_range(0..19);
            let mut leaf = |rng: &mut ChaCha8Rng, shape: &[usize]| {
                leaves.push(rand_tensor(rng, shape));
                leaves.len() - 1
            };
            let step = match pick {
                0 => {
                    let out = 2 * rng.random_range(1..3usize);
                    let w = leaf(&mut rng, &[cols, out]);
                    cols = out;
                    Step::MatMul { w }
                }
                1 => Step::AddRow {
                    b: leaf(&mut rng, &[cols]),
                },
                2 => Step::Gelu,
                3 => Step::Tanh,
                4 => Step::Sigmoid,
                5 => Step::LogSigmoid,
                6 => {
                    let g = leaf(&mut rng, &[cols]);
                    let b = leaf(&mut rng, &[cols]);
                    Step::LayerNorm { g, b }
                }
                7 => Step::Scale(rng.random_range(-2.0..2.0)),
                8 => Step::MulConst((0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()),
                9 => Step::MulRows((0..rows).map(|_| rng.random_range(-1.5..1.5)).collect()),
                10 => Step::Add {
                    other: leaf(&mut rng, &[rows, cols]),
                },
                11 => Step::Sub {
                    other: leaf(&mut rng, &[rows, cols]),
                },
                12 => Step::Mul {
                    other: leaf(&mut rng, &[rows, cols]),
                },
                13 => {
                    let n = rng.random_range(1..5);
                    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..rows)).collect();
                    rows = n;
                    Step::Gather(idx)
                }
                14 => {
                    let extra = 2 * rng.random_range(1..2usize);
                    let other = leaf(&mut rng, &[rows, extra]);
                    cols += extra;
                    Step::Concat { other }
                }
                15 => {
                    let mask = if rng.random_bool(0.5) {
                        let mut m: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.7)).collect();
                        // one fully masked row exercises the all-zero convention
                        if rows > 2 {
                            for j in 0..cols {
                                m[j] = false;
                            }
                        }
                        Some(m)
                    } else {
                        None
                    };
                    Step::Softmax(mask)
                }
                16 => Step::Reshape,
                17 => Step::Neg,
                _ => {
                    let heads = if cols % 2 == 0 && rng.random_bool(0.5) { 2 } else { 1 };
                    Step::Attention { heads }
                }
            };
            steps.push(step);
        }
        let finish = match rng.random_range(0..4) {
            0 => Finish::Sum,
            1 => Finish::Mean,
            2 => {
                let other = leaves.len();
                leaves.push(rand_tensor(&mut rng, &[rows, cols]));
                Finish::RowDot { other }
            }
            _ => Finish::CrossEntropy,
        };
        let targets = (0..rows).map(|_| rng.random_range(0..cols)).collect();
        let weights = (0..rows * cols.max(1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        Program {
            input,
            steps,
            finish,
            targets,
            weights,
            leaves,
        }
    }

    /// Op names used, for coverage accounting.
    pub fn op_names(&self) -> BTreeSet<&'static str> {
        let mut s: BTreeSet<&'static str> = self
            .steps
            .iter()
            .flat_map(|st| -> Vec<&'static str> {
                match st {
                    Step::MatMul { .. } => vec!["matmul"],
                    Step::AddRow { .. } => vec!["add_row"],
                    Step::Gelu => vec!["gelu"],
                    Step::Tanh => vec!["tanh"],
                    Step::Sigmoid => vec!["sigmoid"],
                    Step::LogSigmoid => vec!["log_sigmoid"],
                    Step::LayerNorm { .. } => vec!["layer_norm"],
                    Step::Scale(_) => vec!["scale"],
                    Step::Neg => vec!["neg"],
                    Step::MulConst(_) => vec!["mul_const"],
                    Step::MulRows(_) => vec!["mul_rows"],
                    Step::Add { .. } => vec!["add"],
                    Step::Sub { .. } => vec!["sub"],
                    Step::Mul { .. } => vec!["mul"],
                    Step::Gather(_) => vec!["gather_rows"],
                    Step::Concat { .. } => vec!["concat_cols"],
                    Step::Softmax(_) => vec!["softmax"],
                    Step::Reshape => vec!["reshape"],
                    Step::Attention { .. } => vec!["split_heads", "bmm", "merge_heads"],
                }
            })
            .collect();
        s.insert(match self.finish {
            Finish::Sum => "sum",
            Finish::Mean => "mean",
            Finish::RowDot { .. } => "row_dot",
            Finish::CrossEntropy => "cross_entropy",
        });
        s
    }

    /// Builds the graph on a fresh tape and returns it with the loss and leaf vars.
    pub fn build(&self, leaves: &[Tensor<f64>]) -> (Tape<f64>, Var, Vec<Var>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| t.variable(l.clone())).collect();
        let mut x = vars[self.input];
        for step in &self.steps {
            x = match step {
                Step::MatMul { w } => t.matmul(x, vars[*w]).unwrap(),
                Step::AddRow { b } => t.add_row(x, vars[*b]).unwrap(),
                Step::Gelu => t.gelu(x).unwrap(),
                Step::Tanh => t.tanh(x).unwrap(),
                Step::Sigmoid => t.sigmoid(x).unwrap(),
                Step::LogSigmoid => t.log_sigmoid(x).unwrap(),
                Step::LayerNorm { g, b } => t.layer_norm(x, vars[*g], vars[*b], 1e-5).unwrap(),
                Step::Scale(c) => t.scale(x, *c).unwrap(),
                Step::Neg => t.neg(x).unwrap(),
                Step::MulConst(f) => t.mul_const(x, Rc::from(f.as_slice())).unwrap(),
                Step::MulRows(f) => t.mul_rows(x, Rc::from(f.as_slice())).unwrap(),
                Step::Add { other } => t.add(x, vars[*other]).unwrap(),
                Step::Sub { other } => t.sub(x, vars[*other]).unwrap(),
                Step::Mul { other } => t.mul(x, vars[*other]).unwrap(),
                Step::Gather(idx) => t.gather_rows(x, idx.clone()).unwrap(),
                Step::Concat { other } => t.concat_cols(x, vars[*other]).unwrap(),
                Step::Softmax(mask) => t.softmax(x, mask.as_deref()).unwrap(),
                Step::Reshape => {
                    let shape = t.shape(x).to_vec();
                    let flat = t.reshape(x, &[shape[0] * shape[1]]).unwrap();
                    t.reshape(flat, &shape).unwrap()
                }
                Step::Attention { heads } => {
                    let rows = t.shape(x)[0];
                    let q = t.split_heads(x, 1, rows, *heads).unwrap();
                    let k = t.tanh(x).unwrap();
                    let k = t.split_heads(k, 1, rows, *heads).unwrap();
                    let s = t.bmm(q, k, true).unwrap();
                    let p = t.softmax(s, None).unwrap();
                    let o = t.bmm(p, q, false).unwrap();
                    t.merge_heads(o, 1, rows, *heads).unwrap()
                }
            };
        }
        let loss = match self.finish {
            Finish::Sum => {
                let n = t.value(x).len();
                let w = t.mul_const(x, Rc::from(&self.weights[..n])).unwrap();
                t.sum(w).unwrap()
            }
            Finish::Mean => {
                let sq = t.mul(x, x).unwrap();
                t.mean(sq).unwrap()
            }
            Finish::RowDot { other } => {
                let d = t.row_dot(x, vars[other]).unwrap();
                let d = t.log_sigmoid(d).unwrap();
                t.sum(d).unwrap()
            }
            Finish::CrossEntropy => t.cross_entropy(x, &self.targets).unwrap(),
        };
        (t, loss, vars)
    }

    pub fn loss_at(&self, leaves: &[Tensor<f64>]) -> f64 {
        let (t, loss, _) = self.build(leaves);
        t.value(loss).item()
    }
}

/// Worst relative error between tape gradients and central differences over
/// every leaf element: `|a - f| / max(|a|, |f|, floor)`.
pub fn max_relative_error(p: &Program, step: f64, floor: f64) -> f64 {
    let (tape, loss, vars) = p.build(&p.leaves);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut leaves = p.leaves.clone();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.leaves[li].shape()));
        for e in 0..leaves[li].len() {
            let orig = leaves[li].data()[e];
            leaves[li].data_mut()[e] = orig + step;
            let up = p.loss_at(&leaves);
            leaves[li].data_mut()[e] = orig - step;
            let down = p.loss_at(&leaves);
            leaves[li].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic.data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Shuffled seeds so runs are not biased towards one op mix.
pub fn trial_seeds(n: usize, seed: u64) -> Vec<u64> {
    let mut v: Vec<u64> = (0..n as u64).map(|i| i * 7919 + 13).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}
