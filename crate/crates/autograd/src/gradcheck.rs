//! Central finite-difference gradient checking. This module only re-runs
//! forward evaluations; it never touches the tape's backward rules, so it is
//! an independent oracle for them.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::nn::{self, MlpWeights};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_H: f64 = 1e-5;

/// Relative-error floor: below this magnitude the comparison is effectively
/// absolute, which keeps finite-difference noise on near-zero components
/// from dominating the score.
pub const REL_FLOOR: f64 = 1e-3;

/// Central differences: df/dx_i ≈ (f(x+he_i) − f(x−he_i)) / 2h.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max over components of |a−n| / max(|a|, |n|, REL_FLOOR).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Check one scalar-valued function of a flat input vector.
///
/// `f` rebuilds the computation from raw data; `analytic` is the tape
/// gradient being verified.
pub fn check_fn(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    let numeric = central_diff(f, x0, h);
    max_rel_err(analytic, &numeric)
}

fn rand_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Reduce a tensor-valued node to a scalar with a fixed random functional so
/// full Jacobians can be checked through a single backward pass.
fn weighted_sum(tape: &mut Tape, v: Var, weights: &Tensor) -> Var {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(v, w).unwrap();
    tape.sum(prod)
}

/// One named gradient check: max relative error between the tape gradient
/// and central differences for every input slot of the op.
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

/// Gradient-check every differentiable tape op on random inputs in [-1, 1].
pub fn check_builtin_ops(seed: u64) -> Vec<CheckResult> {
    let mut rng = nn::seeded_rng(seed);
    let mut results = Vec::new();

    // Each case: (name, shapes of the op's direct inputs, graph builder).
    // The builder returns the op output node given leaves for each input.
    type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
        (
            "matmul",
            vec![vec![5, 4], vec![4, 3]],
            Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "matmul_nt",
            vec![vec![3, 4], vec![5, 4]],
            Box::new(|t, v| t.matmul_nt(v[0], v[1]).unwrap()),
        ),
        (
            "add",
            vec![vec![3, 3], vec![3, 3]],
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            vec![vec![3, 3], vec![3, 3]],
            Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![vec![2, 5], vec![2, 5]],
            Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        ),
        (
            "scale",
            vec![vec![4, 2]],
            Box::new(|t, v| t.scale(v[0], -1.7)),
        ),
        (
            "add_row_bias",
            vec![vec![4, 3], vec![3]],
            Box::new(|t, v| t.add_row_bias(v[0], v[1]).unwrap()),
        ),
        ("gelu", vec![vec![3, 4]], Box::new(|t, v| t.gelu(v[0]))),
        (
            "softmax_rows",
            vec![vec![4, 5]],
            Box::new(|t, v| t.softmax_rows(v[0]).unwrap()),
        ),
        ("sum", vec![vec![3, 3]], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![vec![2, 6]], Box::new(|t, v| t.mean(v[0]))),
        (
            "mean_row_cosine",
            vec![vec![4, 6], vec![4, 6]],
            Box::new(|t, v| t.mean_row_cosine(v[0], v[1]).unwrap()),
        ),
        (
            "cosine_flat",
            vec![vec![3, 5], vec![3, 5]],
            Box::new(|t, v| t.cosine_flat(v[0], v[1]).unwrap()),
        ),
        (
            "sdp_attention",
            vec![vec![3, 4], vec![6, 4]],
            Box::new(|t, v| nn::sdp_attention(t, v[0], v[1], 0.5).unwrap()),
        ),
        (
            "logsumexp",
            vec![vec![1], vec![1], vec![1], vec![1]],
            Box::new(|t, v| {
                let scalars: Vec<Var> = v.iter().map(|&x| t.sum(x)).collect();
                t.logsumexp(&scalars).unwrap()
            }),
        ),
        (
            "mean_scalars",
            vec![vec![1], vec![1], vec![1]],
            Box::new(|t, v| {
                let scalars: Vec<Var> = v.iter().map(|&x| t.sum(x)).collect();
                t.mean_scalars(&scalars).unwrap()
            }),
        ),
    ];

    for (name, shapes, build) in &cases {
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| rand_vec(&mut rng, s.iter().product()))
            .collect();
        // Fixed readout weights, sized from a probe forward pass.
        let probe_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = shapes
                .iter()
                .zip(&inputs)
                .map(|(s, d)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap()))
                .collect();
            let out = build(&mut tape, &vars);
            tape.value(out).shape().to_vec()
        };
        let readout = Tensor::new(
            probe_shape.clone(),
            rand_vec(&mut rng, probe_shape.iter().product()),
        )
        .unwrap();

        let run = |inputs: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = shapes
                .iter()
                .zip(inputs)
                .map(|(s, d)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap()))
                .collect();
            let out = build(&mut tape, &vars);
            let loss = weighted_sum(&mut tape, out, &readout);
            tape.backward(loss).unwrap();
            let grads = vars
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .map(|g| g.into_data())
                        .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
                })
                .collect();
            (tape.value(loss).item(), grads)
        };

        let (_, analytic) = run(&inputs);
        let mut worst: f64 = 0.0;
        for slot in 0..shapes.len() {
            let mut f = |x: &[f64]| {
                let mut perturbed = inputs.clone();
                perturbed[slot] = x.to_vec();
                run(&perturbed).0
            };
            let err = check_fn(&mut f, &inputs[slot], &analytic[slot], DEFAULT_H);
            worst = worst.max(err);
        }
        results.push(CheckResult {
            name: (*name).to_string(),
            max_rel_err: worst,
        });
    }

    // Two-layer MLP, checked against every weight group at once.
    {
        let d = 4;
        let weights = MlpWeights::init(d, &mut rng);
        let x0 = rand_vec(&mut rng, 3 * d);
        let readout = Tensor::new(vec![3, d], rand_vec(&mut rng, 3 * d)).unwrap();
        let flat: Vec<f64> = weights
            .w1
            .data()
            .iter()
            .chain(weights.b1.data())
            .chain(weights.w2.data())
            .chain(weights.b2.data())
            .copied()
            .collect();
        let run = |flat: &[f64]| -> (f64, Vec<f64>) {
            let (w1, rest) = flat.split_at(d * d);
            let (b1, rest) = rest.split_at(d);
            let (w2, b2) = rest.split_at(d * d);
            let w = MlpWeights {
                w1: Tensor::new(vec![d, d], w1.to_vec()).unwrap(),
                b1: Tensor::new(vec![d], b1.to_vec()).unwrap(),
                w2: Tensor::new(vec![d, d], w2.to_vec()).unwrap(),
                b2: Tensor::new(vec![d], b2.to_vec()).unwrap(),
            };
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![3, d], x0.clone()).unwrap());
            let p = nn::bind_mlp(&mut tape, &w);
            let y = nn::mlp_forward(&mut tape, x, p).unwrap();
            let loss = weighted_sum(&mut tape, y, &readout);
            tape.backward(loss).unwrap();
            let grad: Vec<f64> = [p.w1, p.b1, p.w2, p.b2]
                .iter()
                .flat_map(|&v| tape.grad(v).unwrap().into_data())
                .collect();
            (tape.value(loss).item(), grad)
        };
        let (_, analytic) = run(&flat);
        let mut f = |x: &[f64]| run(x).0;
        let err = check_fn(&mut f, &flat, &analytic, DEFAULT_H);
        results.push(CheckResult {
            name: "mlp_forward".to_string(),
            max_rel_err: err,
        });
    }

    results
}
