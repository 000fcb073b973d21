//! Contrastive objectives: a symmetric in-batch inter-modal loss, a
//! within-image intra loss separating the positive region from
//! answer-irrelevant ones, and their weighted combination.
//!
//! By default the paired/positive term is included in every denominator
//! (standard InfoNCE), which keeps both losses nonnegative and makes the
//! batch-size-1 inter loss exactly zero. Setting
//! `include_positive = false` switches to denominators that sum only over
//! negatives/unpaired samples; that variant is undefined at batch size 1.

use thiserror::Error;
use tokenlens_autograd::tape::{Tape, Var};
use tokenlens_autograd::tensor::TensorError;

use crate::align::SimilarityMode;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch of 1 with include_positive = false leaves an empty denominator")]
    UndefinedDenominator,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("got {ev} visual encodings but {et} text encodings")]
    LengthMismatch { ev: usize, et: usize },
}

/// Similarity of two K×d representations under the configured collapse mode.
pub fn similarity(
    tape: &mut Tape,
    mode: SimilarityMode,
    a: Var,
    b: Var,
) -> Result<Var, TensorError> {
    match mode {
        SimilarityMode::MeanRowCosine => tape.mean_row_cosine(a, b),
        SimilarityMode::FlattenedCosine => tape.cosine_flat(a, b),
    }
}

/// Symmetric inter-modal loss over a batch of paired (E^v_pos, E^t)
/// encodings: mean of −log softmax terms in both directions, summed.
pub fn inter_loss(
    tape: &mut Tape,
    ev_pos: &[Var],
    et: &[Var],
    tau: f64,
    include_positive: bool,
    mode: SimilarityMode,
) -> Result<Var, LossError> {
    if ev_pos.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if ev_pos.len() != et.len() {
        return Err(LossError::LengthMismatch {
            ev: ev_pos.len(),
            et: et.len(),
        });
    }
    if !(tau > 0.0) {
        return Err(LossError::BadTemperature(tau));
    }
    let b = ev_pos.len();
    if b == 1 && !include_positive {
        return Err(LossError::UndefinedDenominator);
    }

    // t[i][j] = sim(ev_pos[i], et[j]) / tau
    let mut t = vec![vec![ev_pos[0]; b]; b];
    for i in 0..b {
        for j in 0..b {
            let s = similarity(tape, mode, ev_pos[i], et[j])?;
            t[i][j] = tape.scale(s, 1.0 / tau);
        }
    }

    let mut v_to_t = Vec::with_capacity(b);
    let mut t_to_v = Vec::with_capacity(b);
    for i in 0..b {
        let row: Vec<Var> = (0..b)
            .filter(|&j| include_positive || j != i)
            .map(|j| t[i][j])
            .collect();
        let col: Vec<Var> = (0..b)
            .filter(|&j| include_positive || j != i)
            .map(|j| t[j][i])
            .collect();
        let lse_row = tape.logsumexp(&row)?;
        let lse_col = tape.logsumexp(&col)?;
        v_to_t.push(tape.sub(lse_row, t[i][i])?);
        t_to_v.push(tape.sub(lse_col, t[i][i])?);
    }
    let l_vt = tape.mean_scalars(&v_to_t)?;
    let l_tv = tape.mean_scalars(&t_to_v)?;
    Ok(tape.add(l_vt, l_tv)?)
}

/// −log( exp(sim(et, ev_pos)/τ) / Σ exp(sim(et, ev_neg)/τ) ), with the
/// positive in the denominator when `include_positive`. No negatives → 0.
pub fn intra_loss(
    tape: &mut Tape,
    et: Var,
    ev_pos: Var,
    ev_negs: &[Var],
    tau: f64,
    include_positive: bool,
    mode: SimilarityMode,
) -> Result<Var, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::BadTemperature(tau));
    }
    if ev_negs.is_empty() {
        return Ok(tape.leaf(tokenlens_autograd::Tensor::scalar(0.0)));
    }
    let s_pos = similarity(tape, mode, et, ev_pos)?;
    let t_pos = tape.scale(s_pos, 1.0 / tau);
    let mut denom = Vec::with_capacity(ev_negs.len() + 1);
    if include_positive {
        denom.push(t_pos);
    }
    for &neg in ev_negs {
        let s = similarity(tape, mode, et, neg)?;
        denom.push(tape.scale(s, 1.0 / tau));
    }
    let lse = tape.logsumexp(&denom)?;
    Ok(tape.sub(lse, t_pos)?)
}

/// Per-batch encodings feeding the combined objective: one positive region
/// and one instruction per sample, plus that sample's negative regions.
pub struct BatchEncodings {
    pub ev_pos: Vec<Var>,
    pub et: Vec<Var>,
    pub ev_negs: Vec<Vec<Var>>,
}

pub struct TotalLoss {
    pub total: Var,
    pub inter: Var,
    pub intra_mean: Var,
}

/// L_total = L_inter + λ · mean over the batch of L_intra. With λ = 0 the
/// returned total is the inter node itself, bit for bit.
pub fn total_loss(
    tape: &mut Tape,
    enc: &BatchEncodings,
    tau: f64,
    lambda: f64,
    include_positive: bool,
    mode: SimilarityMode,
) -> Result<TotalLoss, LossError> {
    if enc.ev_pos.len() != enc.ev_negs.len() {
        return Err(LossError::LengthMismatch {
            ev: enc.ev_pos.len(),
            et: enc.ev_negs.len(),
        });
    }
    let inter = inter_loss(tape, &enc.ev_pos, &enc.et, tau, include_positive, mode)?;
    let mut intras = Vec::with_capacity(enc.ev_pos.len());
    for i in 0..enc.ev_pos.len() {
        intras.push(intra_loss(
            tape,
            enc.et[i],
            enc.ev_pos[i],
            &enc.ev_negs[i],
            tau,
            include_positive,
            mode,
        )?);
    }
    let intra_mean = tape.mean_scalars(&intras)?;
    let total = if lambda == 0.0 {
        inter
    } else {
        let weighted = tape.scale(intra_mean, lambda);
        tape.add(inter, weighted)?
    };
    Ok(TotalLoss {
        total,
        inter,
        intra_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tokenlens_autograd::gradcheck::{check_fn, DEFAULT_H};
    use tokenlens_autograd::nn::seeded_rng;
    use tokenlens_autograd::Tensor;

    const MODE: SimilarityMode = SimilarityMode::MeanRowCosine;

    fn rand_kd(rng: &mut rand_chacha::ChaCha20Rng, k: usize, d: usize) -> Tensor {
        Tensor::new(
            vec![k, d],
            (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn batch_of_one_with_positive_in_denominator_is_zero() {
        let mut rng = seeded_rng(0);
        let mut tape = Tape::new();
        let ev = tape.leaf(rand_kd(&mut rng, 3, 4));
        let et = tape.leaf(rand_kd(&mut rng, 3, 4));
        let loss = inter_loss(&mut tape, &[ev], &[et], 0.07, true, MODE).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn batch_of_one_without_positive_is_a_configuration_error() {
        let mut rng = seeded_rng(0);
        let mut tape = Tape::new();
        let ev = tape.leaf(rand_kd(&mut rng, 3, 4));
        let et = tape.leaf(rand_kd(&mut rng, 3, 4));
        assert!(matches!(
            inter_loss(&mut tape, &[ev], &[et], 0.07, false, MODE),
            Err(LossError::UndefinedDenominator)
        ));
    }

    #[test]
    fn uniform_two_sample_batch_gives_two_ln_two() {
        // All four cross-pair similarities equal → each directional term is
        // ln 2 and the total is 2·ln 2.
        let mut rng = seeded_rng(1);
        let shared = rand_kd(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..4).map(|_| tape.leaf(shared.clone())).collect();
        let loss = inter_loss(
            &mut tape,
            &[vars[0], vars[1]],
            &[vars[2], vars[3]],
            0.5,
            true,
            MODE,
        )
        .unwrap();
        let expect = 2.0 * 2f64.ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn random_batch_matches_brute_force_log_softmax() {
        let tau = 0.3;
        let b = 4;
        let mut rng = seeded_rng(7);
        let evs: Vec<Tensor> = (0..b).map(|_| rand_kd(&mut rng, 3, 5)).collect();
        let ets: Vec<Tensor> = (0..b).map(|_| rand_kd(&mut rng, 3, 5)).collect();

        // Oracle: similarity matrix via plain kernels, then direct
        // exp/sum/ln arithmetic (no tape, no logsumexp trick).
        let mut m = vec![vec![0.0f64; b]; b];
        for (i, ev) in evs.iter().enumerate() {
            for (j, et) in ets.iter().enumerate() {
                m[i][j] = tokenlens_autograd::kernels::mean_row_cosine(ev, et).unwrap();
            }
        }
        let mut oracle = 0.0;
        for i in 0..b {
            let row_sum: f64 = (0..b).map(|j| (m[i][j] / tau).exp()).sum();
            let col_sum: f64 = (0..b).map(|j| (m[j][i] / tau).exp()).sum();
            oracle += -((m[i][i] / tau).exp() / row_sum).ln() / b as f64;
            oracle += -((m[i][i] / tau).exp() / col_sum).ln() / b as f64;
        }

        let mut tape = Tape::new();
        let ev_vars: Vec<Var> = evs.iter().map(|t| tape.leaf(t.clone())).collect();
        let et_vars: Vec<Var> = ets.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = inter_loss(&mut tape, &ev_vars, &et_vars, tau, true, MODE).unwrap();
        assert!((tape.value(loss).item() - oracle).abs() < 1e-9);
    }

    #[test]
    fn inter_loss_gradient_matches_finite_differences() {
        let tau = 0.4;
        let b = 3;
        let (k, d) = (2, 4);
        let mut rng = seeded_rng(9);
        let flat0: Vec<f64> = (0..2 * b * k * d).map(|_| rng.random_range(-1.0..1.0)).collect();

        let run = |flat: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let mut vars = Vec::new();
            for s in 0..2 * b {
                let chunk = &flat[s * k * d..(s + 1) * k * d];
                vars.push(tape.leaf(Tensor::new(vec![k, d], chunk.to_vec()).unwrap()));
            }
            let loss =
                inter_loss(&mut tape, &vars[..b], &vars[b..], tau, true, MODE).unwrap();
            tape.backward(loss).unwrap();
            let grads: Vec<f64> = vars
                .iter()
                .flat_map(|&v| {
                    tape.grad(v)
                        .map(|g| g.into_data())
                        .unwrap_or_else(|| vec![0.0; k * d])
                })
                .collect();
            (tape.value(loss).item(), grads)
        };

        let (_, analytic) = run(&flat0);
        let mut f = |x: &[f64]| run(x).0;
        let err = check_fn(&mut f, &flat0, &analytic, DEFAULT_H);
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn intra_loss_with_no_negatives_is_zero() {
        let mut rng = seeded_rng(2);
        let mut tape = Tape::new();
        let et = tape.leaf(rand_kd(&mut rng, 3, 4));
        let ev = tape.leaf(rand_kd(&mut rng, 3, 4));
        let loss = intra_loss(&mut tape, et, ev, &[], 0.07, true, MODE).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn intra_loss_equal_negative_gives_ln_two() {
        let mut rng = seeded_rng(3);
        let shared = rand_kd(&mut rng, 3, 4);
        let et = rand_kd(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let etv = tape.leaf(et);
        let pos = tape.leaf(shared.clone());
        let neg = tape.leaf(shared);
        let loss = intra_loss(&mut tape, etv, pos, &[neg], 1.0, true, MODE).unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn intra_loss_closed_form_case() {
        // sim_pos = 1 (identical), sim_neg = 0 (orthogonal rows), τ = 1:
        // −ln(e / (e + 1)).
        let et = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let neg = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let etv = tape.leaf(et.clone());
        let pos = tape.leaf(et);
        let negv = tape.leaf(neg);
        let loss = intra_loss(&mut tape, etv, pos, &[negv], 1.0, true, MODE).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-9);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn lambda_zero_total_is_bitwise_inter() {
        let mut rng = seeded_rng(4);
        let mut tape = Tape::new();
        let enc = BatchEncodings {
            ev_pos: (0..2).map(|_| tape.leaf(rand_kd(&mut rng, 3, 4))).collect(),
            et: (0..2).map(|_| tape.leaf(rand_kd(&mut rng, 3, 4))).collect(),
            ev_negs: vec![
                vec![tape.leaf(rand_kd(&mut rng, 3, 4))],
                vec![],
            ],
        };
        let out = total_loss(&mut tape, &enc, 0.07, 0.0, true, MODE).unwrap();
        assert_eq!(
            tape.value(out.total).item().to_bits(),
            tape.value(out.inter).item().to_bits()
        );
    }

    #[test]
    fn total_is_inter_plus_lambda_intra() {
        let mut rng = seeded_rng(5);
        let mut tape = Tape::new();
        let enc = BatchEncodings {
            ev_pos: (0..3).map(|_| tape.leaf(rand_kd(&mut rng, 3, 4))).collect(),
            et: (0..3).map(|_| tape.leaf(rand_kd(&mut rng, 3, 4))).collect(),
            ev_negs: (0..3)
                .map(|_| vec![tape.leaf(rand_kd(&mut rng, 3, 4))])
                .collect(),
        };
        let lambda = 0.5;
        let out = total_loss(&mut tape, &enc, 0.07, lambda, true, MODE).unwrap();
        let lhs = tape.value(out.total).item();
        let rhs = tape.value(out.inter).item() + lambda * tape.value(out.intra_mean).item();
        assert!((lhs - rhs).abs() < 1e-15);
        // Spec arithmetic sanity: 1.0 + 0.5·0.4 = 1.2.
        assert_eq!(1.0 + 0.5 * 0.4, 1.2);
    }

    #[test]
    fn losses_are_nonnegative_with_positive_in_denominator() {
        let mut rng = seeded_rng(6);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let enc = BatchEncodings {
                ev_pos: (0..3).map(|_| tape.leaf(rand_kd(&mut rng, 2, 4))).collect(),
                et: (0..3).map(|_| tape.leaf(rand_kd(&mut rng, 2, 4))).collect(),
                ev_negs: (0..3)
                    .map(|_| {
                        (0..2)
                            .map(|_| tape.leaf(rand_kd(&mut rng, 2, 4)))
                            .collect()
                    })
                    .collect(),
            };
            let out = total_loss(&mut tape, &enc, 0.07, 0.5, true, MODE).unwrap();
            assert!(tape.value(out.inter).item() >= 0.0);
            assert!(tape.value(out.intra_mean).item() >= 0.0);
        }
    }

    #[test]
    fn inter_loss_is_batch_order_invariant() {
        let mut rng = seeded_rng(8);
        let evs: Vec<Tensor> = (0..4).map(|_| rand_kd(&mut rng, 2, 4)).collect();
        let ets: Vec<Tensor> = (0..4).map(|_| rand_kd(&mut rng, 2, 4)).collect();
        let eval = |order: &[usize]| {
            let mut tape = Tape::new();
            let ev: Vec<Var> = order.iter().map(|&i| tape.leaf(evs[i].clone())).collect();
            let et: Vec<Var> = order.iter().map(|&i| tape.leaf(ets[i].clone())).collect();
            let loss = inter_loss(&mut tape, &ev, &et, 0.2, true, MODE).unwrap();
            tape.value(loss).item()
        };
        let a = eval(&[0, 1, 2, 3]);
        let b = eval(&[3, 0, 2, 1]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn high_temperature_limits_are_uniform_softmax() {
        let mut rng = seeded_rng(10);
        let b = 3;
        let mut tape = Tape::new();
        let ev: Vec<Var> = (0..b).map(|_| tape.leaf(rand_kd(&mut rng, 2, 4))).collect();
        let et: Vec<Var> = (0..b).map(|_| tape.leaf(rand_kd(&mut rng, 2, 4))).collect();
        let inter = inter_loss(&mut tape, &ev, &et, 1e6, true, MODE).unwrap();
        assert!((tape.value(inter).item() - 2.0 * (b as f64).ln()).abs() < 1e-6);

        let negs: Vec<Var> = (0..3).map(|_| tape.leaf(rand_kd(&mut rng, 2, 4))).collect();
        let intra = intra_loss(&mut tape, et[0], ev[0], &negs, 1e6, true, MODE).unwrap();
        assert!((tape.value(intra).item() - 4f64.ln()).abs() < 1e-6);
    }
}
