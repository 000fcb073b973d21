//! Small network building blocks: a two-layer MLP and single-head scaled
//! dot-product attention, both expressed as tape compositions.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Owned weights of a two-layer MLP with a GELU between the affine layers.
/// Input, hidden, and output widths are all `d`, so shapes are preserved.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpWeights {
    /// Weights from uniform(-1/sqrt(d), 1/sqrt(d)), biases zero.
    pub fn init(d: usize, rng: &mut ChaCha20Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut mat = || {
            let data = (0..d * d).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(vec![d, d], data).unwrap()
        };
        MlpWeights {
            w1: mat(),
            w2: mat(),
            b1: Tensor::zeros(vec![d]),
            b2: Tensor::zeros(vec![d]),
        }
    }

    pub fn zeros(d: usize) -> Self {
        MlpWeights {
            w1: Tensor::zeros(vec![d, d]),
            b1: Tensor::zeros(vec![d]),
            w2: Tensor::zeros(vec![d, d]),
            b2: Tensor::zeros(vec![d]),
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut eye = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        MlpWeights {
            w1: eye.clone(),
            b1: Tensor::zeros(vec![d]),
            w2: eye,
            b2: Tensor::zeros(vec![d]),
        }
    }

    pub fn width(&self) -> usize {
        self.w1.rows()
    }
}

/// Tape handles for one MLP's parameters.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn bind_mlp(tape: &mut Tape, weights: &MlpWeights) -> MlpVars {
    MlpVars {
        w1: tape.leaf(weights.w1.clone()),
        b1: tape.leaf(weights.b1.clone()),
        w2: tape.leaf(weights.w2.clone()),
        b2: tape.leaf(weights.b2.clone()),
    }
}

/// y = (gelu(x·W1 + b1))·W2 + b2, shape n×d preserved.
pub fn mlp_forward(tape: &mut Tape, x: Var, p: MlpVars) -> Result<Var, TensorError> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_row_bias(h, p.b1)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, p.w2)?;
    tape.add_row_bias(y, p.b2)
}

/// softmax(q·kvᵀ·scale)·kv — queries attend over the kv rows, single head.
pub fn sdp_attention(tape: &mut Tape, q: Var, kv: Var, scale: f64) -> Result<Var, TensorError> {
    let logits = tape.matmul_nt(q, kv)?;
    let scaled = tape.scale(logits, scale);
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, kv)
}

/// K×d guidance-query style matrix from uniform(-1/sqrt(d), 1/sqrt(d)).
pub fn uniform_queries(k: usize, d: usize, rng: &mut ChaCha20Rng) -> Tensor {
    let bound = 1.0 / (d as f64).sqrt();
    let data = (0..k * d).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![k, d], data).unwrap()
}

pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
