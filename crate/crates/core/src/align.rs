//! Instruction-region alignment: learnable guidance queries attend over
//! MLP-projected region tokens and instruction tokens, producing comparable
//! K×d representations whose similarity ranks regions. Only the queries and
//! the two MLPs are trainable; token grids and instruction embeddings are
//! inputs and never change.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokenlens_autograd::checkpoint::Checkpoint;
use tokenlens_autograd::nn::{self, MlpVars, MlpWeights};
use tokenlens_autograd::{Tape, Tensor, TensorError, Var};

use crate::text::InstructionEmbedding;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(&'static str),
    #[error("checkpoint parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: &'static str,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// How two K×d representations are collapsed to one similarity scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Mean over the K rows of per-row cosine; every guidance query weighs
    /// equally and per-row rescaling cancels.
    #[default]
    MeanRowCosine,
    /// Cosine of the two matrices flattened to K·d vectors.
    FlattenedCosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub embed_dim: usize,
    pub num_queries: usize,
    /// Attention scaling factor; attention logits are divided by sqrt(d_k).
    pub d_k: f64,
    pub similarity: SimilarityMode,
}

impl AlignmentConfig {
    pub fn new(embed_dim: usize, num_queries: usize) -> Self {
        AlignmentConfig {
            embed_dim,
            num_queries,
            d_k: embed_dim as f64,
            similarity: SimilarityMode::default(),
        }
    }

    pub fn attention_scale(&self) -> f64 {
        1.0 / self.d_k.sqrt()
    }
}

pub const PARAM_NAMES: [&str; 9] = [
    "queries",
    "mlp_v.w1",
    "mlp_v.b1",
    "mlp_v.w2",
    "mlp_v.b2",
    "mlp_t.w1",
    "mlp_t.b1",
    "mlp_t.w2",
    "mlp_t.b2",
];

/// Learnable guidance queries plus the visual- and text-branch MLPs.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentModel {
    pub cfg: AlignmentConfig,
    pub queries: Tensor,
    pub mlp_v: MlpWeights,
    pub mlp_t: MlpWeights,
}

impl AlignmentModel {
    pub fn new(cfg: AlignmentConfig, seed: u64) -> Self {
        let mut rng = nn::seeded_rng(seed);
        let queries = nn::uniform_queries(cfg.num_queries, cfg.embed_dim, &mut rng);
        let mlp_v = MlpWeights::init(cfg.embed_dim, &mut rng);
        let mlp_t = MlpWeights::init(cfg.embed_dim, &mut rng);
        AlignmentModel {
            cfg,
            queries,
            mlp_v,
            mlp_t,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("queries", &self.queries),
            ("mlp_v.w1", &self.mlp_v.w1),
            ("mlp_v.b1", &self.mlp_v.b1),
            ("mlp_v.w2", &self.mlp_v.w2),
            ("mlp_v.b2", &self.mlp_v.b2),
            ("mlp_t.w1", &self.mlp_t.w1),
            ("mlp_t.b1", &self.mlp_t.b1),
            ("mlp_t.w2", &self.mlp_t.w2),
            ("mlp_t.b2", &self.mlp_t.b2),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.queries,
            &mut self.mlp_v.w1,
            &mut self.mlp_v.b1,
            &mut self.mlp_v.w2,
            &mut self.mlp_v.b2,
            &mut self.mlp_t.w1,
            &mut self.mlp_t.b1,
            &mut self.mlp_t.w2,
            &mut self.mlp_t.b2,
        ]
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|(_, t)| t.numel()).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("d_k".to_string(), format!("{}", self.cfg.d_k));
        meta.insert(
            "similarity".to_string(),
            match self.cfg.similarity {
                SimilarityMode::MeanRowCosine => "mean_row_cosine".to_string(),
                SimilarityMode::FlattenedCosine => "flattened_cosine".to_string(),
            },
        );
        Checkpoint {
            meta,
            params: self
                .params()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, AlignError> {
        let queries = ckpt
            .get("queries")
            .ok_or(AlignError::MissingParam("queries"))?;
        if queries.rank() != 2 {
            return Err(AlignError::ParamShape {
                name: "queries",
                found: queries.shape().to_vec(),
                expected: vec![0, 0],
            });
        }
        let (k, d) = (queries.rows(), queries.cols());
        let mut cfg = AlignmentConfig::new(d, k);
        if let Some(dk) = ckpt.meta.get("d_k").and_then(|v| v.parse::<f64>().ok()) {
            cfg.d_k = dk;
        }
        if let Some(sim) = ckpt.meta.get("similarity") {
            cfg.similarity = match sim.as_str() {
                "flattened_cosine" => SimilarityMode::FlattenedCosine,
                _ => SimilarityMode::MeanRowCosine,
            };
        }
        let fetch = |name: &'static str, expected: Vec<usize>| -> Result<Tensor, AlignError> {
            let t = ckpt.get(name).ok_or(AlignError::MissingParam(name))?;
            if t.shape() != expected.as_slice() {
                return Err(AlignError::ParamShape {
                    name,
                    found: t.shape().to_vec(),
                    expected,
                });
            }
            Ok(t.clone())
        };
        let mlp = |prefix: &'static str| -> Result<MlpWeights, AlignError> {
            Ok(MlpWeights {
                w1: fetch(
                    match prefix {
                        "mlp_v" => "mlp_v.w1",
                        _ => "mlp_t.w1",
                    },
                    vec![d, d],
                )?,
                b1: fetch(
                    match prefix {
                        "mlp_v" => "mlp_v.b1",
                        _ => "mlp_t.b1",
                    },
                    vec![d],
                )?,
                w2: fetch(
                    match prefix {
                        "mlp_v" => "mlp_v.w2",
                        _ => "mlp_t.w2",
                    },
                    vec![d, d],
                )?,
                b2: fetch(
                    match prefix {
                        "mlp_v" => "mlp_v.b2",
                        _ => "mlp_t.b2",
                    },
                    vec![d],
                )?,
            })
        };
        Ok(AlignmentModel {
            cfg,
            queries: queries.clone(),
            mlp_v: mlp("mlp_v")?,
            mlp_t: mlp("mlp_t")?,
        })
    }

    /// Register all trainable parameters on a tape for one forward/backward.
    pub fn bind(&self, tape: &mut Tape) -> BoundAlignment {
        BoundAlignment {
            queries: tape.leaf(self.queries.clone()),
            mlp_v: nn::bind_mlp(tape, &self.mlp_v),
            mlp_t: nn::bind_mlp(tape, &self.mlp_t),
            scale: self.cfg.attention_scale(),
            similarity: self.cfg.similarity,
        }
    }

    /// Forward-only similarity between one region and one instruction.
    pub fn score_region(
        &self,
        region_tokens: &Tensor,
        instr: &InstructionEmbedding,
    ) -> Result<f64, AlignError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let region = tape.leaf(region_tokens.clone());
        let text = tape.leaf(instr.tokens.clone());
        let ev = bound.encode_region(&mut tape, region)?;
        let et = bound.encode_text(&mut tape, text)?;
        let sim = bound.similarity(&mut tape, ev, et)?;
        Ok(tape.value(sim).item())
    }
}

/// Tape handles for the model's parameters within one recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BoundAlignment {
    pub queries: Var,
    pub mlp_v: MlpVars,
    pub mlp_t: MlpVars,
    scale: f64,
    similarity: SimilarityMode,
}

impl BoundAlignment {
    /// E^v = softmax(E·R'ᵀ/√d_k)·R' with R' = mlp_v(region tokens).
    pub fn encode_region(&self, tape: &mut Tape, region_tokens: Var) -> Result<Var, AlignError> {
        let projected = nn::mlp_forward(tape, region_tokens, self.mlp_v)?;
        Ok(nn::sdp_attention(tape, self.queries, projected, self.scale)?)
    }

    /// E^t = softmax(E·T'ᵀ/√d_k)·T' with T' = mlp_t(instruction tokens).
    pub fn encode_text(&self, tape: &mut Tape, instr_tokens: Var) -> Result<Var, AlignError> {
        let projected = nn::mlp_forward(tape, instr_tokens, self.mlp_t)?;
        Ok(nn::sdp_attention(tape, self.queries, projected, self.scale)?)
    }

    /// Scalar similarity of two K×d representations per the configured mode.
    pub fn similarity(&self, tape: &mut Tape, ev: Var, et: Var) -> Result<Var, AlignError> {
        Ok(match self.similarity {
            SimilarityMode::MeanRowCosine => tape.mean_row_cosine(ev, et)?,
            SimilarityMode::FlattenedCosine => tape.cosine_flat(ev, et)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::embed_text;
    use rand::Rng;

    fn small_model(seed: u64) -> AlignmentModel {
        AlignmentModel::new(AlignmentConfig::new(8, 3), seed)
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = nn::seeded_rng(seed);
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_token_region_repeats_projected_row() {
        let model = small_model(3);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let region = tape.leaf(rand_tensor(1, 8, 11));
        let ev = bound.encode_region(&mut tape, region).unwrap();
        let projected = nn::mlp_forward(&mut tape, region, bound.mlp_v).unwrap();
        let evv = tape.value(ev).clone();
        let pv = tape.value(projected);
        for k in 0..3 {
            for j in 0..8 {
                assert!((evv.row(k)[j] - pv.row(0)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicating_region_tokens_leaves_encoding_unchanged() {
        // Softmax mass splits evenly over duplicated keys, so the attention
        // output is identical.
        let model = small_model(4);
        let tokens = rand_tensor(5, 8, 21);
        let mut doubled_data = tokens.data().to_vec();
        doubled_data.extend_from_slice(tokens.data());
        let doubled = Tensor::new(vec![10, 8], doubled_data).unwrap();

        let encode = |input: Tensor| -> Tensor {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let region = tape.leaf(input);
            let ev = bound.encode_region(&mut tape, region).unwrap();
            tape.value(ev).clone()
        };
        let a = encode(tokens);
        let b = encode(doubled);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn permuting_region_tokens_leaves_encoding_unchanged() {
        let model = small_model(6);
        let tokens = rand_tensor(6, 8, 33);
        let mut permuted_rows: Vec<Vec<f64>> = (0..6).map(|r| tokens.row(r).to_vec()).collect();
        permuted_rows.reverse();
        let permuted = Tensor::from_rows(&permuted_rows).unwrap();

        let encode = |input: Tensor| -> Tensor {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let region = tape.leaf(input);
            let ev = bound.encode_region(&mut tape, region).unwrap();
            tape.value(ev).clone()
        };
        let a = encode(tokens);
        let b = encode(permuted);
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-10, "max diff {max_diff}");
    }

    #[test]
    fn encode_text_is_bitwise_deterministic() {
        let model = small_model(8);
        let instr = embed_text("where is the total", 8, 0).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let t = tape.leaf(instr.tokens.clone());
            let et = bound.encode_text(&mut tape, t).unwrap();
            tape.value(et).clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn single_text_token_repeats_projected_row() {
        let model = small_model(9);
        let instr = embed_text("total", 8, 0).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let t = tape.leaf(instr.tokens.clone());
        let et = bound.encode_text(&mut tape, t).unwrap();
        let proj = nn::mlp_forward(&mut tape, t, bound.mlp_t).unwrap();
        let etv = tape.value(et).clone();
        let pv = tape.value(proj);
        for k in 0..3 {
            for j in 0..8 {
                assert!((etv.row(k)[j] - pv.row(0)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_trivial_values() {
        let model = small_model(10);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let a = tape.leaf(rand_tensor(3, 8, 44));
        let same = bound.similarity(&mut tape, a, a).unwrap();
        assert!((tape.value(same).item() - 1.0).abs() < 1e-12);

        // Orthogonal rows → 0.
        let mut x = Tensor::zeros(vec![3, 8]);
        let mut y = Tensor::zeros(vec![3, 8]);
        for k in 0..3 {
            x.data_mut()[k * 8] = 1.0;
            y.data_mut()[k * 8 + 1] = 1.0;
        }
        let xv = tape.leaf(x);
        let yv = tape.leaf(y);
        let orth = bound.similarity(&mut tape, xv, yv).unwrap();
        assert_eq!(tape.value(orth).item(), 0.0);
    }

    #[test]
    fn similarity_mean_of_row_cosines() {
        // K=2 with row similarities 1 and 0 → 0.5.
        let model = small_model(11);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (av, bv) = (tape.leaf(a), tape.leaf(b));
        let s = bound.similarity(&mut tape, av, bv).unwrap();
        assert!((tape.value(s).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn similarity_invariant_to_positive_row_rescaling() {
        let model = small_model(12);
        let ev = rand_tensor(3, 8, 55);
        let et = rand_tensor(3, 8, 56);
        let mut scaled = ev.clone();
        for k in 0..3 {
            let c = 1.0 + k as f64 * 2.0;
            for j in 0..8 {
                scaled.data_mut()[k * 8 + j] *= c;
            }
        }
        let sim = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
            let s = bound.similarity(&mut tape, av, bv).unwrap();
            tape.value(s).item()
        };
        assert!((sim(&ev, &et) - sim(&scaled, &et)).abs() < 1e-10);
        assert!((sim(&ev, &et) - sim(&et, &ev)).abs() < 1e-12);
        assert!(sim(&ev, &et).abs() <= 1.0);
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let model = AlignmentModel::new(AlignmentConfig::new(8, 3), 77);
        let ckpt = model.to_checkpoint();
        let json = tokenlens_autograd::checkpoint::to_json(&ckpt).unwrap();
        let back =
            AlignmentModel::from_checkpoint(&tokenlens_autograd::checkpoint::from_json(&json).unwrap())
                .unwrap();
        assert_eq!(back, model);
    }
}
