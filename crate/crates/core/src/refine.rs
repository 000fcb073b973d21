//! Region refinement. A small frozen encoder with one global self-attention
//! block stands in for a vision backbone: encoding a full image entangles
//! every output token with every input cell, while re-encoding a crop in
//! isolation depends only on the crop's cells. A pooling step caps the
//! number of refined tokens at a budget fraction of the full-image count.

use tokenlens_autograd::kernels;
use tokenlens_autograd::nn::{self, MlpWeights};
use tokenlens_autograd::Tensor;

use crate::grid::TokenGrid;

/// Frozen single-block encoder: X → X + attn(X), then + MLP, globally mixing
/// through softmax attention. Deterministic given its seed.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    d: usize,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    mlp: MlpWeights,
}

impl ToyEncoder {
    pub fn new(d: usize, seed: u64) -> Self {
        let mut rng = nn::seeded_rng(seed);
        let wq = nn::uniform_queries(d, d, &mut rng);
        let wk = nn::uniform_queries(d, d, &mut rng);
        // Value path is identity-dominated: attention then mixes cell
        // *content* across positions (scaled-down random values would bury
        // the mixed content under an arbitrary rotation instead).
        let mut wv = nn::uniform_queries(d, d, &mut rng);
        for val in wv.data_mut() {
            *val *= 0.25;
        }
        for i in 0..d {
            wv.data_mut()[i * d + i] += 1.0;
        }
        ToyEncoder {
            d,
            wq,
            wk,
            wv,
            mlp: MlpWeights::init(d, &mut rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.d
    }

    /// Encode a grid of raw cells. Every output token depends on every input
    /// cell through the softmax attention (weights are strictly positive).
    pub fn encode(&self, grid: &TokenGrid) -> TokenGrid {
        let x = grid.flatten();
        let q = kernels::matmul(&x, &self.wq).expect("square projections");
        let k = kernels::matmul(&x, &self.wk).expect("square projections");
        let v = kernels::matmul(&x, &self.wv).expect("square projections");
        let mut logits = kernels::matmul_nt(&q, &k).expect("shared dim");
        let scale = 1.0 / (self.d as f64).sqrt();
        for val in logits.data_mut() {
            *val *= scale;
        }
        let attn = kernels::softmax_rows(&logits).expect("2-d");
        let mixed = kernels::matmul(&attn, &v).expect("shared dim");

        let n = x.rows();
        let mut h = Tensor::zeros(vec![n, self.d]);
        for (o, (a, b)) in h
            .data_mut()
            .iter_mut()
            .zip(x.data().iter().zip(mixed.data()))
        {
            *o = a + b;
        }
        let h1 = kernels::matmul(&h, &self.mlp.w1).expect("square");
        let h1 = kernels::add_row_bias(&h1, &self.mlp.b1).expect("bias");
        let h1 = h1.map(kernels::gelu_scalar);
        let h2 = kernels::matmul(&h1, &self.mlp.w2).expect("square");
        let h2 = kernels::add_row_bias(&h2, &self.mlp.b2).expect("bias");
        let mut out = h;
        for (o, m) in out.data_mut().iter_mut().zip(h2.data()) {
            *o += m;
        }
        TokenGrid::from_flat(grid.height(), grid.width(), &out, grid.px_per_token())
            .expect("same geometry")
    }

    /// Re-encode a crop in isolation, first pooling it down so the output
    /// has at most `max_tokens` tokens. Output is a pure function of the
    /// crop's cells.
    pub fn refine(&self, crop: &TokenGrid, max_tokens: usize) -> TokenGrid {
        let pooled = pool_to_budget(crop, max_tokens);
        self.encode(&pooled)
    }
}

/// Average-pool f×f blocks with the smallest integer factor f ≥ 1 that
/// brings the token count within the budget. Ragged edge blocks average
/// over the cells present. A factor of 1 returns a plain clone.
pub fn pool_to_budget(grid: &TokenGrid, max_tokens: usize) -> TokenGrid {
    let max_tokens = max_tokens.max(1);
    if grid.token_count() <= max_tokens {
        return grid.clone();
    }
    let (gh, gw, d) = (grid.height(), grid.width(), grid.embed_dim());
    let mut f = 2;
    while gh.div_ceil(f) * gw.div_ceil(f) > max_tokens {
        f += 1;
    }
    let (ph, pw) = (gh.div_ceil(f), gw.div_ceil(f));
    let mut data = Vec::with_capacity(ph * pw * d);
    for br in 0..ph {
        for bc in 0..pw {
            let r_end = ((br + 1) * f).min(gh);
            let c_end = ((bc + 1) * f).min(gw);
            let mut acc = vec![0.0; d];
            let mut count = 0.0;
            for r in br * f..r_end {
                for c in bc * f..c_end {
                    for (a, v) in acc.iter_mut().zip(grid.cell(r, c)) {
                        *a += v;
                    }
                    count += 1.0;
                }
            }
            data.extend(acc.into_iter().map(|v| v / count));
        }
    }
    TokenGrid::new(ph, pw, d, data, grid.px_per_token() * f as f64).expect("pooled geometry")
}

/// Refined-token budget for a full image of `vanilla_tokens` tokens.
pub fn refine_budget(vanilla_tokens: usize, budget_fraction: f64) -> usize {
    ((vanilla_tokens as f64 * budget_fraction).floor() as usize).max(1)
}
