//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Values are appended to the tape in forward order, so the record list is
//! already topologically sorted; the backward pass walks it once in reverse,
//! accumulating vector-Jacobian products per node. Everything is sequential
//! f64, which makes repeated backward passes bitwise identical.

use crate::kernels;
use crate::tensor::{Tensor, TensorError};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct BackwardCtx<'a> {
    values: &'a [Tensor],
    inputs: &'a [Var],
    out: usize,
    d_out: &'a [f64],
}

impl<'a> BackwardCtx<'a> {
    fn input(&self, i: usize) -> &Tensor {
        &self.values[self.inputs[i].0]
    }
    fn out_value(&self) -> &Tensor {
        &self.values[self.out]
    }
}

/// Returns one gradient buffer per input, aligned with `Record.inputs`.
type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Vec<f64>>>;

struct Record {
    out: usize,
    inputs: Vec<Var>,
    backward: BackwardFn,
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    records: Vec<Record>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Register a leaf value (input or parameter). Leaves record no backward rule.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let id = self.values.len();
        self.values.push(value);
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the most recent backward target w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| {
            Tensor::new(self.values[v.0].shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape")
        })
    }

    fn push(&mut self, value: Tensor, inputs: Vec<Var>, backward: BackwardFn) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward output");
        let out = self.values.len();
        self.values.push(value);
        self.records.push(Record {
            out,
            inputs,
            backward,
        });
        Var(out)
    }

    // ── elementwise and scalar arithmetic ───────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(TensorError::DimMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|ctx| vec![ctx.d_out.to_vec(), ctx.d_out.to_vec()]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(TensorError::DimMismatch {
                op: "sub",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|ctx| {
                vec![
                    ctx.d_out.to_vec(),
                    ctx.d_out.iter().map(|d| -d).collect(),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(TensorError::DimMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|ctx| {
                let da = ctx
                    .d_out
                    .iter()
                    .zip(ctx.input(1).data())
                    .map(|(d, y)| d * y)
                    .collect();
                let db = ctx
                    .d_out
                    .iter()
                    .zip(ctx.input(0).data())
                    .map(|(d, x)| d * x)
                    .collect();
                vec![da, db]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.values[a.0].map(|v| v * c);
        self.push(
            value,
            vec![a],
            Box::new(move |ctx| vec![ctx.d_out.iter().map(|d| d * c).collect()]),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ── matrix products ─────────────────────────────────────────────────

    /// C = A · B; backward is dA = dC·Bᵀ, dB = Aᵀ·dC.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = kernels::matmul(&self.values[a.0], &self.values[b.0])?;
        let (m, n) = (value.rows(), value.cols());
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(move |ctx| {
                let d_out = Tensor::new(vec![m, n], ctx.d_out.to_vec()).unwrap();
                let da = kernels::matmul_nt(&d_out, ctx.input(1)).unwrap();
                let db = kernels::matmul_tn(ctx.input(0), &d_out).unwrap();
                vec![da.into_data(), db.into_data()]
            }),
        ))
    }

    /// C = A · Bᵀ; backward is dA = dC·B, dB = dCᵀ·A.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = kernels::matmul_nt(&self.values[a.0], &self.values[b.0])?;
        let (m, n) = (value.rows(), value.cols());
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(move |ctx| {
                let d_out = Tensor::new(vec![m, n], ctx.d_out.to_vec()).unwrap();
                let da = kernels::matmul(&d_out, ctx.input(1)).unwrap();
                let db = kernels::matmul_tn(&d_out, ctx.input(0)).unwrap();
                vec![da.into_data(), db.into_data()]
            }),
        ))
    }

    /// Broadcast a length-n bias over each row of an m×n matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let value = kernels::add_row_bias(&self.values[x.0], &self.values[b.0])?;
        let n = value.cols();
        Ok(self.push(
            value,
            vec![x, b],
            Box::new(move |ctx| {
                let mut db = vec![0.0; n];
                for (i, d) in ctx.d_out.iter().enumerate() {
                    db[i % n] += d;
                }
                vec![ctx.d_out.to_vec(), db]
            }),
        ))
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(kernels::gelu_scalar);
        self.push(
            value,
            vec![x],
            Box::new(|ctx| {
                vec![ctx
                    .d_out
                    .iter()
                    .zip(ctx.input(0).data())
                    .map(|(d, &v)| d * kernels::gelu_prime_scalar(v))
                    .collect()]
            }),
        )
    }

    /// Row-wise softmax; backward is dx = y ⊙ (dy − ⟨dy, y⟩) per row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = kernels::softmax_rows(&self.values[x.0])?;
        let (m, n) = (value.rows(), value.cols());
        Ok(self.push(
            value,
            vec![x],
            Box::new(move |ctx| {
                let y = ctx.out_value().data();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let dr = &ctx.d_out[i * n..(i + 1) * n];
                    let dot = kernels::dot(dr, yr);
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (dr[j] - dot);
                    }
                }
                vec![dx]
            }),
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.values[x.0].data().iter().sum());
        let n = self.values[x.0].numel();
        self.push(
            value,
            vec![x],
            Box::new(move |ctx| vec![vec![ctx.d_out[0]; n]]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.values[x.0].numel();
        let value = Tensor::scalar(self.values[x.0].data().iter().sum::<f64>() / n as f64);
        self.push(
            value,
            vec![x],
            Box::new(move |ctx| vec![vec![ctx.d_out[0] / n as f64; n]]),
        )
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        self.scalar_reduce(xs, 1.0, "add_scalars")
    }

    /// Mean of scalar nodes.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        self.scalar_reduce(xs, 1.0 / xs.len().max(1) as f64, "mean_scalars")
    }

    fn scalar_reduce(
        &mut self,
        xs: &[Var],
        weight: f64,
        op: &'static str,
    ) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptyInput { op });
        }
        for &x in xs {
            if !self.values[x.0].is_scalar() {
                return Err(TensorError::NotScalar {
                    op,
                    shape: self.values[x.0].shape().to_vec(),
                });
            }
        }
        let total: f64 = xs.iter().map(|&x| self.values[x.0].item()).sum();
        let k = xs.len();
        Ok(self.push(
            Tensor::scalar(total * weight),
            xs.to_vec(),
            Box::new(move |ctx| vec![vec![ctx.d_out[0] * weight]; k]),
        ))
    }

    /// log(Σ exp(x_i)) over scalar nodes, max-subtracted for stability.
    pub fn logsumexp(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptyInput { op: "logsumexp" });
        }
        for &x in xs {
            if !self.values[x.0].is_scalar() {
                return Err(TensorError::NotScalar {
                    op: "logsumexp",
                    shape: self.values[x.0].shape().to_vec(),
                });
            }
        }
        let vals: Vec<f64> = xs.iter().map(|&x| self.values[x.0].item()).collect();
        let lse = kernels::logsumexp(&vals);
        Ok(self.push(
            Tensor::scalar(lse),
            xs.to_vec(),
            Box::new(move |ctx| {
                let out = ctx.out_value().item();
                ctx.inputs
                    .iter()
                    .map(|&v| vec![ctx.d_out[0] * (ctx.values[v.0].item() - out).exp()])
                    .collect()
            }),
        ))
    }

    // ── similarity ──────────────────────────────────────────────────────

    /// Mean over rows k of cosine(a_k, b_k); rows with a degenerate norm
    /// contribute 0 with zero gradient.
    pub fn mean_row_cosine(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = kernels::mean_row_cosine(&self.values[a.0], &self.values[b.0])?;
        Ok(self.push(
            Tensor::scalar(value),
            vec![a, b],
            Box::new(|ctx| {
                let (ta, tb) = (ctx.input(0), ctx.input(1));
                let (k, d) = (ta.rows(), ta.cols());
                let g = ctx.d_out[0] / k as f64;
                let mut da = vec![0.0; k * d];
                let mut db = vec![0.0; k * d];
                for i in 0..k {
                    let ar = ta.row(i);
                    let br = tb.row(i);
                    let na = kernels::norm(ar);
                    let nb = kernels::norm(br);
                    if na < kernels::COSINE_NORM_EPS || nb < kernels::COSINE_NORM_EPS {
                        continue;
                    }
                    let c = kernels::dot(ar, br) / (na * nb);
                    for j in 0..d {
                        da[i * d + j] = g * (br[j] / (na * nb) - c * ar[j] / (na * na));
                        db[i * d + j] = g * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
                    }
                }
                vec![da, db]
            }),
        ))
    }

    /// Cosine similarity of two tensors viewed as flat vectors.
    pub fn cosine_flat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(TensorError::DimMismatch {
                op: "cosine_flat",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = kernels::cosine(ta.data(), tb.data());
        Ok(self.push(
            Tensor::scalar(value),
            vec![a, b],
            Box::new(|ctx| {
                let av = ctx.input(0).data();
                let bv = ctx.input(1).data();
                let g = ctx.d_out[0];
                let na = kernels::norm(av);
                let nb = kernels::norm(bv);
                if na < kernels::COSINE_NORM_EPS || nb < kernels::COSINE_NORM_EPS {
                    return vec![vec![0.0; av.len()], vec![0.0; bv.len()]];
                }
                let c = kernels::dot(av, bv) / (na * nb);
                let da = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| g * (y / (na * nb) - c * x / (na * na)))
                    .collect();
                let db = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| g * (x / (na * nb) - c * y / (nb * nb)))
                    .collect();
                vec![da, db]
            }),
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Seed d(loss)/d(loss) = 1 and sweep the tape in reverse. `loss` must be
    /// a one-element tensor. Each recorded node is visited exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.values[loss.0].is_scalar() {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.values[loss.0].shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        for rec in self.records.iter().rev() {
            let d_out = match &grads[rec.out] {
                Some(g) => g.clone(),
                None => continue,
            };
            let ctx = BackwardCtx {
                values: &self.values,
                inputs: &rec.inputs,
                out: rec.out,
                d_out: &d_out,
            };
            let input_grads = (rec.backward)(&ctx);
            debug_assert_eq!(input_grads.len(), rec.inputs.len());
            for (var, g) in rec.inputs.iter().zip(input_grads) {
                debug_assert_eq!(g.len(), self.values[var.0].numel());
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => grads[var.0] = Some(g),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}
