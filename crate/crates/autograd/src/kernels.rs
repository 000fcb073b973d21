//! Plain (non-recorded) forward math shared by the tape ops and by
//! forward-only callers such as the frozen crop encoder.

use crate::tensor::{Tensor, TensorError};

fn check_2d(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// C = A · B with A: m×k, B: k×n.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_2d("matmul", a)?;
    check_2d("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(TensorError::DimMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// C = A · Bᵀ with A: m×k, B: n×k.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_2d("matmul_nt", a)?;
    check_2d("matmul_nt", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(TensorError::DimMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// C = Aᵀ · B with A: m×k, B: m×n.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_2d("matmul_tn", a)?;
    check_2d("matmul_tn", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (m2, n) = (b.rows(), b.cols());
    if m != m2 {
        return Err(TensorError::DimMismatch {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

/// Row-wise softmax with max subtraction. Rows sum to 1 within 1e-12.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, TensorError> {
    check_2d("softmax_rows", x)?;
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Y = X + 1·bᵀ, broadcasting a length-n bias over each row of an m×n matrix.
pub fn add_row_bias(x: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    check_2d("add_row_bias", x)?;
    if b.rank() != 1 || b.numel() != x.cols() {
        return Err(TensorError::DimMismatch {
            op: "add_row_bias",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = x.cols();
    let bd = b.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bd[i % n])
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-form smooth GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_prime_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Norms below this are treated as degenerate: cosine is defined as 0 there.
pub const COSINE_NORM_EPS: f64 = 1e-12;

/// Cosine similarity of two equal-length vectors, 0 when either norm < 1e-12.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let na = norm(a);
    let nb = norm(b);
    if na < COSINE_NORM_EPS || nb < COSINE_NORM_EPS {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Mean over rows of per-row cosine similarity between two equally shaped
/// 2-d tensors.
pub fn mean_row_cosine(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    check_2d("mean_row_cosine", a)?;
    if a.shape() != b.shape() {
        return Err(TensorError::DimMismatch {
            op: "mean_row_cosine",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let k = a.rows();
    let sum: f64 = (0..k).map(|i| cosine(a.row(i), b.row(i))).sum();
    Ok(sum / k as f64)
}

/// log(Σ exp(x_i)) with max subtraction.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = t2(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = t2(&[vec![1.0, 2.0]]);
        let b = t2(&[vec![3.0], vec![4.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_dim_error() {
        let a = t2(&[vec![1.0, 2.0]]);
        let b = t2(&[vec![3.0, 4.0]]);
        assert!(matches!(
            matmul(&a, &b),
            Err(TensorError::DimMismatch { .. })
        ));
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = t2(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = t2(&[vec![7.0, 8.0], vec![9.0, 1.0], vec![2.0, 3.0]]);
        let c = matmul(&a, &b).unwrap();
        // A·B == matmul_nt(A, Bᵀ) == matmul_tn(Aᵀ, B)
        let bt = t2(&[vec![7.0, 9.0, 2.0], vec![8.0, 1.0, 3.0]]);
        let at = t2(&[vec![1.0, 4.0], vec![2.0, 5.0], vec![3.0, 6.0]]);
        assert_eq!(matmul_nt(&a, &bt).unwrap(), c);
        assert_eq!(matmul_tn(&at, &b).unwrap(), c);
    }

    #[test]
    fn softmax_uniform_row() {
        let x = t2(&[vec![0.0, 0.0, 0.0]]);
        let y = softmax_rows(&x).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_log_integers() {
        let x = t2(&[vec![1f64.ln(), 2f64.ln(), 3f64.ln()]]);
        let y = softmax_rows(&x).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (v, e) in y.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let x = t2(&[vec![1000.0, 0.0]]);
        let y = softmax_rows(&x).unwrap();
        assert!(y.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]);
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn gelu_behaves_like_identity_for_large_positive_input() {
        assert_eq!(gelu_scalar(10.0), 10.0);
        assert!(gelu_scalar(0.0).abs() < 1e-15);
        assert!(gelu_scalar(-10.0).abs() < 1e-8);
    }
}
