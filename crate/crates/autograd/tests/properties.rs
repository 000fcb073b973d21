use proptest::prelude::*;
use tokenlens_autograd::kernels;
use tokenlens_autograd::Tensor;

fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |data| Tensor::new(vec![rows, cols], data).unwrap())
}

proptest! {
    #[test]
    fn matmul_is_associative(
        a in tensor_strategy(3, 4),
        b in tensor_strategy(4, 2),
        c in tensor_strategy(2, 5),
    ) {
        let ab_c = kernels::matmul(&kernels::matmul(&a, &b).unwrap(), &c).unwrap();
        let a_bc = kernels::matmul(&a, &kernels::matmul(&b, &c).unwrap()).unwrap();
        for (x, y) in ab_c.data().iter().zip(a_bc.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_stay_positive(x in tensor_strategy(4, 6)) {
        let y = kernels::softmax_rows(&x).unwrap();
        for r in 0..4 {
            let row = y.row(r);
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn cosine_stays_in_unit_interval(
        a in proptest::collection::vec(-5.0f64..5.0, 8),
        b in proptest::collection::vec(-5.0f64..5.0, 8),
    ) {
        let c = kernels::cosine(&a, &b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }
}
