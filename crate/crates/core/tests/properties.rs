use edcnn::convops::{contracting_conv, conv_compose, expansive_conv};
use edcnn::factorize::{
    compile_dense_layer, factor_filter, matrix_to_sequence, BiasSynthesis, SymbolPolynomial,
};
use edcnn::primitives::{pool, toeplitz, toeplitz_from_coeffs};
use edcnn::{Filter, Matrix, PoolingSpec};
use proptest::collection::vec;
use proptest::prelude::*;

/// Schoolbook polynomial product, the reference for every convolution below.
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn coeffs(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    vec(-2.0..2.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn composition_commutes(a in coeffs(3..=9), b in coeffs(3..=9)) {
        let (fa, fb) = (Filter::new(a.clone()).unwrap(), Filter::new(b.clone()).unwrap());
        let ab = conv_compose(&fa, &fb);
        let ba = conv_compose(&fb, &fa);
        prop_assert!(max_abs_diff(ab.coeffs(), ba.coeffs()) <= 1e-13);
        prop_assert!(max_abs_diff(ab.coeffs(), &poly_mul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn expansive_is_polynomial_product(w in coeffs(3..=7), v in coeffs(1..=20)) {
        let out = expansive_conv(&Filter::new(w.clone()).unwrap(), &v).unwrap();
        prop_assert!(max_abs_diff(&out, &poly_mul(&w, &v)) <= 1e-12);
    }

    #[test]
    fn contracting_is_the_valid_part(w in coeffs(3..=5), v in coeffs(8..=20)) {
        let s = w.len() - 1;
        let out = contracting_conv(&Filter::new(w.clone()).unwrap(), &v).unwrap();
        let full = poly_mul(&w, &v);
        prop_assert_eq!(out.len(), v.len() - s);
        prop_assert!(max_abs_diff(&out, &full[s..v.len()]) <= 1e-12);
    }

    #[test]
    fn expansive_matches_toeplitz(w in coeffs(3..=6), v in coeffs(1..=15)) {
        let f = Filter::new(w.clone()).unwrap();
        let t = toeplitz(&f, v.len(), v.len() + f.s()).unwrap();
        let via_matrix = t.mul_vec(&v).unwrap();
        prop_assert!(max_abs_diff(&via_matrix, &expansive_conv(&f, &v).unwrap()) <= 1e-12);
    }

    #[test]
    fn expansive_is_linear(
        w in coeffs(3..=5),
        pair in (1usize..=12).prop_flat_map(|n| (vec(-2.0..2.0f64, n), vec(-2.0..2.0f64, n))),
        alpha in -3.0..3.0f64,
    ) {
        let (x, y) = pair;
        let f = Filter::new(w).unwrap();
        let combined: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + b).collect();
        let lhs = expansive_conv(&f, &combined).unwrap();
        let cx = expansive_conv(&f, &x).unwrap();
        let cy = expansive_conv(&f, &y).unwrap();
        let rhs: Vec<f64> = cx.iter().zip(&cy).map(|(a, b)| alpha * a + b).collect();
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-11);
    }

    #[test]
    fn pooling_reads_strided_entries(v in coeffs(4..=30), stride in 1usize..=4, offset in 0usize..=3) {
        let spec = PoolingSpec::new(v.len(), stride, offset.min(v.len())).unwrap();
        let pooled = pool(&spec, &v).unwrap();
        for (k, got) in pooled.iter().enumerate() {
            let idx = (k + 1) * stride + spec.offset;
            let want = if idx <= v.len() { v[idx - 1] } else { 0.0 };
            prop_assert_eq!(*got, want);
        }
    }

    #[test]
    fn matrix_rows_are_read_off_the_sequence(
        (n, d, data) in (1usize..=6, 1usize..=6)
            .prop_flat_map(|(n, d)| (Just(n), Just(d), vec(-1.0..1.0f64, n * d)))
    ) {
        let w = Matrix::from_row_major(n, d, data).unwrap();
        let u = matrix_to_sequence(&w);
        let t = toeplitz_from_coeffs(&u.coeffs, d, n * d + d).unwrap();
        for j in 0..n {
            let row = t.row((j + 1) * d - 1);
            prop_assert_eq!(row, w.row(j));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn factorization_reconstructs(u in coeffs(2..=40), s in prop::sample::select(vec![2usize, 3, 5])) {
        prop_assume!(u.iter().any(|c| c.abs() > 1e-3));
        let cascade = factor_filter(&SymbolPolynomial::new(u.clone()), s).unwrap();
        let degree = u.len() - 1;
        prop_assert!(cascade.len() <= degree.div_ceil(s - 1).max(1));
        prop_assert!(cascade.filters.iter().all(|f| f.s() == s));
        let product = cascade
            .filters
            .iter()
            .fold(vec![1.0], |acc, f| poly_mul(&acc, f.coeffs()));
        let scale = u.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let err = (0..product.len().max(u.len()))
            .map(|k| (product.get(k).copied().unwrap_or(0.0) - u.get(k).copied().unwrap_or(0.0)).abs())
            .fold(0.0, f64::max)
            / scale;
        prop_assert!(err <= 1e-8, "error {err:e}");
    }

    #[test]
    fn compiled_layer_matches_relu_affine(
        (n, d, data, theta) in (1usize..=6, 1usize..=6).prop_flat_map(|(n, d)| {
            (Just(n), Just(d), vec(-1.0..1.0f64, n * d), vec(-1.0..1.0f64, n))
        }),
        s in 2usize..=4,
        probe in vec(0.0..1.0f64, 6),
    ) {
        let w = Matrix::from_row_major(n, d, data).unwrap();
        let stage = compile_dense_layer(&w, &theta, s, 1.0, BiasSynthesis::Tight, true).unwrap();
        let x = &probe[..d];
        let want: Vec<f64> = (0..n)
            .map(|j| (w.row(j).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + theta[j]).max(0.0))
            .collect();
        let got = stage.forward(x, 0).unwrap();
        prop_assert!(max_abs_diff(&got, &want) <= 1e-8);
        prop_assert!(stage.depth() * (s + 1) <= 3 * n * d.max(1) + s + 1);
    }
}

#[test]
fn truncation_clamps_and_rejects_bad_levels() {
    use edcnn::train::truncate;
    assert_eq!(truncate(1.0, 3.0).unwrap(), 1.0);
    assert_eq!(truncate(1.0, -3.0).unwrap(), -1.0);
    assert_eq!(truncate(2.0, 0.5).unwrap(), 0.5);
    assert!(truncate(0.0, 1.0).is_err());
    assert!(truncate(-1.0, 1.0).is_err());
    assert!(truncate(f64::NAN, 1.0).is_err());
}
