use binfactor::moment_estimation::{estimate_tetrachoric, BinaryMatrix};
use binfactor::spectral_subspace::{projection_of_span, subspace_discrepancy, sym_eigen, SubspaceBasis};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn binary_matrix(n: usize, p: usize) -> impl Strategy<Value = BinaryMatrix> {
    prop::collection::vec(0u8..=1, n * p).prop_map(move |data| BinaryMatrix::new(n, p, data).unwrap())
}

fn symmetric(p: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, p * p).prop_map(move |v| {
        let a = DMatrix::from_vec(p, p, v);
        (&a + a.transpose()) * 0.5
    })
}

fn full_rank(p: usize, d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, p * d)
        .prop_map(move |v| DMatrix::from_vec(p, d, v))
        .prop_filter("full column rank", move |x| {
            let sv = x.clone().svd(false, false).singular_values;
            sv.min() > 1e-3 * sv.max()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tetrachoric_is_symmetric_with_unit_diagonal(y in binary_matrix(40, 6)) {
        let (_, t) = estimate_tetrachoric(&y);
        for a in 0..6 {
            prop_assert_eq!(t.sigma[(a, a)], 1.0);
            for b in 0..6 {
                prop_assert_eq!(t.sigma[(a, b)], t.sigma[(b, a)]);
            }
        }
    }

    #[test]
    fn row_and_column_permutations(y in binary_matrix(30, 5), shift in 1usize..29, perm in Just([3usize, 0, 4, 1, 2])) {
        let (m, t) = estimate_tetrachoric(&y);

        let rows: Vec<Vec<u8>> = (0..30).map(|i| y.row((i + shift) % 30).to_vec()).collect();
        let (m_rows, t_rows) = estimate_tetrachoric(&BinaryMatrix::from_rows(&rows).unwrap());
        prop_assert_eq!(&m.c_hat, &m_rows.c_hat);
        prop_assert_eq!(&t.sigma, &t_rows.sigma);

        let cols: Vec<Vec<u8>> = (0..30).map(|i| perm.iter().map(|&j| y.get(i, j)).collect()).collect();
        let (m_cols, t_cols) = estimate_tetrachoric(&BinaryMatrix::from_rows(&cols).unwrap());
        for a in 0..5 {
            prop_assert_eq!(m_cols.c_hat[a], m.c_hat[perm[a]]);
            for b in 0..5 {
                prop_assert_eq!(t_cols.sigma[(a, b)], t.sigma[(perm[a], perm[b])]);
            }
        }
    }

    #[test]
    fn eigen_residual_and_reconstruction(a in symmetric(7)) {
        let e = sym_eigen(&a).unwrap();
        let scale = a.norm();
        for k in 0..7 {
            let v = e.vectors.column(k);
            prop_assert!((&a * v - v * e.values[k]).norm() <= 1e-8 * scale.max(1e-300));
        }
        prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let rebuilt = &e.vectors * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(e.values.clone())) * e.vectors.transpose();
        prop_assert!((rebuilt - &a).amax() <= 1e-8);
    }

    #[test]
    fn discrepancy_trace_identity_and_bounds(a in full_rank(8, 3), b in full_rank(8, 3)) {
        let dist = subspace_discrepancy(&a, &b).unwrap();
        let ha = projection_of_span(&a).unwrap();
        let hb = projection_of_span(&b).unwrap();
        let via_trace = 2.0 * (3.0 - (&ha * &hb).trace());
        prop_assert!((dist - via_trace).abs() <= 1e-10);
        prop_assert!((-1e-12..=6.0 + 1e-12).contains(&dist));
        // orthonormal bases from QR give the same projections
        let qa = SubspaceBasis::spanning(&a).unwrap();
        prop_assert!(subspace_discrepancy(qa.matrix(), &a).unwrap() <= 1e-10);
    }
}
