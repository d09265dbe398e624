use cardiored_core::deim::{select_indices, DeimOperator};
use cardiored_core::forward::Conductivity;
use cardiored_core::pod::{Field, PodBasis};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn orthonormal(n: usize, m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * m).prop_map(move |v| DMatrix::from_vec(n, m, v).qr().q())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn indices_are_distinct(z in orthonormal(25, 7)) {
        let (p, _) = select_indices(&z).unwrap();
        let mut sorted = p.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), p.len());
    }

    #[test]
    fn interpolant_matches_at_selected_rows(
        z in orthonormal(18, 5),
        f in prop::collection::vec(-10.0f64..10.0, 18),
    ) {
        let b = PodBasis::from_modes(z, DVector::zeros(18), Conductivity::new(3.0, 1.0), Field::Iion).unwrap();
        let op = DeimOperator::new(&b).unwrap();
        let rec = op.reconstruct(&op.gather(&f)).unwrap();
        for &p in &op.indices {
            prop_assert!((rec[p] - f[p]).abs() <= 1e-10 * f[p].abs().max(1.0));
        }
    }

    #[test]
    fn inverse_is_exact(z in orthonormal(20, 5)) {
        let (p, inv) = select_indices(&z).unwrap();
        let ptz = DMatrix::from_fn(5, 5, |k, j| z[(p[k], j)]);
        prop_assert!((&inv * &ptz - DMatrix::<f64>::identity(5, 5)).amax() < 1e-8);
    }
}
