use cardiored_core::forward::Conductivity;
use cardiored_core::pod::{build_pod, projection_error, Field, RankRule, SnapshotMatrix};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix(n: usize, m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * m).prop_map(move |v| DMatrix::from_vec(n, m, v))
}

fn random_orthonormal(v: Vec<f64>, n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_vec(n, k, v).qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn modes_are_orthonormal(y in matrix(30, 10), n_modes in 1usize..9) {
        let snaps = SnapshotMatrix::from_matrix(y, Conductivity::new(3.0, 1.0), Field::U, true);
        let b = build_pod(&snaps, RankRule::Fixed(n_modes)).unwrap();
        prop_assert!(b.orthonormality_error() < 1e-10);
        prop_assert!(b.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn error_equals_tail_energy(y in matrix(25, 8), n_modes in 1usize..7) {
        let snaps = SnapshotMatrix::from_matrix(y, Conductivity::new(3.0, 1.0), Field::U, true);
        let b = build_pod(&snaps, RankRule::Fixed(n_modes)).unwrap();
        let tail: f64 = b.singular_values[b.rank()..].iter().map(|s| s * s).sum();
        let err = projection_error(&snaps.data, &b.modes);
        // rank-deficient draws leave a tail at round-off level
        let total: f64 = b.singular_values.iter().map(|s| s * s).sum();
        prop_assert!((err - tail).abs() <= 1e-8 * tail.max(1e-12 * total));
    }

    #[test]
    fn no_random_basis_beats_pod(
        y in matrix(20, 12),
        trials in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 20 * 3), 100),
    ) {
        let snaps = SnapshotMatrix::from_matrix(y, Conductivity::new(3.0, 1.0), Field::U, true);
        let b = build_pod(&snaps, RankRule::Fixed(3)).unwrap();
        let best = projection_error(&snaps.data, &b.modes);
        for t in trials {
            let z = random_orthonormal(t, 20, 3);
            prop_assert!(projection_error(&snaps.data, &z) >= best - 1e-10);
        }
    }
}
