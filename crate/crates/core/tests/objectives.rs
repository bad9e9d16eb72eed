mod common;

use collabctx::adapter::MlpAdapter;
use collabctx::objective::{
    alignment_loss, phase_loss, uniformity_loss, uniformity_with_grad, LossConfig, Phase, PhaseInputs, UniformityMode,
};
use common::{check_phase_gradient, gradient_cases, l2_normalize, naive_uniformity, Toy};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn phase_gradients_match_finite_differences() {
    for case in gradient_cases(0..6) {
        let out = check_phase_gradient(case);
        assert!(out.forward_gap <= 1e-10, "{case:?}: forward gap {}", out.forward_gap);
        assert!(
            out.relative_error <= 1e-6,
            "{case:?}: relative error {}",
            out.relative_error
        );
    }
}

#[test]
fn two_point_uniformity_closed_form() {
    let rows = array![[1.0, 0.0], [0.0, 1.0]];
    let expected = ((2.0 + 2.0 * (-4.0f64).exp()) / 4.0).ln();
    for normalize in [true, false] {
        let v = uniformity_loss(rows.view(), normalize, UniformityMode::Squared);
        assert!((v - expected).abs() <= 1e-12, "{v} vs {expected}");
    }
}

#[test]
fn literal_and_squared_differ_but_agree_on_oracle() {
    let rows = array![[0.3, -0.2, 0.9], [0.1, 0.4, -0.5], [-0.7, 0.2, 0.1]];
    for normalize in [true, false] {
        let z = if normalize { l2_normalize(&rows) } else { rows.clone() };
        let sq = uniformity_loss(rows.view(), normalize, UniformityMode::Squared);
        let lit = uniformity_loss(rows.view(), normalize, UniformityMode::Literal);
        assert!((sq - naive_uniformity(&z, UniformityMode::Squared)).abs() < 1e-12);
        assert!((lit - naive_uniformity(&z, UniformityMode::Literal)).abs() < 1e-12);
        assert!((sq - lit).abs() > 1e-3);
    }
}

#[test]
fn normalization_changes_values() {
    let a = array![[3.0, 0.0], [0.0, 2.0]];
    let b = array![[1.0, 1.0], [2.0, 0.0]];
    let pairs = [(0, 0), (1, 1)];
    let on = alignment_loss(&pairs, a.view(), b.view(), true).unwrap();
    let off = alignment_loss(&pairs, a.view(), b.view(), false).unwrap();
    assert!((on - off).abs() > 1e-3);
    let u_on = uniformity_loss(a.view(), true, UniformityMode::Squared);
    let u_off = uniformity_loss(a.view(), false, UniformityMode::Squared);
    assert!((u_on - u_off).abs() > 1e-3);
}

#[test]
fn zero_rows_get_zero_gradient_when_normalizing() {
    let rows = array![[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]];
    let (_, g) = uniformity_with_grad(rows.view(), true, UniformityMode::Squared);
    assert_eq!(g.row(0).to_vec(), vec![0.0, 0.0]);
}

#[test]
fn identity_adapter_user_phase_sees_raw_items() {
    // With MLP(x) = x the user-phase loss is computed over the same propagated
    // tables as the item phase, so only the roles of the two sides differ.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let toy = Toy::random(&mut rng, 4, 5, 3);
    let graph = toy.graph();
    let cfg = LossConfig::default();
    let identity = MlpAdapter::identity(3);
    let inputs = PhaseInputs {
        graph: &graph,
        user_layer0: toy.u0.view(),
        item_contextual: toy.x.view(),
        adapter: &identity,
        layers: 2,
        loss: &cfg,
    };
    let batch: Vec<_> = toy.edges.iter().copied().take(4).collect();
    let item = phase_loss(Phase::ItemTutoring, &batch, &inputs, &mut rng).unwrap();
    let user = phase_loss(Phase::UserTutoring, &batch, &inputs, &mut rng).unwrap();
    assert!((item.alignment - user.alignment).abs() < 1e-12);
}

proptest! {
    #[test]
    fn uniformity_is_non_positive(
        flat in prop::collection::vec(-5.0f64..5.0, 2..40),
        normalize in any::<bool>(),
        literal in any::<bool>(),
    ) {
        let n = flat.len() / 2;
        let rows = Array2::from_shape_vec((n, 2), flat[..2 * n].to_vec()).unwrap();
        let mode = if literal { UniformityMode::Literal } else { UniformityMode::Squared };
        prop_assert!(uniformity_loss(rows.view(), normalize, mode) <= 1e-12);
    }

    #[test]
    fn coinciding_rows_and_endpoints_give_zero(
        row in prop::collection::vec(-5.0f64..5.0, 3),
        copies in 1usize..6,
        normalize in any::<bool>(),
    ) {
        let rows = Array2::from_shape_fn((copies, 3), |(_, d)| row[d]);
        for mode in [UniformityMode::Squared, UniformityMode::Literal] {
            prop_assert!(uniformity_loss(rows.view(), normalize, mode).abs() <= 1e-12);
        }
        let pairs: Vec<(usize, usize)> = (0..copies).map(|r| (r, copies - 1 - r)).collect();
        prop_assert!(alignment_loss(&pairs, rows.view(), rows.view(), normalize).unwrap().abs() <= 1e-12);
    }
}
