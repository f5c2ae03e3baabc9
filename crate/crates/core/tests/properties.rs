//! Cross-module invariants over randomized inputs.

use diffluid_core::checkpoint::{decode_state, encode_state, CheckpointStore};
use diffluid_core::mpm::{contact_weight, coulomb_project, kernel_weights, p2g, KernelWeights};
use diffluid_core::objectives::reward_from_loss;
use diffluid_core::optimize::{expand_window, ActionTrajectory, ExpandSchedule};
use diffluid_core::scene::{build_scene, BodySpec, ContactModel, Scene, SceneSpec, SimConfig, SimState};
use diffluid_core::sdf::{Pose, SdfPrimitive, Shape};
use diffluid_core::svd::svd;
use diffluid_core::{Matrix, Vector};
use proptest::prelude::*;

fn mat2() -> impl Strategy<Value = Matrix<2>> {
    proptest::array::uniform4(-2.0f64..2.0).prop_map(|a| Matrix([[a[0], a[1]], [a[2], a[3]]]))
}

fn mat3() -> impl Strategy<Value = Matrix<3>> {
    proptest::array::uniform9(-2.0f64..2.0).prop_map(|a| Matrix([[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]]))
}

fn is_rotation<const D: usize>(m: &Matrix<D>) -> bool {
    (m.transpose() * *m - Matrix::identity()).max_abs() < 1e-12
}

fn water_block() -> (Scene<2>, SimState<2>) {
    let mut spec = SceneSpec::new(SimConfig::new(24, 1.0, 1e-3)).with_preset("water");
    let box_ = SdfPrimitive::new(Shape::Box { half_extents: Vector([0.1, 0.08]) }, Pose::from_translation(Vector([0.5, 0.4])));
    spec.bodies.push(BodySpec::shape("water", "water", box_, 4));
    build_scene(&spec).unwrap()
}

proptest! {
    #[test]
    fn svd_is_canonical_2d(a in mat2()) {
        let s = svd(&a);
        prop_assert!((s.reconstruct() - a).max_abs() <= 1e-12 * a.max_abs().max(1.0));
        prop_assert!(s.sigma.0[0] >= s.sigma.0[1] && s.sigma.0[1] >= 0.0);
        prop_assert!(is_rotation(&s.u) && is_rotation(&s.v));
        prop_assert!((s.v.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_is_canonical_3d(a in mat3()) {
        let s = svd(&a);
        prop_assert!((s.reconstruct() - a).max_abs() <= 1e-11 * a.max_abs().max(1.0));
        prop_assert!(s.sigma.0[0] >= s.sigma.0[1] && s.sigma.0[1] >= s.sigma.0[2] && s.sigma.0[2] >= 0.0);
        prop_assert!(is_rotation(&s.u) && is_rotation(&s.v));
        if a.determinant() >= 0.0 {
            prop_assert!((s.u.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_partitions_unity_with_zero_first_moment(x in 0.2f64..0.8, y in 0.2f64..0.8) {
        let p = Vector([x, y]);
        let k = kernel_weights(&p, &Vector::zeros(), 1.0 / 32.0);
        let mut total = 0.0;
        let mut moment = Vector::<2>::zeros();
        let mut grad = Vector::<2>::zeros();
        for s in 0..KernelWeights::<2>::STENCIL {
            let (_, w, dw, dpos) = k.entry(s, 1.0 / 32.0);
            prop_assert!(w >= 0.0);
            total += w;
            moment += dpos * w;
            grad += dw;
        }
        prop_assert!((total - 1.0).abs() < 1e-14);
        prop_assert!(moment.max_abs() < 1e-15);
        prop_assert!(grad.max_abs() < 1e-12);
    }

    #[test]
    fn p2g_conserves_mass_and_momentum(vx in -1.0f64..1.0, vy in -1.0f64..1.0, c in proptest::array::uniform4(-3.0f64..3.0), swirl in -1.0f64..1.0) {
        let (scene, mut state) = water_block();
        let mut mass = 0.0;
        let mut momentum = Vector::<2>::zeros();
        for (i, (p, info)) in state.particles.iter_mut().zip(&scene.info).enumerate() {
            p.v = Vector([vx + swirl * (i % 7) as f64 * 0.1, vy]);
            p.c = Matrix([[c[0], c[1]], [c[2], c[3]]]);
            p.f = Matrix([[1.0 + 0.01 * c[0], 0.0], [0.0, 1.0 - 0.01 * c[3]]]);
            mass += info.mass;
            momentum += p.v * info.mass;
        }
        let active = vec![true; state.particles.len()];
        let grid = p2g(&scene, &state.particles, &active).unwrap();
        prop_assert!((grid.total_mass() - mass).abs() <= 1e-12 * mass);
        prop_assert!((grid.total_momentum() - momentum).max_abs() <= 1e-12 * mass);
    }

    #[test]
    fn coulomb_projection_never_penetrates_or_speeds_up(v in proptest::array::uniform2(-3.0f64..3.0), angle in 0.0f64..6.3, mu in 0.0f64..2.0) {
        let n = Vector([angle.cos(), angle.sin()]);
        let v = Vector(v);
        let out = coulomb_project(&v, &n, mu);
        prop_assert!(out.dot(&n) >= -1e-12);
        prop_assert!(out.norm() <= v.norm() + 1e-12);
        prop_assert_eq!(coulomb_project(&v, &n, f64::INFINITY), Vector::zeros());
    }

    #[test]
    fn contact_weight_is_a_monotone_fraction(d0 in -1.0f64..6.0, step in 0.0f64..1.0, threshold in 0.5f64..6.0) {
        let model = ContactModel::Soft { threshold };
        let (a, _) = contact_weight(model, d0);
        let (b, _) = contact_weight(model, d0 + step);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        prop_assert!(b <= a);
    }

    #[test]
    fn snapshots_round_trip(vx in -1.0f64..1.0, t in 0.0f64..10.0, k in 0usize..1000) {
        let (_, mut state) = water_block();
        state.substep = k;
        state.time = t;
        for p in &mut state.particles {
            p.v = Vector([vx, -vx * 0.5]);
        }
        let bytes = encode_state(&state);
        prop_assert_eq!(decode_state::<2>(&bytes, 0).unwrap(), state);
    }

    #[test]
    fn snapshot_count_is_ceil_plus_one(t in 1usize..2000, stride in 1usize..200) {
        prop_assert_eq!(CheckpointStore::expected_count(t, stride), t.div_ceil(stride) + 1);
    }

    #[test]
    fn trajectory_params_round_trip_within_bounds(values in proptest::collection::vec(proptest::array::uniform6(-3.0f64..3.0), 1..8), len in 1usize..20) {
        let mut t = ActionTrajectory::constant(values.len(), len, [0.0; 6], [true, true, false, false, false, true], 2.0);
        let p: Vec<f64> = values.iter().flat_map(|v| [v[0], v[1], v[5]]).collect();
        t.set_params(&p);
        let q = t.params();
        prop_assert_eq!(q.len(), p.len());
        for (a, b) in p.iter().zip(&q) {
            prop_assert_eq!(a.clamp(-2.0, 2.0), *b);
        }
        prop_assert_eq!(t.expand().len(), t.horizon());
        let ones = vec![[1.0; 6]; t.horizon()];
        prop_assert!(t.reduce_gradient(&ones).iter().all(|g| *g == len as f64));
    }

    #[test]
    fn window_only_grows_and_stops_at_horizon(losses in proptest::collection::vec(0.0f64..10.0, 1..200), horizon in 1usize..600) {
        let mut s = ExpandSchedule::new(horizon);
        s.patience = 5;
        let mut recent = Vec::new();
        let mut last = s.window;
        for l in losses {
            recent.push(l);
            if expand_window(&mut s, &recent) {
                recent.clear();
            }
            prop_assert!(s.window >= last && s.window <= horizon);
            last = s.window;
        }
    }

    #[test]
    fn reward_order_reverses_loss_order(a in -10.0f64..10.0, b in -10.0f64..10.0, c1 in -5.0f64..5.0, c2 in 0.01f64..5.0) {
        prop_assert_eq!(a < b, reward_from_loss(a, c1, c2) > reward_from_loss(b, c1, c2));
    }
}
