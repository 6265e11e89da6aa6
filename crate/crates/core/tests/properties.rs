use flowreg::autodiff::{Tape, Tensor};
use flowreg::data::{make_pair, sample_shape, PerturbationSpec, ShapeFamily, ShapeSpec};
use flowreg::geometry::{
    apply, compose, dualquat_from_transform, dualquat_to_transform, rotation_error_chordal, translation_error,
    DualQuaternion, PointCloud, RigidTransform,
};
use flowreg::icp::{icp, rigid_align_closed_form, IcpConfig, IcpVariant};
use flowreg::spatial::{farthest_point_sampling, NeighborIndex};
use flowreg::training::{loss_combined, loss_real, LossConfig};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = RigidTransform> {
    (vec3(1.0), 0.0..std::f64::consts::PI, vec3(5.0)).prop_filter_map("degenerate axis", |(axis, angle, t)| {
        (axis.norm() > 1e-3).then(|| RigidTransform::from_axis_angle(&axis.normalize(), angle, t))
    })
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec(vec3(1.0), 1..max)
}

fn assert_rotation(r: &Matrix3<f64>) {
    assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
    assert!((r.determinant() - 1.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dual_quaternion_round_trip(t in pose()) {
        let d = dualquat_from_transform(&t);
        prop_assert!(d.is_valid_pose());
        prop_assert!(d.real.w >= 0.0);
        prop_assert!(d.real.dot(&d.dual).abs() < 1e-9);
        let back = dualquat_to_transform(&d).unwrap();
        prop_assert!((back.rotation - t.rotation).norm() < 1e-9);
        prop_assert!((back.translation - t.translation).norm() < 1e-9);
    }

    #[test]
    fn dual_quaternion_sign_is_irrelevant(t in pose()) {
        let d = dualquat_from_transform(&t);
        let neg = DualQuaternion::new(d.real.scale(-1.0), d.dual.scale(-1.0));
        let back = dualquat_to_transform(&neg).unwrap();
        prop_assert!((back.rotation - t.rotation).norm() < 1e-9);
        prop_assert!((back.translation - t.translation).norm() < 1e-9);
    }

    #[test]
    fn compose_matches_sequential_apply(a in pose(), b in pose(), pts in cloud(20)) {
        let c = PointCloud::new(pts);
        let once = apply(&compose(&a, &b), &c);
        let twice = apply(&a, &apply(&b, &c));
        for (p, q) in once.points().iter().zip(twice.points()) {
            prop_assert!((p - q).norm() < 1e-9);
        }
    }

    #[test]
    fn compose_keeps_rotation_valid(a in pose(), b in pose()) {
        let c = compose(&a, &b);
        assert_rotation(&c.rotation);
        let i = compose(&c, &c.inverse());
        prop_assert!((i.rotation - Matrix3::identity()).norm() < 1e-9);
        prop_assert!(i.translation.norm() < 1e-9);
    }

    #[test]
    fn chordal_error_is_right_invariant(a in pose(), b in pose(), q in pose()) {
        let qr = RigidTransform::new(q.rotation, Vector3::zeros());
        let ra = RigidTransform::new(a.rotation * q.rotation, a.translation);
        let rb = RigidTransform::new(b.rotation * qr.rotation, b.translation);
        let lhs = rotation_error_chordal(&ra, &rb);
        let rhs = rotation_error_chordal(&a, &b);
        prop_assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn errors_vanish_on_equal_poses(a in pose()) {
        prop_assert!(translation_error(&a, &a) < 1e-9);
        prop_assert!(rotation_error_chordal(&a, &a) < 1e-9);
    }

    #[test]
    fn errors_are_positive_on_distinct_poses(a in pose(), d in vec3(1.0)) {
        prop_assume!(d.norm() > 1e-3);
        let b = RigidTransform::new(a.rotation, a.translation + d);
        prop_assert!(translation_error(&a, &b) > 1e-9);
        let c = compose(&a, &RigidTransform::from_axis_angle(&d.normalize(), 0.01, Vector3::zeros()));
        prop_assert!(rotation_error_chordal(&a, &c) > 1e-9);
    }

    #[test]
    fn radius_neighbors_match_brute_force(
        pts in cloud(128),
        center in vec3(1.2),
        radius in 0.05f64..1.5,
        cell in 0.05f64..1.0,
    ) {
        let index = NeighborIndex::new(&pts, cell).unwrap();
        let got: Vec<usize> = index.radius_neighbors(&center, radius, usize::MAX).iter().map(|n| n.index).collect();
        let mut want: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - center).norm_squared(), i))
            .filter(|&(d, _)| d < radius * radius)
            .collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<usize> = want.into_iter().map(|(_, i)| i).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn capped_neighbors_are_nearest_prefix(pts in cloud(128), center in vec3(1.0), cap in 1usize..20) {
        let index = NeighborIndex::new(&pts, 0.3).unwrap();
        let all = index.radius_neighbors(&center, 0.8, usize::MAX);
        let capped = index.radius_neighbors(&center, 0.8, cap);
        prop_assert_eq!(capped.len(), all.len().min(cap));
        for (a, b) in capped.iter().zip(&all) {
            prop_assert_eq!(a.index, b.index);
            prop_assert!(a.distance_squared.sqrt() < 0.8);
        }
    }

    #[test]
    fn fps_is_permutation_invariant(pts in cloud(96), k in 1usize..16, seed in any::<u64>()) {
        let k = k.min(pts.len());
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let mut s = seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffled: Vec<Vector3<f64>> = order.iter().map(|&i| pts[i]).collect();
        let a: Vec<Vector3<f64>> = farthest_point_sampling(&pts, k).unwrap().iter().map(|&i| pts[i]).collect();
        let b: Vec<Vector3<f64>> =
            farthest_point_sampling(&shuffled, k).unwrap().iter().map(|&i| shuffled[i]).collect();
        // Random continuous coordinates make distance ties measure-zero.
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fps_min_distance_is_non_increasing(pts in cloud(96), k in 2usize..24) {
        let k = k.min(pts.len());
        let picks = farthest_point_sampling(&pts, k).unwrap();
        let mut unique = picks.clone();
        unique.sort_unstable();
        unique.dedup();
        prop_assert_eq!(unique.len(), picks.len());
        let mut prev = f64::INFINITY;
        for j in 1..picks.len() {
            let d = picks[..j]
                .iter()
                .map(|&i| (pts[i] - pts[picks[j]]).norm_squared())
                .fold(f64::INFINITY, f64::min);
            prop_assert!(d <= prev);
            prev = d;
        }
    }

    #[test]
    fn loss_real_ignores_positive_scaling(t in pose(), p in pose(), s in 1e-3f64..1e3) {
        let gt = dualquat_from_transform(&t);
        let pred = dualquat_from_transform(&p);
        let scaled = DualQuaternion::new(pred.real.scale(s), pred.dual);
        let a = loss_real(&pred, &gt).unwrap();
        let b = loss_real(&scaled, &gt).unwrap();
        prop_assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }

    #[test]
    fn combined_loss_is_non_negative_and_zero_on_match(t in pose(), p in pose(), beta in 0.0f64..500.0) {
        let gt = dualquat_from_transform(&t);
        let pred = dualquat_from_transform(&p);
        let config = LossConfig { beta };
        let parts = loss_combined(&[pred], &[gt], &config).unwrap();
        prop_assert!(parts.total >= 0.0);
        let same = loss_combined(&[gt], &[gt], &config).unwrap();
        prop_assert!(same.total.abs() < 1e-18);
    }

    #[test]
    fn closed_form_alignment_is_proper(src in prop::collection::vec(vec3(1.0), 3..30), t in pose(), flip in any::<bool>()) {
        let mut dst: Vec<Vector3<f64>> = src.iter().map(|p| t.transform_point(p)).collect();
        if flip {
            for p in &mut dst {
                p.x = -p.x;
            }
        }
        if let Ok(fit) = rigid_align_closed_form(&src, &dst) {
            assert_rotation(&fit.rotation);
        }
    }

    #[test]
    fn make_pair_labels_are_canonical_poses(seed in any::<u64>()) {
        let shape = sample_shape(&ShapeSpec::new(ShapeFamily::Box { size: [1.0, 0.6, 0.3] }, 64), 1);
        let pair = make_pair(&shape, &PerturbationSpec::modelnet(), seed);
        assert_rotation(&pair.gt.rotation);
        prop_assert!(dualquat_from_transform(&pair.gt).real.w > 0.0);
        prop_assert_eq!(&pair, &make_pair(&shape, &PerturbationSpec::modelnet(), seed));
    }

    #[test]
    fn max_pool_gradient_sums_to_upstream(rows in 1usize..12, cols in 1usize..6, seed in any::<u64>()) {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let x: Vec<f64> = (0..rows * cols).map(|_| next()).collect();
        let w: Vec<f64> = (0..cols).map(|_| next()).collect();
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(rows, cols, x).unwrap());
        let wv = tape.constant(Tensor::new(cols, 1, w.clone()).unwrap());
        let pooled = tape.max_pool_set(xv).unwrap();
        let y = tape.matmul(pooled, wv).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let g = tape.grad_or_zeros(xv);
        for (c, wc) in w.iter().enumerate() {
            let col: f64 = (0..rows).map(|r| g.get(r, c)).sum();
            prop_assert_eq!(col, *wc);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn icp_residual_is_non_increasing(seed in any::<u64>(), angle in 0.0f64..0.3) {
        let shape = sample_shape(&ShapeSpec::new(ShapeFamily::Box { size: [1.0, 0.7, 0.4] }, 300), seed);
        let gt = RigidTransform::from_axis_angle(&Vector3::new(0.3, -0.5, 0.8).normalize(), angle, Vector3::new(0.05, -0.02, 0.03));
        let source = gt.inverse().apply(&shape);
        let config = IcpConfig::new(IcpVariant::PointToPoint, 0.5);
        let result = icp(&shape, &source, &config, &RigidTransform::identity()).unwrap();
        for w in result.residual_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", result.residual_trace);
        }
    }

    #[test]
    fn icp_from_ground_truth_stops_at_once(seed in any::<u64>()) {
        let shape = sample_shape(&ShapeSpec::new(ShapeFamily::Box { size: [1.0, 0.7, 0.4] }, 200), seed);
        let gt = RigidTransform::from_axis_angle(&Vector3::new(1.0, 2.0, 2.0).normalize(), 0.4, Vector3::new(0.1, 0.2, -0.1));
        let source = gt.inverse().apply(&shape);
        let config = IcpConfig::new(IcpVariant::PointToPoint, 0.5);
        let result = icp(&shape, &source, &config, &gt).unwrap();
        prop_assert!(result.converged);
        prop_assert_eq!(result.iterations, 1);
    }
}
