use dqslam_core::association::{solve_assignment, ScoreMatrix};
use dqslam_core::bundle_adjustment::lie::{so3_exp, so3_log};
use dqslam_core::bundle_adjustment::{odometry_residual, retract_ellipsoid, retract_pose, Vector9};
use dqslam_core::evaluation::da_accuracy;
use dqslam_core::geometry::{
    conic_to_bbox, ellipsoid_from_quadric, project_point, project_quadric, projection_matrix, quadric_center,
    quadric_from_ellipsoid, CameraIntrinsics, Ellipsoid, ImageBounds, Pose,
};
use dqslam_core::pipeline::keyframe_policy;
use nalgebra::{Vector3, Vector6};
use proptest::prelude::*;

fn vec3(s: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-s..s, -s..s, -s..s).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = Pose> {
    (vec3(3.0), vec3(3.0)).prop_map(|(w, t)| Pose::from_parts(w, t))
}

fn ellipsoid() -> impl Strategy<Value = Ellipsoid> {
    (vec3(3.0), vec3(1.0), (0.05f64..0.5, 0.05f64..0.5, 0.05f64..0.5))
        .prop_map(|(w, c, (a, b, d))| Ellipsoid::new(so3_exp(&w), c, Vector3::new(a, b, d)))
}

fn score_matrix() -> impl Strategy<Value = Vec<Vec<Option<f64>>>> {
    (1usize..6, 1usize..6).prop_flat_map(|(n, m)| {
        prop::collection::vec(prop::collection::vec(prop::option::weighted(0.7, 0.0f64..1.0), m), n)
    })
}

proptest! {
    #[test]
    fn pose_inverse_composes_to_identity(p in pose(), x in vec3(5.0)) {
        let back = p.inverse().transform_point(&p.transform_point(&x));
        prop_assert!((back - x).norm() < 1e-9);
        prop_assert!(p.compose(&p.inverse()).translation.norm() < 1e-9);
        prop_assert!((p.center() - p.inverse().translation).norm() < 1e-9);
    }

    #[test]
    fn so3_log_inverts_exp(w in vec3(3.0)) {
        prop_assume!(w.norm() < std::f64::consts::PI - 1e-3);
        prop_assert!((so3_log(&so3_exp(&w)) - w).norm() < 1e-9);
    }

    #[test]
    fn zero_increment_is_identity(p in pose(), e in ellipsoid()) {
        prop_assert_eq!(retract_pose(&p, &Vector6::zeros()), p);
        let r = retract_ellipsoid(&e, &Vector9::zeros());
        prop_assert!((r.center - e.center).norm() < 1e-15 && (r.semi_axes - e.semi_axes).norm() < 1e-15);
    }

    #[test]
    fn consistent_odometry_has_zero_residual(x in pose(), u in pose()) {
        prop_assert!(odometry_residual(&x, &u.compose(&x), &u).norm() < 1e-9);
    }

    #[test]
    fn quadric_round_trip_keeps_center(e in ellipsoid()) {
        let q = quadric_from_ellipsoid(&e);
        prop_assert!((quadric_center(&q) - e.center).norm() < 1e-9);
        let back = ellipsoid_from_quadric(&q).unwrap();
        prop_assert!((back.center - e.center).norm() < 1e-9);
        let vol = |s: &Vector3<f64>| s.x * s.y * s.z;
        prop_assert!((vol(&back.semi_axes) - vol(&e.semi_axes)).abs() < 1e-9);
    }

    #[test]
    fn projected_box_contains_projected_center(e in ellipsoid(), dir in vec3(1.0), dist in 2.0f64..5.0) {
        prop_assume!(dir.norm() > 0.1);
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480);
        let pose = Pose::look_at(e.center + dir.normalize() * dist, e.center, Vector3::z());
        prop_assume!(pose.is_valid(1e-9));
        let p = projection_matrix(&pose, &k);
        let b = conic_to_bbox(&project_quadric(&p, &quadric_from_ellipsoid(&e)), ImageBounds::Unbounded).unwrap();
        prop_assert!(b.contains(&project_point(&p, &e.center).unwrap()));
        for i in 0..3 {
            let mut u = Vector3::zeros();
            u[i] = 1.0;
            for s in [-1.0, 1.0] {
                let q = project_point(&p, &e.surface_point(&(u * s))).unwrap();
                prop_assert!(q.x >= b.xmin - 1e-6 && q.x <= b.xmax + 1e-6);
                prop_assert!(q.y >= b.ymin - 1e-6 && q.y <= b.ymax + 1e-6);
            }
        }
    }

    #[test]
    fn assignment_is_injective_and_beats_greedy(entries in score_matrix()) {
        let m = ScoreMatrix::from_entries(entries.clone());
        let a = solve_assignment(&m);
        let mut used = std::collections::BTreeSet::new();
        for (r, c) in a.matches.iter().enumerate() {
            if let Some(c) = c {
                prop_assert!(entries[r][*c].is_some());
                prop_assert!(used.insert(*c));
            }
        }
        let mut taken = vec![false; entries[0].len()];
        let mut greedy = 0.0;
        for row in &entries {
            let best = row.iter().enumerate().filter(|(c, e)| !taken[*c] && e.is_some()).max_by(|a, b| a.1.partial_cmp(b.1).unwrap());
            if let Some((c, e)) = best {
                taken[c] = true;
                greedy += e.unwrap();
            }
        }
        prop_assert!(a.objective >= greedy - 1e-5);
    }

    #[test]
    fn da_accuracy_ignores_label_names(
        pairs in prop::collection::vec((prop::option::of(0u64..5), prop::option::of(0u64..5)), 1..60),
        shift in 1u64..100,
    ) {
        let gt: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let assigned: Vec<_> = pairs.iter().map(|p| p.1).collect();
        let renamed: Vec<_> = assigned.iter().map(|a| a.map(|x| (x * 7 + shift) % 1000)).collect();
        match (da_accuracy(&gt, &assigned), da_accuracy(&gt, &renamed)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.r_da, b.r_da);
                prop_assert!((0.0..=1.0).contains(&a.accuracy));
                prop_assert!(a.r_da <= a.r_max);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "renaming changed solvability"),
        }
    }

    #[test]
    fn keyframe_count_is_ceiling(n in 1u64..500, t in 1u64..20) {
        prop_assert_eq!((0..n).filter(|&i| keyframe_policy(i, t)).count() as u64, n.div_ceil(t));
    }
}
