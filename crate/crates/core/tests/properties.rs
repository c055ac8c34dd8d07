use nalgebra::{Matrix3, Matrix3xX, Rotation3, Unit, Vector2, Vector3};
use proptest::prelude::*;

use vvn::factorization::{weighted_objective, ObservationMatrix};
use vvn::geometry::{is_mirrored_id, mirrored_id, procrustes_align, project, rotation_distance, view_angles, view_rotation};
use vvn::harness::{error_vs_viewpoint_curve, PairError};
use vvn::network::{align_dijkstra, align_fast, compress, random_docking, random_network, Cost, RandomNetworkSpec};
use vvn::warp::{eval_tps, fit_tps};
use vvn::Camera;

fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, 0.0..3.1f64).prop_filter_map("axis", |(x, y, z, t)| {
        let v = Vector3::new(x, y, z);
        (v.norm() > 1e-3).then(|| Rotation3::from_axis_angle(&Unit::new_normalize(v), t).into_inner())
    })
}

fn point(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn camera() -> impl Strategy<Value = Camera<f64>> {
    (rotation(), 0.1..5.0f64, -100.0..100.0f64, -100.0..100.0f64)
        .prop_map(|(r, s, x, y)| Camera::new(r, s, Vector2::new(x, y)).unwrap())
}

proptest! {
    #[test]
    fn projection_is_affine(cam in camera(), a in point(50.0), b in point(50.0), t in 0.0..1.0f64) {
        let m = cam.project_point(&(a * t + b * (1.0 - t)));
        let n = cam.project_point(&a) * t + cam.project_point(&b) * (1.0 - t);
        prop_assert!((m - n).norm() < 1e-10);
    }

    #[test]
    fn projection_ignores_depth(cam in camera(), p in point(50.0), d in -50.0..50.0f64) {
        let axis = cam.rotation().row(2).transpose();
        let moved = project(&cam, &[p, p + axis * d]).unwrap();
        prop_assert!((moved[0] - moved[1]).norm() < 1e-9);
    }

    #[test]
    fn rotation_distance_is_invariant(a in rotation(), b in rotation(), g in rotation()) {
        let d = rotation_distance(&a, &b).unwrap();
        prop_assert!(d >= 0.0 && d <= std::f64::consts::SQRT_2 * std::f64::consts::PI + 1e-9);
        prop_assert!((d - rotation_distance(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((d - rotation_distance(&(g * a), &(g * b)).unwrap()).abs() < 1e-7);
        prop_assert!((d - rotation_distance(&(a * g), &(b * g)).unwrap()).abs() < 1e-7);
    }

    #[test]
    fn view_angles_round_trip(az in -3.1..3.1f64, el in -1.4..1.4f64) {
        let (a, e) = view_angles(&view_rotation(az, el));
        prop_assert!((a - az).abs() < 1e-9 && (e - el).abs() < 1e-9);
    }

    #[test]
    fn procrustes_undoes_similarities(
        pts in prop::collection::vec(point(10.0), 4..30),
        r in rotation(),
        s in 0.2..5.0f64,
        t in point(20.0),
    ) {
        let moved: Vec<_> = pts.iter().map(|p| r * p * s + t).collect();
        if let Ok((tf, rmse)) = procrustes_align(&pts, &moved) {
            prop_assert!(rmse < 1e-8 * s.max(1.0));
            prop_assert!((tf.scale - s).abs() < 1e-8);
        }
    }

    #[test]
    fn tps_interpolates(seed in prop::collection::vec((0u8..30, 0u8..30, -10.0..10.0f64, -10.0..10.0f64), 3..12)) {
        let mut src: Vec<Vector2<f64>> = Vec::new();
        let mut dst = Vec::new();
        for (x, y, dx, dy) in seed {
            let p = Vector2::new(x as f64 * 5.0, y as f64 * 5.0);
            if src.iter().all(|q| *q != p) {
                src.push(p);
                dst.push(p + Vector2::new(dx, dy));
            }
        }
        if let Ok(tps) = fit_tps(&src, &dst, 0.0) {
            for (a, b) in eval_tps(&tps, &src).unwrap().iter().zip(&dst) {
                prop_assert!((a - b).norm() < 1e-7);
            }
            prop_assert!(tps.bending_energy() >= -1e-9);
        }
    }

    #[test]
    fn integer_row_weights_match_duplication(
        counts in prop::collection::vec(1usize..4, 2..6),
        cams in prop::collection::vec(camera(), 6),
        pts in prop::collection::vec(point(5.0), 3..10),
        holes in prop::collection::vec(any::<bool>(), 60),
    ) {
        let f = counts.len();
        let mut obs = ObservationMatrix::new(f, pts.len());
        for i in 0..f {
            for (k, p) in pts.iter().enumerate() {
                if !holes[(i * pts.len() + k) % holes.len()] {
                    obs.set(i, k, cams[(i + 1) % 6].project_point(&(p * 1.1)));
                }
            }
        }
        obs.set_row_weights(counts.iter().map(|&c| c as f64).collect()).unwrap();
        let shape = Matrix3xX::from_columns(&pts);
        let motions = &cams[..f];
        let dup_motions: Vec<_> = motions.iter().zip(&counts).flat_map(|(m, &c)| std::iter::repeat_n(*m, c)).collect();
        let a = weighted_objective(&obs, motions, &shape);
        let b = weighted_objective(&obs.duplicated_rows(&counts), &dup_motions, &shape);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn mirrored_ids_are_involutive(id in "[a-z0-9_]{1,12}") {
        prop_assert!(!is_mirrored_id(&id));
        prop_assert!(is_mirrored_id(&mirrored_id(&id)));
        prop_assert_eq!(mirrored_id(&mirrored_id(&id)), id);
    }

    #[test]
    fn costs_round_trip(w in 0.0..Cost::MAX_REAL) {
        let c = Cost::from_real(w).unwrap();
        prop_assert!((c.to_real() - w).abs() <= 0.5 / Cost::SCALE);
        prop_assert!(c.plus(Cost::INFINITE) == Cost::INFINITE);
    }

    #[test]
    fn curves_count_every_pair(pairs in prop::collection::vec((0.0..=180.0f64, 0.0..100.0f64), 1..200), width in 5.0..90.0f64) {
        let pairs: Vec<PairError> = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (v, e))| PairError { method: "m".into(), test_id: "t".into(), train_id: i.to_string(), viewpoint_deg: v, error: e })
            .collect();
        let bins = error_vs_viewpoint_curve(&pairs, width).unwrap();
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), pairs.len());
        prop_assert_eq!(bins[0].lo, 0.0);
        prop_assert!(bins.last().unwrap().hi >= 180.0);
        let mean = pairs.iter().map(|p| p.error).sum::<f64>() / pairs.len() as f64;
        let pooled = bins.iter().filter(|b| b.count > 0).map(|b| b.mean_error * b.count as f64).sum::<f64>() / pairs.len() as f64;
        prop_assert!((mean - pooled).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fast_alignment_matches_shortest_paths(
        instances in 2usize..12,
        min_points in 1usize..30,
        extra in 0usize..20,
        k in 1usize..5,
        components in 1usize..3,
        integer_weights in any::<bool>(),
        test_points in 1usize..10,
        n_dock in 1usize..4,
        seed in any::<u64>(),
    ) {
        let spec = RandomNetworkSpec { instances, min_points, max_points: min_points + extra, k, components, integer_weights };
        let net = random_network(&spec, seed);
        let d = random_docking(&net, test_points, n_dock, integer_weights, seed ^ 1);
        prop_assert_eq!(align_fast(&compress(&net), &d).unwrap(), align_dijkstra(&net, &d).unwrap());
    }
}
