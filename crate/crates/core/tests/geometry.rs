use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpd::geometry::{
    crop_to_workspace, dist2, subsample_uniform, CameraModel, Point3, RigidTransform,
    SpatialIndex, Workspace,
};

fn brute_radius(points: &[Point3], q: &Point3, r: f64) -> Vec<usize> {
    let mut v: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, q), i))
        .filter(|(d, _)| *d <= r * r)
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v.into_iter().map(|(_, i)| i).collect()
}

fn brute_knn(points: &[Point3], q: &Point3, k: usize) -> Vec<usize> {
    let mut v: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(p, q), i)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v.truncate(k);
    v.into_iter().map(|(_, i)| i).collect()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    // Mix a flat slab with a compact blob so cell sizing sees both regimes.
    (0..n)
        .map(|i| {
            if i % 3 == 0 {
                [rng.random_range(-0.2..0.2), rng.random_range(0.0..0.4), rng.random_range(-0.2..0.2)]
            } else {
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.01..0.01)]
            }
        })
        .collect()
}

#[test]
fn knn_and_radius_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for inst in 0..100 {
        let n = rng.random_range(1..=2048);
        let pts = random_cloud(&mut rng, n);
        let r = rng.random_range(0.02..0.6);
        let radius_index = SpatialIndex::build(pts.clone(), r);
        let knn_index = SpatialIndex::build_for_knn(pts.clone(), 16);
        for _ in 0..8 {
            let q = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-0.5..0.5)];
            assert_eq!(radius_index.radius_neighbors(&q, r, None), brute_radius(&pts, &q, r), "instance {inst}");
            let k = rng.random_range(1..=24);
            assert_eq!(knn_index.knn(&q, k), brute_knn(&pts, &q, k), "instance {inst}");
        }
    }
}

#[test]
fn knn_on_512_points_with_k16() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<Point3> = (0..512)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect();
    let idx = SpatialIndex::build_for_knn(pts.clone(), 16);
    for p in pts.iter().take(64) {
        let got = idx.knn_with_dist2(p, 16);
        assert_eq!(got[0].0, 0.0);
        let ids: Vec<usize> = got.iter().map(|x| x.1).collect();
        assert_eq!(ids, brute_knn(&pts, p, 16));
    }
}

fn ring_camera(angle: f64) -> CameraModel {
    let eye = Vector3::new(2.5 * angle.cos(), -1.2, 2.5 * angle.sin());
    let pose = RigidTransform::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)).unwrap();
    CameraModel::with_fov(64, 48, 1.0, pose).unwrap()
}

#[test]
fn unproject_project_round_trip_over_many_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for c in 0..3 {
        let cam = ring_camera(c as f64 * 2.1);
        for _ in 0..10_000 {
            let u = rng.random_range(0.0..cam.width as f64);
            let v = rng.random_range(0.0..cam.height as f64);
            let d = rng.random_range(0.1..10.0);
            let p = cam.unproject(u, v, d).unwrap();
            let (pu, pv, pd) = cam.project(&p).unwrap();
            assert!((pu - u).abs() < 1e-5 && (pv - v).abs() < 1e-5 && (pd - d).abs() < 1e-5);
        }
    }
}

#[test]
fn pixel_rays_are_unit_and_contain_unprojections() {
    let cam = ring_camera(0.4);
    for j in 0..cam.height {
        for i in 0..cam.width {
            let (u, v) = CameraModel::pixel_center(i, j);
            let ray = cam.pixel_ray(u, v).unwrap();
            assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            let p = cam.unproject(u, v, 2.0).unwrap();
            let t = (p - ray.origin).dot(&ray.direction);
            assert!((ray.at(t) - p).norm() < 1e-9);
        }
    }
    // Corner of the image plane itself.
    let p = cam.unproject(0.0, 0.0, 2.0).unwrap();
    let ray = cam.pixel_ray(0.0, 0.0).unwrap();
    let t = (p - ray.origin).dot(&ray.direction);
    assert!((ray.at(t) - p).norm() < 1e-9);
}

#[test]
fn mujoco_workspace_crop() {
    let ws = Workspace::new([-1.0; 3], [1.0; 3]).unwrap();
    let pts = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
    assert_eq!(crop_to_workspace(&pts, &ws), vec![0]);
}

proptest! {
    #[test]
    fn crop_is_idempotent(pts in proptest::collection::vec(proptest::array::uniform3(-2.0f64..2.0), 0..200)) {
        let ws = Workspace::new([-1.0, -0.5, -1.0], [1.0, 1.5, 0.5]).unwrap();
        let once: Vec<Point3> = crop_to_workspace(&pts, &ws).into_iter().map(|i| pts[i]).collect();
        let twice: Vec<Point3> = crop_to_workspace(&once, &ws).into_iter().map(|i| once[i]).collect();
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.iter().all(|p| ws.contains(p)));
    }

    #[test]
    fn radius_query_equals_brute_force(
        pts in proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 1..300),
        q in proptest::array::uniform3(-1.2f64..1.2),
        r in 0.01f64..0.8,
        cap in proptest::option::of(1usize..5),
    ) {
        let idx = SpatialIndex::build(pts.clone(), r);
        let mut expect = brute_radius(&pts, &q, r);
        if let Some(c) = cap { expect.truncate(c); }
        prop_assert_eq!(idx.radius_neighbors(&q, r, cap), expect);
    }

    #[test]
    fn knn_equals_brute_force(
        pts in proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 1..300),
        q in proptest::array::uniform3(-3.0f64..3.0),
        k in 1usize..20,
    ) {
        let idx = SpatialIndex::build_for_knn(pts.clone(), 16);
        prop_assert_eq!(idx.knn(&q, k), brute_knn(&pts, &q, k));
    }

    #[test]
    fn subsample_returns_distinct_in_range(len in 0usize..500, n in 1usize..100, seed in any::<u64>()) {
        let s = subsample_uniform(len, n, seed);
        prop_assert_eq!(s.len(), len.min(n));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&i| i < len));
    }
}
