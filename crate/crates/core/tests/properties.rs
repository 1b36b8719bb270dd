use pointgame_core::geometry::{farthest_point_sample_from, knn, PointCloud, Vec3};
use pointgame_core::io::{load_xyz, save_xyz};
use pointgame_core::mae::{chamfer_distance, random_mask};
use pointgame_core::oracle;
use proptest::prelude::*;

fn cloud(max: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 1..max)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fps_matches_oracle(points in cloud(24), count in 1usize..24, first in 0usize..24) {
        let first = first % points.len();
        let got = farthest_point_sample_from(&PointCloud::new(points.clone()), count.min(points.len()), first).unwrap();
        prop_assert_eq!(got, oracle::fps_exhaustive(&points, count, first));
    }

    #[test]
    fn knn_matches_oracle(points in cloud(48), k in 0usize..48, q in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)) {
        let k = k.min(points.len());
        let query = Vec3::new(q.0, q.1, q.2);
        let got = knn(&PointCloud::new(points.clone()), &query, k).unwrap();
        prop_assert_eq!(got, oracle::knn_full_sort(&points, &query, k));
    }

    #[test]
    fn chamfer_symmetric_and_zero_on_identity(a in cloud(32), b in cloud(32)) {
        let ab = chamfer_distance(&a, &b).unwrap();
        let ba = chamfer_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert!((ab - oracle::chamfer_double_loop(&a, &b)).abs() <= 1e-9);
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mask_partitions_groups(g in 2usize..300, tenths in 1usize..10, seed in any::<u64>()) {
        let ratio = tenths as f64 / 10.0;
        let expected = oracle::masked_count_exact(g, tenths, 10);
        match random_mask(g, ratio, seed) {
            Ok(m) => {
                prop_assert_eq!(m.masked_indices.len(), expected);
                let mut all: Vec<usize> = m.masked_indices.iter().chain(&m.visible_indices).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..g).collect::<Vec<_>>());
            }
            Err(_) => prop_assert!(expected == 0 || expected >= g),
        }
    }

    #[test]
    fn xyz_round_trip_is_close(points in cloud(40)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        save_xyz(&path, &PointCloud::new(points.clone())).unwrap();
        let back = load_xyz(&path).unwrap();
        prop_assert_eq!(back.len(), points.len());
        for (p, q) in points.iter().zip(back.points()) {
            prop_assert!((p - q).amax() <= 1e-8);
        }
    }
}
