mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shellnet::geometry::{
    equidistant_shell_ids, knn_query, partition_shells_equidistant, partition_shells_fixed,
    sample_representatives, KnnSpace, PointCloud, SamplingStrategy,
};

#[test]
fn brute_force_oracles_agree() {
    common::geometry_oracles(11, 200, &[1, 2, 4, 8]).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_is_sorted_and_contains_the_center(seed: u64, n in 1usize..200, k_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = PointCloud::new(common::random_points(&mut rng, n)).unwrap();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let center = (seed as usize) % n;
        let set = knn_query(&cloud, center, k, KnnSpace::Coordinates).unwrap();
        prop_assert_eq!(set.len(), k);
        prop_assert!(set.distances.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(set.indices[0], center);
        let mut unique = set.indices.clone();
        unique.sort_unstable();
        unique.dedup();
        prop_assert_eq!(unique.len(), k);
    }

    #[test]
    fn partitions_cover_the_neighborhood(seed: u64, ss in 1usize..9, shells in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = PointCloud::new(common::random_points(&mut rng, 64)).unwrap();
        let k = ss * shells;
        prop_assume!(k <= 64);
        let set = knn_query(&cloud, 0, k, KnnSpace::Coordinates).unwrap();
        let fixed = partition_shells_fixed(&set, ss, shells).unwrap();
        prop_assert!(fixed.populations().iter().all(|&p| p == ss));
        prop_assert!(fixed.radii.windows(2).all(|w| w[0] <= w[1]));
        let eq = partition_shells_equidistant(&set, shells).unwrap();
        prop_assert_eq!(eq.populations().iter().sum::<usize>(), k);
        let flat: Vec<usize> = eq.shells.concat();
        prop_assert_eq!(flat, set.indices.clone());
        let ids = equidistant_shell_ids(&set.distances, shells);
        prop_assert!(ids.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sampling_is_seeded_and_distinct(seed: u64, n in 1usize..300, m_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = common::random_points(&mut rng, n);
        let m = 1 + ((n - 1) as f64 * m_frac) as usize;
        for strategy in [SamplingStrategy::Random, SamplingStrategy::Farthest] {
            let a = sample_representatives(&points, m, strategy, seed).unwrap();
            prop_assert_eq!(&a, &sample_representatives(&points, m, strategy, seed).unwrap());
            let mut unique = a.clone();
            unique.sort_unstable();
            unique.dedup();
            prop_assert_eq!(unique.len(), m);
        }
    }
}
