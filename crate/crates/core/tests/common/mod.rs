#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use shellnet::geometry::{Labels, Point, PointCloud};
use shellnet::network::{LayerSpec, NetworkConfig, Task};

pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect()
}

/// Points on a coarse integer grid, so distance ties and duplicates are common.
pub fn grid_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-3..=3) as f32,
                rng.random_range(-3..=3) as f32,
                rng.random_range(-3..=3) as f32,
            ]
        })
        .collect()
}

pub fn labeled_cloud(rng: &mut ChaCha8Rng, n: usize, task: Task, k: u32) -> PointCloud {
    let labels = match task {
        Task::Classification => Labels::Cloud(rng.random_range(0..k)),
        Task::Segmentation => Labels::Points((0..n).map(|_| rng.random_range(0..k)).collect()),
    };
    PointCloud::new(random_points(rng, n))
        .unwrap()
        .with_labels(labels)
        .unwrap()
}

/// A three-level classifier for 128-point inputs that is valid for shell
/// sizes up to 32.
pub fn small_classifier(shell_size: usize, num_outputs: usize) -> NetworkConfig {
    let spec = |points, shells, channels| LayerSpec {
        points,
        shells,
        channels,
    };
    NetworkConfig {
        layers: vec![spec(64, 2, 16), spec(32, 1, 32), spec(8, 1, 64)],
        shell_size,
        lift_widths: vec![8, 16],
        head_widths: vec![32],
        num_outputs,
        ..NetworkConfig::classification()
    }
}

pub fn small_segmenter(shell_size: usize, num_outputs: usize) -> NetworkConfig {
    NetworkConfig {
        task: Task::Segmentation,
        decoder: true,
        head_widths: Vec::new(),
        final_channels: 16,
        ..small_classifier(shell_size, num_outputs)
    }
}

fn dist2(a: &Point, b: &Point) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum()
}

/// `k` nearest by repeated linear scans; the first strict minimum wins, so
/// ties resolve to the lowest index.
pub fn brute_knn(points: &[Point], query: &Point, k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut taken = vec![false; points.len()];
    let mut indices = Vec::with_capacity(k);
    let mut distances = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(p, query);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let (d, i) = best.unwrap();
        taken[i] = true;
        indices.push(i);
        distances.push(d.sqrt());
    }
    (indices, distances)
}

/// Farthest-point sampling recomputing every point's distance to the whole
/// chosen set at every step.
pub fn brute_fps(points: &[Point], m: usize, first: usize) -> Vec<usize> {
    let mut chosen = vec![first];
    while chosen.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| dist2(p, &points[c]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

/// Shell of each distance: the first `s` with `d <= s * width`, where the
/// ball out to the largest distance is cut into `num_shells` equal widths.
pub fn brute_equidistant(distances: &[f64], num_shells: usize) -> Vec<usize> {
    let d_max = distances.iter().copied().fold(0.0, f64::max);
    if d_max == 0.0 {
        return vec![0; distances.len()];
    }
    let width = d_max / num_shells as f64;
    distances
        .iter()
        .map(|&d| {
            (1..=num_shells)
                .find(|&s| d <= s as f64 * width)
                .unwrap_or(num_shells)
                - 1
        })
        .collect()
}

/// Checks kNN, both shell partitioners and farthest sampling against the
/// brute-force oracles on `instances` random clouds of up to 256 points.
/// Fixed partitions use a shell size drawn from `shell_sizes`.
pub fn geometry_oracles(seed: u64, instances: usize, shell_sizes: &[usize]) -> Result<(), String> {
    use rand::SeedableRng;
    use shellnet::geometry::{
        farthest_point_sampling, knn_query, partition_shells_equidistant,
        partition_shells_fixed, KnnSpace,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..instances {
        let n = rng.random_range(1..=256);
        let gridded = t % 2 == 1;
        let points = if gridded {
            grid_points(&mut rng, n)
        } else {
            random_points(&mut rng, n)
        };
        let cloud = PointCloud::new(points.clone()).unwrap();
        let center = rng.random_range(0..n);
        let k = rng.random_range(1..=n);
        let got = knn_query(&cloud, center, k, KnnSpace::Coordinates).map_err(|e| e.to_string())?;
        let (idx, dist) = brute_knn(&points, &points[center], k);
        if got.indices != idx || got.distances != dist {
            return Err(format!("instance {t}: knn(n={n}, k={k}, center={center})"));
        }

        let ss = shell_sizes[t % shell_sizes.len()];
        let shells = n / ss;
        if shells > 0 {
            let s = rng.random_range(1..=shells);
            let set = knn_query(&cloud, center, ss * s, KnnSpace::Coordinates).unwrap();
            let part = partition_shells_fixed(&set, ss, s).map_err(|e| e.to_string())?;
            let (idx, _) = brute_knn(&points, &points[center], ss * s);
            let expected: Vec<Vec<usize>> = idx.chunks(ss).map(<[usize]>::to_vec).collect();
            if part.shells != expected {
                return Err(format!("instance {t}: fixed shells (ss={ss}, S={s})"));
            }
        }

        if !gridded {
            let s = rng.random_range(1..=8);
            let part = partition_shells_equidistant(&got, s).map_err(|e| e.to_string())?;
            let ids = brute_equidistant(&dist, s);
            let mut expected = vec![Vec::new(); s];
            for (&i, &sid) in idx.iter().zip(&ids) {
                expected[sid].push(i);
            }
            if part.shells != expected {
                return Err(format!("instance {t}: equidistant shells (k={k}, S={s})"));
            }
        }

        let m = rng.random_range(1..=n.min(48));
        let first = rng.random_range(0..n);
        let fps = farthest_point_sampling(&points, m, first).map_err(|e| e.to_string())?;
        if fps != brute_fps(&points, m, first) {
            return Err(format!("instance {t}: farthest sampling (n={n}, m={m})"));
        }
    }
    Ok(())
}

/// Largest absolute logit difference between random clouds and random
/// permutations of them over `pairs` pairs, with representatives carried
/// through the permutation, and whether every logit matched bit for bit.
pub fn permutation_gap<T: shellnet::autodiff::Real>(
    config: &NetworkConfig,
    seed: u64,
    pairs: usize,
) -> (f64, bool) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use shellnet::network::Network;
    let net = Network::<T>::build(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut bitwise) = (0.0_f64, true);
    for _ in 0..pairs {
        let cloud = PointCloud::new(random_points(&mut rng, 128)).unwrap();
        let plan = net.plan(&cloud, rng.random()).unwrap();
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        order.shuffle(&mut rng);
        let permuted = cloud.reordered(&order).unwrap();
        let a = net.predict(&[cloud], &[plan.clone()]).unwrap();
        let b = net.predict(&[permuted], &[plan.reordered(&order)]).unwrap();
        for (&x, &y) in a.iter().zip(b.iter()) {
            bitwise &= x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits);
            let (x, y): (f64, f64) = (x.as_(), y.as_());
            worst = worst.max((x - y).abs());
        }
    }
    (worst, bitwise)
}
