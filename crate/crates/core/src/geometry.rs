//! Point clouds, nearest-neighbor queries, representative sampling and
//! concentric-shell partitioning of neighborhoods.
//!
//! Distances are Euclidean and evaluated in `f64` regardless of the storage
//! precision of the queried rows. Every ordering in this module is total:
//! equal distances are broken by ascending source index, so results are
//! deterministic and independent of the sorting algorithm used.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, ArrayView2};
use num_traits::AsPrimitive;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("size error: requested {requested} but only {available} available")]
    Size { requested: usize, available: usize },
    #[error("point cloud must contain at least one point")]
    EmptyCloud,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("feature rows ({rows}) do not match point count ({points})")]
    FeatureCount { rows: usize, points: usize },
    #[error("per-point labels ({labels}) do not match point count ({points})")]
    LabelCount { labels: usize, points: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index {index} out of range for {len} points")]
    Index { index: usize, len: usize },
}

pub type Point = [f32; 3];

/// Labels attached to a cloud: none, one class id, or one segment id per point.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Labels {
    #[default]
    None,
    Cloud(u32),
    Points(Vec<u32>),
}

/// An unordered set of 3D points stored in some order, with optional
/// per-point features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    features: Option<Array2<f32>>,
    labels: Labels,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(Self {
            points,
            features: None,
            labels: Labels::None,
        })
    }

    pub fn with_features(mut self, features: Array2<f32>) -> Result<Self, GeometryError> {
        if features.nrows() != self.points.len() {
            return Err(GeometryError::FeatureCount {
                rows: features.nrows(),
                points: self.points.len(),
            });
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Self, GeometryError> {
        if let Labels::Points(l) = &labels {
            if l.len() != self.points.len() {
                return Err(GeometryError::LabelCount {
                    labels: l.len(),
                    points: self.points.len(),
                });
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false for a constructed cloud; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn features(&self) -> Option<&Array2<f32>> {
        self.features.as_ref()
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn feature_width(&self) -> usize {
        self.features.as_ref().map_or(0, |f| f.ncols())
    }

    /// Returns a copy whose storage order is `order`: point `i` of the result
    /// is point `order[i]` of `self`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self, GeometryError> {
        if order.len() != self.len() {
            return Err(GeometryError::Size {
                requested: order.len(),
                available: self.len(),
            });
        }
        if let Some(&bad) = order.iter().find(|&&i| i >= self.len()) {
            return Err(GeometryError::Index {
                index: bad,
                len: self.len(),
            });
        }
        let points = order.iter().map(|&i| self.points[i]).collect();
        let features = self.features.as_ref().map(|f| f.select(ndarray::Axis(0), order));
        let labels = match &self.labels {
            Labels::Points(l) => Labels::Points(order.iter().map(|&i| l[i]).collect()),
            other => other.clone(),
        };
        Ok(Self {
            points,
            features,
            labels,
        })
    }

    /// Replaces coordinates, keeping features and labels.
    pub fn with_points(&self, points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.len() != self.len() {
            return Err(GeometryError::Size {
                requested: points.len(),
                available: self.len(),
            });
        }
        let mut out = Self::new(points)?;
        out.features = self.features.clone();
        out.labels = self.labels.clone();
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KnnSpace {
    #[default]
    Coordinates,
    Features,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    #[default]
    Random,
    Farthest,
}

/// The `k` nearest neighbors of one center, nearest first.
///
/// `center_index` is the center's index in the cloud it was taken from, which
/// is not necessarily the queried cloud (decoder layers query a coarser cloud
/// around finer centers).
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub center_index: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Concentric shells of a neighborhood, innermost first. `radii[i]` is the
/// outer boundary of shell `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShellPartition {
    pub shells: Vec<Vec<usize>>,
    pub radii: Vec<f64>,
}

impl ShellPartition {
    pub fn num_shells(&self) -> usize {
        self.shells.len()
    }

    pub fn populations(&self) -> Vec<usize> {
        self.shells.iter().map(Vec::len).collect()
    }
}

#[inline]
pub(crate) fn dist2_points(a: &Point, b: &Point) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn dist2_rows<T: AsPrimitive<f64>>(a: ArrayView1<T>, b: ArrayView1<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x.as_() - y.as_();
            d * d
        })
        .sum()
}

#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Selects the `k` smallest `(squared distance, index)` pairs in total order.
fn select_nearest(mut candidates: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    if k < candidates.len() {
        if k > 0 {
            candidates.select_nth_unstable_by(k - 1, by_distance_then_index);
        }
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(by_distance_then_index);
    candidates
}

fn into_neighbor_set(center_index: usize, nearest: Vec<(f64, usize)>) -> NeighborSet {
    let (distances, indices) = nearest.into_iter().map(|(d2, i)| (d2.sqrt(), i)).unzip();
    NeighborSet {
        center_index,
        indices,
        distances,
    }
}

fn check_k(k: usize, n: usize) -> Result<(), GeometryError> {
    if k > n {
        Err(GeometryError::Size {
            requested: k,
            available: n,
        })
    } else {
        Ok(())
    }
}

/// The `k` points of `points` nearest to an arbitrary `query` location.
pub fn knn_points(
    points: &[Point],
    query: &Point,
    k: usize,
    center_index: usize,
) -> Result<NeighborSet, GeometryError> {
    check_k(k, points.len())?;
    let candidates = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2_points(p, query), i))
        .collect();
    Ok(into_neighbor_set(center_index, select_nearest(candidates, k)))
}

/// The `k` rows of `rows` nearest to `query` in feature space.
pub fn knn_rows<T: AsPrimitive<f64>>(
    rows: ArrayView2<T>,
    query: ArrayView1<T>,
    k: usize,
    center_index: usize,
) -> Result<NeighborSet, GeometryError> {
    check_k(k, rows.nrows())?;
    if query.len() != rows.ncols() {
        return Err(GeometryError::Config(format!(
            "query width {} does not match row width {}",
            query.len(),
            rows.ncols()
        )));
    }
    let candidates = rows
        .outer_iter()
        .enumerate()
        .map(|(i, r)| (dist2_rows(r, query), i))
        .collect();
    Ok(into_neighbor_set(center_index, select_nearest(candidates, k)))
}

/// The `k` nearest neighbors of point `center_index` of `cloud`, itself included.
pub fn knn_query(
    cloud: &PointCloud,
    center_index: usize,
    k: usize,
    space: KnnSpace,
) -> Result<NeighborSet, GeometryError> {
    if center_index >= cloud.len() {
        return Err(GeometryError::Index {
            index: center_index,
            len: cloud.len(),
        });
    }
    match space {
        KnnSpace::Coordinates => {
            knn_points(cloud.points(), &cloud.points()[center_index], k, center_index)
        }
        KnnSpace::Features => {
            let features = cloud.features().ok_or_else(|| {
                GeometryError::Config("feature-space query on a cloud without features".into())
            })?;
            knn_rows(features.view(), features.row(center_index), k, center_index)
        }
    }
}

/// Greedy farthest-point sampling starting at `first`. Each subsequent pick
/// maximizes the minimum squared distance to the chosen set; ties go to the
/// lowest index.
pub fn farthest_point_sampling(
    points: &[Point],
    m: usize,
    first: usize,
) -> Result<Vec<usize>, GeometryError> {
    check_k(m, points.len())?;
    if first >= points.len() {
        return Err(GeometryError::Index {
            index: first,
            len: points.len(),
        });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; points.len()];
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut current = first;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == m {
            return Ok(chosen);
        }
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, (p, slot)) in points.iter().zip(min_d2.iter_mut()).enumerate() {
            let d = dist2_points(p, &c);
            if d < *slot {
                *slot = d;
            }
            // duplicates of chosen points have distance 0 but remain eligible
            if !taken[i] && *slot > best.0 {
                best = (*slot, i);
            }
        }
        current = best.1;
    }
}

/// Draws `m` representative indices out of `points` with a seeded generator.
pub fn sample_representatives(
    points: &[Point],
    m: usize,
    strategy: SamplingStrategy,
    seed: u64,
) -> Result<Vec<usize>, GeometryError> {
    let n = points.len();
    check_k(m, n)?;
    if m == 0 {
        return Err(GeometryError::Config("at least one representative is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match strategy {
        SamplingStrategy::Random => Ok(index::sample(&mut rng, n, m).into_vec()),
        SamplingStrategy::Farthest => {
            let first = rng.random_range(0..n);
            farthest_point_sampling(points, m, first)
        }
    }
}

/// Splits a distance-sorted neighborhood into `num_shells` consecutive blocks
/// of `shell_size` points each.
pub fn partition_shells_fixed(
    neighbors: &NeighborSet,
    shell_size: usize,
    num_shells: usize,
) -> Result<ShellPartition, GeometryError> {
    if shell_size == 0 || num_shells == 0 {
        return Err(GeometryError::Config(
            "shell size and shell count must be positive".into(),
        ));
    }
    let expected = shell_size * num_shells;
    if neighbors.len() != expected {
        return Err(GeometryError::Size {
            requested: expected,
            available: neighbors.len(),
        });
    }
    let shells = neighbors
        .indices
        .chunks(shell_size)
        .map(<[usize]>::to_vec)
        .collect();
    let radii = neighbors
        .distances
        .chunks(shell_size)
        .map(|block| block[block.len() - 1])
        .collect();
    Ok(ShellPartition { shells, radii })
}

/// Zero-based shell id of every distance when the ball of radius
/// `max(distances)` is cut into `num_shells` equally thick shells.
/// A distance `d` lands in shell `ceil(d / width) - 1`, with `d = 0` in the
/// innermost shell.
pub fn equidistant_shell_ids(distances: &[f64], num_shells: usize) -> Vec<usize> {
    let d_max = distances.iter().copied().fold(0.0_f64, f64::max);
    if d_max <= 0.0 {
        return vec![0; distances.len()];
    }
    let width = d_max / num_shells as f64;
    distances
        .iter()
        .map(|&d| {
            let s = (d / width).ceil();
            (s.max(1.0) as usize).min(num_shells) - 1
        })
        .collect()
}

/// Cuts the neighborhood into `num_shells` equally thick shells out to the
/// farthest neighbor. Shells may be empty.
pub fn partition_shells_equidistant(
    neighbors: &NeighborSet,
    num_shells: usize,
) -> Result<ShellPartition, GeometryError> {
    if num_shells == 0 {
        return Err(GeometryError::Config("shell count must be positive".into()));
    }
    if neighbors.is_empty() {
        return Err(GeometryError::Size {
            requested: 1,
            available: 0,
        });
    }
    let ids = equidistant_shell_ids(&neighbors.distances, num_shells);
    let mut shells = vec![Vec::new(); num_shells];
    for (&idx, &s) in neighbors.indices.iter().zip(&ids) {
        shells[s].push(idx);
    }
    let d_max = neighbors.distances.iter().copied().fold(0.0_f64, f64::max);
    let width = d_max / num_shells as f64;
    let radii = (1..=num_shells).map(|i| i as f64 * width).collect();
    Ok(ShellPartition { shells, radii })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn collinear_knn() {
        let c = cloud(&[[0., 0., 0.], [1., 0., 0.], [2., 0., 0.], [5., 0., 0.]]);
        let n = knn_query(&c, 0, 2, KnnSpace::Coordinates).unwrap();
        assert_eq!(n.indices, vec![0, 1]);
        assert_eq!(n.distances, vec![0.0, 1.0]);
    }

    #[test]
    fn knn_full_cloud_is_sorted() {
        let c = cloud(&[[3., 0., 0.], [1., 0., 0.], [0., 0., 0.], [-2., 0., 0.]]);
        let n = knn_query(&c, 2, 4, KnnSpace::Coordinates).unwrap();
        assert_eq!(n.indices, vec![2, 1, 3, 0]);
        assert!(n.distances.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn knn_ties_by_index() {
        let c = cloud(&[[1., 0., 0.], [0., 0., 0.], [-1., 0., 0.], [0., 1., 0.]]);
        let n = knn_query(&c, 1, 4, KnnSpace::Coordinates).unwrap();
        assert_eq!(n.indices, vec![1, 0, 2, 3]);
    }

    #[test]
    fn knn_errors() {
        let c = cloud(&[[0., 0., 0.], [1., 0., 0.]]);
        assert!(matches!(
            knn_query(&c, 0, 3, KnnSpace::Coordinates),
            Err(GeometryError::Size { requested: 3, available: 2 })
        ));
        assert!(matches!(
            knn_query(&c, 0, 1, KnnSpace::Features),
            Err(GeometryError::Config(_))
        ));
    }

    #[test]
    fn knn_in_feature_space() {
        let f = Array2::from_shape_vec((3, 1), vec![0.0f32, 10.0, 0.5]).unwrap();
        let c = cloud(&[[0., 0., 0.], [0.1, 0., 0.], [9., 0., 0.]])
            .with_features(f)
            .unwrap();
        let n = knn_query(&c, 0, 2, KnnSpace::Features).unwrap();
        assert_eq!(n.indices, vec![0, 2]);
    }

    #[test]
    fn cloud_rejects_bad_input() {
        assert_eq!(PointCloud::new(vec![]), Err(GeometryError::EmptyCloud));
        assert_eq!(
            PointCloud::new(vec![[0., f32::NAN, 0.]]),
            Err(GeometryError::NonFinite(0))
        );
        let f = Array2::<f32>::zeros((2, 4));
        assert!(cloud(&[[0., 0., 0.]]).with_features(f).is_err());
    }

    #[test]
    fn farthest_picks_diagonal() {
        let square = [[0., 0., 0.], [1., 0., 0.], [1., 1., 0.], [0., 1., 0.]];
        assert_eq!(farthest_point_sampling(&square, 2, 0).unwrap(), vec![0, 2]);
    }

    #[test]
    fn full_sampling_is_permutation() {
        let pts: Vec<Point> = (0..10).map(|i| [i as f32, (i * i) as f32, 0.]).collect();
        for strategy in [SamplingStrategy::Random, SamplingStrategy::Farthest] {
            let mut s = sample_representatives(&pts, 10, strategy, 7).unwrap();
            s.sort_unstable();
            assert_eq!(s, (0..10).collect::<Vec<_>>());
        }
        assert!(sample_representatives(&pts, 11, SamplingStrategy::Random, 0).is_err());
    }

    #[test]
    fn fixed_shells_are_sorted_blocks() {
        let n = NeighborSet {
            center_index: 0,
            indices: (10..18).collect(),
            distances: (1..=8).map(f64::from).collect(),
        };
        let p = partition_shells_fixed(&n, 4, 2).unwrap();
        assert_eq!(p.shells, vec![vec![10, 11, 12, 13], vec![14, 15, 16, 17]]);
        assert_eq!(p.radii, vec![4.0, 8.0]);
        let one = partition_shells_fixed(&n, 8, 1).unwrap();
        assert_eq!(one.shells, vec![n.indices.clone()]);
        assert!(partition_shells_fixed(&n, 3, 2).is_err());
    }

    #[test]
    fn equidistant_midpoint_split() {
        let n = NeighborSet {
            center_index: 0,
            indices: vec![0, 1, 2, 3],
            distances: vec![0.0, 0.4, 0.6, 1.0],
        };
        let p = partition_shells_equidistant(&n, 2).unwrap();
        assert_eq!(p.shells, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(p.radii, vec![0.5, 1.0]);
        let one = partition_shells_equidistant(&n, 1).unwrap();
        assert_eq!(one.shells, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn equidistant_allows_empty_shells() {
        let n = NeighborSet {
            center_index: 0,
            indices: vec![0, 1, 2],
            distances: vec![0.0, 0.05, 1.0],
        };
        let p = partition_shells_equidistant(&n, 4).unwrap();
        assert_eq!(p.populations(), vec![2, 0, 0, 1]);
    }

    #[test]
    fn equidistant_single_self_neighbor() {
        let n = NeighborSet {
            center_index: 0,
            indices: vec![5],
            distances: vec![0.0],
        };
        let p = partition_shells_equidistant(&n, 3).unwrap();
        assert_eq!(p.populations(), vec![1, 0, 0]);
    }

    #[test]
    fn reorder_moves_labels_and_features() {
        let f = Array2::from_shape_vec((3, 1), vec![1.0f32, 2.0, 3.0]).unwrap();
        let c = cloud(&[[0., 0., 0.], [1., 0., 0.], [2., 0., 0.]])
            .with_features(f)
            .unwrap()
            .with_labels(Labels::Points(vec![7, 8, 9]))
            .unwrap();
        let r = c.reordered(&[2, 0, 1]).unwrap();
        assert_eq!(r.points()[0], [2., 0., 0.]);
        assert_eq!(r.features().unwrap()[[0, 0]], 3.0);
        assert_eq!(r.labels(), &Labels::Points(vec![9, 7, 8]));
    }
}
