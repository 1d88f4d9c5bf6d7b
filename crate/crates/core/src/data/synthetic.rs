//! Procedural stand-ins for benchmark datasets: analytic surfaces for shape
//! classification and fused primitives for part segmentation.

use std::f64::consts::{PI, TAU};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Dataset};
use crate::geometry::{Labels, Point, PointCloud};
use crate::network::Task;
use crate::seed;

pub type Vec3 = [f64; 3];

pub const SHAPE_CLASSES: [&str; 8] = [
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "plane_pair",
    "helix_tube",
    "two_sphere_blend",
];

pub const PART_LABELS: [&str; 4] = ["sphere", "box", "cylinder", "torus"];

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn unit_vector<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v: Vec3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(v);
        if n > 1e-9 {
            return scale(v, 1.0 / n);
        }
    }
}

/// Rotation matrix (rows) drawn uniformly from SO(3) via a random unit
/// quaternion.
pub fn random_rotation<R: Rng>(rng: &mut R) -> [Vec3; 3] {
    let q: [f64; 4] = loop {
        let q: [f64; 4] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(r: &[Vec3; 3], p: Vec3) -> Vec3 {
    [dot(r[0], p), dot(r[1], p), dot(r[2], p)]
}

fn rotate_back(r: &[Vec3; 3], p: Vec3) -> Vec3 {
    [
        r[0][0] * p[0] + r[1][0] * p[1] + r[2][0] * p[2],
        r[0][1] * p[0] + r[1][1] * p[1] + r[2][1] * p[2],
        r[0][2] * p[0] + r[1][2] * p[1] + r[2][2] * p[2],
    ]
}

/// Closed analytic surfaces in a local frame centered at the origin. Boxes,
/// cylinders and cones are axis-aligned with their axis along z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Sphere { radius: f64 },
    Box { half: Vec3 },
    Cylinder { radius: f64, half_height: f64 },
    /// Apex at `z = height / 2`, base disk at `z = -height / 2`.
    Cone { radius: f64, height: f64 },
    /// Ring in the xy-plane.
    Torus { major: f64, minor: f64 },
}

impl Surface {
    /// Radius of the smallest origin-centered ball holding the surface.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Surface::Sphere { radius } => radius,
            Surface::Box { half } => norm(half),
            Surface::Cylinder {
                radius,
                half_height,
            } => radius.hypot(half_height),
            Surface::Cone { radius, height } => radius.hypot(height / 2.0),
            Surface::Torus { major, minor } => major + minor,
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Surface::Sphere { radius } => 4.0 * PI * radius * radius,
            Surface::Box { half: [a, b, c] } => 8.0 * (a * b + b * c + a * c),
            Surface::Cylinder {
                radius,
                half_height,
            } => TAU * radius * (2.0 * half_height) + 2.0 * PI * radius * radius,
            Surface::Cone { radius, height } => {
                PI * radius * (radius * radius + height * height).sqrt() + PI * radius * radius
            }
            Surface::Torus { major, minor } => 4.0 * PI * PI * major * minor,
        }
    }

    /// One point drawn uniformly with respect to surface area.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match *self {
            Surface::Sphere { radius } => scale(unit_vector(rng), radius),
            Surface::Box { half } => {
                let [a, b, c] = half;
                let faces = [b * c, a * c, a * b];
                let total: f64 = faces.iter().sum();
                let mut u = rng.random_range(0.0..total);
                let mut axis = 2;
                for (i, &f) in faces.iter().enumerate() {
                    if u < f {
                        axis = i;
                        break;
                    }
                    u -= f;
                }
                let mut p: Vec3 = [
                    rng.random_range(-a..a),
                    rng.random_range(-b..b),
                    rng.random_range(-c..c),
                ];
                p[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
                p
            }
            Surface::Cylinder {
                radius,
                half_height,
            } => {
                let side = TAU * radius * 2.0 * half_height;
                let caps = 2.0 * PI * radius * radius;
                let theta = rng.random_range(0.0..TAU);
                if rng.random_range(0.0..side + caps) < side {
                    [
                        radius * theta.cos(),
                        radius * theta.sin(),
                        rng.random_range(-half_height..half_height),
                    ]
                } else {
                    let r = radius * rng.random_range(0.0f64..1.0).sqrt();
                    let z = if rng.random_bool(0.5) { half_height } else { -half_height };
                    [r * theta.cos(), r * theta.sin(), z]
                }
            }
            Surface::Cone { radius, height } => {
                let slant = (radius * radius + height * height).sqrt();
                let side = PI * radius * slant;
                let base = PI * radius * radius;
                let theta = rng.random_range(0.0..TAU);
                let t = rng.random_range(0.0f64..1.0).sqrt();
                if rng.random_range(0.0..side + base) < side {
                    // t is the fraction of the way from apex to rim
                    let r = radius * t;
                    [r * theta.cos(), r * theta.sin(), height / 2.0 - height * t]
                } else {
                    let r = radius * t;
                    [r * theta.cos(), r * theta.sin(), -height / 2.0]
                }
            }
            Surface::Torus { major, minor } => loop {
                let u = rng.random_range(0.0..TAU);
                let v = rng.random_range(0.0..TAU);
                // area element is proportional to major + minor cos v
                if rng.random_range(0.0..major + minor) <= major + minor * v.cos() {
                    let ring = major + minor * v.cos();
                    return [ring * u.cos(), ring * u.sin(), minor * v.sin()];
                }
            },
        }
    }

    /// Strictly inside the enclosed solid.
    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            Surface::Sphere { radius } => norm(p) < radius,
            Surface::Box { half } => (0..3).all(|i| p[i].abs() < half[i]),
            Surface::Cylinder {
                radius,
                half_height,
            } => p[0].hypot(p[1]) < radius && p[2].abs() < half_height,
            Surface::Cone { radius, height } => {
                let t = (height / 2.0 - p[2]) / height;
                t > 0.0 && t < 1.0 && p[0].hypot(p[1]) < radius * t
            }
            Surface::Torus { major, minor } => {
                let ring = p[0].hypot(p[1]) - major;
                ring.hypot(p[2]) < minor
            }
        }
    }
}

/// A surface placed in the world by a rotation and a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placed {
    pub surface: Surface,
    pub rotation: [Vec3; 3],
    pub center: Vec3,
    pub label: u32,
}

impl Placed {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        add(rotate(&self.rotation, self.surface.sample(rng)), self.center)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.surface
            .contains(rotate_back(&self.rotation, sub(p, self.center)))
    }
}

/// Samples the outer surface of a union of solids: each part contributes in
/// proportion to its area, points buried inside another part are rejected,
/// and exactly `n` survivors are kept. Labels follow the generating part.
pub fn sample_union<R: Rng>(parts: &[Placed], n: usize, rng: &mut R) -> (Vec<Vec3>, Vec<u32>) {
    let total: f64 = parts.iter().map(|p| p.surface.area()).sum();
    let mut pool = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    let mut attempts = 0usize;
    while pool.len() < 2 * n && attempts < 200 * n {
        attempts += 1;
        let mut u = rng.random_range(0.0..total);
        let mut pick = parts.len() - 1;
        for (i, p) in parts.iter().enumerate() {
            let a = p.surface.area();
            if u < a {
                pick = i;
                break;
            }
            u -= a;
        }
        let q = parts[pick].sample(rng);
        let buried = parts
            .iter()
            .enumerate()
            .any(|(j, other)| j != pick && other.contains(q));
        if !buried {
            pool.push(q);
            labels.push(parts[pick].label);
        }
    }
    let keep = index::sample(rng, pool.len(), n.min(pool.len())).into_vec();
    (
        keep.iter().map(|&i| pool[i]).collect(),
        keep.iter().map(|&i| labels[i]).collect(),
    )
}

/// Translates to a zero centroid and scales to a maximum norm of one.
pub fn unit_normalize(points: &mut [Vec3]) {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points.iter() {
        c = add(c, *p);
    }
    c = scale(c, 1.0 / n);
    let mut r: f64 = 0.0;
    for p in points.iter_mut() {
        *p = sub(*p, c);
        r = r.max(norm(*p));
    }
    if r > 0.0 {
        for p in points.iter_mut() {
            *p = scale(*p, 1.0 / r);
        }
    }
}

fn to_f32(points: &[Vec3]) -> Vec<Point> {
    points
        .iter()
        .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
        .collect()
}

fn identity() -> [Vec3; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn helix_tube<R: Rng>(n: usize, rng: &mut R) -> Vec<Vec3> {
    let radius = rng.random_range(0.6..0.8);
    let tube = rng.random_range(0.08..0.14);
    let turns = rng.random_range(2.0..3.0);
    let rise = rng.random_range(0.25..0.4);
    // constant-speed parametrization: arc length is linear in the angle
    (0..n)
        .map(|_| {
            let t = rng.random_range(0.0..turns * TAU);
            let c = [radius * t.cos(), radius * t.sin(), rise * t / TAU];
            let tangent = [-radius * t.sin(), radius * t.cos(), rise / TAU];
            let tangent = scale(tangent, 1.0 / norm(tangent));
            let normal = [-t.cos(), -t.sin(), 0.0];
            let binormal = cross(tangent, normal);
            let phi = rng.random_range(0.0..TAU);
            add(
                c,
                add(scale(normal, tube * phi.cos()), scale(binormal, tube * phi.sin())),
            )
        })
        .collect()
}

fn plane_pair<R: Rng>(n: usize, rng: &mut R) -> Vec<Vec3> {
    let gap = rng.random_range(0.3..0.8);
    let (a, b) = (rng.random_range(0.8..1.0), rng.random_range(0.6..1.0));
    (0..n)
        .map(|_| {
            let z = if rng.random_bool(0.5) { gap / 2.0 } else { -gap / 2.0 };
            [rng.random_range(-a..a), rng.random_range(-b..b), z]
        })
        .collect()
}

/// Raw points of one shape class before rotation and normalization.
pub fn sample_shape<R: Rng>(class: usize, n: usize, rng: &mut R) -> Vec<Vec3> {
    let single = |surface: Surface, rng: &mut R| -> Vec<Vec3> {
        (0..n).map(|_| surface.sample(rng)).collect()
    };
    match class {
        0 => single(Surface::Sphere { radius: 1.0 }, rng),
        1 => {
            let half = [1.0, rng.random_range(0.75..1.0), rng.random_range(0.75..1.0)];
            single(Surface::Box { half }, rng)
        }
        2 => {
            let s = Surface::Cylinder {
                radius: rng.random_range(0.35..0.6),
                half_height: rng.random_range(0.7..1.0),
            };
            single(s, rng)
        }
        3 => {
            let s = Surface::Cone {
                radius: rng.random_range(0.5..0.8),
                height: rng.random_range(1.2..1.8),
            };
            single(s, rng)
        }
        4 => {
            let s = Surface::Torus {
                major: rng.random_range(0.7..1.0),
                minor: rng.random_range(0.2..0.35),
            };
            single(s, rng)
        }
        5 => plane_pair(n, rng),
        6 => helix_tube(n, rng),
        _ => {
            let r1 = rng.random_range(0.6..0.9);
            let r2 = rng.random_range(0.4..0.7);
            let d = rng.random_range(0.6..0.9) * (r1 + r2);
            let parts = [
                Placed {
                    surface: Surface::Sphere { radius: r1 },
                    rotation: identity(),
                    center: [0.0; 3],
                    label: 0,
                },
                Placed {
                    surface: Surface::Sphere { radius: r2 },
                    rotation: identity(),
                    center: [d, 0.0, 0.0],
                    label: 0,
                },
            ];
            sample_union(&parts, n, rng).0
        }
    }
}

/// `num_per_class` clouds of each of the eight analytic shape classes,
/// randomly rotated and unit-normalized. The last fifth of every class (at
/// least one cloud when a class has two or more) forms the test split.
pub fn generate_shapes(
    num_per_class: usize,
    points_per_cloud: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_per_class == 0 || points_per_cloud == 0 {
        return Err(DataError::Invalid("counts must be at least 1".into()));
    }
    let mut clouds = Vec::with_capacity(num_per_class * SHAPE_CLASSES.len());
    for class in 0..SHAPE_CLASSES.len() {
        for i in 0..num_per_class {
            let salt = (class * num_per_class + i) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, salt));
            let mut pts = sample_shape(class, points_per_cloud, &mut rng);
            let rot = random_rotation(&mut rng);
            for p in pts.iter_mut() {
                *p = rotate(&rot, *p);
            }
            unit_normalize(&mut pts);
            clouds.push(PointCloud::new(to_f32(&pts))?.with_labels(Labels::Cloud(class as u32))?);
        }
    }
    let test_per_class = if num_per_class >= 2 {
        (num_per_class / 5).max(1)
    } else {
        0
    };
    let mut data = Dataset {
        task: Task::Classification,
        clouds,
        train: Vec::new(),
        test: Vec::new(),
        names: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
    };
    data.split_per_class(test_per_class)?;
    Ok(data)
}

fn random_part<R: Rng>(kind: usize, rng: &mut R) -> Surface {
    match kind {
        0 => Surface::Sphere {
            radius: rng.random_range(0.35..0.55),
        },
        1 => Surface::Box {
            half: [
                rng.random_range(0.25..0.45),
                rng.random_range(0.25..0.45),
                rng.random_range(0.25..0.45),
            ],
        },
        2 => Surface::Cylinder {
            radius: rng.random_range(0.15..0.25),
            half_height: rng.random_range(0.4..0.6),
        },
        _ => Surface::Torus {
            major: rng.random_range(0.35..0.5),
            minor: rng.random_range(0.08..0.14),
        },
    }
}

/// Composite objects of two to four primitives of distinct kinds, chained so
/// that consecutive parts meet near their bounding spheres' contact. Each point is labeled with the kind of
/// the primitive that generated it. The last fifth of the objects (at least
/// one when there are two or more) forms the test split.
pub fn generate_parts(
    num_objects: usize,
    points_per_cloud: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_objects == 0 || points_per_cloud == 0 {
        return Err(DataError::Invalid("counts must be at least 1".into()));
    }
    let mut clouds = Vec::with_capacity(num_objects);
    for i in 0..num_objects {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, i as u64));
        let count = rng.random_range(2..=PART_LABELS.len());
        let kinds = index::sample(&mut rng, PART_LABELS.len(), count).into_vec();
        let mut parts: Vec<Placed> = Vec::with_capacity(count);
        for &kind in &kinds {
            let surface = random_part(kind, &mut rng);
            let center = match parts.last() {
                None => [0.0; 3],
                Some(prev) => {
                    let reach = prev.surface.bounding_radius() + surface.bounding_radius();
                    let gap = reach * rng.random_range(0.7..0.85);
                    add(prev.center, scale(unit_vector(&mut rng), gap))
                }
            };
            parts.push(Placed {
                surface,
                rotation: random_rotation(&mut rng),
                center,
                label: kind as u32,
            });
        }
        let (mut pts, labels) = sample_union(&parts, points_per_cloud, &mut rng);
        if pts.len() < points_per_cloud {
            return Err(DataError::Invalid(format!(
                "object {i}: only {} visible surface points",
                pts.len()
            )));
        }
        unit_normalize(&mut pts);
        clouds.push(PointCloud::new(to_f32(&pts))?.with_labels(Labels::Points(labels))?);
    }
    let test = if num_objects >= 2 {
        (num_objects / 5).max(1)
    } else {
        0
    };
    Ok(Dataset {
        task: Task::Segmentation,
        train: (0..num_objects - test).collect(),
        test: (num_objects - test..num_objects).collect(),
        clouds,
        names: PART_LABELS.iter().map(|s| s.to_string()).collect(),
    })
}
