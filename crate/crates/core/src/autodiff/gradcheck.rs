//! Central finite-difference gradient checks at 64-bit precision.
//!
//! The numeric side only ever evaluates forward passes, so it is an oracle
//! independent of every backward rule it checks.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, TensorError, Var};

/// Default perturbation for central differences.
pub const EPSILON: f64 = 1e-5;
/// Maximum relative error a check may report and still pass.
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Compares backward gradients of the scalar `f(inputs)` against central
/// differences for every element of every input. Returns the largest
/// relative error.
pub fn check<F>(inputs: &[ArrayD<f64>], eps: f64, f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|x| g.variable(x.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| ArrayD::zeros(x.raw_dim())))
        .collect();

    let eval = |perturbed: &[ArrayD<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars = perturbed
            .iter()
            .map(|x| g.constant(x.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).iter().copied().next().unwrap_or(0.0))
    };

    let mut worst = 0.0_f64;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[t].len() {
            let orig = inputs[t].as_slice().expect("standard layout")[e];
            work[t].as_slice_mut().expect("standard layout")[e] = orig + eps;
            let plus = eval(&work)?;
            work[t].as_slice_mut().expect("standard layout")[e] = orig - eps;
            let minus = eval(&work)?;
            work[t].as_slice_mut().expect("standard layout")[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.as_slice().expect("standard layout")[e];
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Reduces any tensor to a scalar by a fixed random weighting so that every
/// output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_f5e7);
    let shape = g.shape(out).to_vec();
    let w = ArrayD::from_shape_simple_fn(IxDyn(&shape), || rng.random_range(-1.0..1.0));
    let w = g.constant(w)?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Uniform values in `[-1, 1]` whose magnitude is at least `margin`, keeping
/// inputs of kinked operations away from their kinks.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || loop {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v.abs() >= margin {
            return v;
        }
    })
}

/// Distinct values in `[-1, 1]`, any two at least `2 / (3 n)` apart, in
/// random order. Inputs of max operations need gaps well above the
/// difference step or a perturbation can swap the maximum.
pub fn spread_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    let values = slots
        .into_iter()
        .map(|k| -1.0 + 2.0 * (k as f64 + rng.random_range(1.0 / 6.0..5.0 / 6.0)) / n as f64)
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), values).expect("shape")
}

type Case = fn(&mut ChaCha8Rng, u64) -> Result<f64, TensorError>;

fn case_matmul(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, TensorError> {
    let a = random_tensor(rng, &[3, 4], 0.0);
    let b = random_tensor(rng, &[4, 2], 0.0);
    check(&[a, b], EPSILON, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, seed)
    })
}

fn case_add_bias(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, TensorError> {
    let x = random_tensor(rng, &[2, 3, 4], 0.0);
    let b = random_tensor(rng, &[4], 0.0);
    check(&[x, b], EPSILON, |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        weighted_sum(g, y, seed)
    })
}

fn case_relu(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, TensorError> {
    let x = random_tensor(rng, &[4, 5], 0.05);
    check(&[x], EPSILON, |g, v| {
        let y = g.relu(v[0])?;
        weighted_sum(g, y, seed)
    })
}

fn case_maxpool(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, TensorError> {
    let x = spread_tensor(rng, &[3, 4, 5]);
    check(&[x], EPSILON, |g, v| {
        let a = g.maxpool_over_axis(v[0], 1)?;
        let s1 = weighted_sum(g, a, seed)?;
        let b = g.maxpool_over_axis(v[0], 0)?;
        let s2 = weighted_sum(g, b, seed + 1)?;
        g.add(s1, s2)
    })
}

fn case_affine(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, TensorError> {
    let x = random_tensor(rng, &[5, 3], 0.0);
    let w = random_tensor(rng, &[3, 4], 0.0);
    let b = random_tensor(rng, &[4], 0.0);
    check(&[x, w, b], EPSILON, |g, v| {
        let y1 = g.affine(v[0], v[1], v[2], false)?;
        let s1 = weighted_sum(g, y1, seed)?;
        let y2 = g.affine(v[0], v[1], v[2], true)?;
        let s2 = weighted_sum(g, y2, seed + 1)?;
        g.add(s1, s2)
    })
}

fn case_row_group_max(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, TensorError> {
    let x = spread_tensor(rng, &[6, 4]);
    check(&[x], EPSILON, |g, v| {
        let y = g.max_over_row_groups(v[0], 3)?;
        weighted_sum(g, y, seed)
    })
}

fn case_segment_max(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, TensorError> {
    let x = spread_tensor(rng, &[7, 3]);
    let segments = [0, 2, 0, 3, 3, 2, 0];
    check(&[x], EPSILON, |g, v| {
        let y = g.segment_max(v[0], &segments, 4)?;
        weighted_sum(g, y, seed)
    })
}

fn case_conv1d(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, TensorError> {
    let x = random_tensor(rng, &[2, 5, 3], 0.0);
    let k = random_tensor(rng, &[2, 3, 4], 0.0);
    check(&[x, k], EPSILON, |g, v| {
        let y1 = g.conv1d(v[0], v[1], 1)?;
        let s1 = weighted_sum(g, y1, seed)?;
        let y2 = g.conv1d(v[0], v[1], 2)?;
        let s2 = weighted_sum(g, y2, seed + 1)?;
        g.add(s1, s2)
    })
}

fn case_concat(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, TensorError> {
    let a = random_tensor(rng, &[4, 2], 0.0);
    let b = random_tensor(rng, &[4, 3], 0.0);
    check(&[a, b], EPSILON, |g, v| {
        let y = g.concat(v[0], v[1], 1)?;
        weighted_sum(g, y, seed)
    })
}

fn case_gather_reshape(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, TensorError> {
    let x = random_tensor(rng, &[5, 2], 0.0);
    check(&[x], EPSILON, |g, v| {
        let y = g.gather_rows(v[0], &[4, 0, 4, 2, 1, 1])?;
        let r = g.reshape(y, &[3, 4])?;
        weighted_sum(g, r, seed)
    })
}

fn case_cross_entropy(rng: &mut ChaCha8Rng, _seed: u64) -> Result<f64, TensorError> {
    let logits = random_tensor(rng, &[3, 5], 0.0).mapv(|v| 3.0 * v);
    let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
    check(&[logits], EPSILON, |g, v| g.softmax_cross_entropy(v[0], &targets))
}

fn case_mlp_pool_conv(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64, TensorError> {
    let x = random_tensor(rng, &[8, 3], 0.0);
    let w = random_tensor(rng, &[3, 4], 0.0);
    let b = random_tensor(rng, &[4], 0.0);
    let k = random_tensor(rng, &[2, 4, 3], 0.0);
    check(&[x, w, b, k], EPSILON, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_bias(h, v[2])?;
        let h = g.relu(h)?;
        let h = g.reshape(h, &[2, 2, 2, 4])?;
        let p = g.maxpool_over_axis(h, 2)?;
        let y = g.conv1d(p, v[3], 1)?;
        weighted_sum(g, y, seed)
    })
}

const CASES: &[(&str, Case)] = &[
    ("matmul", case_matmul),
    ("add_bias", case_add_bias),
    ("relu", case_relu),
    ("affine", case_affine),
    ("maxpool_over_axis", case_maxpool),
    ("max_over_row_groups", case_row_group_max),
    ("segment_max", case_segment_max),
    ("conv1d", case_conv1d),
    ("concat", case_concat),
    ("gather_rows+reshape", case_gather_reshape),
    ("softmax_cross_entropy", case_cross_entropy),
    ("mlp+pool+conv chain", case_mlp_pool_conv),
];

/// Runs every operator check over `seeds` seeds (starting at `first_seed`).
pub fn operator_suite(first_seed: u64, seeds: usize) -> Result<Vec<GradCheckReport>, TensorError> {
    CASES
        .iter()
        .map(|(name, case)| {
            let mut worst = 0.0_f64;
            for s in first_seed..first_seed + seeds as u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                worst = worst.max(case(&mut rng, s)?);
            }
            Ok(GradCheckReport {
                name: (*name).to_string(),
                seeds,
                max_rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!(relative_error(1e-9, 0.0) < 1e-2);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x * x with x a constant copy: the graph sees only one differentiable
        // path, so the analytic gradient is half the true one.
        let x = ArrayD::from_elem(IxDyn(&[1]), 1.5);
        let err = check(&[x], EPSILON, |g, v| {
            let c = g.constant(g.value(v[0]).clone())?;
            let y = g.mul(v[0], c)?;
            g.sum(y)
        })
        .unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn every_operator_passes() {
        for r in operator_suite(0, 3).unwrap() {
            assert!(r.passed(), "{} max rel error {}", r.name, r.max_rel_error);
        }
    }
}
