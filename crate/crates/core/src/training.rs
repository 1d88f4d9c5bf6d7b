//! Adam, jitter augmentation, the epoch loop and evaluation metrics.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Real, TensorError};
use crate::data::{save_checkpoint, DataError, Dataset};
use crate::geometry::{GeometryError, Labels, PointCloud};
use crate::network::{argmax_rows, Network, NetworkError, SamplePlan};
use crate::seed;

/// Jitter offsets are clipped to this many standard deviations.
pub const JITTER_CLIP: f64 = 3.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("adam: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("metrics output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_epsilon: f64,
    pub epochs: usize,
    /// Standard deviation of the coordinate jitter, in model units.
    pub jitter_sigma: f64,
    pub seed: u64,
    /// Evaluate (and checkpoint) every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Draw fresh representatives every epoch instead of once per cloud.
    pub resample: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            epochs: 30,
            jitter_sigma: 0.01,
            seed: 0,
            eval_every: 1,
            resample: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        // zero is accepted so that frozen runs can be expressed
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam_betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return bad("jitter_sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First and second moments per parameter tensor, and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[ArrayD<T>]) -> Self {
        let zeros = || params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step<T: Real>(
    params: &mut [ArrayD<T>],
    grads: &[ArrayD<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(TrainError::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape()
        {
            return Err(TrainError::Shape(format!(
                "tensor {i}: parameter {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_b1 = T::from_f64(1.0 - cfg.beta1);
    let one_b2 = T::from_f64(1.0 - cfg.beta2);
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.epsilon);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

/// Adds seeded Gaussian noise with standard deviation `sigma` to every
/// coordinate, clipped to `JITTER_CLIP * sigma`. Labels and features are kept.
pub fn augment_jitter(cloud: &PointCloud, sigma: f64, seed: u64) -> PointCloud {
    if sigma == 0.0 {
        return cloud.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = JITTER_CLIP * sigma;
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            p.map(|c| {
                let d: f64 = normal.sample(&mut rng);
                (c as f64 + d.clamp(-limit, limit)) as f32
            })
        })
        .collect();
    cloud.with_points(points).expect("same point count")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub overall_accuracy: f64,
    /// `None` for labels absent from the ground truth.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean over labels present in the ground truth or the predictions.
    pub mean_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test: Option<EvalMetrics>,
    pub wall_time_s: f64,
}

/// Row = ground truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(labels: usize) -> Self {
        Self {
            counts: vec![vec![0; labels]; labels],
        }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        match self.total() {
            0 => 0.0,
            n => correct as f64 / n as f64,
        }
    }

    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Option<f64> {
        let k = self.counts.len();
        let ious: Vec<f64> = (0..k)
            .filter_map(|c| {
                let tp = self.counts[c][c];
                let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|r| self.counts[r][c]).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

fn flat_targets(clouds: &[PointCloud]) -> Vec<usize> {
    let mut out = Vec::new();
    for c in clouds {
        match c.labels() {
            Labels::Cloud(l) => out.push(*l as usize),
            Labels::Points(ls) => out.extend(ls.iter().map(|&l| l as usize)),
            Labels::None => {}
        }
    }
    out
}

fn non_finite(epoch: usize, batch: usize, e: NetworkError) -> TrainError {
    match e {
        NetworkError::Tensor(TensorError::NonFinite { op }) => TrainError::NonFinite {
            epoch,
            batch,
            detail: format!("{op} produced a non-finite value"),
        },
        other => other.into(),
    }
}

/// Fixed representatives of one stored cloud, used for evaluation and for
/// training without resampling.
fn fixed_plan<T: Real>(
    net: &Network<T>,
    cloud: &PointCloud,
    base_seed: u64,
    index: usize,
) -> Result<SamplePlan, NetworkError> {
    net.plan(cloud, seed::derive(base_seed, 0xe7a1_0000 + index as u64))
}

/// Metrics of `net` on `indices` of `data`, with representatives fixed by
/// `seed`. Pure: repeated calls agree exactly.
pub fn evaluate<T: Real>(
    net: &Network<T>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<EvalMetrics, TrainError> {
    let mut confusion = Confusion::new(net.config().num_outputs);
    let mut loss_sum = 0.0;
    let mut rows = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let clouds: Vec<PointCloud> = chunk.iter().map(|&i| data.clouds[i].clone()).collect();
        let plans = chunk
            .iter()
            .zip(&clouds)
            .map(|(&i, c)| fixed_plan(net, c, seed, i))
            .collect::<Result<Vec<_>, _>>()?;
        let mut g = Graph::new();
        let bound = net.params().bind(&mut g).map_err(NetworkError::from)?;
        let (loss, logits) = net.loss(&mut g, &bound, &clouds, &plans)?;
        let n = g.shape(logits)[0];
        loss_sum += g.value(loss).iter().next().map_or(0.0, |v| v.as_()) * n as f64;
        rows += n;
        for (t, p) in flat_targets(&clouds).into_iter().zip(argmax_rows(g.value(logits))) {
            confusion.add(t, p);
        }
    }
    Ok(EvalMetrics {
        loss: if rows > 0 { loss_sum / rows as f64 } else { 0.0 },
        overall_accuracy: confusion.overall_accuracy(),
        per_class_accuracy: confusion.per_class_accuracy(),
        mean_iou: confusion.mean_iou(),
    })
}

/// Where a run writes its artifacts; every field is optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Line-delimited JSON, one record per epoch, appended.
    pub metrics: Option<PathBuf>,
    /// Overwritten every `eval_every` epochs and after the last epoch.
    pub checkpoint: Option<PathBuf>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub net: Network<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl<T: Real> Trainer<T> {
    pub fn new(net: Network<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = AdamState::new(net.params().values());
        Ok(Self {
            net,
            adam,
            config,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Runs one epoch over the training split. The epoch's shuffling,
    /// jitter and sampling all derive from `(seed, epoch)`, so a resumed run
    /// replays exactly what an uninterrupted one would.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics, TrainError> {
        let start = Instant::now();
        let cfg = self.config.clone();
        let epoch = self.epoch;
        if data.train.is_empty() {
            return Err(DataError::Invalid("empty training split".into()).into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, epoch as u64));
        let mut order = data.train.clone();
        order.shuffle(&mut rng);
        let adam = cfg.adam();

        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let clouds: Vec<PointCloud> = chunk
                .iter()
                .map(|&i| augment_jitter(&data.clouds[i], cfg.jitter_sigma, rng.next_u64()))
                .collect();
            let plans = if cfg.resample {
                self.net.plans(&clouds, rng.next_u64())
            } else {
                chunk
                    .iter()
                    .zip(&clouds)
                    .map(|(&i, c)| fixed_plan(&self.net, c, cfg.seed, i))
                    .collect()
            }
            .map_err(|e| non_finite(epoch, b, e))?;

            let mut g = Graph::new();
            let bound = self.net.params().bind(&mut g).map_err(NetworkError::from)?;
            let (loss, logits) = self
                .net
                .loss(&mut g, &bound, &clouds, &plans)
                .map_err(|e| non_finite(epoch, b, e))?;
            let loss_value: f64 = g.value(loss).iter().next().map_or(f64::NAN, |v| v.as_());
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("loss = {loss_value}"),
                });
            }
            let targets = flat_targets(&clouds);
            correct += targets
                .iter()
                .zip(argmax_rows(g.value(logits)))
                .filter(|(t, p)| **t == *p)
                .count();
            loss_sum += loss_value * targets.len() as f64;
            rows += targets.len();

            g.backward(loss).map_err(NetworkError::from)?;
            let grads = self.net.params().collect_grads(&mut g, &bound);
            adam_step(self.net.params_mut().values_mut(), &grads, &mut self.adam, &adam)?;
        }
        self.epoch += 1;

        let test = if cfg.eval_every > 0 && self.epoch % cfg.eval_every == 0 && !data.test.is_empty()
        {
            Some(evaluate(&self.net, data, &data.test, cfg.batch_size, cfg.seed)?)
        } else {
            None
        };
        let metrics = EpochMetrics {
            epoch: self.epoch,
            train_loss: loss_sum / rows.max(1) as f64,
            train_accuracy: correct as f64 / rows.max(1) as f64,
            test,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    /// Runs epochs until `config.epochs` are complete or `on_epoch` returns
    /// false, writing metrics and checkpoints as requested.
    pub fn fit(
        &mut self,
        data: &Dataset,
        outputs: &TrainOutputs,
        mut on_epoch: impl FnMut(&EpochMetrics) -> bool,
    ) -> Result<(), TrainError> {
        data.validate(self.net.config().num_outputs)?;
        while self.epoch < self.config.epochs {
            let m = self.run_epoch(data)?;
            if let Some(path) = &outputs.metrics {
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)?;
                writeln!(f, "{}", serde_json::to_string(&m).map_err(DataError::from)?)?;
            }
            let last = self.epoch == self.config.epochs;
            let due = self.config.eval_every > 0 && self.epoch % self.config.eval_every == 0;
            let keep_going = on_epoch(&m);
            if let Some(path) = &outputs.checkpoint {
                if due || last || !keep_going {
                    save_checkpoint(self, path)?;
                }
            }
            if !keep_going {
                break;
            }
        }
        Ok(())
    }
}

/// Trains a fresh network and returns it with its metrics history.
pub fn train<T: Real>(
    net: Network<T>,
    data: &Dataset,
    config: TrainConfig,
    outputs: &TrainOutputs,
) -> Result<(Network<T>, Vec<EpochMetrics>), TrainError> {
    let mut t = Trainer::new(net, config)?;
    t.fit(data, outputs, |_| true)?;
    Ok((t.net, t.history))
}

impl From<GeometryError> for TrainError {
    fn from(e: GeometryError) -> Self {
        TrainError::Network(e.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = vec![arr1(&[1.0f64, -2.0]).into_dyn()];
        let mut s = AdamState::new(&p);
        s.v[0] = arr1(&[0.25, 0.25]).into_dyn();
        let cfg = TrainConfig::default().adam();
        adam_step(&mut p, &[arr1(&[0.0, 0.0]).into_dyn()], &mut s, &cfg).unwrap();
        assert_eq!(p[0], arr1(&[1.0, -2.0]).into_dyn());
        assert_eq!(s.v[0], arr1(&[0.25 * 0.999, 0.25 * 0.999]).into_dyn());
    }

    #[test]
    fn quadratic_descent() {
        // momentum overshoots zero once |x| is below the step size, so the
        // decrease is strict only until the first sign change; afterwards
        // the oscillation envelope shrinks
        let mut p = vec![arr1(&[1.0f64]).into_dyn()];
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..TrainConfig::default().adam()
        };
        let mut xs = vec![1.0f64];
        for _ in 0..50 {
            let g = p[0].mapv(|x| 2.0 * x);
            adam_step(&mut p, &[g], &mut s, &cfg).unwrap();
            xs.push(p[0][0]);
        }
        let flip = xs.iter().position(|&x| x < 0.0).unwrap();
        assert!(xs[..flip].windows(2).all(|w| w[1].abs() < w[0].abs()));
        let peak = |r: std::ops::Range<usize>| xs[r].iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(peak(31..51) < peak(flip..31));
        assert!(xs[50].abs() < 0.01);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = vec![arr1(&[1.0f64]).into_dyn()];
        let mut s = AdamState::new(&p);
        let g = arr1(&[1.0, 2.0]).into_dyn();
        assert!(matches!(
            adam_step(&mut p, &[g], &mut s, &TrainConfig::default().adam()),
            Err(TrainError::Shape(_))
        ));
    }

    #[test]
    fn jitter_identity_determinism_and_spread() {
        let pts: Vec<[f32; 3]> = (0..10_000).map(|i| [i as f32 * 1e-4, 0.0, 0.0]).collect();
        let c = PointCloud::new(pts).unwrap().with_labels(Labels::Cloud(2)).unwrap();
        assert_eq!(augment_jitter(&c, 0.0, 5), c);
        let a = augment_jitter(&c, 0.02, 5);
        assert_eq!(a, augment_jitter(&c, 0.02, 5));
        assert_eq!(a.labels(), c.labels());
        let d: Vec<f64> = a
            .points()
            .iter()
            .zip(c.points())
            .flat_map(|(p, q)| (0..3).map(move |k| p[k] as f64 - q[k] as f64))
            .collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / 0.02 - 1.0).abs() < 0.05, "std {std}");
        assert!(d.iter().all(|v| v.abs() <= JITTER_CLIP * 0.02 + 1e-6));
    }

    #[test]
    fn confusion_metrics() {
        let mut perfect = Confusion::new(3);
        for c in 0..3 {
            perfect.add(c, c);
        }
        assert_eq!(perfect.overall_accuracy(), 1.0);
        assert_eq!(perfect.mean_iou(), Some(1.0));

        let mut wrong = Confusion::new(2);
        for _ in 0..4 {
            wrong.add(0, 1);
        }
        assert_eq!(wrong.overall_accuracy(), 0.0);
        assert_eq!(wrong.per_class_accuracy(), vec![Some(0.0), None]);

        // truth\pred: [[3,1,0],[2,4,1],[0,1,5]] worked by hand:
        // IoU0 = 3/(3+2+1) = 1/2, IoU1 = 4/(4+2+3) = 4/9, IoU2 = 5/(5+1+1) = 5/7
        let table = [[3, 1, 0], [2, 4, 1], [0, 1, 5]];
        let mut c = Confusion::new(3);
        for (t, row) in table.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    c.add(t, p);
                }
            }
        }
        let want = (0.5 + 4.0 / 9.0 + 5.0 / 7.0) / 3.0;
        assert!((c.mean_iou().unwrap() - want).abs() < 1e-15);
        assert!((c.overall_accuracy() - 12.0 / 17.0).abs() < 1e-15);
    }

    #[test]
    fn absent_labels_excluded_from_miou() {
        let mut c = Confusion::new(4);
        c.add(0, 0);
        c.add(1, 1);
        assert_eq!(c.mean_iou(), Some(1.0));
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..Default::default()
            },
            TrainConfig {
                adam_betas: (1.0, 0.5),
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
