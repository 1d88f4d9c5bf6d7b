//! Whole networks: a shell-convolution encoder followed either by a global
//! classification head or by a U-shaped decoder with skip connections that
//! returns per-point logits.

pub mod accounting;
mod config;

use ndarray::{ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{LayerSpec, NetworkConfig, Preset, Task};

use crate::autodiff::{Graph, Real, TensorError, Var};
use crate::seed;
use crate::geometry::{sample_representatives, GeometryError, KnnSpace, Labels, Point, PointCloud};
use crate::params::{Bound, ParamStore};
use crate::shellconv::{
    query_neighbors, shell_conv_batch, Activation, Center, Linear, Neighborhoods, ShellConvError,
    ShellConvParams, ShellPlan,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("segmentation needs the decoder: encoder output does not match input resolution")]
    ResolutionMismatch,
    #[error("ragged batch: cloud {index} has {found} points, expected {expected}")]
    RaggedBatch {
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error("input has {found} points but the network needs at least {needed}")]
    InputTooSmall { found: usize, needed: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("cloud {index}: {detail}")]
    Labels { index: usize, detail: String },
    #[error("{0} sampling plans for {1} clouds")]
    PlanCount(usize, usize),
    #[error(transparent)]
    ShellConv(#[from] ShellConvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

type Result<T> = std::result::Result<T, NetworkError>;

/// Representative indices chosen for one cloud: `layers[0]` indexes the input
/// points, `layers[i]` indexes the representatives of layer `i - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePlan {
    pub layers: Vec<Vec<usize>>,
}

impl SamplePlan {
    /// The plan for a copy of the cloud stored in the order `order` (point
    /// `i` of the copy is point `order[i]` of the original).
    pub fn reordered(&self, order: &[usize]) -> Self {
        let mut inverse = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        let mut layers = self.layers.clone();
        if let Some(first) = layers.first_mut() {
            for r in first.iter_mut() {
                *r = inverse[*r];
            }
        }
        Self { layers }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real> {
    config: NetworkConfig,
    store: ParamStore<T>,
    encoder: Vec<ShellConvParams>,
    decoder: Vec<ShellConvParams>,
    head: Vec<Linear>,
    skip_connections: bool,
}

pub fn build_classifier<T: Real>(config: &NetworkConfig) -> Result<Network<T>> {
    if config.task != Task::Classification {
        return Err(NetworkError::Config("build_classifier needs task = classification".into()));
    }
    Network::build(config)
}

pub fn build_segmenter<T: Real>(config: &NetworkConfig) -> Result<Network<T>> {
    if config.task != Task::Segmentation {
        return Err(NetworkError::Config("build_segmenter needs task = segmentation".into()));
    }
    Network::build(config)
}

impl<T: Real> Network<T> {
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let ss = config.shell_size;

        let mut encoder = Vec::with_capacity(config.layers.len());
        let mut prev_width = 0;
        for (i, l) in config.layers.iter().enumerate() {
            let plan = ShellPlan {
                shell_size: ss,
                num_shells: l.shells,
                out_channels: l.channels,
            };
            encoder.push(ShellConvParams::new(
                &mut store,
                &format!("encoder.{i}"),
                prev_width,
                &config.lift_widths,
                plan,
                &mut rng,
            ));
            prev_width = l.channels;
        }

        let mut decoder = Vec::new();
        let head_in = match config.task {
            Task::Classification => prev_width,
            Task::Segmentation => {
                // decoder layer j rebuilds the level below encoder layer
                // (L - 1 - j), querying with that encoder layer's shell count
                let n = config.layers.len();
                for j in 0..n {
                    let source = n - 1 - j;
                    let out_channels = if source == 0 {
                        config.final_channels
                    } else {
                        config.layers[source - 1].channels
                    };
                    let plan = ShellPlan {
                        shell_size: ss,
                        num_shells: config.layers[source].shells,
                        out_channels,
                    };
                    decoder.push(ShellConvParams::new(
                        &mut store,
                        &format!("decoder.{j}"),
                        prev_width,
                        &config.lift_widths,
                        plan,
                        &mut rng,
                    ));
                    // skip features are appended after every layer but the last
                    prev_width = if source == 0 {
                        out_channels
                    } else {
                        out_channels + config.layers[source - 1].channels
                    };
                }
                prev_width
            }
        };

        let mut head = Vec::new();
        let mut width = head_in;
        for (i, &w) in config.head_widths.iter().enumerate() {
            head.push(Linear::new(&mut store, &format!("head.{i}"), width, w, &mut rng));
            width = w;
        }
        head.push(Linear::new(
            &mut store,
            &format!("head.{}", config.head_widths.len()),
            width,
            config.num_outputs,
            &mut rng,
        ));

        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            decoder,
            head,
            skip_connections: true,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoder(&self) -> &[ShellConvParams] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[ShellConvParams] {
        &self.decoder
    }

    pub fn head(&self) -> &[Linear] {
        &self.head
    }

    /// When disabled, the decoder receives zeros in place of the encoder's
    /// skip features. Widths and parameters are unchanged.
    pub fn set_skip_connections(&mut self, enabled: bool) {
        self.skip_connections = enabled;
    }

    pub fn skip_connections(&self) -> bool {
        self.skip_connections
    }

    /// Draws representatives for every encoder layer of `cloud`.
    pub fn plan(&self, cloud: &PointCloud, seed: u64) -> Result<SamplePlan> {
        let needed = self.config.min_input_points();
        if cloud.len() < needed {
            return Err(NetworkError::InputTooSmall {
                found: cloud.len(),
                needed,
            });
        }
        let mut level: Vec<Point> = cloud.points().to_vec();
        let mut layers = Vec::with_capacity(self.config.layers.len());
        for (i, l) in self.config.layers.iter().enumerate() {
            let reps = sample_representatives(
                &level,
                l.points,
                self.config.sampling,
                seed::derive(seed, i as u64 + 1),
            )?;
            level = reps.iter().map(|&r| level[r]).collect();
            layers.push(reps);
        }
        Ok(SamplePlan { layers })
    }

    pub fn plans(&self, clouds: &[PointCloud], seed: u64) -> Result<Vec<SamplePlan>> {
        clouds
            .iter()
            .enumerate()
            .map(|(i, c)| self.plan(c, seed::derive(seed, 0x1000 + i as u64)))
            .collect()
    }

    fn check_batch(&self, clouds: &[PointCloud], plans: &[SamplePlan]) -> Result<usize> {
        let first = clouds.first().ok_or(NetworkError::EmptyBatch)?;
        let n = first.len();
        if let Some((index, c)) = clouds.iter().enumerate().find(|(_, c)| c.len() != n) {
            return Err(NetworkError::RaggedBatch {
                index,
                found: c.len(),
                expected: n,
            });
        }
        let needed = self.config.min_input_points();
        if n < needed {
            return Err(NetworkError::InputTooSmall { found: n, needed });
        }
        if plans.len() != clouds.len() {
            return Err(NetworkError::PlanCount(plans.len(), clouds.len()));
        }
        for (index, p) in plans.iter().enumerate() {
            let ok = p.layers.len() == self.config.layers.len()
                && p.layers
                    .iter()
                    .zip(&self.config.layers)
                    .all(|(reps, l)| reps.len() == l.points);
            if !ok {
                return Err(NetworkError::Labels {
                    index,
                    detail: "sampling plan does not match the layer plan".into(),
                });
            }
        }
        Ok(n)
    }

    /// Forward pass over a batch of equally sized clouds.
    ///
    /// Classification returns `[batch, num_outputs]` logits; segmentation
    /// returns `[batch, points, num_outputs]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        clouds: &[PointCloud],
        plans: &[SamplePlan],
    ) -> Result<Var> {
        let n_input = self.check_batch(clouds, plans)?;
        let b = clouds.len();
        let cfg = &self.config;

        let input_points: Vec<Vec<Point>> = clouds.iter().map(|c| c.points().to_vec()).collect();
        let mut level_points = input_points.clone();
        let mut level_size = n_input;
        let mut features: Option<Var> = None;
        // (points per cloud, features, points per cloud count) of each encoder level
        let mut skips: Vec<(Vec<Vec<Point>>, Var, usize)> = Vec::new();

        for (i, (params, spec)) in self.encoder.iter().zip(&cfg.layers).enumerate() {
            let values = match (cfg.knn_space, features) {
                (KnnSpace::Features, Some(f)) => Some(
                    g.value(f)
                        .view()
                        .into_dimensionality::<Ix2>()
                        .expect("2-d features")
                        .to_owned(),
                ),
                _ => None,
            };
            let mut hoods = Neighborhoods::new(cfg.partition, spec.shells);
            let mut next_points = Vec::with_capacity(b);
            for (bi, plan) in plans.iter().enumerate() {
                let pts = &level_points[bi];
                let view: Option<ArrayView2<T>> = values.as_ref().map(|v| {
                    v.slice_axis(Axis(0), Slice::from(bi * level_size..(bi + 1) * level_size))
                });
                for &r in &plan.layers[i] {
                    let set = query_neighbors(
                        pts,
                        view,
                        Center::Member(r),
                        params.plan.neighbors(),
                        cfg.knn_space,
                    )?;
                    hoods.push(pts[r], &set, pts, bi * level_size);
                }
                next_points.push(plan.layers[i].iter().map(|&r| pts[r]).collect::<Vec<_>>());
            }
            let out = shell_conv_batch(g, bound, params, &hoods, features)?;
            level_points = next_points;
            level_size = spec.points;
            features = Some(out);
            skips.push((level_points.clone(), out, level_size));
        }
        let encoded = features.expect("at least one layer");

        match cfg.task {
            Task::Classification => {
                let c = g.shape(encoded)[1];
                let grouped = g.reshape(encoded, &[b, level_size, c])?;
                let pooled = g.maxpool_over_axis(grouped, 1)?;
                self.head_forward(g, bound, pooled)
            }
            Task::Segmentation => {
                let mut current = encoded;
                let levels = skips.len();
                for (j, params) in self.decoder.iter().enumerate() {
                    let source = levels - 1 - j;
                    let (src_points, _, src_size) = &skips[source];
                    let (centers, skip): (&Vec<Vec<Point>>, Option<Var>) = if source == 0 {
                        (&input_points, None)
                    } else {
                        (&skips[source - 1].0, Some(skips[source - 1].1))
                    };
                    let mut hoods = Neighborhoods::new(cfg.partition, params.plan.num_shells);
                    for bi in 0..b {
                        let pts = &src_points[bi];
                        for (ci, &center) in centers[bi].iter().enumerate() {
                            let set = query_neighbors::<T>(
                                pts,
                                None,
                                Center::External {
                                    point: center,
                                    index: ci,
                                },
                                params.plan.neighbors(),
                                KnnSpace::Coordinates,
                            )?;
                            hoods.push(center, &set, pts, bi * src_size);
                        }
                    }
                    let out = shell_conv_batch(g, bound, params, &hoods, Some(current))?;
                    current = match skip {
                        Some(s) if self.skip_connections => g.concat(out, s, 1)?,
                        Some(s) => {
                            let zeros = ArrayD::zeros(IxDyn(g.shape(s)));
                            let zeros = g.constant(zeros)?;
                            g.concat(out, zeros, 1)?
                        }
                        None => out,
                    };
                }
                let logits = self.head_forward(g, bound, current)?;
                Ok(g.reshape(logits, &[b, n_input, cfg.num_outputs])?)
            }
        }
    }

    fn head_forward(&self, g: &mut Graph<T>, bound: &Bound, mut x: Var) -> Result<Var> {
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            let act = if i < last {
                Activation::Relu
            } else {
                Activation::Identity
            };
            x = layer.forward_with(g, bound, x, act)?;
        }
        Ok(x)
    }

    /// Forward pass on a fresh graph, returning logit values only.
    pub fn predict(&self, clouds: &[PointCloud], plans: &[SamplePlan]) -> Result<ArrayD<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g)?;
        let out = self.forward(&mut g, &bound, clouds, plans)?;
        Ok(g.value(out).clone())
    }

    /// Cross-entropy loss of a forward pass against the clouds' labels.
    /// Returns the loss and the logits (`[rows, num_outputs]`).
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        clouds: &[PointCloud],
        plans: &[SamplePlan],
    ) -> Result<(Var, Var)> {
        let targets = self.targets(clouds)?;
        let logits = self.forward(g, bound, clouds, plans)?;
        let flat = g.reshape(logits, &[targets.len(), self.config.num_outputs])?;
        let loss = g.softmax_cross_entropy(flat, &targets)?;
        Ok((loss, flat))
    }

    /// Flattened training targets for a batch, one per cloud or per point.
    pub fn targets(&self, clouds: &[PointCloud]) -> Result<Vec<usize>> {
        let k = self.config.num_outputs;
        let mut out = Vec::new();
        for (index, c) in clouds.iter().enumerate() {
            let check = |l: u32| {
                if (l as usize) < k {
                    Ok(l as usize)
                } else {
                    Err(NetworkError::Labels {
                        index,
                        detail: format!("label {l} out of range for {k} outputs"),
                    })
                }
            };
            match (self.config.task, c.labels()) {
                (Task::Classification, Labels::Cloud(l)) => out.push(check(*l)?),
                (Task::Segmentation, Labels::Points(ls)) => {
                    for &l in ls {
                        out.push(check(l)?);
                    }
                }
                (task, _) => {
                    return Err(NetworkError::Labels {
                        index,
                        detail: format!("missing labels for {task:?}"),
                    })
                }
            }
        }
        Ok(out)
    }
}

/// Row-wise argmax of a logits matrix.
pub fn argmax_rows<T: Real>(logits: &ArrayD<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    let flat = logits
        .view()
        .into_shape_with_order(IxDyn(&[logits.len() / k.max(1), k]))
        .expect("contiguous logits");
    flat.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
