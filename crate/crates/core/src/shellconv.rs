//! The shell convolution operator.
//!
//! For every representative point the operator localizes its neighbors,
//! lifts each localized offset with a shared pointwise MLP, concatenates any
//! features carried over from the previous layer, max-pools channelwise
//! inside each concentric shell and finally runs a 1D convolution over the
//! shells from the innermost outwards.
//!
//! All representatives of a batch are evaluated in one pass: their
//! neighborhoods are stacked row-wise so the lift is a single matrix product.

use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Real, TensorError, Var};
use crate::geometry::{
    dist2_points, equidistant_shell_ids, knn_points, knn_rows, GeometryError, KnnSpace,
    NeighborSet, Point,
};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShellConvError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("previous features have {rows} rows, expected {expected}")]
    Misaligned { rows: usize, expected: usize },
    #[error("previous features have width {width}, layer expects {expected}")]
    Width { width: usize, expected: usize },
}

type Result<T> = std::result::Result<T, ShellConvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    /// `shell_size` consecutive nearest neighbors per shell.
    #[default]
    Fixed,
    /// Equally thick shells out to the farthest neighbor; populations vary.
    Equidistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> std::result::Result<Var, TensorError> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// A dense layer `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_glorot(
            format!("{name}.weight"),
            &[inputs, outputs],
            inputs,
            outputs,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), &[outputs]);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
    ) -> std::result::Result<Var, TensorError> {
        self.forward_with(g, bound, x, Activation::Identity)
    }

    pub fn forward_with<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        activation: Activation,
    ) -> std::result::Result<Var, TensorError> {
        g.affine(
            x,
            bound.get(self.weight),
            bound.get(self.bias),
            activation == Activation::Relu,
        )
    }

    pub fn num_scalars(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Shape of one shell convolution: how many shells of how many points, and
/// how many output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShellPlan {
    pub shell_size: usize,
    pub num_shells: usize,
    pub out_channels: usize,
}

impl ShellPlan {
    /// Neighbors gathered per representative.
    pub fn neighbors(&self) -> usize {
        self.shell_size * self.num_shells
    }
}

/// Trainable state of one shell convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ShellConvParams {
    pub lift: Vec<Linear>,
    /// `[num_shells, mid_width, out_channels]`; spans every shell.
    pub kernel: ParamId,
    pub kernel_bias: ParamId,
    pub plan: ShellPlan,
    pub prev_width: usize,
    pub activation: Activation,
}

impl ShellConvParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        prev_width: usize,
        lift_widths: &[usize],
        plan: ShellPlan,
        rng: &mut R,
    ) -> Self {
        let mut lift = Vec::with_capacity(lift_widths.len());
        let mut width = 3;
        for (i, &w) in lift_widths.iter().enumerate() {
            lift.push(Linear::new(store, &format!("{name}.lift{i}"), width, w, rng));
            width = w;
        }
        let mid = prev_width + width;
        let s = plan.num_shells;
        let kernel = store.add_glorot(
            format!("{name}.kernel"),
            &[s, mid, plan.out_channels],
            s * mid,
            s * plan.out_channels,
            rng,
        );
        let kernel_bias = store.add_zeros(format!("{name}.kernel_bias"), &[plan.out_channels]);
        Self {
            lift,
            kernel,
            kernel_bias,
            plan,
            prev_width,
            activation: Activation::Relu,
        }
    }

    pub fn lift_width(&self) -> usize {
        self.lift.last().map_or(3, |l| l.outputs)
    }

    /// Channels entering the per-shell pooling: previous features then lifted.
    pub fn mid_width(&self) -> usize {
        self.prev_width + self.lift_width()
    }

    pub fn num_scalars(&self) -> usize {
        let lift: usize = self.lift.iter().map(Linear::num_scalars).sum();
        let c = self.plan.out_channels;
        lift + self.plan.num_shells * self.mid_width() * c + c
    }
}

/// A center for a neighbor query: either a member of the queried cloud or an
/// outside location (decoder layers center on finer points).
#[derive(Debug, Clone, Copy)]
pub enum Center {
    Member(usize),
    External { point: Point, index: usize },
}

/// Finds the `k` neighbors of `center` among `points` and reorders them by
/// spatial distance for shell construction.
///
/// Feature-space queries select the neighbor set by feature distance, but the
/// shells are still grown spatially from the center. Outside centers, and
/// sources without features, always query coordinates.
pub fn query_neighbors<T: Real>(
    points: &[Point],
    features: Option<ArrayView2<T>>,
    center: Center,
    k: usize,
    space: KnnSpace,
) -> std::result::Result<NeighborSet, GeometryError> {
    let (center_point, index) = match center {
        Center::Member(i) => {
            let p = *points.get(i).ok_or(GeometryError::Index {
                index: i,
                len: points.len(),
            })?;
            (p, i)
        }
        Center::External { point, index } => (point, index),
    };
    match (space, features, center) {
        (KnnSpace::Features, Some(f), Center::Member(i)) => {
            let set = knn_rows(f, f.row(i), k, index)?;
            Ok(spatially_sorted(&set, points, &center_point))
        }
        _ => knn_points(points, &center_point, k, index),
    }
}

fn spatially_sorted(set: &NeighborSet, points: &[Point], center: &Point) -> NeighborSet {
    let mut pairs: Vec<(f64, usize)> = set
        .indices
        .iter()
        .map(|&i| (dist2_points(&points[i], center), i))
        .collect();
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    NeighborSet {
        center_index: set.center_index,
        indices: pairs.iter().map(|p| p.1).collect(),
        distances: pairs.iter().map(|p| p.0.sqrt()).collect(),
    }
}

/// Stacked neighborhoods of many representatives, ready for one batched
/// shell convolution.
#[derive(Debug, Clone)]
pub struct Neighborhoods {
    mode: PartitionMode,
    num_shells: usize,
    centers: Vec<Point>,
    /// CSR offsets into the per-neighbor arrays.
    offsets: Vec<usize>,
    localized: Vec<[f64; 3]>,
    rows: Vec<usize>,
    shell_ids: Vec<usize>,
}

impl Neighborhoods {
    pub fn new(mode: PartitionMode, num_shells: usize) -> Self {
        Self {
            mode,
            num_shells,
            centers: Vec::new(),
            offsets: vec![0],
            localized: Vec::new(),
            rows: Vec::new(),
            shell_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[Point] {
        &self.centers
    }

    /// Appends one representative. `set` must be sorted by distance to
    /// `center`; `row_offset` maps its indices to rows of the previous
    /// feature matrix.
    pub fn push(&mut self, center: Point, set: &NeighborSet, points: &[Point], row_offset: usize) {
        self.centers.push(center);
        for &i in &set.indices {
            let q = points[i];
            self.localized.push([
                q[0] as f64 - center[0] as f64,
                q[1] as f64 - center[1] as f64,
                q[2] as f64 - center[2] as f64,
            ]);
            self.rows.push(row_offset + i);
        }
        if self.mode == PartitionMode::Equidistant {
            self.shell_ids
                .extend(equidistant_shell_ids(&set.distances, self.num_shells));
        }
        self.offsets.push(self.rows.len());
    }

    fn uniform_count(&self) -> Option<usize> {
        let k = self.offsets.get(1)? - self.offsets[0];
        self.offsets.windows(2).all(|w| w[1] - w[0] == k).then_some(k)
    }
}

/// Runs the shell convolution for every stacked representative. `prev`, when
/// present, holds one feature row per neighbor-source point. Returns a
/// `[representatives, out_channels]` tensor.
pub fn shell_conv_batch<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    params: &ShellConvParams,
    hoods: &Neighborhoods,
    prev: Option<Var>,
) -> Result<Var> {
    let m = hoods.len();
    let total = hoods.rows.len();
    let s = params.plan.num_shells;

    // q - p, lifted pointwise
    let local = ArrayD::from_shape_vec(
        IxDyn(&[total, 3]),
        hoods
            .localized
            .iter()
            .flat_map(|q| q.iter().map(|&c| T::from_f64(c)))
            .collect(),
    )
    .expect("localized shape");
    let mut f = g.constant(local)?;
    for layer in &params.lift {
        f = layer.forward_with(g, bound, f, params.activation)?;
    }

    if let Some(prev) = prev {
        let width = g.shape(prev).get(1).copied().unwrap_or(0);
        if width != params.prev_width {
            return Err(ShellConvError::Width {
                width,
                expected: params.prev_width,
            });
        }
        let gathered = g.gather_rows(prev, &hoods.rows)?;
        f = g.concat(gathered, f, 1)?;
    } else if params.prev_width != 0 {
        return Err(ShellConvError::Width {
            width: 0,
            expected: params.prev_width,
        });
    }
    let c_mid = params.mid_width();

    let pooled = match hoods.mode {
        PartitionMode::Fixed => {
            let k = params.plan.neighbors();
            match hoods.uniform_count() {
                Some(n) if n == k => {}
                _ => {
                    return Err(GeometryError::Size {
                        requested: k,
                        available: hoods.uniform_count().unwrap_or(0),
                    }
                    .into())
                }
            }
            g.max_over_row_groups(f, params.plan.shell_size)?
        }
        PartitionMode::Equidistant => {
            let mut segments = Vec::with_capacity(total);
            for (r, w) in hoods.offsets.windows(2).enumerate() {
                segments.extend(hoods.shell_ids[w[0]..w[1]].iter().map(|&sid| r * s + sid));
            }
            g.segment_max(f, &segments, m * s)?
        }
    };
    let shells = g.reshape(pooled, &[m, s, c_mid])?;
    let conv = g.conv1d(shells, bound.get(params.kernel), 1)?;
    let conv = g.reshape(conv, &[m, params.plan.out_channels])?;
    let out = g.add_bias(conv, bound.get(params.kernel_bias))?;
    Ok(params.activation.apply(g, out)?)
}

/// Shell convolution at a single representative `center` whose neighbors are
/// `neighbors` (indices into `points`, nearest first). `prev_features`, when
/// present, has one row per neighbor in the same order. Returns a vector of
/// `out_channels` features.
pub fn shell_conv<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    params: &ShellConvParams,
    center: Point,
    neighbors: &NeighborSet,
    points: &[Point],
    prev_features: Option<Var>,
    mode: PartitionMode,
) -> Result<Var> {
    if let Some(prev) = prev_features {
        let rows = g.shape(prev).first().copied().unwrap_or(0);
        if rows != neighbors.len() {
            return Err(ShellConvError::Misaligned {
                rows,
                expected: neighbors.len(),
            });
        }
    }
    // rows of prev_features follow neighbor order, not source indices
    let local_points: Vec<Point> = neighbors.indices.iter().map(|&i| points[i]).collect();
    let local_set = NeighborSet {
        center_index: neighbors.center_index,
        indices: (0..neighbors.len()).collect(),
        distances: neighbors.distances.clone(),
    };
    let mut hoods = Neighborhoods::new(mode, params.plan.num_shells);
    hoods.push(center, &local_set, &local_points, 0);
    let out = shell_conv_batch(g, bound, params, &hoods, prev_features)?;
    Ok(g.reshape(out, &[params.plan.out_channels])?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerOptions {
    pub knn_space: KnnSpace,
    pub partition: PartitionMode,
}

/// Output of a shell convolution layer: the representatives' coordinates and
/// a `[representatives, out_channels]` feature tensor.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub points: Vec<Point>,
    pub features: Var,
}

/// Applies the shell convolution at every representative of one cloud.
/// `prev`, when present, holds one feature row per point of `points`.
pub fn shell_conv_layer<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    params: &ShellConvParams,
    points: &[Point],
    prev: Option<Var>,
    representatives: &[usize],
    options: LayerOptions,
) -> Result<LayerOutput> {
    if let Some(p) = prev {
        let rows = g.shape(p).first().copied().unwrap_or(0);
        if rows != points.len() {
            return Err(ShellConvError::Misaligned {
                rows,
                expected: points.len(),
            });
        }
    }
    let feature_values: Option<Array2<T>> = prev.map(|p| {
        g.value(p)
            .view()
            .into_dimensionality()
            .expect("2-d features")
            .to_owned()
    });
    let mut hoods = Neighborhoods::new(options.partition, params.plan.num_shells);
    for &r in representatives {
        let set = query_neighbors(
            points,
            feature_values.as_ref().map(|f| f.view()),
            Center::Member(r),
            params.plan.neighbors(),
            options.knn_space,
        )?;
        let center = *points.get(r).ok_or(GeometryError::Index {
            index: r,
            len: points.len(),
        })?;
        hoods.push(center, &set, points, 0);
    }
    let features = shell_conv_batch(g, bound, params, &hoods, prev)?;
    Ok(LayerOutput {
        points: hoods.centers,
        features,
    })
}

/// Central-difference check of one complete three-shell convolution layer
/// with respect to every parameter and the incoming features. Returns the
/// worst relative error.
pub fn layer_gradcheck(seed: u64, partition: PartitionMode, shell_size: usize) -> Result<f64> {
    use crate::autodiff::gradcheck::{check, random_tensor, weighted_sum, EPSILON};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let num_points = 3 * shell_size.max(1) + 3;
    let points: Vec<Point> = (0..num_points)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let mut store = ParamStore::<f64>::new();
    let plan = ShellPlan {
        shell_size,
        num_shells: 3,
        out_channels: 3,
    };
    let params = ShellConvParams::new(&mut store, "l", 2, &[4, 5], plan, &mut rng);
    let mut inputs: Vec<ArrayD<f64>> = store
        .values()
        .iter()
        .map(|v| random_tensor(&mut rng, v.shape(), 0.0))
        .collect();
    inputs.push(random_tensor(&mut rng, &[points.len(), 2], 0.0));
    let n = store.len();
    let options = LayerOptions {
        knn_space: KnnSpace::Coordinates,
        partition,
    };
    let reps = [0, num_points / 2, num_points - 1];
    Ok(check(&inputs, EPSILON, |g, v| {
        let bound = Bound::from_vars(v[..n].to_vec());
        let out = shell_conv_layer(g, &bound, &params, &points, Some(v[n]), &reps, options)
            .map_err(|e| match e {
                ShellConvError::Tensor(t) => t,
                other => TensorError::Shape {
                    op: "shell_conv_layer",
                    detail: other.to_string(),
                },
            })?;
        weighted_sum(g, out.features, seed)
    })?)
}
