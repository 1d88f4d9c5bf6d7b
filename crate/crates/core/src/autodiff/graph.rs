use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice};
use thiserror::Error;

use super::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("target class {target} out of range for {classes} classes")]
    Target { target: usize, classes: usize },
    #[error("{op}: axis {axis} is invalid for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },
}

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Affine {
        x: Var,
        weight: Var,
        bias: Var,
        relu: bool,
    },
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Relu(Var),
    /// `src[o]` is the flat input index that produced output element `o`.
    /// Max over the middle axis of `x` viewed as `[outer, len, inner]`.
    MaxPool { x: Var, len: usize, inner: usize },
    /// `src[o]` is the flat input index that produced output element `o`;
    /// `usize::MAX` marks an empty segment.
    SegmentMax { x: Var, src: Vec<usize> },
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
        cols: Array2<T>,
    },
    Concat { a: Var, b: Var, axis: usize },
    Gather { x: Var, rows: Vec<usize> },
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Array2<T>,
        targets: Vec<usize>,
    },
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<ArrayD<T>>,
}

/// A single-owner tape of tensor operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn as_2d<'a, T>(op: &'static str, a: &'a ArrayD<T>) -> Result<ArrayView2<'a, T>> {
    a.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| shape_err(op, format!("expected a matrix, got {:?}", a.shape())))
}

fn all_finite<T: Real>(a: &ArrayD<T>) -> bool {
    match a.as_slice_memory_order() {
        Some(s) => s.iter().fold(true, |ok, v| ok & v.is_finite()),
        None => a.iter().all(|v| v.is_finite()),
    }
}

/// Max over the middle axis of a `[outer, len, inner]` buffer.
fn pool_groups<T: Real>(data: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut values = vec![T::zero(); outer * inner];
    if inner == 0 {
        return values;
    }
    for (group, vals) in data.chunks_exact(len * inner).zip(values.chunks_exact_mut(inner)) {
        vals.copy_from_slice(&group[..inner]);
        for row in group.chunks_exact(inner).skip(1) {
            for (v, &x) in vals.iter_mut().zip(row) {
                *v = if x > *v { x } else { *v };
            }
        }
    }
    values
}

/// Routes each pooled gradient to the first element of its group that
/// equals the pooled maximum.
fn unpool_groups<T: Real>(data: &[T], pooled: &[T], grad: &[T], len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    if inner == 0 {
        return out;
    }
    let mut done = vec![false; inner];
    let groups = data.chunks_exact(len * inner).zip(out.chunks_exact_mut(len * inner));
    for (o, (group, gout)) in groups.enumerate() {
        let maxes = &pooled[o * inner..(o + 1) * inner];
        let gin = &grad[o * inner..(o + 1) * inner];
        done.fill(false);
        for (row, grow) in group.chunks_exact(inner).zip(gout.chunks_exact_mut(inner)) {
            for j in 0..inner {
                let hit = !done[j] && row[j] == maxes[j];
                grow[j] = if hit { gin[j] } else { T::zero() };
                done[j] |= hit;
            }
        }
    }
    out
}

fn accumulate<T: Real>(slot: &mut Option<ArrayD<T>>, g: ArrayD<T>) {
    match slot {
        Some(acc) => acc.zip_mut_with(&g, |a, &b| *a = *a + b),
        None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: ArrayD<T>,
        op: Op<T>,
        parents: &[Var],
    ) -> Result<Var> {
        if !all_finite(&value) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> Result<Var> {
        let value = value.as_standard_layout().into_owned();
        if !all_finite(&value) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A differentiable leaf whose gradient is accumulated by [`Self::backward`].
    pub fn variable(&mut self, value: ArrayD<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = as_2d("matmul", self.value(a))?;
        let bv = as_2d("matmul", self.value(b))?;
        if av.ncols() != bv.nrows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = av.dot(&bv).into_dyn();
        self.push_checked("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `x · weight + bias` for a matrix `x`, optionally followed by ReLU, as
    /// one node.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var, relu: bool) -> Result<Var> {
        let xv = as_2d("affine", self.value(x))?;
        let wv = as_2d("affine", self.value(weight))?;
        let bv = self.value(bias);
        if xv.ncols() != wv.nrows() || bv.ndim() != 1 || bv.len() != wv.ncols() {
            return Err(shape_err(
                "affine",
                format!("{:?} x {:?} + {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let b = bv.as_slice().expect("standard layout");
        let mut init = Vec::with_capacity(xv.nrows() * b.len());
        for _ in 0..xv.nrows() {
            init.extend_from_slice(b);
        }
        let mut out = Array2::from_shape_vec((xv.nrows(), wv.ncols()), init).expect("bias rows");
        ndarray::linalg::general_mat_mul(T::one(), &xv, &wv, T::one(), &mut out);
        if relu {
            out.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        }
        self.push_checked(
            "affine",
            out.into_dyn(),
            Op::Affine {
                x,
                weight,
                bias,
                relu,
            },
            &[x, weight, bias],
        )
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let c = *xv.shape().last().unwrap_or(&0);
        if bv.ndim() != 1 || bv.len() != c {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for input {:?}", bv.shape(), xv.shape()),
            ));
        }
        let mut out = xv.clone();
        let b = bv.as_slice().expect("standard layout");
        if c > 0 {
            for row in out
                .as_slice_mut()
                .expect("standard layout")
                .chunks_exact_mut(c)
            {
                for (o, &bb) in row.iter_mut().zip(b) {
                    *o = *o + bb;
                }
            }
        }
        self.push_checked("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out = av + bv;
        self.push_checked("add", out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out = av * bv;
        self.push_checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).iter().copied().sum();
        let out = ArrayD::from_elem(IxDyn(&[]), s);
        self.push_checked("sum", out, Op::Sum(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        self.push_checked("relu", out, Op::Relu(x), &[x])
    }

    /// Channelwise maximum along `axis`, which is removed from the shape.
    /// The gradient flows to the first (lowest-index) maximizing element.
    pub fn maxpool_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "maxpool",
                axis,
                shape,
            });
        }
        let len = shape[axis];
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "maxpool" });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = xv.as_slice().expect("standard layout");
        let values = pool_groups(data, outer, len, inner);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = ArrayD::from_shape_vec(IxDyn(&out_shape), values).expect("pooled shape");
        self.push_checked("maxpool", out, Op::MaxPool { x, len, inner }, &[x])
    }

    /// Max over consecutive groups of `group` rows of a matrix: `[R, C]` to
    /// `[R / group, C]`. Same as reshaping to `[R / group, group, C]` and
    /// pooling axis 1, without the copy.
    pub fn max_over_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = as_2d("maxpool", self.value(x))?;
        let (rows, c) = xv.dim();
        if group == 0 {
            return Err(TensorError::EmptyAxis { op: "maxpool" });
        }
        if rows % group != 0 {
            return Err(shape_err(
                "maxpool",
                format!("{rows} rows do not split into groups of {group}"),
            ));
        }
        let data = self.value(x).as_slice().expect("standard layout");
        let values = pool_groups(data, rows / group, group, c);
        let out = ArrayD::from_shape_vec(IxDyn(&[rows / group, c]), values).expect("pooled shape");
        self.push_checked(
            "maxpool",
            out,
            Op::MaxPool {
                x,
                len: group,
                inner: c,
            },
            &[x],
        )
    }

    /// Rowwise maximum of `x: [R, C]` within segments: row `r` belongs to
    /// segment `segment_of_row[r]`. Returns `[num_segments, C]`; an empty
    /// segment yields a zero row and passes no gradient.
    pub fn segment_max(
        &mut self,
        x: Var,
        segment_of_row: &[usize],
        num_segments: usize,
    ) -> Result<Var> {
        let xv = as_2d("segment_max", self.value(x))?;
        let (rows, c) = xv.dim();
        if segment_of_row.len() != rows {
            return Err(shape_err(
                "segment_max",
                format!("{} segment ids for {} rows", segment_of_row.len(), rows),
            ));
        }
        if let Some(&s) = segment_of_row.iter().find(|&&s| s >= num_segments) {
            return Err(shape_err(
                "segment_max",
                format!("segment {s} out of range for {num_segments} segments"),
            ));
        }
        let data = self.value(x).as_slice().expect("standard layout");
        let mut values = vec![T::zero(); num_segments * c];
        let mut src = vec![usize::MAX; num_segments * c];
        for (r, &s) in segment_of_row.iter().enumerate() {
            let row = &data[r * c..(r + 1) * c];
            let base = s * c;
            for (j, &v) in row.iter().enumerate() {
                if src[base + j] == usize::MAX || v > values[base + j] {
                    values[base + j] = v;
                    src[base + j] = r * c + j;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[num_segments, c]), values).expect("shape");
        self.push_checked("segment_max", out, Op::SegmentMax { x, src }, &[x])
    }

    /// Valid (unpadded) cross-correlation along the second-to-last axis.
    ///
    /// `x` is `[S, C_in]` or batched `[B, S, C_in]`; `kernel` is
    /// `[S_k, C_in, C_out]`. The output has `floor((S - S_k) / stride) + 1`
    /// positions along the convolved axis.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let batched = match xv.ndim() {
            2 => false,
            3 => true,
            _ => {
                return Err(shape_err(
                    "conv1d",
                    format!("input must be 2-d or 3-d, got {:?}", xv.shape()),
                ))
            }
        };
        if kv.ndim() != 3 {
            return Err(shape_err(
                "conv1d",
                format!("kernel must be 3-d, got {:?}", kv.shape()),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv1d", "stride must be positive".into()));
        }
        let (b, s, c_in) = if batched {
            (xv.shape()[0], xv.shape()[1], xv.shape()[2])
        } else {
            (1, xv.shape()[0], xv.shape()[1])
        };
        let (s_k, k_in, c_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        if k_in != c_in {
            return Err(shape_err(
                "conv1d",
                format!("kernel input channels {k_in} vs input channels {c_in}"),
            ));
        }
        if s_k == 0 || s_k > s {
            return Err(shape_err(
                "conv1d",
                format!("kernel extent {s_k} exceeds input extent {s}"),
            ));
        }
        let s_out = (s - s_k) / stride + 1;
        let window = s_k * c_in;
        let data = xv.as_slice().expect("standard layout");
        let mut cols = Array2::<T>::zeros((b * s_out, window));
        for bi in 0..b {
            for o in 0..s_out {
                let start = (bi * s + o * stride) * c_in;
                cols.row_mut(bi * s_out + o)
                    .as_slice_mut()
                    .expect("row")
                    .copy_from_slice(&data[start..start + window]);
            }
        }
        let k2 = kv
            .view()
            .into_shape_with_order((window, c_out))
            .expect("contiguous kernel");
        let out2 = cols.dot(&k2);
        let out_shape: Vec<usize> = if batched {
            vec![b, s_out, c_out]
        } else {
            vec![s_out, c_out]
        };
        let out = out2
            .into_shape_with_order(IxDyn(&out_shape))
            .expect("conv output shape");
        self.push_checked(
            "conv1d",
            out,
            Op::Conv1d {
                x,
                kernel,
                stride,
                cols,
            },
            &[x, kernel],
        )
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != bv.ndim() || axis >= av.ndim() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: av.shape().to_vec(),
            });
        }
        let off_axis_equal = (0..av.ndim())
            .filter(|&d| d != axis)
            .all(|d| av.shape()[d] == bv.shape()[d]);
        if !off_axis_equal {
            return Err(shape_err(
                "concat",
                format!("{:?} and {:?} along axis {axis}", av.shape(), bv.shape()),
            ));
        }
        let out = if axis + 1 == av.ndim() && av.shape()[axis] > 0 && bv.shape()[axis] > 0 {
            let (ca, cb) = (av.shape()[axis], bv.shape()[axis]);
            let rows = av.len() / ca.max(1);
            let (sa, sb) = (
                av.as_slice().expect("standard layout"),
                bv.as_slice().expect("standard layout"),
            );
            let mut values = Vec::with_capacity(av.len() + bv.len());
            for r in 0..rows {
                values.extend_from_slice(&sa[r * ca..(r + 1) * ca]);
                values.extend_from_slice(&sb[r * cb..(r + 1) * cb]);
            }
            let mut shape = av.shape().to_vec();
            shape[axis] = ca + cb;
            ArrayD::from_shape_vec(IxDyn(&shape), values).expect("concat shape")
        } else {
            concatenate(Axis(axis), &[av.view(), bv.view()])
                .expect("checked shapes")
                .as_standard_layout()
                .into_owned()
        };
        self.push_checked("concat", out, Op::Concat { a, b, axis }, &[a, b])
    }

    /// Selects rows of a matrix; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = as_2d("gather_rows", self.value(x))?;
        let (n, c) = xv.dim();
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err(
                "gather_rows",
                format!("row {r} out of range for {n} rows"),
            ));
        }
        let data = self.value(x).as_slice().expect("standard layout");
        let mut values = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            values.extend_from_slice(&data[r * c..(r + 1) * c]);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[rows.len(), c]), values).expect("shape");
        self.push_checked(
            "gather_rows",
            out,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", xv.shape(), shape),
            ));
        }
        let out = xv
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("checked size");
        self.push_checked("reshape", out, Op::Reshape(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = as_2d("softmax_cross_entropy", self.value(logits))?;
        let (b, k) = lv.dim();
        if targets.len() != b {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} targets for {} rows", targets.len(), b),
            ));
        }
        if b == 0 || k == 0 {
            return Err(TensorError::EmptyAxis {
                op: "softmax_cross_entropy",
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Target {
                target: t,
                classes: k,
            });
        }
        let mut probs = Array2::<T>::zeros((b, k));
        let mut total = 0.0_f64;
        for (i, (row, mut p)) in lv.outer_iter().zip(probs.outer_iter_mut()).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (pj, &v) in p.iter_mut().zip(row.iter()) {
                let e = (v - m).exp();
                *pj = e;
                z = z + e;
            }
            p.mapv_inplace(|e| e / z);
            let log_prob = row[targets[i]] - m - z.ln();
            total -= log_prob.as_();
        }
        let loss = ArrayD::from_elem(IxDyn(&[]), T::from_f64(total / b as f64));
        self.push_checked(
            "softmax_cross_entropy",
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Accumulates d(loss)/d(leaf) into every differentiable leaf reachable
    /// from `loss`. Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<ArrayD<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(ArrayD::from_elem(lv.raw_dim(), T::one()));
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul(a, b) => {
                    let g2 = g.into_dimensionality::<Ix2>().expect("matmul grad");
                    if needs(*a) {
                        let bv = as_2d("matmul", self.value(*b))?;
                        accumulate(&mut adj[a.0], g2.dot(&bv.t()).into_dyn());
                    }
                    if needs(*b) {
                        let av = as_2d("matmul", self.value(*a))?;
                        accumulate(&mut adj[b.0], av.t().dot(&g2).into_dyn());
                    }
                }
                Op::Affine {
                    x,
                    weight,
                    bias,
                    relu,
                } => {
                    let mut g2 = g.into_dimensionality::<Ix2>().expect("affine grad");
                    if *relu {
                        let out = node.value.view().into_dimensionality::<Ix2>().expect("2-d");
                        g2.zip_mut_with(&out, |gv, &o| {
                            if o <= T::zero() {
                                *gv = T::zero();
                            }
                        });
                    }
                    if needs(*bias) {
                        accumulate(&mut adj[bias.0], g2.sum_axis(Axis(0)).into_dyn());
                    }
                    if needs(*weight) {
                        let xv = as_2d("affine", self.value(*x))?;
                        accumulate(&mut adj[weight.0], xv.t().dot(&g2).into_dyn());
                    }
                    if needs(*x) {
                        let wv = as_2d("affine", self.value(*weight))?;
                        accumulate(&mut adj[x.0], g2.dot(&wv.t()).into_dyn());
                    }
                }
                Op::AddBias(x, bias) => {
                    if needs(*bias) {
                        let c = self.value(*bias).len();
                        let mut gb = vec![T::zero(); c];
                        if c > 0 {
                            for row in g.as_slice().expect("standard layout").chunks_exact(c) {
                                for (s, &v) in gb.iter_mut().zip(row) {
                                    *s = *s + v;
                                }
                            }
                        }
                        accumulate(
                            &mut adj[bias.0],
                            ArrayD::from_shape_vec(IxDyn(&[c]), gb).expect("bias grad"),
                        );
                    }
                    if needs(*x) {
                        accumulate(&mut adj[x.0], g);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        accumulate(&mut adj[b.0], g.clone());
                    }
                    if needs(*a) {
                        accumulate(&mut adj[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        accumulate(&mut adj[a.0], &g * self.value(*b));
                    }
                    if needs(*b) {
                        accumulate(&mut adj[b.0], &g * self.value(*a));
                    }
                }
                Op::Sum(x) => {
                    let s = *g.iter().next().expect("scalar");
                    accumulate(&mut adj[x.0], ArrayD::from_elem(self.value(*x).raw_dim(), s));
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(&node.value, |gv, &out| {
                        if out <= T::zero() {
                            *gv = T::zero();
                        }
                    });
                    accumulate(&mut adj[x.0], gx);
                }
                Op::MaxPool { x, len, inner } => {
                    let xv = self.value(*x);
                    let gx = unpool_groups(
                        xv.as_slice().expect("standard layout"),
                        node.value.as_slice().expect("standard layout"),
                        g.as_standard_layout().as_slice().expect("standard layout"),
                        *len,
                        *inner,
                    );
                    accumulate(
                        &mut adj[x.0],
                        ArrayD::from_shape_vec(xv.raw_dim(), gx).expect("pool grad"),
                    );
                }
                Op::SegmentMax { x, src } => {
                    let mut gx = ArrayD::<T>::zeros(self.value(*x).raw_dim());
                    let gs = gx.as_slice_mut().expect("standard layout");
                    for (&s, &gv) in src.iter().zip(g.iter()) {
                        if s != usize::MAX {
                            gs[s] = gs[s] + gv;
                        }
                    }
                    accumulate(&mut adj[x.0], gx);
                }
                Op::Conv1d {
                    x,
                    kernel,
                    stride,
                    cols,
                } => {
                    let kv = self.value(*kernel);
                    let (s_k, c_in, c_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                    let window = s_k * c_in;
                    let g2 = g
                        .into_shape_with_order((cols.nrows(), c_out))
                        .expect("conv grad");
                    if needs(*kernel) {
                        let gk = cols.t().dot(&g2);
                        accumulate(
                            &mut adj[kernel.0],
                            gk.into_shape_with_order(IxDyn(&[s_k, c_in, c_out]))
                                .expect("kernel grad"),
                        );
                    }
                    if needs(*x) {
                        let k2 = kv
                            .view()
                            .into_shape_with_order((window, c_out))
                            .expect("kernel");
                        let gcols = g2.dot(&k2.t());
                        let xshape = self.value(*x).shape().to_vec();
                        let s = xshape[xshape.len() - 2];
                        let s_out = (s - s_k) / stride + 1;
                        let mut gx = ArrayD::<T>::zeros(IxDyn(&xshape));
                        let gs = gx.as_slice_mut().expect("standard layout");
                        for (r, grow) in gcols.outer_iter().enumerate() {
                            let (bi, o) = (r / s_out, r % s_out);
                            let start = (bi * s + o * stride) * c_in;
                            for (dst, &v) in gs[start..start + window].iter_mut().zip(grow.iter()) {
                                *dst = *dst + v;
                            }
                        }
                        accumulate(&mut adj[x.0], gx);
                    }
                }
                Op::Concat { a, b, axis }
                    if axis + 1 == g.ndim()
                        && self.value(*a).shape()[*axis] > 0
                        && self.value(*b).shape()[*axis] > 0 =>
                {
                    let ca = self.value(*a).shape()[*axis];
                    let cb = self.value(*b).shape()[*axis];
                    let gs = g.as_slice().expect("standard layout");
                    let split = |off: usize, width: usize| {
                        let mut v = Vec::with_capacity(gs.len() / (ca + cb) * width);
                        for row in gs.chunks_exact(ca + cb) {
                            v.extend_from_slice(&row[off..off + width]);
                        }
                        v
                    };
                    if needs(*a) {
                        let ga = ArrayD::from_shape_vec(self.value(*a).raw_dim(), split(0, ca))
                            .expect("concat grad");
                        accumulate(&mut adj[a.0], ga);
                    }
                    if needs(*b) {
                        let gb = ArrayD::from_shape_vec(self.value(*b).raw_dim(), split(ca, cb))
                            .expect("concat grad");
                        accumulate(&mut adj[b.0], gb);
                    }
                }
                Op::Concat { a, b, axis } => {
                    let na = self.value(*a).shape()[*axis];
                    if needs(*a) {
                        let ga = g.slice_axis(Axis(*axis), Slice::from(..na));
                        accumulate(&mut adj[a.0], ga.as_standard_layout().into_owned());
                    }
                    if needs(*b) {
                        let gb = g.slice_axis(Axis(*axis), Slice::from(na..));
                        accumulate(&mut adj[b.0], gb.as_standard_layout().into_owned());
                    }
                }
                Op::Gather { x, rows } => {
                    let mut gx = ArrayD::<T>::zeros(self.value(*x).raw_dim());
                    let c = gx.shape()[1];
                    if c > 0 {
                        let gs = gx.as_slice_mut().expect("standard layout");
                        for (&r, grow) in rows
                            .iter()
                            .zip(g.as_slice().expect("standard layout").chunks_exact(c))
                        {
                            for (dst, &v) in gs[r * c..(r + 1) * c].iter_mut().zip(grow) {
                                *dst = *dst + v;
                            }
                        }
                    }
                    accumulate(&mut adj[x.0], gx);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).raw_dim();
                    accumulate(
                        &mut adj[x.0],
                        g.into_shape_with_order(shape).expect("reshape grad"),
                    );
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    targets,
                } => {
                    let scale = *g.iter().next().expect("scalar") / T::from_f64(targets.len() as f64);
                    let mut gl = probs.clone();
                    for (mut row, &t) in gl.outer_iter_mut().zip(targets) {
                        row[t] = row[t] - T::one();
                    }
                    gl.mapv_inplace(|v| v * scale);
                    accumulate(&mut adj[logits.0], gl.into_dyn());
                }
            }
        }

        for (i, g) in leaf_grads {
            accumulate(&mut self.nodes[i].grad, g);
        }
        Ok(())
    }
}
