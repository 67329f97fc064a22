use super::kernels::{self, ConvGeom};
use super::{Float, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Channel,
    Height,
    Width,
}

impl Axis {
    fn dim(self) -> usize {
        match self {
            Axis::Channel => 1,
            Axis::Height => 2,
            Axis::Width => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceAxes {
    /// Everything, producing a 1x1x1x1 tensor.
    All,
    /// Height and width, producing one value per (batch, channel).
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Which view a horizontal warp reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpDirection {
    /// Rebuild the left view from the right one: sample at `j - d`.
    LeftFromRight,
    /// Rebuild the right view from the left one: sample at `j + d`.
    RightFromLeft,
}

impl WarpDirection {
    fn sign<T: Float>(self) -> T {
        match self {
            WarpDirection::LeftFromRight => -T::one(),
            WarpDirection::RightFromLeft => T::one(),
        }
    }
}

/// An operator whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<T: Float> {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in order; `None` means no contribution.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Neg,
    Exp,
    Log,
    Abs,
    Sigmoid,
    Elu,
    ScalarMul(T),
    ScalarAdd(T),
    Clamp(T, T),
}

enum Op<T: Float> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary<T>, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample(Var, UpsampleMode),
    AvgPool {
        input: Var,
        k: usize,
        stride: usize,
    },
    Reduce {
        input: Var,
        kind: ReduceKind,
        axes: ReduceAxes,
    },
    ChannelMean(Var),
    Diff(Var, Axis),
    Narrow {
        input: Var,
        axis: Axis,
        start: usize,
    },
    Concat(Vec<Var>),
    Warp {
        source: Var,
        disp: Var,
        sign: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        ignore: u8,
        count: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
}

/// Append-only computation record. Nodes are stored in creation order, so
/// every node's inputs precede it and reverse insertion order is a valid
/// topological order for the backward sweep.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Float>(t: &Tensor<T>, op: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

fn accumulate<T: Float>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(&value, name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg, false))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    /// Trainable leaf: after [`Graph::backward`] its gradient is available
    /// through [`Graph::grad`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. a trainable leaf. `None`
    /// when the loss did not depend on it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(sa)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let shape = self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = match kind {
            Binary::Add => x.iter().zip(y).map(|(&p, &q)| p + q).collect(),
            Binary::Sub => x.iter().zip(y).map(|(&p, &q)| p - q).collect(),
            Binary::Mul => x.iter().zip(y).map(|(&p, &q)| p * q).collect(),
            Binary::Div => x.iter().zip(y).map(|(&p, &q)| p / q).collect(),
        };
        let out = Tensor::from_vec(shape, data)?;
        self.push_op(name, out, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Elementwise quotient. The caller is responsible for keeping the
    /// divisor away from zero (e.g. with [`Graph::clamp`]); a zero divisor
    /// surfaces as a non-finite error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary<T>, a: Var) -> Result<Var> {
        fn apply<T: Float>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
            x.map(f)
        }
        let x = self.value(a);
        let (name, out) = match kind {
            Unary::Neg => ("neg", apply(x, |v| -v)),
            Unary::Exp => ("exp", apply(x, |v| v.exp())),
            Unary::Log => ("log", apply(x, |v| v.ln())),
            Unary::Abs => ("abs", apply(x, |v| v.abs())),
            Unary::Sigmoid => (
                "sigmoid",
                apply(x, |v| {
                    if v >= T::zero() {
                        T::one() / (T::one() + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (T::one() + e)
                    }
                }),
            ),
            Unary::Elu => (
                "elu",
                apply(x, |v| if v > T::zero() { v } else { v.exp_m1() }),
            ),
            Unary::ScalarMul(s) => ("scalar_mul", apply(x, |v| v * s)),
            Unary::ScalarAdd(s) => ("scalar_add", apply(x, |v| v + s)),
            Unary::Clamp(lo, hi) => ("clamp", apply(x, |v| v.max(lo).min(hi))),
        };
        self.push_op(name, out, Op::Unary(kind, a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    /// |x|, with subgradient 0 at x = 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Elu, a)
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(Unary::ScalarMul(T::of(s)), a)
    }

    pub fn scalar_add(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(Unary::ScalarAdd(T::of(s)), a)
    }

    /// Clamp into `[lo, hi]`; the gradient passes only where the input lies
    /// inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(
                "clamp",
                format!("empty interval [{lo}, {hi}]"),
            ));
        }
        self.unary(Unary::Clamp(T::of(lo), T::of(hi)), a)
    }

    /// Square kernel convolution, `weight` shaped (out, in, k, k) and `bias`
    /// shaped (1, out, 1, 1).
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if sw.channels() != si.channels() {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sw,
            });
        }
        let k = sw.height();
        if sw.width() != k || k % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be odd and square, got {sw}"),
            ));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(
                "conv2d",
                format!("stride {stride} not in {{1, 2}}"),
            ));
        }
        if padding != (k - 1) / 2 {
            return Err(Error::invalid(
                "conv2d",
                "only same padding (k-1)/2 is supported",
            ));
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != Shape::new(1, sw.batch(), 1, 1) {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: sw,
                    rhs: sb,
                });
            }
        }
        let geom = ConvGeom::new(si, sw, stride, padding);
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push_op(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &deps,
        )
    }

    /// x2 spatial upsampling.
    pub fn upsample(&mut self, input: Var, mode: UpsampleMode) -> Result<Var> {
        let s = self.shape(input);
        if s.height() == 0 || s.width() == 0 {
            return Err(Error::invalid("upsample", format!("empty input {s}")));
        }
        let out = match mode {
            UpsampleMode::Nearest => kernels::upsample_nearest_forward(self.value(input)),
            UpsampleMode::Bilinear => kernels::upsample_bilinear_forward(self.value(input)),
        };
        self.push_op("upsample", out, Op::Upsample(input, mode), &[input])
    }

    /// Average pooling over `k x k` windows without padding.
    pub fn avg_pool(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input);
        if k == 0 || stride == 0 || k > s.height() || k > s.width() {
            return Err(Error::invalid(
                "avg_pool",
                format!("window {k} does not fit input {s}"),
            ));
        }
        let out = kernels::avg_pool_forward(self.value(input), k, stride);
        self.push_op("avg_pool", out, Op::AvgPool { input, k, stride }, &[input])
    }

    fn reduce(&mut self, input: Var, kind: ReduceKind, axes: ReduceAxes) -> Result<Var> {
        let s = self.shape(input);
        let name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
        };
        let (out_shape, group) = match axes {
            ReduceAxes::All => (Shape::SCALAR, s.numel()),
            ReduceAxes::Spatial => (Shape::new(s.batch(), s.channels(), 1, 1), s.plane()),
        };
        if group == 0 {
            return Err(Error::EmptyReduction { op: name });
        }
        let data: Vec<T> = self
            .value(input)
            .data()
            .chunks(group)
            .map(|chunk| {
                let total: f64 = chunk.iter().map(|v| v.as_f64()).sum();
                match kind {
                    ReduceKind::Sum => T::of(total),
                    ReduceKind::Mean => T::of(total / group as f64),
                }
            })
            .collect();
        let out = Tensor::from_vec(out_shape, data)?;
        self.push_op(name, out, Op::Reduce { input, kind, axes }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, ReduceKind::Sum, ReduceAxes::All)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, ReduceKind::Mean, ReduceAxes::All)
    }

    pub fn sum_axes(&mut self, input: Var, axes: ReduceAxes) -> Result<Var> {
        self.reduce(input, ReduceKind::Sum, axes)
    }

    pub fn mean_axes(&mut self, input: Var, axes: ReduceAxes) -> Result<Var> {
        self.reduce(input, ReduceKind::Mean, axes)
    }

    /// Mean over the channel axis, keeping a single channel.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let [n, c, h, w] = s.0;
        if c == 0 {
            return Err(Error::EmptyReduction { op: "channel_mean" });
        }
        let src = self.value(input);
        let inv = T::one() / T::of(c as f64);
        let out = Tensor::from_fn(Shape::new(n, 1, h, w), |[b, _, y, x]| {
            let mut acc = T::zero();
            for ch in 0..c {
                acc += src.at([b, ch, y, x]);
            }
            acc * inv
        });
        self.push_op("channel_mean", out, Op::ChannelMean(input), &[input])
    }

    /// Forward difference `v[.., i+1] - v[.., i]` along `axis`; that axis
    /// shrinks by one.
    pub fn diff(&mut self, input: Var, axis: Axis) -> Result<Var> {
        let s = self.shape(input);
        let d = axis.dim();
        if axis == Axis::Channel || s.0[d] < 2 {
            return Err(Error::invalid(
                "diff",
                format!("degenerate axis {axis:?} in {s}"),
            ));
        }
        let src = self.value(input);
        let mut out_shape = s;
        out_shape.0[d] -= 1;
        let out = Tensor::from_fn(out_shape, |idx| {
            let mut next = idx;
            next[d] += 1;
            src.at(next) - src.at(idx)
        });
        self.push_op("diff", out, Op::Diff(input, axis), &[input])
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input);
        let d = axis.dim();
        if len == 0 || start + len > s.0[d] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} outside {axis:?} of {s}", start + len),
            ));
        }
        let src = self.value(input);
        let mut out_shape = s;
        out_shape.0[d] = len;
        let out = Tensor::from_fn(out_shape, |idx| {
            let mut at = idx;
            at[d] += start;
            src.at(at)
        });
        self.push_op("narrow", out, Op::Narrow { input, axis, start }, &[input])
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let s0 = self.shape(first);
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if (s.batch(), s.height(), s.width()) != (s0.batch(), s0.height(), s0.width()) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: s0,
                    rhs: s,
                });
            }
            channels += s.channels();
        }
        let plane = s0.plane();
        let mut data = Vec::with_capacity(s0.batch() * channels * plane);
        for b in 0..s0.batch() {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape().channels() * plane;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::from_vec(
            Shape::new(s0.batch(), channels, s0.height(), s0.width()),
            data,
        )?;
        self.push_op("concat", out, Op::Concat(inputs.to_vec()), inputs)
    }

    /// Bilinear horizontal resampling of `source` (N, C, H, W) by a
    /// single-channel disparity (N, 1, H, W). Sample positions outside the
    /// row are clamped to the border.
    pub fn warp_horizontal(
        &mut self,
        source: Var,
        disp: Var,
        direction: WarpDirection,
    ) -> Result<Var> {
        let (ss, sd) = (self.shape(source), self.shape(disp));
        if sd.channels() != 1
            || (ss.batch(), ss.height(), ss.width()) != (sd.batch(), sd.height(), sd.width())
        {
            return Err(Error::ShapeMismatch {
                op: "warp_horizontal",
                lhs: ss,
                rhs: sd,
            });
        }
        check_finite(self.value(disp), "warp_horizontal disparity")?;
        let sign = direction.sign::<T>();
        let out = kernels::warp_forward(self.value(source), self.value(disp), sign);
        self.push_op(
            "warp_horizontal",
            out,
            Op::Warp { source, disp, sign },
            &[source, disp],
        )
    }

    /// Mean softmax cross-entropy over pixels whose label is not `ignore`.
    /// `labels` holds one class id per (batch, y, x).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let s = self.shape(logits);
        let [n, c, h, w] = s.0;
        if labels.len() != n * h * w {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} labels for logits {s}", labels.len()),
            ));
        }
        let src = self.value(logits).data();
        let plane = h * w;
        let mut total = 0.0f64;
        let mut count = 0usize;
        for b in 0..n {
            for p in 0..plane {
                let t = labels[b * plane + p];
                if t == ignore {
                    continue;
                }
                if t as usize >= c {
                    return Err(Error::invalid(
                        "cross_entropy",
                        format!("label {t} out of range for {c} classes"),
                    ));
                }
                let z = |k: usize| src[(b * c + k) * plane + p].as_f64();
                let m = (0..c).map(z).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..c).map(|k| (z(k) - m).exp()).sum::<f64>().ln();
                total += lse - z(t as usize);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyReduction {
                op: "cross_entropy",
            });
        }
        let out = Tensor::scalar(T::of(total / count as f64));
        self.push_op(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                count,
            },
            &[logits],
        )
    }

    /// Records an operator whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        let name = op.name();
        self.push_op(
            name,
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients of trainable leaves are
    /// accumulated over all their uses and can be read with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::NotScalar(ls));
        }
        self.consumed = true;
        self.leaf_grads = (0..self.nodes.len()).map(|_| None).collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.trainable {
                    self.leaf_grads[i] = Some(Tensor::from_vec(node.value.shape(), g)?);
                }
                continue;
            }
            for (input, gi) in self.input_grads(i, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Binary(kind, a, b) => {
                let (x, y) = (self.value(a).data(), self.value(b).data());
                match kind {
                    Binary::Add => {
                        res.push((a, g.to_vec()));
                        res.push((b, g.to_vec()));
                    }
                    Binary::Sub => {
                        res.push((a, g.to_vec()));
                        res.push((b, g.iter().map(|&v| -v).collect()));
                    }
                    Binary::Mul => {
                        if self.wants(a) {
                            res.push((a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect()));
                        }
                        if self.wants(b) {
                            res.push((b, g.iter().zip(x).map(|(&gv, &xv)| gv * xv).collect()));
                        }
                    }
                    Binary::Div => {
                        if self.wants(a) {
                            res.push((a, g.iter().zip(y).map(|(&gv, &yv)| gv / yv).collect()));
                        }
                        if self.wants(b) {
                            let o = out.data();
                            res.push((
                                b,
                                g.iter()
                                    .zip(y)
                                    .zip(o)
                                    .map(|((&gv, &yv), &ov)| -gv * ov / yv)
                                    .collect(),
                            ));
                        }
                    }
                }
            }
            &Op::Unary(kind, a) => {
                let x = self.value(a).data();
                let o = out.data();
                let zero = T::zero();
                let one = T::one();
                let gi: Vec<T> = match kind {
                    Unary::Neg => g.iter().map(|&v| -v).collect(),
                    Unary::Exp => g.iter().zip(o).map(|(&gv, &ov)| gv * ov).collect(),
                    Unary::Log => g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect(),
                    Unary::Abs => g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            if xv > zero {
                                gv
                            } else if xv < zero {
                                -gv
                            } else {
                                zero
                            }
                        })
                        .collect(),
                    Unary::Sigmoid => g
                        .iter()
                        .zip(o)
                        .map(|(&gv, &ov)| gv * ov * (one - ov))
                        .collect(),
                    Unary::Elu => g
                        .iter()
                        .zip(x)
                        .zip(o)
                        .map(|((&gv, &xv), &ov)| if xv > zero { gv } else { gv * (ov + one) })
                        .collect(),
                    Unary::ScalarMul(s) => g.iter().map(|&v| v * s).collect(),
                    Unary::ScalarAdd(_) => g.to_vec(),
                    Unary::Clamp(lo, hi) => g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { zero })
                        .collect(),
                };
                res.push((a, gi));
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [
                    self.wants(input),
                    self.wants(weight),
                    bias.is_some_and(|b| self.wants(b)),
                ];
                let (di, dw, db) =
                    kernels::conv2d_backward(self.value(input), self.value(weight), g, &geom, need);
                if let Some(di) = di {
                    res.push((input, di));
                }
                if let Some(dw) = dw {
                    res.push((weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    res.push((b, db));
                }
            }
            &Op::Upsample(input, mode) => {
                let s = self.shape(input);
                let d = match mode {
                    UpsampleMode::Nearest => kernels::upsample_nearest_backward(s, g),
                    UpsampleMode::Bilinear => kernels::upsample_bilinear_backward(s, g),
                };
                res.push((input, d));
            }
            &Op::AvgPool { input, k, stride } => {
                res.push((
                    input,
                    kernels::avg_pool_backward(self.shape(input), g, k, stride),
                ));
            }
            &Op::Reduce { input, kind, axes } => {
                let s = self.shape(input);
                let group = match axes {
                    ReduceAxes::All => s.numel(),
                    ReduceAxes::Spatial => s.plane(),
                };
                let scale = match kind {
                    ReduceKind::Sum => T::one(),
                    ReduceKind::Mean => T::one() / T::of(group as f64),
                };
                let mut d = Vec::with_capacity(s.numel());
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv * scale, group));
                }
                res.push((input, d));
            }
            &Op::ChannelMean(input) => {
                let [n, c, h, w] = self.shape(input).0;
                let plane = h * w;
                let inv = T::one() / T::of(c as f64);
                let mut d = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    let gb = &g[b * plane..(b + 1) * plane];
                    for ch in 0..c {
                        let dst = &mut d[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        dst.iter_mut().zip(gb).for_each(|(dv, &gv)| *dv = gv * inv);
                    }
                }
                res.push((input, d));
            }
            &Op::Diff(input, axis) => {
                let s = self.shape(input);
                let dim = axis.dim();
                let gt = Tensor::from_vec(out.shape(), g.to_vec())?;
                let mut d = Tensor::zeros(s);
                let [n, c, h, w] = out.shape().0;
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let idx = [b, ch, y, x];
                                let gv = gt.at(idx);
                                let mut next = idx;
                                next[dim] += 1;
                                d.set(next, d.at(next) + gv);
                                d.set(idx, d.at(idx) - gv);
                            }
                        }
                    }
                }
                res.push((input, d.into_vec()));
            }
            &Op::Narrow { input, axis, start } => {
                let dim = axis.dim();
                let gt = Tensor::from_vec(out.shape(), g.to_vec())?;
                let mut d = Tensor::zeros(self.shape(input));
                let [n, c, h, w] = out.shape().0;
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let idx = [b, ch, y, x];
                                let mut at = idx;
                                at[dim] += start;
                                d.set(at, gt.at(idx));
                            }
                        }
                    }
                }
                res.push((input, d.into_vec()));
            }
            Op::Concat(inputs) => {
                let s = out.shape();
                let plane = s.plane();
                let mut parts: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|&v| Vec::with_capacity(self.value(v).numel()))
                    .collect();
                let mut off = 0;
                for _ in 0..s.batch() {
                    for (k, &v) in inputs.iter().enumerate() {
                        let per = self.shape(v).channels() * plane;
                        parts[k].extend_from_slice(&g[off..off + per]);
                        off += per;
                    }
                }
                for (&v, p) in inputs.iter().zip(parts) {
                    res.push((v, p));
                }
            }
            &Op::Warp { source, disp, sign } => {
                let need = [self.wants(source), self.wants(disp)];
                let (ds, dd) =
                    kernels::warp_backward(self.value(source), self.value(disp), sign, g, need);
                if let Some(ds) = ds {
                    res.push((source, ds));
                }
                if let Some(dd) = dd {
                    res.push((disp, dd));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                count,
            } => {
                let s = self.shape(*logits);
                let [n, c, h, w] = s.0;
                let plane = h * w;
                let src = self.value(*logits).data();
                let scale = g[0].as_f64() / *count as f64;
                let mut d = vec![T::zero(); s.numel()];
                for b in 0..n {
                    for p in 0..plane {
                        let t = labels[b * plane + p];
                        if t == *ignore {
                            continue;
                        }
                        let z = |k: usize| src[(b * c + k) * plane + p].as_f64();
                        let m = (0..c).map(z).fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = (0..c).map(|k| (z(k) - m).exp()).sum();
                        for k in 0..c {
                            let mut p_k = (z(k) - m).exp() / denom;
                            if k == t as usize {
                                p_k -= 1.0;
                            }
                            d[(b * c + k) * plane + p] = T::of(p_k * scale);
                        }
                    }
                }
                res.push((*logits, d));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&vals, out, g);
                for (&v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        if gi.len() != self.value(v).numel() {
                            return Err(Error::invalid(
                                op.name(),
                                "custom backward returned wrong length",
                            ));
                        }
                        res.push((v, gi));
                    }
                }
            }
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn ramp(shape: Shape) -> Tensor<f64> {
        let mut k = 0.0;
        Tensor::from_fn(shape, |_| {
            k += 1.0;
            (k * 0.37f64).sin()
        })
    }

    #[test]
    fn additive_inverse_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(ramp(Shape::new(2, 1, 3, 3)));
        let nx = g.neg(x).unwrap();
        let z = g.add(x, nx).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let s = g.sigmoid(x).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let b = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 3)));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(Shape::new(1, 1, 1, 2), 1.0));
        let z = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 2)));
        assert!(matches!(g.div(a, z), Err(Error::NonFinite { .. })));
        let neg = g.constant(Tensor::full(Shape::new(1, 1, 1, 2), -1.0));
        assert!(matches!(g.log(neg), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn identity_conv_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = ramp(Shape::new(1, 3, 4, 5));
        let xi = g.constant(x.clone());
        let w = Tensor::from_fn(
            Shape::new(3, 3, 1, 1),
            |[o, i, _, _]| if o == i { 1.0 } else { 0.0 },
        );
        let wv = g.constant(w);
        let bv = g.constant(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        let y = g.conv2d(xi, wv, Some(bv), 1, 0).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        // direct summation: a 3x3 window over a zero-padded 4x4 field of ones
        let mut expected = [0.0f64; 16];
        for y in 0..4i32 {
            for x in 0..4i32 {
                let mut s = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if (0..4).contains(&(y + dy)) && (0..4).contains(&(x + dx)) {
                            s += 1.0;
                        }
                    }
                }
                expected[(y * 4 + x) as usize] = s;
            }
        }
        let mut g = Graph::<f64>::new();
        let xi = g.constant(Tensor::full(Shape::new(1, 1, 4, 4), 1.0));
        let w = g.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let y = g.conv2d(xi, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &expected);
        assert_eq!(g.value(y).at([0, 0, 1, 1]), 9.0);
        assert_eq!(g.value(y).at([0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn strided_conv_output_dims() {
        let mut g = Graph::<f32>::new();
        for (h, w) in [(8, 16), (7, 9), (1, 1)] {
            let xi = g.constant(Tensor::zeros(Shape::new(2, 2, h, w)));
            let wt = g.constant(Tensor::zeros(Shape::new(4, 2, 3, 3)));
            let y = g.conv2d(xi, wt, None, 2, 1).unwrap();
            assert_eq!(g.shape(y), Shape::new(2, 4, h.div_ceil(2), w.div_ceil(2)));
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let xi = g.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let wt = g.constant(Tensor::zeros(Shape::new(4, 3, 3, 3)));
        assert!(matches!(
            g.conv2d(xi, wt, None, 1, 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nearest_upsample_replicates() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let y = g.upsample(x, UpsampleMode::Nearest).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn upsample_keeps_constants() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(Shape::new(1, 2, 3, 5), 0.7));
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let y = g.upsample(x, mode).unwrap();
            assert_eq!(g.shape(y), Shape::new(1, 2, 6, 10));
            assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn bilinear_upsample_half_pixel_centres() {
        // row [0, 1] -> sample positions -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped)
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(Shape::new(1, 1, 1, 2), &[0.0, 1.0]));
        let y = g.upsample(x, UpsampleMode::Bilinear).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]
        );
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(x).unwrap();
        assert_eq!(g.value(s).item(), 10.0);
        let c = g.constant(Tensor::full(Shape::new(2, 3, 4, 5), 2.5));
        let m = g.mean(c).unwrap();
        assert_eq!(g.value(m).item(), 2.5);
        let ms = g.mean_axes(x, ReduceAxes::Spatial).unwrap();
        assert_eq!(g.shape(ms), Shape::new(1, 1, 1, 1));
        let mean = g.mean(x).unwrap();
        g.backward(mean).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn empty_reduction_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 1, 0, 3)));
        assert!(matches!(g.mean(x), Err(Error::EmptyReduction { .. })));
    }

    #[test]
    fn sum_gives_ones_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(ramp(Shape::new(2, 2, 3, 3)));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mean_of_square_gradient() {
        let mut g = Graph::<f64>::new();
        let xv = ramp(Shape::new(1, 2, 3, 4));
        let x = g.param(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq).unwrap();
        g.backward(m).unwrap();
        let n = xv.numel() as f64;
        for (gv, xv) in g.grad(x).unwrap().data().iter().zip(xv.data()) {
            assert!((gv - 2.0 * xv / n).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(ramp(Shape::new(1, 1, 2, 2)));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn gradients_accumulate_over_uses() {
        let mut g = Graph::<f64>::new();
        let x = g.param(ramp(Shape::new(1, 1, 2, 2)));
        let y = g.add(x, x).unwrap();
        let y = g.add(y, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(ramp(Shape::new(1, 1, 2, 2)));
        let c = g.constant(ramp(Shape::new(1, 1, 2, 2)));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), g.value(c));
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(Shape::new(1, 1, 1, 3), &[-2.0, 0.0, 3.0]));
        let a = g.abs(x).unwrap();
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn diff_and_narrow_and_concat() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(Shape::new(1, 2, 3, 4), |[_, c, y, x]| {
            (c * 100 + y * 10 + x) as f64
        }));
        let dx = g.diff(x, Axis::Width).unwrap();
        assert_eq!(g.shape(dx), Shape::new(1, 2, 3, 3));
        assert!(g.value(dx).data().iter().all(|&v| v == 1.0));
        let dy = g.diff(x, Axis::Height).unwrap();
        assert!(g.value(dy).data().iter().all(|&v| v == 10.0));
        let c1 = g.narrow(x, Axis::Channel, 1, 1).unwrap();
        assert_eq!(g.value(c1).at([0, 0, 2, 3]), 123.0);
        let c0 = g.narrow(x, Axis::Channel, 0, 1).unwrap();
        let back = g.concat(&[c0, c1]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        let single = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 4)));
        assert!(g.diff(single, Axis::Height).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 5, 2, 2)));
        let l = g.cross_entropy(x, &[0, 1, 4, 255], 255).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-15);
        assert!(matches!(
            g.cross_entropy(x, &[255; 4], 255),
            Err(Error::EmptyReduction { .. })
        ));
        assert!(g.cross_entropy(x, &[5, 0, 0, 0], 255).is_err());
    }
}
