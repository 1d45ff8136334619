use std::ops::Index;

use super::kernels::{self, ConvGeometry};
use super::{Element, ParamId, Shape, Volume};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Spatial padding mode of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` voxels on every side.
    Same,
    Valid,
}

/// Test hook for fault injection into the convolution backward pass.
pub mod fault {
    use std::sync::atomic::{AtomicBool, Ordering};

    static CONV_BACKWARD: AtomicBool = AtomicBool::new(false);

    /// When enabled, convolution input gradients are scaled by 1.05.
    pub fn set_conv_backward_fault(on: bool) {
        CONV_BACKWARD.store(on, Ordering::SeqCst);
    }

    pub(crate) fn conv_backward_scale() -> f64 {
        if CONV_BACKWARD.load(Ordering::SeqCst) {
            1.05
        } else {
            1.0
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    SignedPow(Var, f64),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    MeanPerItem(Var),
    SoftmaxChannel(Var),
    Conv { input: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry },
    ConvTranspose { input: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, edge: usize },
    PatchBroadcast { input: Var, edge: usize },
    GlobalAvg(Var),
    GlobalMax { input: Var, argmax: Vec<usize> },
    Concat(Vec<Var>),
    SliceChannels { input: Var, start: usize },
    Upsample2(Var),
    Reshape(Var),
    Linear { input: Var, weight: Var, bias: Option<Var> },
    WindowFilter { input: Var, kernel: Vec<T> },
    TokenAttention { q: Var, k: Var, v: Var, attn: Vec<T> },
}

struct Node<T> {
    value: Volume<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode differentiation record. Nodes are appended in evaluation
/// order, so every node's parents precede it.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Volume<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Volume<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Tape handles of the parameters of one [`ParamStore`](super::ParamStore).
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.index()]
    }
}

fn shape_err<R>(msg: String) -> Result<R> {
    Err(Error::Shape(msg))
}

/// Offsets into a broadcast right-hand operand for every output element.
fn broadcast_map(out: Shape, rhs: Shape) -> Option<Vec<usize>> {
    let (od, rd) = (out.dims(), rhs.dims());
    if od.iter().zip(&rd).any(|(&o, &r)| r != o && r != 1) {
        return None;
    }
    let mut strides = [0usize; 5];
    let mut acc = 1;
    for i in (0..5).rev() {
        strides[i] = if rd[i] == 1 { 0 } else { acc };
        acc *= rd[i];
    }
    let mut map = Vec::with_capacity(out.numel());
    for b in 0..od[0] {
        for c in 0..od[1] {
            for d in 0..od[2] {
                for h in 0..od[3] {
                    let base = b * strides[0] + c * strides[1] + d * strides[2] + h * strides[3];
                    for w in 0..od[4] {
                        map.push(base + w * strides[4]);
                    }
                }
            }
        }
    }
    Some(map)
}

fn reduce_to<T: Element>(g: &[T], rhs: Shape, out: Shape) -> Vec<T> {
    if rhs == out {
        return g.to_vec();
    }
    let map = broadcast_map(out, rhs).expect("shapes validated at record time");
    let mut r = vec![T::ZERO; rhs.numel()];
    for (&gi, &m) in g.iter().zip(&map) {
        r[m] += gi;
    }
    r
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn softplus<T: Element>(x: T) -> T {
    x.max(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
}

const POW_FLOOR: f64 = 1e-6;

fn signed_pow<T: Element>(x: T, p: f64) -> T {
    let m = x.abs().powf(T::from_f64(p));
    if x < T::ZERO {
        -m
    } else {
        m
    }
}

/// Row-wise scaled dot-product attention weights for one batch item.
/// `q`, `k`: `channels x tokens`. Returns a `tokens x tokens` row-stochastic matrix.
pub fn attention_weights<T: Element>(q: &[T], k: &[T], channels: usize, tokens: usize) -> Vec<T> {
    let mut s = vec![T::ZERO; tokens * tokens];
    let scale = T::from_f64(1.0 / (channels as f64).sqrt());
    T::gemm(true, false, tokens, tokens, channels, scale, q, k, T::ZERO, &mut s);
    for row in s.chunks_mut(tokens) {
        let m = row.iter().copied().fold(row[0], T::max);
        let mut z = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    s
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that gradients are taken with respect to.
    pub fn leaf(&mut self, value: Volume<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, value: Volume<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Volume<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Volume<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Shape, data: Vec<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|&p| self.needs(p));
        let value = Volume::from_vec(shape, data).expect("kernel produced a buffer of the declared shape");
        self.push_raw(value, op, needs)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x);
        self.push(shape, data, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, op: fn(Var, Var) -> Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let Some(map) = broadcast_map(sa, sb) else {
                return shape_err(format!("cannot broadcast {sb} onto {sa}"));
            };
            da.iter().zip(&map).map(|(&x, &m)| f(x, db[m])).collect()
        };
        Ok(self.push(sa, data, op(a, b), &[a, b]))
    }

    /// `a + b`; `b` broadcasts over unit extents.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ct = T::from_f64(c);
        self.unary(x, Op::Scale(x, c), |v| v * ct)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let ct = T::from_f64(c);
        self.unary(x, Op::Offset(x), |v| v + ct)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// `sqrt(max(x, 0))`.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.max(T::ZERO).sqrt())
    }

    /// Sign-preserving power `sign(x) * |x|^p`; the identity for `p = 1`.
    pub fn signed_pow(&mut self, x: Var, p: f64) -> Var {
        if p == 1.0 {
            return x;
        }
        self.unary(x, Op::SignedPow(x, p), |v| signed_pow(v, p))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), |v| v.ln())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::ZERO { v } else { T::ZERO })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// `ln(1 + e^x)` in overflow-safe form.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).sum_f64();
        self.push(Shape::scalar(), vec![T::from_f64(s)], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_f64();
        self.push(Shape::scalar(), vec![T::from_f64(v)], Op::Mean(x), &[x])
    }

    /// Mean over everything but the batch axis, shape `(batch, 1, 1, 1, 1)`.
    pub fn mean_per_item(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let n = s.item_len();
        let data = self
            .data(x)
            .chunks(n)
            .map(|c| T::from_f64(c.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64))
            .collect();
        let shape = Shape { batch: s.batch, ..Shape::scalar() };
        self.push(shape, data, Op::MeanPerItem(x), &[x])
    }

    /// Softmax across the channel axis at every `(batch, voxel)` site.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (c, vox) = (s.channels, s.voxels());
        let src = self.data(x);
        let mut out = vec![T::ZERO; src.len()];
        for b in 0..s.batch {
            let base = b * c * vox;
            for v in 0..vox {
                let at = |ch: usize| base + ch * vox + v;
                let m = (1..c).fold(src[at(0)], |m, ch| m.max(src[at(ch)]));
                let mut z = T::ZERO;
                for ch in 0..c {
                    let e = (src[at(ch)] - m).exp();
                    out[at(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[at(ch)] = out[at(ch)] / z;
                }
            }
        }
        self.push(s, out, Op::SoftmaxChannel(x), &[x])
    }

    fn conv_geometry(&self, input: Shape, weight: Shape, stride: usize, padding: Padding) -> Result<ConvGeometry> {
        let k = weight.depth;
        if weight.height != k || weight.width != k {
            return shape_err(format!("kernel {weight} is not cubic"));
        }
        if weight.channels != input.channels {
            return shape_err(format!(
                "kernel expects {} input channels, got {}",
                weight.channels, input.channels
            ));
        }
        if !(1..=2).contains(&stride) {
            return shape_err(format!("unsupported stride {stride}"));
        }
        let pad = match padding {
            Padding::Same if k % 2 == 1 => (k - 1) / 2,
            Padding::Same => return shape_err(format!("same padding needs an odd kernel, got {k}")),
            Padding::Valid => 0,
        };
        ConvGeometry::conv(input.spatial(), k, stride, pad)
            .ok_or_else(|| Error::Shape(format!("input {input} is smaller than kernel edge {k}")))
    }

    fn check_bias(&self, bias: Option<Var>, channels: usize) -> Result<()> {
        match bias {
            Some(b) if self.shape(b).numel() != channels => {
                shape_err(format!("bias {} does not match {channels} channels", self.shape(b)))
            }
            _ => Ok(()),
        }
    }

    /// 3-D convolution. `weight` has shape `(out, in, k, k, k)`, `bias` `out` elements.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let geo = self.conv_geometry(si, sw, stride, padding)?;
        self.check_bias(bias, sw.batch)?;
        let data = kernels::conv_forward(
            &geo,
            self.data(input),
            si.batch,
            si.channels,
            self.data(weight),
            sw.batch,
            bias.map(|b| self.data(b)),
        );
        let shape = si.with_channels(sw.batch).with_spatial(geo.output);
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(shape, data, Op::Conv { input, weight, bias, geo }, &parents))
    }

    /// Stride-2 transposed convolution that exactly doubles every spatial
    /// extent. `weight` has shape `(in, out, k, k, k)` with odd `k`.
    pub fn conv_transpose3d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let k = sw.depth;
        if sw.height != k || sw.width != k || k % 2 == 0 {
            return shape_err(format!("transposed kernel {sw} must be cubic with odd edge"));
        }
        if sw.batch != si.channels {
            return shape_err(format!(
                "transposed kernel expects {} input channels, got {}",
                sw.batch, si.channels
            ));
        }
        let big = si.spatial().map(|n| 2 * n);
        let geo = ConvGeometry::conv(big, k, 2, (k - 1) / 2).expect("doubled extent always fits");
        debug_assert_eq!(geo.output, si.spatial());
        self.check_bias(bias, sw.channels)?;
        let data = kernels::conv_transpose_forward(
            &geo,
            self.data(input),
            si.batch,
            si.channels,
            self.data(weight),
            sw.channels,
            bias.map(|b| self.data(b)),
        );
        let shape = si.with_channels(sw.channels).with_spatial(big);
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(shape, data, Op::ConvTranspose { input, weight, bias, geo }, &parents))
    }

    /// 2x max pooling; every spatial extent must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.spatial().iter().any(|n| n % 2 != 0) {
            return shape_err(format!("max pooling needs even extents, got {s}"));
        }
        let (data, argmax) = kernels::max_pool2(self.data(x), s.batch * s.channels, s.spatial());
        let shape = s.with_spatial(s.spatial().map(|n| n / 2));
        Ok(self.push(shape, data, Op::MaxPool2 { input: x, argmax }, &[x]))
    }

    /// Mean over non-overlapping `edge^3` patches, dropping incomplete ones.
    pub fn avg_pool(&mut self, x: Var, edge: usize) -> Result<Var> {
        let s = self.shape(x);
        if edge == 0 || s.spatial().iter().any(|&n| n < edge) {
            return shape_err(format!("cannot pool {s} with patch edge {edge}"));
        }
        let data = kernels::avg_pool(self.data(x), s.batch * s.channels, s.spatial(), edge);
        let shape = s.with_spatial(s.spatial().map(|n| n / edge));
        Ok(self.push(shape, data, Op::AvgPool { input: x, edge }, &[x]))
    }

    /// Nearest-neighbour expansion of each voxel to an `edge^3` patch.
    pub fn patch_broadcast(&mut self, x: Var, edge: usize) -> Var {
        let s = self.shape(x);
        let dims = s.spatial().map(|n| n * edge);
        let data = kernels::patch_spread(self.data(x), s.batch * s.channels, dims, edge, T::ONE);
        self.push(s.with_spatial(dims), data, Op::PatchBroadcast { input: x, edge }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let n = s.voxels();
        let data = self
            .data(x)
            .chunks(n)
            .map(|c| T::from_f64(c.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64))
            .collect();
        self.push(s.with_spatial([1, 1, 1]), data, Op::GlobalAvg(x), &[x])
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let n = s.voxels();
        let mut data = Vec::with_capacity(s.batch * s.channels);
        let mut argmax = Vec::with_capacity(s.batch * s.channels);
        for (i, c) in self.data(x).chunks(n).enumerate() {
            let mut best = 0;
            for (j, &v) in c.iter().enumerate() {
                if v > c[best] {
                    best = j;
                }
            }
            data.push(c[best]);
            argmax.push(i * n + best);
        }
        self.push(s.with_spatial([1, 1, 1]), data, Op::GlobalMax { input: x, argmax }, &[x])
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
        let s0 = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.with_channels(1) != s0.with_channels(1) {
                return shape_err(format!("cannot concat {sp} with {s0}"));
            }
            channels += sp.channels;
        }
        let shape = s0.with_channels(channels);
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..s0.batch {
            for &p in parts {
                let len = self.shape(p).item_len();
                data.extend_from_slice(&self.data(p)[b * len..(b + 1) * len]);
            }
        }
        Ok(self.push(shape, data, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.channels {
            return shape_err(format!("channel slice {start}..{} out of {s}", start + len));
        }
        let vox = s.voxels();
        let mut data = Vec::with_capacity(s.batch * len * vox);
        for b in 0..s.batch {
            let base = (b * s.channels + start) * vox;
            data.extend_from_slice(&self.data(x)[base..base + len * vox]);
        }
        Ok(self.push(s.with_channels(len), data, Op::SliceChannels { input: x, start }, &[x]))
    }

    /// Trilinear 2x upsampling with half-pixel centres.
    pub fn upsample_trilinear2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let data = kernels::upsample2(self.data(x), s.batch * s.channels, s.spatial());
        self.push(s.with_spatial(s.spatial().map(|n| 2 * n)), data, Op::Upsample2(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        if shape.numel() != self.shape(x).numel() {
            return shape_err(format!("cannot reshape {} to {shape}", self.shape(x)));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape, data, Op::Reshape(x), &[x]))
    }

    /// Collapses each batch item to a `(batch, n, 1, 1, 1)` feature vector.
    pub fn flatten(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let shape = Shape { batch: s.batch, channels: s.item_len(), depth: 1, height: 1, width: 1 };
        self.reshape(x, shape).expect("flatten preserves element count")
    }

    /// Affine map over flattened items. `weight`: `(out, in, 1, 1, 1)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let n_in = si.item_len();
        if sw.item_len() != n_in {
            return shape_err(format!("linear weight {sw} does not accept {n_in} features"));
        }
        let n_out = sw.batch;
        self.check_bias(bias, n_out)?;
        let mut data = vec![T::ZERO; si.batch * n_out];
        T::gemm(false, true, si.batch, n_out, n_in, T::ONE, self.data(input), self.data(weight), T::ZERO, &mut data);
        if let Some(b) = bias {
            for row in data.chunks_mut(n_out) {
                for (r, &bv) in row.iter_mut().zip(self.data(b)) {
                    *r += bv;
                }
            }
        }
        let shape = Shape { batch: si.batch, channels: n_out, depth: 1, height: 1, width: 1 };
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(shape, data, Op::Linear { input, weight, bias }, &parents))
    }

    /// Separable valid-mode filtering with the same 1-D `kernel` on each axis.
    pub fn window_filter(&mut self, x: Var, kernel: &[f64]) -> Result<Var> {
        let s = self.shape(x);
        let k = kernel.len();
        if k == 0 || s.spatial().iter().any(|&n| n < k) {
            return shape_err(format!("window of edge {k} does not fit {s}"));
        }
        let kernel: Vec<T> = kernel.iter().map(|&v| T::from_f64(v)).collect();
        let data = kernels::window_filter(self.data(x), s.batch * s.channels, s.spatial(), &kernel);
        let shape = s.with_spatial(s.spatial().map(|n| n + 1 - k));
        Ok(self.push(shape, data, Op::WindowFilter { input: x, kernel }, &[x]))
    }

    /// Single-head scaled dot-product attention across voxels-as-tokens:
    /// `out[:, i] = sum_j softmax_j(q_i . k_j / sqrt(C)) v[:, j]`.
    pub fn token_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let s = self.shape(q);
        if self.shape(k) != s || self.shape(v) != s {
            return shape_err(format!("attention operands disagree: {s} {} {}", self.shape(k), self.shape(v)));
        }
        let (c, n) = (s.channels, s.voxels());
        let mut out = vec![T::ZERO; s.numel()];
        let mut attn = Vec::with_capacity(s.batch * n * n);
        for b in 0..s.batch {
            let r = b * c * n..(b + 1) * c * n;
            let a = attention_weights(&self.data(q)[r.clone()], &self.data(k)[r.clone()], c, n);
            T::gemm(false, true, c, n, n, T::ONE, &self.data(v)[r.clone()], &a, T::ZERO, &mut out[r]);
            attn.extend(a);
        }
        Ok(self.push(s, out, Op::TokenAttention { q, k, v, attn }, &[q, k, v]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NotScalar(ls));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Volume::from_vec(self.nodes[i].value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contribution) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn map_grad(&self, g: &[T], x: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        g.iter().zip(self.data(x)).map(|(&gi, &xi)| f(gi, xi)).collect()
    }

    fn rhs_values(&self, a: Var, b: Var) -> Vec<T> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            self.data(b).to_vec()
        } else {
            let map = broadcast_map(sa, sb).expect("validated");
            map.iter().map(|&m| self.data(b)[m]).collect()
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                if self.needs(b) {
                    let r = reduce_to(g, self.shape(b), self.shape(a));
                    self.accumulate(grads, b, r);
                }
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                if self.needs(b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    let r = reduce_to(&neg, self.shape(b), self.shape(a));
                    self.accumulate(grads, b, r);
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.rhs_values(a, b);
                    self.accumulate(grads, a, g.iter().zip(&bv).map(|(&gi, &bi)| gi * bi).collect());
                }
                if self.needs(b) {
                    let ga = self.map_grad(g, a, |gi, ai| gi * ai);
                    self.accumulate(grads, b, reduce_to(&ga, self.shape(b), self.shape(a)));
                }
            }
            &Op::Div(a, b) => {
                let bv = self.rhs_values(a, b);
                if self.needs(a) {
                    self.accumulate(grads, a, g.iter().zip(&bv).map(|(&gi, &bi)| gi / bi).collect());
                }
                if self.needs(b) {
                    let gb: Vec<T> = g
                        .iter()
                        .zip(self.data(a))
                        .zip(&bv)
                        .map(|((&gi, &ai), &bi)| -gi * ai / (bi * bi))
                        .collect();
                    self.accumulate(grads, b, reduce_to(&gb, self.shape(b), self.shape(a)));
                }
            }
            &Op::Scale(x, c) => {
                let ct = T::from_f64(c);
                self.accumulate(grads, x, g.iter().map(|&gi| gi * ct).collect());
            }
            &Op::Offset(x) => self.accumulate(grads, x, g.to_vec()),
            &Op::Square(x) => {
                let two = T::from_f64(2.0);
                self.accumulate(grads, x, self.map_grad(g, x, |gi, xi| two * xi * gi));
            }
            &Op::Abs(x) => {
                let d = self.map_grad(g, x, |gi, xi| {
                    if xi > T::ZERO {
                        gi
                    } else if xi < T::ZERO {
                        -gi
                    } else {
                        T::ZERO
                    }
                });
                self.accumulate(grads, x, d);
            }
            &Op::Sqrt(x) => {
                let half = T::from_f64(0.5);
                let floor = T::from_f64(1e-12);
                let d = g.iter().zip(y).map(|(&gi, &yi)| gi * half / yi.max(floor)).collect();
                self.accumulate(grads, x, d);
            }
            &Op::SignedPow(x, p) => {
                let (pt, pm1, floor) = (T::from_f64(p), T::from_f64(p - 1.0), T::from_f64(POW_FLOOR));
                let d = self.map_grad(g, x, |gi, xi| gi * pt * xi.abs().max(floor).powf(pm1));
                self.accumulate(grads, x, d);
            }
            &Op::Exp(x) => {
                self.accumulate(grads, x, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
            }
            &Op::Ln(x) => self.accumulate(grads, x, self.map_grad(g, x, |gi, xi| gi / xi)),
            &Op::Relu(x) => {
                let d = self.map_grad(g, x, |gi, xi| if xi > T::ZERO { gi } else { T::ZERO });
                self.accumulate(grads, x, d);
            }
            &Op::Sigmoid(x) => {
                let d = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::ONE - yi)).collect();
                self.accumulate(grads, x, d);
            }
            &Op::Softplus(x) => self.accumulate(grads, x, self.map_grad(g, x, |gi, xi| gi * sigmoid(xi))),
            &Op::Sum(x) => self.accumulate(grads, x, vec![g[0]; self.shape(x).numel()]),
            &Op::Mean(x) => {
                let n = self.shape(x).numel();
                self.accumulate(grads, x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            &Op::MeanPerItem(x) => {
                let s = self.shape(x);
                let n = s.item_len();
                let scale = T::from_f64(1.0 / n as f64);
                let d = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * scale, n)).collect();
                self.accumulate(grads, x, d);
            }
            &Op::SoftmaxChannel(x) => {
                let s = self.shape(x);
                let (c, vox) = (s.channels, s.voxels());
                let mut d = vec![T::ZERO; g.len()];
                for b in 0..s.batch {
                    let base = b * c * vox;
                    for v in 0..vox {
                        let dot: T = (0..c).map(|ch| y[base + ch * vox + v] * g[base + ch * vox + v]).sum();
                        for ch in 0..c {
                            let at = base + ch * vox + v;
                            d[at] = y[at] * (g[at] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, d);
            }
            &Op::Conv { input, weight, bias, geo } => {
                let (si, sw) = (self.shape(input), self.shape(weight));
                let r = kernels::conv_backward(
                    &geo,
                    self.data(input),
                    si.batch,
                    si.channels,
                    self.data(weight),
                    sw.batch,
                    g,
                    [self.needs(input), self.needs(weight), bias.is_some_and(|b| self.needs(b))],
                );
                self.apply_conv_grads(grads, input, weight, bias, r);
            }
            &Op::ConvTranspose { input, weight, bias, geo } => {
                let (si, sw) = (self.shape(input), self.shape(weight));
                let r = kernels::conv_transpose_backward(
                    &geo,
                    self.data(input),
                    si.batch,
                    si.channels,
                    self.data(weight),
                    sw.channels,
                    g,
                    [self.needs(input), self.needs(weight), bias.is_some_and(|b| self.needs(b))],
                );
                self.apply_conv_grads(grads, input, weight, bias, r);
            }
            Op::MaxPool2 { input, argmax } | Op::GlobalMax { input, argmax } => {
                let mut d = vec![T::ZERO; self.shape(*input).numel()];
                for (&gi, &a) in g.iter().zip(argmax) {
                    d[a] += gi;
                }
                self.accumulate(grads, *input, d);
            }
            &Op::AvgPool { input, edge } => {
                let s = self.shape(input);
                let scale = T::from_f64(1.0 / (edge * edge * edge) as f64);
                let d = kernels::patch_spread(g, s.batch * s.channels, s.spatial(), edge, scale);
                self.accumulate(grads, input, d);
            }
            &Op::PatchBroadcast { input, edge } => {
                let s = node.value.shape();
                let d = kernels::avg_pool(g, s.batch * s.channels, s.spatial(), edge);
                let e3 = T::from_f64((edge * edge * edge) as f64);
                self.accumulate(grads, input, d.into_iter().map(|v| v * e3).collect());
            }
            &Op::GlobalAvg(x) => {
                let n = self.shape(x).voxels();
                let scale = T::from_f64(1.0 / n as f64);
                let d = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * scale, n)).collect();
                self.accumulate(grads, x, d);
            }
            Op::Concat(parts) => {
                let batch = node.value.shape().batch;
                let item = node.value.shape().item_len();
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p).item_len();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(batch * len);
                        for b in 0..batch {
                            d.extend_from_slice(&g[b * item + offset..b * item + offset + len]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += len;
                }
            }
            &Op::SliceChannels { input, start } => {
                let s = self.shape(input);
                let out = node.value.shape();
                let vox = s.voxels();
                let mut d = vec![T::ZERO; s.numel()];
                for b in 0..s.batch {
                    let dst = (b * s.channels + start) * vox;
                    let src = b * out.item_len();
                    d[dst..dst + out.item_len()].copy_from_slice(&g[src..src + out.item_len()]);
                }
                self.accumulate(grads, input, d);
            }
            &Op::Upsample2(x) => {
                let s = self.shape(x);
                let d = kernels::upsample2_backward(g, s.batch * s.channels, s.spatial());
                self.accumulate(grads, x, d);
            }
            &Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
            &Op::Linear { input, weight, bias } => {
                let (si, sw) = (self.shape(input), self.shape(weight));
                let (batch, n_in, n_out) = (si.batch, si.item_len(), sw.batch);
                if self.needs(input) {
                    let mut d = vec![T::ZERO; batch * n_in];
                    T::gemm(false, false, batch, n_in, n_out, T::ONE, g, self.data(weight), T::ZERO, &mut d);
                    self.accumulate(grads, input, d);
                }
                if self.needs(weight) {
                    let mut d = vec![T::ZERO; n_out * n_in];
                    T::gemm(true, false, n_out, n_in, batch, T::ONE, g, self.data(input), T::ZERO, &mut d);
                    self.accumulate(grads, weight, d);
                }
                if let Some(b) = bias {
                    let mut d = vec![T::ZERO; n_out];
                    for row in g.chunks(n_out) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, b, d);
                }
            }
            Op::WindowFilter { input, kernel } => {
                let s = self.shape(*input);
                let d = kernels::window_filter_backward(g, s.batch * s.channels, s.spatial(), kernel);
                self.accumulate(grads, *input, d);
            }
            Op::TokenAttention { q, k, v, attn } => self.attention_backward(grads, g, *q, *k, *v, attn),
        }
    }

    fn apply_conv_grads(
        &self,
        grads: &mut [Option<Vec<T>>],
        input: Var,
        weight: Var,
        bias: Option<Var>,
        r: kernels::ConvGrads<T>,
    ) {
        if let Some(mut dx) = r.input {
            let scale = fault::conv_backward_scale();
            if scale != 1.0 {
                let s = T::from_f64(scale);
                dx.iter_mut().for_each(|v| *v *= s);
            }
            self.accumulate(grads, input, dx);
        }
        if let Some(dw) = r.weight {
            self.accumulate(grads, weight, dw);
        }
        if let (Some(b), Some(db)) = (bias, r.bias) {
            self.accumulate(grads, b, db);
        }
    }

    fn attention_backward(&self, grads: &mut [Option<Vec<T>>], g: &[T], q: Var, k: Var, v: Var, attn: &[T]) {
        let s = self.shape(q);
        let (c, n) = (s.channels, s.voxels());
        let scale = T::from_f64(1.0 / (c as f64).sqrt());
        let mut dq = vec![T::ZERO; s.numel()];
        let mut dk = vec![T::ZERO; s.numel()];
        let mut dv = vec![T::ZERO; s.numel()];
        for b in 0..s.batch {
            let r = b * c * n..(b + 1) * c * n;
            let a = &attn[b * n * n..(b + 1) * n * n];
            let go = &g[r.clone()];
            T::gemm(false, false, c, n, n, T::ONE, go, a, T::ZERO, &mut dv[r.clone()]);
            let mut da = vec![T::ZERO; n * n];
            T::gemm(true, false, n, n, c, T::ONE, go, &self.data(v)[r.clone()], T::ZERO, &mut da);
            for (arow, drow) in a.chunks(n).zip(da.chunks_mut(n)) {
                let dot: T = arow.iter().zip(drow.iter()).map(|(&x, &y)| x * y).sum();
                for (d, &av) in drow.iter_mut().zip(arow) {
                    *d = av * (*d - dot);
                }
            }
            T::gemm(false, true, c, n, n, scale, &self.data(k)[r.clone()], &da, T::ZERO, &mut dq[r.clone()]);
            T::gemm(false, false, c, n, n, scale, &self.data(q)[r.clone()], &da, T::ZERO, &mut dk[r]);
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}
