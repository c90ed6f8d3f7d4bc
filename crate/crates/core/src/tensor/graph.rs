use super::kernels::{self, ConvGeometry};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::mask::Mask;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeometry },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var },
    Relu { input: Var },
    Sigmoid { input: Var },
    GlobalAvgPool { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    Concat { a: Var, b: Var },
    ScaleChannels { input: Var, scale: Var },
    SoftmaxChannels { input: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<T>, target: Vec<u8> },
    WeightedSum { input: Var, weights: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations.
///
/// Every op appends a node holding its output value; [`Graph::backward`]
/// walks the tape in reverse. Nodes whose inputs do not require gradients are
/// skipped entirely, so frozen sub-networks cost nothing in the backward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn ensure_finite<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], name: &'static str) -> Result<Var> {
        ensure_finite(&value, name)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, cin, h, w] = self.value(input).dims4()?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::Config(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Config(format!("conv2d: kernel must be square and odd, got {kh}×{kw}")));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::Config(format!(
                "conv2d: bias shape {:?} does not match {cout} output channels",
                self.shape(bias)
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let extent = |len: usize| -> Result<usize> {
            let span = (len + 2 * padding)
                .checked_sub(kh)
                .ok_or_else(|| Error::Config(format!("conv2d: kernel {kh} larger than padded extent {len}")))?;
            if span % stride != 0 {
                return Err(Error::Config(format!(
                    "conv2d: extent {len} with padding {padding}, kernel {kh}, stride {stride} is not integral"
                )));
            }
            Ok(span / stride + 1)
        };
        let geom = ConvGeometry {
            batch: n,
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            out_height: extent(h)?,
            out_width: extent(w)?,
        };
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let out = Tensor::new([n, cout, geom.out_height, geom.out_width], out)?;
        self.push(out, Op::Conv2d { input, weight, bias, geom }, &[input, weight, bias], "conv2d")
    }

    pub fn max_pool2x2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("max_pool2x2: extents {h}×{w} must be even")));
        }
        let (out, argmax) = kernels::max_pool2x2_forward(self.value(input).data(), n * c, h, w);
        let out = Tensor::new([n, c, h / 2, w / 2], out)?;
        self.push(out, Op::MaxPool { input, argmax }, &[input], "max_pool2x2")
    }

    pub fn upsample_bilinear2x(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let out = kernels::upsample2x_forward(self.value(input).data(), n * c, h, w);
        let out = Tensor::new([n, c, 2 * h, 2 * w], out)?;
        self.push(out, Op::Upsample { input }, &[input], "upsample_bilinear2x")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu { input }, &[input], "relu")
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(out, Op::Sigmoid { input }, &[input], "sigmoid")
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let data: Vec<T> = self.value(input).data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new([n, c], data)?;
        self.push(out, Op::GlobalAvgPool { input }, &[input], "global_avg_pool")
    }

    /// `y = x Wᵀ + b` with `x: [N, F]`, `W: [G, F]`, `b: [G]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, f] = self.value(input).dims2()?;
        let [g, wf] = self.value(weight).dims2()?;
        if wf != f || self.shape(bias) != [g] {
            return Err(Error::Config(format!(
                "linear: input {:?}, weight {:?}, bias {:?} are incompatible",
                self.shape(input),
                self.shape(weight),
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
        T::gemm(n, f, g, T::one(), self.value(input).data(), f as isize, 1, self.value(weight).data(), 1, f as isize, T::one(), &mut out);
        let out = Tensor::new([n, g], out)?;
        self.push(out, Op::Linear { input, weight, bias }, &[input, weight, bias], "linear")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Config(format!(
                "concat_channels: {:?} and {:?} differ outside the channel axis",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (pa + pb));
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&self.value(b).data()[i * pb..(i + 1) * pb]);
        }
        let out = Tensor::new([n, ca + cb, h, w], data)?;
        self.push(out, Op::Concat { a, b }, &[a, b], "concat_channels")
    }

    /// `out[n, c, h, w] = input[n, c, h, w] * scale[n, c]`.
    pub fn scale_channels(&mut self, input: Var, scale: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if self.shape(scale) != [n, c] {
            return Err(Error::Config(format!(
                "scale_channels: scale {:?} does not match input {:?}",
                self.shape(scale),
                self.shape(input)
            )));
        }
        let s = self.value(scale).data();
        let data: Vec<T> = self
            .value(input)
            .data()
            .chunks(h * w)
            .zip(s)
            .flat_map(|(plane, &k)| plane.iter().map(move |&v| v * k))
            .collect();
        let out = Tensor::new([n, c, h, w], data)?;
        self.push(out, Op::ScaleChannels { input, scale }, &[input, scale], "scale_channels")
    }

    /// Softmax over the channel axis of `[N, K, H, W]`.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let [n, k, h, w] = self.value(input).dims4()?;
        let x = self.value(input).data();
        let plane = h * w;
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            let base = b * k * plane;
            for p in 0..plane {
                let m = (0..k).map(|c| x[base + c * plane + p]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..k {
                    let e = (x[base + c * plane + p] - m).exp();
                    out[base + c * plane + p] = e;
                    z = z + e;
                }
                for c in 0..k {
                    out[base + c * plane + p] = out[base + c * plane + p] / z;
                }
            }
        }
        let out = Tensor::new([n, k, h, w], out)?;
        self.push(out, Op::SoftmaxChannels { input }, &[input], "softmax_channels")
    }

    /// Mean per-pixel multi-class cross-entropy of `[N, K, H, W]` logits against `[N, H, W]` labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Mask) -> Result<Var> {
        let [n, k, h, w] = self.value(logits).dims4()?;
        if target.shape() != [n, h, w] {
            return Err(Error::Config(format!(
                "softmax_cross_entropy: target {:?} does not match logits {:?}",
                target.shape(),
                self.shape(logits)
            )));
        }
        if let Some((i, &l)) = target.labels().iter().enumerate().find(|(_, &l)| l as usize >= k) {
            return Err(Error::Data(format!("target label {l} at pixel {i} is out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let plane = h * w;
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for b in 0..n {
            let base = b * k * plane;
            for p in 0..plane {
                let m = (0..k).map(|c| x[base + c * plane + p]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..k {
                    let e = (x[base + c * plane + p] - m).exp();
                    probs[base + c * plane + p] = e;
                    z = z + e;
                }
                for c in 0..k {
                    probs[base + c * plane + p] = probs[base + c * plane + p] / z;
                }
                let t = target.labels()[b * plane + p] as usize;
                total = total + (z.ln() - (x[base + t * plane + p] - m));
            }
        }
        let loss = total / T::from_usize(n * plane).unwrap();
        let target = target.labels().to_vec();
        self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, probs, target }, &[logits], "softmax_cross_entropy")
    }

    /// `sum_i weights[i] * input[i]`, a scalar. Used to reduce arbitrary outputs for checking.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        if weights.shape() != self.shape(input) {
            return Err(Error::Config(format!(
                "weighted_sum: weights {:?} vs input {:?}",
                weights.shape(),
                self.shape(input)
            )));
        }
        let s = self.value(input).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum::<T>();
        self.push(Tensor::scalar(s), Op::WeightedSum { input, weights: weights.data().to_vec() }, &[input], "weighted_sum")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: vec![None; self.nodes.len()], shapes: self.shapes() });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads, shapes: self.shapes() })
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.nodes.iter().map(|n| n.value.shape().to_vec()).collect()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let want = [self.wants(*input), self.wants(*weight), self.wants(*bias)];
                let g = kernels::conv2d_backward(geom, self.value(*input).data(), self.value(*weight).data(), dy, want);
                if let Some(d) = g.input {
                    accumulate(grads, *input, d);
                }
                if let Some(d) = g.weight {
                    accumulate(grads, *weight, d);
                }
                if let Some(d) = g.bias {
                    accumulate(grads, *bias, d);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).len()];
                for (&i, &g) in argmax.iter().zip(dy) {
                    d[i] = d[i] + g;
                }
                accumulate(grads, *input, d);
            }
            Op::Upsample { input } => {
                let [n, c, h, w] = self.value(*input).dims4()?;
                accumulate(grads, *input, kernels::upsample2x_backward(dy, n * c, h, w));
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let d = x.iter().zip(dy).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect();
                accumulate(grads, *input, d);
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                let d = y.iter().zip(dy).map(|(&y, &g)| g * y * (T::one() - y)).collect();
                accumulate(grads, *input, d);
            }
            Op::GlobalAvgPool { input } => {
                let [_, _, h, w] = self.value(*input).dims4()?;
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let d = dy.iter().flat_map(|&g| std::iter::repeat_n(g * inv, h * w)).collect();
                accumulate(grads, *input, d);
            }
            Op::Linear { input, weight, bias } => {
                let [n, f] = self.value(*input).dims2()?;
                let [g, _] = self.value(*weight).dims2()?;
                if self.wants(*input) {
                    let mut d = vec![T::zero(); n * f];
                    T::gemm(n, g, f, T::one(), dy, g as isize, 1, self.value(*weight).data(), f as isize, 1, T::zero(), &mut d);
                    accumulate(grads, *input, d);
                }
                if self.wants(*weight) {
                    let mut d = vec![T::zero(); g * f];
                    T::gemm(g, n, f, T::one(), dy, 1, g as isize, self.value(*input).data(), f as isize, 1, T::zero(), &mut d);
                    accumulate(grads, *weight, d);
                }
                if self.wants(*bias) {
                    let mut d = vec![T::zero(); g];
                    for row in dy.chunks(g) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    accumulate(grads, *bias, d);
                }
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(*a).dims4()?;
                let cb = self.value(*b).dims4()?[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                if self.wants(*a) {
                    let d = (0..n).flat_map(|i| dy[i * (pa + pb)..i * (pa + pb) + pa].iter().copied()).collect();
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = (0..n).flat_map(|i| dy[i * (pa + pb) + pa..(i + 1) * (pa + pb)].iter().copied()).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::ScaleChannels { input, scale } => {
                let [_, _, h, w] = self.value(*input).dims4()?;
                let plane = h * w;
                let s = self.value(*scale).data();
                if self.wants(*input) {
                    let d = dy.chunks(plane).zip(s).flat_map(|(g, &k)| g.iter().map(move |&v| v * k)).collect();
                    accumulate(grads, *input, d);
                }
                if self.wants(*scale) {
                    let x = self.value(*input).data();
                    let d = dy
                        .chunks(plane)
                        .zip(x.chunks(plane))
                        .map(|(g, x)| g.iter().zip(x).map(|(&g, &x)| g * x).sum::<T>())
                        .collect();
                    accumulate(grads, *scale, d);
                }
            }
            Op::SoftmaxChannels { input } => {
                let [n, k, h, w] = node.value.dims4()?;
                let y = node.value.data();
                let plane = h * w;
                let mut d = vec![T::zero(); y.len()];
                for b in 0..n {
                    let base = b * k * plane;
                    for p in 0..plane {
                        let dot = (0..k).map(|c| y[base + c * plane + p] * dy[base + c * plane + p]).sum::<T>();
                        for c in 0..k {
                            let i = base + c * plane + p;
                            d[i] = y[i] * (dy[i] - dot);
                        }
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::SoftmaxCrossEntropy { logits, probs, target } => {
                let [n, k, h, w] = self.value(*logits).dims4()?;
                let plane = h * w;
                let scale = dy[0] / T::from_usize(n * plane).unwrap();
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for b in 0..n {
                    for p in 0..plane {
                        let t = target[b * plane + p] as usize;
                        let i = (b * k + t) * plane + p;
                        d[i] = d[i] - scale;
                    }
                }
                accumulate(grads, *logits, d);
            }
            Op::WeightedSum { input, weights } => {
                let d = weights.iter().map(|&w| w * dy[0]).collect();
                accumulate(grads, *input, d);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Result of [`Graph::backward`]: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. `v`, or `None` when `v` does not influence the loss
    /// through differentiable paths.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub(crate) fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient w.r.t. `v`, zero-filled if absent.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}
