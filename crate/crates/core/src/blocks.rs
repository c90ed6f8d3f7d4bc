//! Network building blocks: convolution layer, U-Net double-conv stage,
//! squeeze-and-excitation block and the SE-connection (SEC) fusion module.
//!
//! Blocks only hold [`ParamId`]s. A forward pass receives the graph leaves
//! produced by [`ParamStore::bind`] and indexes them by id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Deterministic per-name weight initialization.
///
/// Each tensor draws from its own stream keyed by `(seed, name)`, so a
/// parameter's initial value does not depend on which other layers exist.
#[derive(Clone, Copy, Debug)]
pub struct Initializer {
    pub seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn normal<T: Real>(&self, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(&mut rng)))
    }
}

pub(crate) fn at(params: &[Var], id: ParamId) -> Var {
    params[id.0]
}

/// Square-kernel convolution with bias and "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2dLayer {
    /// He-normal weights, zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("{name}: kernel size {kernel} must be odd")));
        }
        let wname = format!("{name}.weight");
        let shape = [out_channels, in_channels, kernel, kernel];
        let std = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let weight = store.add(wname.clone(), init.normal(&wname, &shape, std))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]))?;
        Ok(Self { weight, bias, in_channels, out_channels, kernel })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, at(params, self.weight), at(params, self.bias), 1, self.kernel / 2)
    }
}

/// `(conv3×3 → relu) × 2`, the U-Net stage.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub conv1: Conv2dLayer,
    pub conv2: Conv2dLayer,
}

impl DoubleConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2dLayer::new(store, init, &format!("{name}.conv1"), in_channels, out_channels, 3)?,
            conv2: Conv2dLayer::new(store, init, &format!("{name}.conv2"), out_channels, out_channels, 3)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, params, x)?;
        let y = g.relu(y)?;
        let y = self.conv2.forward(g, params, y)?;
        g.relu(y)
    }
}

/// Reduction ratio actually used for `channels`: the largest divisor of
/// `channels` not above `ratio` that keeps at least four hidden units.
pub fn effective_se_ratio(channels: usize, ratio: usize) -> usize {
    (1..=ratio.max(1))
        .rev()
        .find(|&r| channels % r == 0 && channels / r >= 4)
        .unwrap_or(1)
}

/// Squeeze-and-excitation: `x * sigmoid(W2 relu(W1 gap(x) + b1) + b2)` per channel.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub reduce_weight: ParamId,
    pub reduce_bias: ParamId,
    pub expand_weight: ParamId,
    pub expand_bias: ParamId,
    pub channels: usize,
    pub ratio: usize,
}

impl SeBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        name: &str,
        channels: usize,
        ratio: usize,
    ) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::Config(format!(
                "{name}: reduction ratio {ratio} does not divide {channels} channels"
            )));
        }
        let hidden = channels / ratio;
        let rw = format!("{name}.reduce.weight");
        let ew = format!("{name}.expand.weight");
        let reduce_weight = store.add(rw.clone(), init.normal(&rw, &[hidden, channels], (2.0 / channels as f64).sqrt()))?;
        let reduce_bias = store.add(format!("{name}.reduce.bias"), Tensor::zeros([hidden]))?;
        let expand_weight = store.add(ew.clone(), init.normal(&ew, &[channels, hidden], (1.0 / hidden as f64).sqrt()))?;
        let expand_bias = store.add(format!("{name}.expand.bias"), Tensor::zeros([channels]))?;
        Ok(Self { reduce_weight, reduce_bias, expand_weight, expand_bias, channels, ratio })
    }

    /// Per-channel gates `s`, shape `[N, C]`.
    pub fn gates<T: Real>(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let c = g.value(x).dims4()?[1];
        if c != self.channels {
            return Err(Error::Config(format!("SE block built for {} channels, got {c}", self.channels)));
        }
        let s = g.global_avg_pool(x)?;
        let s = g.linear(s, at(params, self.reduce_weight), at(params, self.reduce_bias))?;
        let s = g.relu(s)?;
        let s = g.linear(s, at(params, self.expand_weight), at(params, self.expand_bias))?;
        g.sigmoid(s)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let s = self.gates(g, params, x)?;
        g.scale_channels(x, s)
    }
}

/// The two feature maps meeting in an SEC module.
#[derive(Clone, Copy, Debug)]
pub struct SecInputs {
    /// Encoder features of the shallower stage, `[N, C1, H, W]`.
    pub level1: Var,
    /// Output of the next-deeper SEC (or the bottleneck SE block), `[N, C2, H/2, W/2]`.
    pub level2: Var,
}

/// SE-connection module: fuses a stage's encoder features with the deeper
/// stage's fused features and gates the result channel-wise.
///
/// `conv1×1(level2) → upsample 2× → concat(level1, ·) → conv3×3 → relu → SE`.
#[derive(Clone, Debug)]
pub struct SecFuse {
    /// 1×1 conv bringing level2 to level1's channel count.
    pub channel_match: Conv2dLayer,
    /// 3×3 conv halving the concatenation back to level1's channel count.
    pub fuse: Conv2dLayer,
    pub se: SeBlock,
}

impl SecFuse {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        name: &str,
        level1_channels: usize,
        level2_channels: usize,
        se_ratio: usize,
    ) -> Result<Self> {
        let c1 = level1_channels;
        Ok(Self {
            channel_match: Conv2dLayer::new(store, init, &format!("{name}.match"), level2_channels, c1, 1)?,
            fuse: Conv2dLayer::new(store, init, &format!("{name}.fuse"), 2 * c1, c1, 3)?,
            se: SeBlock::new(store, init, &format!("{name}.se"), c1, effective_se_ratio(c1, se_ratio))?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.out_channels
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &[Var], inputs: SecInputs) -> Result<Var> {
        let [n1, _, h1, w1] = g.value(inputs.level1).dims4()?;
        let [n2, _, h2, w2] = g.value(inputs.level2).dims4()?;
        if n1 != n2 || 2 * h2 != h1 || 2 * w2 != w1 {
            return Err(Error::Config(format!(
                "SEC: level2 {:?} is not half the spatial size of level1 {:?}",
                g.shape(inputs.level2),
                g.shape(inputs.level1)
            )));
        }
        let deep = self.channel_match.forward(g, params, inputs.level2)?;
        let deep = g.upsample_bilinear2x(deep)?;
        let cat = g.concat_channels(inputs.level1, deep)?;
        let fused = self.fuse.forward(g, params, cat)?;
        let fused = g.relu(fused)?;
        self.se.forward(g, params, fused)
    }
}
