//! The six model variants: plain U-Net, SEC pyramid U-Net and the cascades
//! built from them.
//!
//! | variant              | primary        | secondary input            |
//! |----------------------|----------------|----------------------------|
//! | `Baseline`           | U-Net          | -                          |
//! | `BaselineConcat`     | U-Net          | primary probabilities      |
//! | `BaselineAutoConcat` | U-Net          | image ⊕ probabilities      |
//! | `BaselineSEC`        | pyramid U-Net  | -                          |
//! | `BaselineSECConcat`  | pyramid U-Net  | primary probabilities      |
//! | `SECPNet`            | pyramid U-Net  | image ⊕ probabilities      |
//!
//! Secondary networks are always plain U-Nets with the same width and depth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{effective_se_ratio, Conv2dLayer, DoubleConv, Initializer, SeBlock, SecFuse, SecInputs};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariantId {
    Baseline,
    BaselineConcat,
    BaselineAutoConcat,
    BaselineSEC,
    BaselineSECConcat,
    SECPNet,
}

impl VariantId {
    /// Column order of the ablation tables.
    pub const ALL: [VariantId; 6] = [
        VariantId::Baseline,
        VariantId::BaselineConcat,
        VariantId::BaselineAutoConcat,
        VariantId::BaselineSEC,
        VariantId::BaselineSECConcat,
        VariantId::SECPNet,
    ];

    pub fn has_sec(self) -> bool {
        matches!(self, Self::BaselineSEC | Self::BaselineSECConcat | Self::SECPNet)
    }

    pub fn is_cascade(self) -> bool {
        matches!(
            self,
            Self::BaselineConcat | Self::BaselineAutoConcat | Self::BaselineSECConcat | Self::SECPNet
        )
    }

    /// Whether the secondary network also sees the original image (auto-context).
    pub fn secondary_takes_image(self) -> bool {
        matches!(self, Self::BaselineAutoConcat | Self::SECPNet)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::BaselineConcat => "Baseline+concat",
            Self::BaselineAutoConcat => "Baseline+auto-concat",
            Self::BaselineSEC => "Baseline+SEC",
            Self::BaselineSECConcat => "Baseline+SEC-concat",
            Self::SECPNet => "SECP-Net",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    /// Accepts the table label (`Baseline+SEC`) or the identifier (`BaselineSEC`), case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s) || format!("{v:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown variant `{s}`")))
    }
}

/// Architecture hyperparameters shared by both cascade stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Output classes including background.
    pub num_classes: usize,
    /// Channels at the first stage; stage `s` has `base_width · 2^s`.
    pub base_width: usize,
    /// Number of 2× downsamplings.
    pub depth: usize,
    /// SE reduction ratio before clamping, see [`effective_se_ratio`].
    pub se_ratio: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { in_channels: 1, num_classes: 14, base_width: 64, depth: 4, se_ratio: 16 }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.depth == 0 || self.se_ratio == 0 {
            return Err(Error::Config(format!("network config has a zero field: {self:?}")));
        }
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be in 2..=256, got {}", self.num_classes)));
        }
        if self.depth > 12 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        Ok(())
    }

    pub fn width_at(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.width_at(self.depth)
    }

    /// Spatial extents must survive `depth` halvings.
    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "input {height}×{width} is not divisible by 2^{} = {f}",
                self.depth
            )));
        }
        Ok(())
    }
}

/// One U-shaped encoder/decoder, optionally with the SEC pyramid on its skips.
#[derive(Clone, Debug)]
pub struct UNet {
    pub in_channels: usize,
    pub encoder: Vec<DoubleConv>,
    pub bottleneck: DoubleConv,
    /// SE block on the bottleneck output (pyramid variants only).
    pub bottleneck_se: Option<SeBlock>,
    /// One SEC module per encoder stage, indexed shallow to deep; empty for a plain U-Net.
    pub secs: Vec<SecFuse>,
    /// Decoder stages indexed like the encoder.
    pub decoder: Vec<DoubleConv>,
    pub head: Conv2dLayer,
}

impl UNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        prefix: &str,
        in_channels: usize,
        cfg: &NetworkConfig,
        with_sec: bool,
    ) -> Result<Self> {
        let d = cfg.depth;
        let mut encoder = Vec::with_capacity(d);
        let mut prev = in_channels;
        for s in 0..d {
            encoder.push(DoubleConv::new(store, init, &format!("{prefix}.enc{s}"), prev, cfg.width_at(s))?);
            prev = cfg.width_at(s);
        }
        let bottleneck = DoubleConv::new(store, init, &format!("{prefix}.bottleneck"), prev, cfg.bottleneck_channels())?;
        let (bottleneck_se, secs) = if with_sec {
            let c = cfg.bottleneck_channels();
            let se = SeBlock::new(store, init, &format!("{prefix}.bottleneck_se"), c, effective_se_ratio(c, cfg.se_ratio))?;
            let secs = (0..d)
                .map(|s| {
                    SecFuse::new(store, init, &format!("{prefix}.sec{s}"), cfg.width_at(s), cfg.width_at(s + 1), cfg.se_ratio)
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(se), secs)
        } else {
            (None, Vec::new())
        };
        let decoder = (0..d)
            .map(|s| {
                let c = cfg.width_at(s);
                DoubleConv::new(store, init, &format!("{prefix}.dec{s}"), c + cfg.width_at(s + 1), c)
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2dLayer::new(store, init, &format!("{prefix}.head"), cfg.base_width, cfg.num_classes, 1)?;
        Ok(Self { in_channels, encoder, bottleneck, bottleneck_se, secs, decoder, head })
    }

    pub fn has_sec(&self) -> bool {
        !self.secs.is_empty()
    }

    /// Logits `[N, K, H, W]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let c = g.value(x).dims4()?[1];
        if c != self.in_channels {
            return Err(Error::Config(format!("U-Net expects {} input channels, got {c}", self.in_channels)));
        }
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for stage in &self.encoder {
            let f = stage.forward(g, params, h)?;
            skips.push(f);
            h = g.max_pool2x2(f)?;
        }
        h = self.bottleneck.forward(g, params, h)?;
        if let Some(se) = &self.bottleneck_se {
            h = se.forward(g, params, h)?;
        }
        // `level2` carries the pyramid's fused features from deep to shallow.
        let mut level2 = h;
        for s in (0..self.decoder.len()).rev() {
            let skip = match self.secs.get(s) {
                Some(sec) => {
                    level2 = sec.forward(g, params, SecInputs { level1: skips[s], level2 })?;
                    level2
                }
                None => skips[s],
            };
            let up = g.upsample_bilinear2x(h)?;
            let cat = g.concat_channels(skip, up)?;
            h = self.decoder[s].forward(g, params, cat)?;
        }
        self.head.forward(g, params, h)
    }
}

/// Logits produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub primary: Var,
    /// Secondary logits for cascades; equal to `primary` otherwise.
    pub last: Var,
}

/// A complete model: its variant, configuration, weights and layer layout.
#[derive(Clone, Debug)]
pub struct Network<T: Real = f32> {
    pub variant: VariantId,
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    pub primary: UNet,
    pub secondary: Option<UNet>,
}

/// Builds `id` with freshly initialized weights.
///
/// Parameter names are `primary.*` / `secondary.*`; layers shared between
/// variants have identical names, shapes and initial values for a given seed.
pub fn build_variant<T: Real>(id: VariantId, cfg: NetworkConfig, seed: u64) -> Result<Network<T>> {
    cfg.validate()?;
    let init = Initializer::new(seed);
    let mut params = ParamStore::new();
    let primary = UNet::new(&mut params, &init, "primary", cfg.in_channels, &cfg, id.has_sec())?;
    let secondary = if id.is_cascade() {
        let cin = if id.secondary_takes_image() { cfg.in_channels + cfg.num_classes } else { cfg.num_classes };
        Some(UNet::new(&mut params, &init, "secondary", cin, &cfg, false)?)
    } else {
        None
    };
    Ok(Network { variant: id, config: cfg, params, primary, secondary })
}

impl<T: Real> Network<T> {
    pub fn secondary_in_channels(&self) -> Option<usize> {
        self.secondary.as_ref().map(|s| s.in_channels)
    }

    fn check_images(&self, g: &Graph<T>, images: Var) -> Result<()> {
        let [_, c, h, w] = g.value(images).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Config(format!(
                "expected {} image channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.check_extent(h, w)
    }

    /// Primary logits only; the secondary network is not evaluated.
    pub fn forward_primary(&self, g: &mut Graph<T>, params: &[Var], images: Var) -> Result<Var> {
        self.check_images(g, images)?;
        self.primary.forward(g, params, images)
    }

    /// Full forward pass. Cascades feed `softmax(primary)` (optionally
    /// preceded by the image channels) to the secondary U-Net.
    pub fn forward(&self, g: &mut Graph<T>, params: &[Var], images: Var) -> Result<Outputs> {
        let primary = self.forward_primary(g, params, images)?;
        let Some(secondary) = &self.secondary else {
            return Ok(Outputs { primary, last: primary });
        };
        let probs = g.softmax_channels(primary)?;
        let input = if self.variant.secondary_takes_image() { g.concat_channels(images, probs)? } else { probs };
        let last = secondary.forward(g, params, input)?;
        Ok(Outputs { primary, last })
    }

    /// Inference-only forward returning `(primary, final)` logits.
    pub fn infer(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.input(p.tensor.clone())).collect();
        let x = g.input(images.clone());
        let out = self.forward(&mut g, &params, x)?;
        Ok((g.value(out.primary).clone(), g.value(out.last).clone()))
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            variant: self.variant,
            config: self.config,
            params: self.params.cast(),
            primary: self.primary.clone(),
            secondary: self.secondary.clone(),
        }
    }
}

/// Per-pixel argmax over the class axis of `[N, K, H, W]` logits; ties go to the lowest class.
pub fn argmax_mask<T: Real>(logits: &Tensor<T>) -> Result<Mask> {
    let [n, k, h, w] = logits.dims4()?;
    if k > 256 {
        return Err(Error::Config(format!("{k} classes do not fit a u8 mask")));
    }
    let x = logits.data();
    let plane = h * w;
    let mut labels = Vec::with_capacity(n * plane);
    for b in 0..n {
        let base = b * k * plane;
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if x[base + c * plane + p] > x[base + best * plane + p] {
                    best = c;
                }
            }
            labels.push(best as u8);
        }
    }
    Mask::new([n, h, w], labels)
}

/// Final-stage segmentation of `images`.
pub fn predict_mask<T: Real>(net: &Network<T>, images: &Tensor<T>) -> Result<Mask> {
    let (_, logits) = net.infer(images)?;
    argmax_mask(&logits)
}
