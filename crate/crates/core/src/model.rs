//! The U-shaped enhancer: convolutional encoders, a spatial-then-channel
//! Transformer bottleneck, mirrored decoders with skip connections, and a
//! `tanh` head emitting the illumination and noise maps.
//!
//! Parameter names follow `encoder.<stage>.<role>`, `bottleneck.<spatial|channel|cnn.<j>>...`,
//! `decoder.<stage>.<role>` and `head`, where decoder stage `i` mirrors encoder stage `i`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::curve::{robust_enhance_on_tape, CurveMaps, ProjectionConfig};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::{Conv2d, Weights, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::window::{square_side, FeedForwardKind, TokenLayout, TransformerLayer};

/// Which optional modules the enhancer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleFlags {
    pub spatial_attention: bool,
    pub channel_attention: bool,
    /// Residual convolutional feed-forward; a plain MLP otherwise.
    pub resffn: bool,
    /// Estimate and subtract a noise map; a zero map otherwise.
    pub denoise: bool,
    /// Replace the Transformer layers with two convolution blocks.
    pub cnn_bottleneck: bool,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        Self {
            spatial_attention: true,
            channel_attention: true,
            resffn: true,
            denoise: true,
            cnn_bottleneck: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SctConfig {
    /// Number of encoder (and decoder) stages.
    pub stages: usize,
    /// Width of the first encoder; each later stage doubles it.
    pub stem_channels: usize,
    pub window_size: usize,
    pub iterations: usize,
    /// Side of the square resolution at which curve maps are estimated.
    pub estimation_size: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub flags: ModuleFlags,
    /// `false` turns the model into a pass-through with no parameters.
    pub enhance: bool,
}

impl Default for SctConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            stem_channels: 32,
            window_size: 4,
            iterations: 8,
            estimation_size: 128,
            num_heads: 4,
            ffn_expansion: 2,
            flags: ModuleFlags::default(),
            enhance: true,
        }
    }
}

impl SctConfig {
    /// Small preset for CI and gradient checks.
    pub fn tiny() -> Self {
        Self {
            stages: 2,
            stem_channels: 8,
            window_size: 2,
            iterations: 4,
            estimation_size: 32,
            ..Self::default()
        }
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.stages).map(|i| self.stem_channels << i).collect()
    }

    /// `(channels, height, width)` of the bottleneck feature.
    pub fn bottleneck_shape(&self) -> (usize, usize, usize) {
        let side = self.estimation_size >> self.stages;
        (self.stem_channels << (self.stages - 1), side, side)
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig::with_iterations(self.iterations)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enhance {
            return Ok(());
        }
        let positive = [
            ("stages", self.stages),
            ("stem_channels", self.stem_channels),
            ("window_size", self.window_size),
            ("iterations", self.iterations),
            ("estimation_size", self.estimation_size),
            ("num_heads", self.num_heads),
            ("ffn_expansion", self.ffn_expansion),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.stages > 16 {
            return Err(Error::config("stages must be at most 16"));
        }
        let scale = 1usize << self.stages;
        if !self.estimation_size.is_multiple_of(scale) {
            return Err(Error::config(format!(
                "estimation_size {} must be divisible by 2^stages = {scale}",
                self.estimation_size
            )));
        }
        if !self.estimation_size.is_multiple_of(self.window_size * scale) {
            return Err(Error::config(format!(
                "estimation_size {} must be divisible by window_size * 2^stages = {}",
                self.estimation_size,
                self.window_size * scale
            )));
        }
        let f = &self.flags;
        if f.cnn_bottleneck && (f.spatial_attention || f.channel_attention) {
            return Err(Error::config(
                "cnn_bottleneck cannot be combined with spatial or channel attention",
            ));
        }
        let (c, h, w) = self.bottleneck_shape();
        if f.spatial_attention && c % self.num_heads != 0 {
            return Err(Error::config(format!(
                "bottleneck channels {c} must be divisible by num_heads {}",
                self.num_heads
            )));
        }
        if f.channel_attention {
            let group = self.window_size * self.window_size;
            if c % group != 0 {
                return Err(Error::config(format!(
                    "bottleneck channels {c} must be divisible by window_size^2 = {group}"
                )));
            }
            if (h * w) % self.num_heads != 0 {
                return Err(Error::config(format!(
                    "bottleneck plane {h}x{w} must be divisible by num_heads {}",
                    self.num_heads
                )));
            }
            if f.resffn && square_side(c).is_err() {
                return Err(Error::config(format!(
                    "channel attention with resffn needs a square channel count, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Rows of the module ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    NoChannelAttention,
    NoSpatialAttention,
    CnnUnet,
    MlpFfn,
    NoDenoise,
    /// Enhancement disabled.
    None,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::NoChannelAttention,
        Ablation::NoSpatialAttention,
        Ablation::CnnUnet,
        Ablation::MlpFfn,
        Ablation::NoDenoise,
        Ablation::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoChannelAttention => "no_CA",
            Ablation::NoSpatialAttention => "no_SA",
            Ablation::CnnUnet => "cnn_unet",
            Ablation::MlpFfn => "mlp_ffn",
            Ablation::NoDenoise => "no_denoise",
            Ablation::None => "none",
        }
    }

    /// Applies this row's module flags on top of `base`.
    pub fn apply(self, base: &SctConfig) -> SctConfig {
        let mut cfg = base.clone();
        cfg.enhance = true;
        cfg.flags = ModuleFlags::default();
        let f = &mut cfg.flags;
        match self {
            Ablation::Full => {}
            Ablation::NoChannelAttention => f.channel_attention = false,
            Ablation::NoSpatialAttention => f.spatial_attention = false,
            Ablation::CnnUnet => {
                f.spatial_attention = false;
                f.channel_attention = false;
                f.resffn = false;
                f.cnn_bottleneck = true;
            }
            Ablation::MlpFfn => f.resffn = false,
            Ablation::NoDenoise => f.denoise = false,
            Ablation::None => cfg.enhance = false,
        }
        cfg
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
                Error::invalid(format!(
                    "unknown ablation variant `{s}`; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Configuration for a named ablation row on top of the default architecture.
pub fn ablation_variant(name: &str) -> Result<SctConfig> {
    Ok(name.parse::<Ablation>()?.apply(&SctConfig::default()))
}

#[derive(Clone, Debug)]
struct EncoderStage {
    conv1: Conv2d,
    conv2: Conv2d,
    down: Conv2d,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Conv2d,
    conv1: Conv2d,
    conv2: Conv2d,
}

#[derive(Clone, Debug, Default)]
struct Bottleneck {
    spatial: Option<TransformerLayer>,
    channel: Option<TransformerLayer>,
    cnn: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
struct Network {
    encoders: Vec<EncoderStage>,
    bottleneck: Bottleneck,
    /// Ordered deepest first.
    decoders: Vec<DecoderStage>,
    head: Conv2d,
}

/// A built enhancer: configuration, parameters and layer wiring.
#[derive(Clone, Debug)]
pub struct SctModel {
    config: SctConfig,
    store: ParamStore,
    net: Option<Network>,
}

/// Scale applied to the head initialization so a fresh model starts close to identity.
const HEAD_INIT_SCALE: f64 = 0.1;

impl SctModel {
    pub fn build(config: SctConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        if !config.enhance {
            return Ok(Self {
                config,
                store,
                net: None,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = config.encoder_widths();
        let mut encoders = Vec::with_capacity(config.stages);
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            let p = format!("encoder.{i}");
            encoders.push(EncoderStage {
                conv1: Conv2d::same3(&mut store, &mut rng, &format!("{p}.conv1"), cin, w),
                conv2: Conv2d::same3(&mut store, &mut rng, &format!("{p}.conv2"), w, w),
                down: Conv2d::new(&mut store, &mut rng, &format!("{p}.down"), w, w, 2, 2, 0, 1),
            });
            cin = w;
        }

        let (c, h, w) = config.bottleneck_shape();
        let flags = config.flags;
        let ffn = if flags.resffn {
            FeedForwardKind::Residual
        } else {
            FeedForwardKind::Mlp
        };
        let m = config.window_size;
        let mut bottleneck = Bottleneck::default();
        if flags.spatial_attention {
            bottleneck.spatial = Some(TransformerLayer::new(
                &mut store,
                &mut rng,
                "bottleneck.spatial",
                TokenLayout::Grid {
                    height: h,
                    width: w,
                    window: m,
                },
                c,
                config.num_heads,
                ffn,
                config.ffn_expansion,
            )?);
        }
        if flags.channel_attention {
            bottleneck.channel = Some(TransformerLayer::new(
                &mut store,
                &mut rng,
                "bottleneck.channel",
                TokenLayout::Groups {
                    tokens: c,
                    group: m * m,
                },
                h * w,
                config.num_heads,
                ffn,
                config.ffn_expansion,
            )?);
        }
        if flags.cnn_bottleneck {
            for j in 0..2 {
                bottleneck.cnn.push(Conv2d::same3(
                    &mut store,
                    &mut rng,
                    &format!("bottleneck.cnn.{j}"),
                    c,
                    c,
                ));
            }
        }

        let mut decoders = Vec::with_capacity(config.stages);
        for i in (0..config.stages).rev() {
            let below = if i + 1 == config.stages { c } else { widths[i + 1] };
            let wi = widths[i];
            let p = format!("decoder.{i}");
            decoders.push(DecoderStage {
                up: Conv2d::same3(&mut store, &mut rng, &format!("{p}.up"), below, wi),
                conv1: Conv2d::same3(&mut store, &mut rng, &format!("{p}.conv1"), 2 * wi, wi),
                conv2: Conv2d::same3(&mut store, &mut rng, &format!("{p}.conv2"), wi, wi),
            });
        }
        let out_maps = if flags.denoise { 6 } else { 3 };
        let head = Conv2d::same3(&mut store, &mut rng, "head", widths[0], out_maps);
        store
            .get_mut(head.weight)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= HEAD_INIT_SCALE);

        Ok(Self {
            config,
            store,
            net: Some(Network {
                encoders,
                bottleneck,
                decoders,
                head,
            }),
        })
    }

    pub fn config(&self) -> &SctConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn is_passthrough(&self) -> bool {
        self.net.is_none()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match shape {
            &[c, h, w] => (c, h, w),
            other => return Err(Error::shape(format!("expected a 3-d image, got {other:?}"))),
        };
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let min = 1usize << self.config.stages;
        if h < min || w < min {
            return Err(Error::shape(format!(
                "image {h}x{w} is smaller than the minimum side {min}"
            )));
        }
        Ok(())
    }

    /// Records curve estimation for a `3 x H x W` input.
    /// Returns `(illumination, noise)` at input resolution; `noise` is `None` without denoising.
    pub fn curves_on_tape<'a>(&'a self, tape: &mut Tape<'a>, w: Weights<'a>, x: Var) -> Result<(Var, Option<Var>)> {
        self.check_input(tape.shape(x))?;
        let (_, h_in, w_in) = tape.value(x).dims3()?;
        let Some(net) = &self.net else {
            let zeros = tape.constant(Tensor::zeros(&[3, h_in, w_in]));
            return Ok((zeros, None));
        };
        let r = self.config.estimation_size;
        let mut cur = tape.resize_bilinear(x, r, r)?;

        let mut skips = Vec::with_capacity(net.encoders.len());
        for enc in &net.encoders {
            cur = enc.conv1.forward(tape, w, cur)?;
            cur = tape.leaky_relu(cur, LEAKY_SLOPE);
            cur = enc.conv2.forward(tape, w, cur)?;
            cur = tape.leaky_relu(cur, LEAKY_SLOPE);
            skips.push(cur);
            cur = enc.down.forward(tape, w, cur)?;
        }

        cur = self.bottleneck_on_tape(net, tape, w, cur)?;

        for (dec, skip) in net.decoders.iter().zip(skips.iter().rev()) {
            let (_, sh, sw) = tape.value(*skip).dims3()?;
            cur = tape.resize_bilinear(cur, sh, sw)?;
            cur = dec.up.forward(tape, w, cur)?;
            cur = tape.concat(&[cur, *skip])?;
            cur = dec.conv1.forward(tape, w, cur)?;
            cur = tape.leaky_relu(cur, LEAKY_SLOPE);
            cur = dec.conv2.forward(tape, w, cur)?;
            cur = tape.leaky_relu(cur, LEAKY_SLOPE);
        }
        let maps = net.head.forward(tape, w, cur)?;
        let maps = tape.tanh(maps);
        let maps = tape.resize_bilinear(maps, h_in, w_in)?;
        let illum = tape.narrow0(maps, 0, 3)?;
        let noise = if self.config.flags.denoise {
            Some(tape.narrow0(maps, 3, 6)?)
        } else {
            None
        };
        Ok((illum, noise))
    }

    fn bottleneck_on_tape<'a>(&self, net: &'a Network, tape: &mut Tape<'a>, w: Weights<'a>, x: Var) -> Result<Var> {
        let (c, h, wd) = tape.value(x).dims3()?;
        let plane = h * wd;
        let mut cur = x;
        if let Some(layer) = &net.bottleneck.spatial {
            let to_tokens = (0..c * plane).map(|p| (p % c) * plane + p / c).collect();
            let tokens = tape.gather(cur, to_tokens, &[plane, c])?;
            let tokens = layer.forward(tape, w, tokens)?;
            let to_map = (0..c * plane).map(|p| (p % plane) * c + p / plane).collect();
            cur = tape.gather(tokens, to_map, &[c, h, wd])?;
        }
        if let Some(layer) = &net.bottleneck.channel {
            let tokens = tape.reshape(cur, &[c, plane])?;
            let tokens = layer.forward(tape, w, tokens)?;
            cur = tape.reshape(tokens, &[c, h, wd])?;
        }
        for conv in &net.bottleneck.cnn {
            cur = conv.forward(tape, w, cur)?;
            cur = tape.leaky_relu(cur, LEAKY_SLOPE);
        }
        Ok(cur)
    }

    /// Records the full enhancement of a `3 x H x W` input.
    pub fn enhance_on_tape<'a>(&'a self, tape: &mut Tape<'a>, w: Weights<'a>, x: Var) -> Result<Var> {
        if self.net.is_none() {
            self.check_input(tape.shape(x))?;
            return Ok(x);
        }
        let (illum, noise) = self.curves_on_tape(tape, w, x)?;
        robust_enhance_on_tape(tape, x, illum, noise, &self.config.projection())
    }

    pub fn estimate_curves(&self, x: &ImageTensor) -> Result<CurveMaps> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.tensor().clone());
        let (illum, noise) = self.curves_on_tape(&mut tape, Weights::frozen(&self.store), xv)?;
        // bilinear weights can overshoot the tanh range by an ulp
        let unit = |t: &Tensor| t.map(|v| v.clamp(-1.0, 1.0));
        let illum = unit(tape.value(illum));
        let noise = match noise {
            Some(n) => unit(tape.value(n)),
            None => Tensor::zeros(illum.shape()),
        };
        CurveMaps::new(illum, noise)
    }

    pub fn enhance(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.tensor().clone());
        let out = self.enhance_on_tape(&mut tape, Weights::frozen(&self.store), xv)?;
        ImageTensor::new(tape.value(out).clone())
    }
}
