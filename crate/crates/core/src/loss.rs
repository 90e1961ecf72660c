//! Feature-space loss measured through a frozen five-stage convolutional backbone.
//!
//! The stand-in backbone is a plain ReLU convnet with total stride 8:
//!
//! | stage | kernel | stride | padding | output side |
//! |-------|--------|--------|---------|-------------|
//! | 1     | 3      | 2      | 1       | n/2         |
//! | 2     | 3      | 2      | 1       | n/4         |
//! | 3     | 3      | 1      | 1       | n/4         |
//! | 4     | 3      | 2      | 1       | n/8         |
//! | 5     | 2      | 1      | 0       | n/8 - 1     |
//!
//! Features are tapped after the activation of stages 3, 4 and 5. The loss of a
//! layer is the mean squared feature difference; the total sums the layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::{Conv2d, Weights};
use crate::params::ParamStore;
use crate::tensor::{ConvGeometry, Tensor};

/// One-based indices of the stages whose activations enter the loss.
pub const TAP_LAYERS: [usize; 3] = [3, 4, 5];

const KERNELS: [(usize, usize, usize); 5] = [(3, 2, 1), (3, 2, 1), (3, 1, 1), (3, 2, 1), (2, 1, 0)];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of the five stages.
    pub widths: [usize; 5],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 48, 64, 64],
        }
    }
}

impl BackboneConfig {
    fn geometries(&self) -> Vec<ConvGeometry> {
        let mut cin = 3;
        KERNELS
            .iter()
            .zip(self.widths)
            .map(|(&(kernel, stride, padding), out)| {
                let g = ConvGeometry {
                    in_channels: cin,
                    out_channels: out,
                    kernel,
                    stride,
                    padding,
                    groups: 1,
                };
                cin = out;
                g
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::config("backbone widths must be positive"));
        }
        Ok(())
    }
}

/// A feature extractor whose parameters never receive gradients.
#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    store: ParamStore,
    stages: Vec<Conv2d>,
}

pub(crate) fn stage_name(i: usize) -> String {
    format!("backbone.conv{}", i + 1)
}

impl FrozenBackbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stages = config
            .geometries()
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                Conv2d::new(
                    &mut store,
                    &mut rng,
                    &stage_name(i),
                    g.in_channels,
                    g.out_channels,
                    g.kernel,
                    g.stride,
                    g.padding,
                    1,
                )
            })
            .collect();
        Ok(Self { config, store, stages })
    }

    /// Replaces all weights; names and shapes must match `config`.
    pub fn from_store(config: BackboneConfig, store: ParamStore) -> Result<Self> {
        let mut fresh = Self::new(config, 0)?;
        if store.len() != fresh.store.len() {
            return Err(Error::Checkpoint(format!(
                "backbone expects {} tensors, got {}",
                fresh.store.len(),
                store.len()
            )));
        }
        for (_, name, t) in store.iter() {
            fresh
                .store
                .set(name, t.clone())
                .map_err(|e| Error::Checkpoint(format!("backbone tensor {name}: {e}")))?;
        }
        Ok(fresh)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(c, h, w)` of every tap for an `h x w` input.
    pub fn tap_shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        let (mut ch, mut cw) = (h, w);
        let mut taps = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let collapsed = || {
                Error::shape(format!(
                    "input {h}x{w} is too small for the loss backbone: stage {} output collapses below 1x1",
                    i + 1
                ))
            };
            let (nh, nw) = s.geo.output_size(ch, cw).map_err(|_| collapsed())?;
            if nh == 0 || nw == 0 {
                return Err(collapsed());
            }
            (ch, cw) = (nh, nw);
            if TAP_LAYERS.contains(&(i + 1)) {
                taps.push((s.geo.out_channels, ch, cw));
            }
        }
        Ok(taps)
    }

    /// Records the backbone on `tape`; returns one variable per tap layer.
    pub fn features_on_tape<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Vec<Var>> {
        let (c, h, w) = tape.value(x).dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("loss backbone expects 3 channels, got {c}")));
        }
        self.tap_shapes(h, w)?;
        let weights = Weights::frozen(&self.store);
        let mut cur = x;
        let mut taps = Vec::with_capacity(TAP_LAYERS.len());
        for (i, s) in self.stages.iter().enumerate() {
            cur = s.forward(tape, weights, cur)?;
            cur = tape.relu(cur);
            if TAP_LAYERS.contains(&(i + 1)) {
                taps.push(cur);
            }
        }
        Ok(taps)
    }

    pub fn extract(&self, x: &ImageTensor) -> Result<FeatureStack> {
        let mut tape = Tape::new();
        let xv = tape.constant_ref(x.tensor());
        let taps = self.features_on_tape(&mut tape, xv)?;
        let layers = TAP_LAYERS
            .iter()
            .zip(taps)
            .map(|(&m, v)| (m, tape.value(v).clone()))
            .collect();
        FeatureStack::new(layers)
    }

    /// Records the loss of `enhanced` against precomputed target features.
    /// Returns the total and the per-layer terms.
    pub fn loss_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        enhanced: Var,
        target: &'a FeatureStack,
    ) -> Result<(Var, Vec<Var>)> {
        let taps = self.features_on_tape(tape, enhanced)?;
        let mut terms = Vec::with_capacity(taps.len());
        for (f, (_, t)) in taps.into_iter().zip(target.layers()) {
            tape.value(f).expect_same_shape(t, "feature tap")?;
            let tv = tape.constant_ref(t);
            let d = tape.sub(f, tv)?;
            let sq = tape.mul(d, d)?;
            terms.push(tape.mean(sq));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        Ok((total, terms))
    }

    pub fn perceptual_loss(&self, enhanced: &ImageTensor, target: &ImageTensor) -> Result<LossReport> {
        enhanced
            .tensor()
            .expect_same_shape(target.tensor(), "perceptual loss")?;
        self.extract(enhanced)?.distance(&self.extract(target)?)
    }
}

/// Tap activations in [`TAP_LAYERS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    layers: Vec<(usize, Tensor)>,
}

impl FeatureStack {
    pub fn new(layers: Vec<(usize, Tensor)>) -> Result<Self> {
        let order: Vec<usize> = layers.iter().map(|(m, _)| *m).collect();
        if order != TAP_LAYERS {
            return Err(Error::shape(format!(
                "feature stack layers {order:?} do not match taps {TAP_LAYERS:?}"
            )));
        }
        for (m, t) in &layers {
            t.dims3()
                .map_err(|_| Error::shape(format!("layer {m} feature must be 3-d, got {:?}", t.shape())))?;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[(usize, Tensor)] {
        &self.layers
    }

    /// Per-layer mean squared difference.
    pub fn distance(&self, other: &FeatureStack) -> Result<LossReport> {
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for ((m, a), (_, b)) in self.layers.iter().zip(&other.layers) {
            a.expect_same_shape(b, "feature distance")?;
            let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            per_layer.push((*m, sq / a.len() as f64));
        }
        Ok(LossReport::from_layers(per_layer))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub per_layer: Vec<(usize, f64)>,
}

impl LossReport {
    pub fn from_layers(per_layer: Vec<(usize, f64)>) -> Self {
        Self {
            total: per_layer.iter().map(|(_, v)| v).sum(),
            per_layer,
        }
    }

    pub fn layer(&self, m: usize) -> Option<f64> {
        self.per_layer.iter().find(|(k, _)| *k == m).map(|(_, v)| *v)
    }
}
