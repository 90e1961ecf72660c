//! Parameterized building blocks recorded onto a [`Tape`].

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::{ConvGeometry, Tensor};

/// Negative slope of every leaky rectifier in the enhancer.
pub const LEAKY_SLOPE: f64 = 0.2;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// How parameters of a store enter a tape.
#[derive(Clone, Copy, Debug)]
pub struct Weights<'a> {
    store: &'a ParamStore,
    trainable: bool,
}

impl<'a> Weights<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn bind(&self, tape: &mut Tape<'a>, id: ParamId) -> Var {
        if self.trainable {
            tape.param(self.store, id)
        } else {
            tape.frozen(self.store, id)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init::uniform(rng, &[out_dim, in_dim], bound));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, w: Weights<'a>, x: Var) -> Result<Var> {
        let wv = w.bind(tape, self.weight);
        let bv = w.bind(tape, self.bias);
        tape.linear(x, wv, Some(bv))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geo: ConvGeometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        let geo = ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        };
        let fan_in = in_channels / groups * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init::kaiming_uniform(
                rng,
                &[out_channels, in_channels / groups, kernel, kernel],
                fan_in,
                LEAKY_SLOPE,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self { weight, bias, geo }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self::new(store, rng, name, in_channels, out_channels, 3, 1, 1, 1)
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, w: Weights<'a>, x: Var) -> Result<Var> {
        let wv = w.bind(tape, self.weight);
        let bv = w.bind(tape, self.bias);
        tape.conv2d(x, wv, Some(bv), self.geo)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, w: Weights<'a>, x: Var) -> Result<Var> {
        let g = w.bind(tape, self.gamma);
        let b = w.bind(tape, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}
