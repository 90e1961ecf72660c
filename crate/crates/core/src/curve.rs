//! Iterative curve projection with a per-pixel noise offset.
//!
//! Each iteration first subtracts the noise map and clamps back into `[0, 1]`,
//! then applies `x + I * x * (1 - x)`. The same maps are reused for every
//! iteration. For `x` in `[0, 1]` and `I` in `[-1, 1]` the projection cannot
//! leave `[0, 1]`, since it equals `1 - (1 - x)(1 - I x)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{curve_value, Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::tensor::Tensor;

/// Illumination and noise maps, both `3 x H x W` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveMaps {
    illumination: Tensor,
    noise: Tensor,
}

fn check_unit_interval(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        Some(bad) => Err(Error::Range(format!("{what} value {bad} outside [-1, 1]"))),
        None => Ok(()),
    }
}

impl CurveMaps {
    pub fn new(illumination: Tensor, noise: Tensor) -> Result<Self> {
        illumination.dims3()?;
        illumination.expect_same_shape(&noise, "curve maps")?;
        check_unit_interval(&illumination, "illumination")?;
        check_unit_interval(&noise, "noise")?;
        Ok(Self { illumination, noise })
    }

    /// Maps that leave every image unchanged.
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            illumination: Tensor::zeros(&[3, h, w]),
            noise: Tensor::zeros(&[3, h, w]),
        }
    }

    pub fn illumination(&self) -> &Tensor {
        &self.illumination
    }

    pub fn noise(&self) -> &Tensor {
        &self.noise
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.illumination, self.noise)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub iterations: usize,
    /// Clamp into `[0, 1]` after each noise subtraction.
    pub clamp_each_step: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            iterations: 8,
            clamp_each_step: true,
        }
    }
}

impl ProjectionConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        Self {
            iterations,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::config("projection needs at least one iteration"));
        }
        Ok(())
    }
}

/// `x + illum * x * (1 - x)`, elementwise.
pub fn project_step(x: &ImageTensor, illum: &Tensor) -> Result<ImageTensor> {
    x.tensor().expect_same_shape(illum, "project_step")?;
    check_unit_interval(illum, "illumination")?;
    let out = x.tensor().zip_map(illum, curve_value)?;
    ImageTensor::new(out)
}

/// Runs `cfg.iterations` noise-subtract-then-project steps.
pub fn robust_enhance(x: &ImageTensor, maps: &CurveMaps, cfg: &ProjectionConfig) -> Result<ImageTensor> {
    cfg.validate()?;
    x.tensor().expect_same_shape(&maps.illumination, "robust_enhance")?;
    let illum = maps.illumination.data();
    let noise = maps.noise.data();
    let mut cur = x.tensor().clone();
    for _ in 0..cfg.iterations {
        for ((v, &i), &n) in cur.data_mut().iter_mut().zip(illum).zip(noise) {
            let mut d = *v - n;
            if cfg.clamp_each_step {
                d = d.clamp(0.0, 1.0);
            }
            *v = curve_value(d, i);
        }
    }
    ImageTensor::new(cur)
}

/// Differentiable counterpart of [`robust_enhance`]. `noise` may be `None` for a zero map.
pub fn robust_enhance_on_tape(
    tape: &mut Tape<'_>,
    x: Var,
    illum: Var,
    noise: Option<Var>,
    cfg: &ProjectionConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mut cur = x;
    for _ in 0..cfg.iterations {
        let mut d = match noise {
            Some(n) => tape.sub(cur, n)?,
            None => cur,
        };
        if cfg.clamp_each_step && noise.is_some() {
            d = tape.clamp01(d);
        }
        cur = tape.curve_step(d, illum)?;
    }
    Ok(cur)
}
