//! Central finite-difference checks of the end-to-end loss gradient.
//!
//! Every parameter tensor is probed along a random unit direction and at a few
//! individual entries (the largest-gradient entry plus random ones). The
//! relative error of a probe is `|a - n| / max(|a|, |n|, floor)`.
//!
//! The step is small on purpose: the loss has kinks (rectifiers and clamps) and
//! low-light inputs contain many pixels at exactly zero, so wide steps cross
//! them. The floor sits above the round-off level of the central difference
//! at that step, where structurally zero gradients (key biases, for one) land.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::Tape;
use crate::error::Result;
use crate::imaging::ImageTensor;
use crate::loss::{FeatureStack, FrozenBackbone};
use crate::model::SctModel;
use crate::nn::Weights;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor so vanishing gradients are compared in absolute terms.
    pub floor: f64,
    pub random_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-6,
            random_entries: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub tensor: String,
    pub what: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: usize,
    pub scalars: usize,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.rel_error)
    }
}

fn loss_value(model: &SctModel, backbone: &FrozenBackbone, low: &ImageTensor, target: &FeatureStack) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant_ref(low.tensor());
    let out = model.enhance_on_tape(&mut tape, Weights::frozen(model.store()), x)?;
    let (total, _) = backbone.loss_on_tape(&mut tape, out, target)?;
    Ok(tape.value(total).data()[0])
}

/// Checks d(loss)/d(theta) for every parameter tensor of `model`.
pub fn check_model(
    model: &SctModel,
    backbone: &FrozenBackbone,
    low: &ImageTensor,
    normal: &ImageTensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let target = backbone.extract(normal)?;
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.constant_ref(low.tensor());
        let out = model.enhance_on_tape(&mut tape, Weights::trainable(model.store()), x)?;
        let (total, _) = backbone.loss_on_tape(&mut tape, out, &target)?;
        let grads = tape.backward(total)?;
        tape.param_grads(&grads, model.store().len())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe_model = model.clone();
    let mut probes = Vec::new();
    let ids: Vec<_> = model.store().ids().collect();
    for (k, id) in ids.iter().copied().enumerate() {
        let name = model.store().name(id).to_owned();
        let original = model.store().get(id).clone();
        let grad = analytic[k].clone().unwrap_or_else(|| Tensor::zeros(original.shape()));
        let n = original.len();

        let mut directions: Vec<(String, Tensor)> = Vec::new();
        let mut dir = Tensor::from_fn(original.shape(), |_| rng.sample(StandardNormal));
        let norm = dir.sq_norm().sqrt();
        dir.data_mut().iter_mut().for_each(|v| *v /= norm);
        directions.push(("random direction".into(), dir));
        let argmax = (0..n)
            .max_by(|&a, &b| grad.data()[a].abs().total_cmp(&grad.data()[b].abs()))
            .unwrap_or(0);
        let mut entries = vec![argmax];
        entries.extend((0..opts.random_entries.min(n)).map(|_| rng.random_range(0..n)));
        for e in entries {
            let mut unit = Tensor::zeros(original.shape());
            unit.data_mut()[e] = 1.0;
            directions.push((format!("entry {e}"), unit));
        }

        for (what, d) in directions {
            let a: f64 = grad.data().iter().zip(d.data()).map(|(g, v)| g * v).sum();
            let mut eval = |sign: f64| -> Result<f64> {
                let p = probe_model.store_mut().get_mut(id);
                p.data_mut().copy_from_slice(original.data());
                p.axpy(sign * opts.step, &d);
                loss_value(&probe_model, backbone, low, &target)
            };
            let plus = eval(1.0)?;
            let minus = eval(-1.0)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            probes.push(Probe {
                tensor: name.clone(),
                what,
                analytic: a,
                numeric,
                rel_error,
            });
        }
        probe_model
            .store_mut()
            .get_mut(id)
            .data_mut()
            .copy_from_slice(original.data());
    }
    Ok(GradCheckReport {
        tensors: ids.len(),
        scalars: model.num_parameters(),
        probes,
    })
}
