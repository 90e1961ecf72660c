//! Training loop: AdamW with linear warmup and cosine decay, synchronized crop
//! and flip augmentation, per-step CSV history and checkpoints.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint;
use crate::data::{CropWindow, PairedSample};
use crate::error::{Error, Result};
use crate::loss::{FrozenBackbone, TAP_LAYERS};
use crate::model::SctModel;
use crate::nn::Weights;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
    pub dataset_root: Option<PathBuf>,
    /// Random horizontal flip, applied to both images of a pair.
    pub flip: bool,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Stop after this many optimizer steps; the schedule then spans exactly these steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 8e-4,
            weight_decay: 0.02,
            warmup_epochs: 5,
            total_epochs: 100,
            batch_size: 32,
            crop: 256,
            seed: 0,
            dataset_root: None,
            flip: true,
            grad_clip: Some(5.0),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive and finite"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative and finite"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total_epochs must be at least 1"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.crop == 0 {
            return Err(Error::config("crop must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("grad_clip must be positive and finite"));
            }
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps must be at least 1"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, dataset_len: usize) -> LrSchedule {
        let spe = self.steps_per_epoch(dataset_len).max(1);
        let total = self.max_steps.unwrap_or(self.total_epochs * spe);
        LrSchedule {
            base: self.learning_rate,
            warmup_steps: (self.warmup_epochs * spe).min(total),
            total_steps: total,
        }
    }
}

/// Linear warmup to `base`, then cosine decay reaching zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Parameters whose gradient is `None` still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let g = grads.get(k).and_then(Option::as_ref).map(Tensor::data);
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p[j] -= lr * (update + self.weight_decay * p[j]);
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_l3: f64,
    pub loss_l4: f64,
    pub loss_l5: f64,
}

pub fn write_history(path: impl AsRef<Path>, rows: &[HistoryRow]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn history(&self) -> PathBuf {
        self.dir.join("history.csv")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.safetensors")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.safetensors")
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    pub best_epoch_loss: f64,
    pub best_epoch: usize,
}

impl TrainReport {
    /// Mean of the first and last `window` step losses.
    pub fn smoothed_endpoints(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.history.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |rows: &[HistoryRow]| rows.iter().map(|r| r.loss_total).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.history[..w]), mean(&self.history[n - w..])))
    }
}

struct SampleResult {
    layers: [f64; 3],
    grads: Vec<Option<Tensor>>,
}

fn sample_gradient(
    model: &SctModel,
    backbone: &FrozenBackbone,
    sample: &PairedSample,
    window: CropWindow,
) -> Result<SampleResult> {
    let (low, normal) = window.apply_pair(sample)?;
    let target = backbone.extract(&normal)?;
    let mut tape = Tape::new();
    let x = tape.constant(low.into_tensor());
    let out = model.enhance_on_tape(&mut tape, Weights::trainable(model.store()), x)?;
    let (total, terms) = backbone.loss_on_tape(&mut tape, out, &target)?;
    let layers = std::array::from_fn(|i| tape.value(terms[i]).data()[0]);
    let grads = tape.backward(total)?;
    Ok(SampleResult {
        layers,
        grads: tape.param_grads(&grads, model.store().len()),
    })
}

/// Trains `model` in place.
pub fn train(
    model: &mut SctModel,
    backbone: &FrozenBackbone,
    data: &[PairedSample],
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if let Some(small) = data.iter().find(|s| s.min_side() < cfg.crop) {
        return Err(Error::Config(format!(
            "crop {} exceeds the smallest side of sample {} ({})",
            cfg.crop,
            small.name,
            small.min_side()
        )));
    }
    if model.is_passthrough() {
        return Err(Error::config("a pass-through model has nothing to train"));
    }
    if let Some(o) = outputs {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }

    let schedule = cfg.schedule(data.len());
    let mut opt = AdamW::new(model.store(), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(schedule.total_steps);
    let mut best = (f64::INFINITY, 0);
    let mut step = 0;
    let mut epoch = 0;

    while step < schedule.total_steps {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            if step >= schedule.total_steps {
                break;
            }
            let windows = batch
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    CropWindow::draw(&mut rng, s.low.height(), s.low.width(), cfg.crop, cfg.flip)
                })
                .collect::<Result<Vec<_>>>()?;
            let shared: &SctModel = model;
            let results = batch
                .par_iter()
                .zip(windows.par_iter())
                .map(|(&i, &w)| sample_gradient(shared, backbone, &data[i], w))
                .collect::<Result<Vec<_>>>()?;

            let n = results.len() as f64;
            let mut layers = [0.0; 3];
            let mut grads: Vec<Option<Tensor>> = vec![None; model.store().len()];
            for r in results {
                for (acc, l) in layers.iter_mut().zip(r.layers) {
                    *acc += l / n;
                }
                for (acc, g) in grads.iter_mut().zip(r.grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.axpy(1.0, &g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v /= n);
            }
            let total: f64 = layers.iter().sum();
            if !total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("loss terms {TAP_LAYERS:?} = {layers:?}, lr {:.3e}", schedule.lr(step)),
                });
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let lr = schedule.lr(step);
            opt.step(model.store_mut(), &grads, lr);
            history.push(HistoryRow {
                step,
                epoch,
                lr,
                loss_total: total,
                loss_l3: layers[0],
                loss_l4: layers[1],
                loss_l5: layers[2],
            });
            if step % 25 == 0 {
                log::info!("step {step} epoch {epoch} lr {lr:.3e} loss {total:.6}");
            }
            epoch_sum += total;
            epoch_steps += 1;
            step += 1;
        }
        let epoch_loss = epoch_sum / epoch_steps.max(1) as f64;
        if let Some(o) = outputs {
            checkpoint::save_model(model, o.last())?;
            if epoch_loss < best.0 {
                checkpoint::save_model(model, o.best())?;
            }
            write_history(o.history(), &history)?;
        }
        if epoch_loss < best.0 {
            best = (epoch_loss, epoch);
        }
        epoch += 1;
    }

    Ok(TrainReport {
        history,
        best_epoch_loss: best.0,
        best_epoch: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_pairs;
    use crate::loss::BackboneConfig;
    use crate::model::SctConfig;

    #[test]
    fn default_schedule_peaks_at_end_of_warmup() {
        let cfg = TrainConfig::default();
        let s = cfg.schedule(485);
        let spe = 485usize.div_ceil(32);
        assert_eq!(s.warmup_steps, 5 * spe);
        assert_eq!(s.total_steps, 100 * spe);
        assert_eq!(s.lr(0), 8e-4 / s.warmup_steps as f64);
        assert_eq!(s.lr(s.warmup_steps - 1), 8e-4);
        assert_eq!(s.lr(s.warmup_steps), 8e-4);
        for t in 1..s.warmup_steps {
            assert!(s.lr(t) > s.lr(t - 1));
        }
        for t in s.warmup_steps + 1..s.total_steps {
            assert!(s.lr(t) <= s.lr(t - 1));
        }
        assert!(s.lr(s.total_steps) < 1e-18);
    }

    #[test]
    fn max_steps_bounds_the_schedule() {
        let cfg = TrainConfig {
            batch_size: 8,
            max_steps: Some(300),
            ..TrainConfig::default()
        };
        let s = cfg.schedule(8);
        assert_eq!((s.warmup_steps, s.total_steps), (5, 300));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            warmup_epochs: 10,
            total_epochs: 5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let json = r#"{"learning_rate": 0.001, "batch_szie": 4}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(&store, 0.0);
        let g = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        opt.step(&mut store, &[Some(g)], 0.1);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::full(&[1], 2.0));
        let mut opt = AdamW::new(&store, 0.5);
        opt.step(&mut store, &[None], 0.1);
        assert!((store.get(id).data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Some(Tensor::full(&[4], 3.0)), None, Some(Tensor::full(&[1], 4.0))];
        let before = clip_global_norm(&mut g, 5.0);
        assert!((before - 52f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-12);
    }

    #[test]
    fn short_run_writes_artifacts_and_is_reproducible() {
        let data = synth_pairs(3, 32, 2).unwrap();
        let backbone = FrozenBackbone::new(BackboneConfig::default(), 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            crop: 24,
            max_steps: Some(4),
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let outputs = TrainOutputs {
            dir: dir.path().join("run"),
        };
        let mut a = SctModel::build(SctConfig::tiny(), 1).unwrap();
        let ra = train(&mut a, &backbone, &data, &cfg, Some(&outputs)).unwrap();
        assert_eq!(ra.history.len(), 4);
        assert_eq!(ra.history[2].epoch, 1);
        let csv = std::fs::read_to_string(outputs.history()).unwrap();
        assert!(csv.starts_with("step,epoch,lr,loss_total,loss_l3,loss_l4,loss_l5\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(outputs.best().exists());
        let restored = checkpoint::load_model(outputs.last()).unwrap();
        assert_eq!(restored.store(), a.store());

        let mut b = SctModel::build(SctConfig::tiny(), 1).unwrap();
        let rb = train(&mut b, &backbone, &data, &cfg, None).unwrap();
        assert_eq!(ra.history, rb.history);
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let data = synth_pairs(1, 32, 2).unwrap();
        let backbone = FrozenBackbone::new(BackboneConfig::default(), 0).unwrap();
        let mut m = SctModel::build(SctConfig::tiny(), 1).unwrap();
        let err = train(&mut m, &backbone, &data, &TrainConfig::default(), None).unwrap_err();
        assert!(err.to_string().contains("crop 256"), "{err}");
    }
}
