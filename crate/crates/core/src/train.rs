//! Optimizers and the three training procedures: localizer pretraining,
//! decoder training on a frozen encoder, and the from-scratch baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, Error, Result};
use crate::model::{ModelConfig, ModelKind, UNetModel};
use crate::tensor::{Graph, Mode, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Localize,
    Segment,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
}

impl TrainConfig {
    pub fn localize() -> Self {
        TrainConfig {
            phase: Phase::Localize,
            optimizer: OptimizerKind::RmsProp,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            patience: 20,
        }
    }

    pub fn segment() -> Self {
        TrainConfig {
            phase: Phase::Segment,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 100,
            seed: 0,
            patience: 20,
        }
    }

    pub fn baseline() -> Self {
        TrainConfig {
            phase: Phase::Baseline,
            ..Self::segment()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(param_err!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return Err(param_err!("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(param_err!("epochs must be at least 1"));
        }
        Ok(())
    }
}

pub const RMSPROP_RHO: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const OPTIMIZER_EPSILON: f64 = 1e-8;

/// Per-parameter optimizer state; frozen parameters get `None`.
#[derive(Debug, Clone)]
pub enum Optimizer {
    RmsProp {
        acc: Vec<Option<Vec<f64>>>,
    },
    Adam {
        step: u64,
        m: Vec<Option<Vec<f64>>>,
        v: Vec<Option<Vec<f64>>>,
    },
}

fn slots(params: &[Parameter]) -> Vec<Option<Vec<f64>>> {
    params
        .iter()
        .map(|p| (!p.frozen).then(|| vec![0.0; p.value.numel()]))
        .collect()
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Parameter]) -> Self {
        match kind {
            OptimizerKind::RmsProp => Optimizer::RmsProp { acc: slots(params) },
            OptimizerKind::Adam => Optimizer::Adam {
                step: 0,
                m: slots(params),
                v: slots(params),
            },
        }
    }

    /// State buffers for parameter `i`, `None` if it is frozen.
    pub fn state(&self, i: usize) -> Option<&[f64]> {
        match self {
            Optimizer::RmsProp { acc } => acc.get(i)?.as_deref(),
            Optimizer::Adam { m, .. } => m.get(i)?.as_deref(),
        }
    }

    fn check(&self, params: &[Parameter]) -> Result<()> {
        let state = match self {
            Optimizer::RmsProp { acc } => acc,
            Optimizer::Adam { m, .. } => m,
        };
        if state.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, model has {}",
                state.len(),
                params.len()
            )));
        }
        for (s, p) in state.iter().zip(params) {
            let ok = match s {
                None => p.frozen,
                Some(s) => !p.frozen && s.len() == p.value.numel() && p.grad.numel() == s.len(),
            };
            if !ok {
                return Err(Error::Contract(format!(
                    "optimizer state does not match parameter {}",
                    p.name
                )));
            }
        }
        Ok(())
    }

    /// One update of every unfrozen parameter from its accumulated gradient.
    pub fn step(&mut self, params: &mut [Parameter], lr: f64) -> Result<()> {
        self.check(params)?;
        match self {
            Optimizer::RmsProp { acc } => {
                for (p, acc) in params.iter_mut().zip(acc) {
                    let Some(acc) = acc else { continue };
                    let grad = p.grad.data();
                    for ((w, a), &g) in p.value.data_mut().iter_mut().zip(acc.iter_mut()).zip(grad)
                    {
                        *a = RMSPROP_RHO * *a + (1.0 - RMSPROP_RHO) * g * g;
                        *w -= lr * g / (*a + OPTIMIZER_EPSILON).sqrt();
                    }
                }
            }
            Optimizer::Adam { step, m, v } => {
                *step += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*step as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(*step as i32);
                for ((p, m), v) in params.iter_mut().zip(m).zip(v) {
                    let (Some(m), Some(v)) = (m, v) else { continue };
                    let grad = p.grad.data();
                    for (((w, m), v), &g) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(grad)
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + OPTIMIZER_EPSILON);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Preprocessed images with centroid targets, all `size × size`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationData {
    pub size: usize,
    pub images: Vec<Vec<f64>>,
    pub centroids: Vec<[f64; 2]>,
}

/// Preprocessed images with binary masks, all `size × size`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationData {
    pub size: usize,
    pub images: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f64>>,
}

fn stack(size: usize, rows: &[Vec<f64>], ids: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(ids.len() * size * size);
    for &i in ids {
        data.extend_from_slice(&rows[i]);
    }
    Tensor::new(vec![ids.len(), 1, size, size], data).expect("rows have size² entries")
}

impl LocalizationData {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, ids: &[usize]) -> Self {
        LocalizationData {
            size: self.size,
            images: ids.iter().map(|&i| self.images[i].clone()).collect(),
            centroids: ids.iter().map(|&i| self.centroids[i]).collect(),
        }
    }

    pub fn batch(&self, ids: &[usize]) -> (Tensor, Tensor) {
        let t = ids.iter().flat_map(|&i| self.centroids[i]).collect();
        (
            stack(self.size, &self.images, ids),
            Tensor::new(vec![ids.len(), 2], t).expect("two coordinates per sample"),
        )
    }
}

impl SegmentationData {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, ids: &[usize]) -> Self {
        SegmentationData {
            size: self.size,
            images: ids.iter().map(|&i| self.images[i].clone()).collect(),
            masks: ids.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }

    pub fn batch(&self, ids: &[usize]) -> (Tensor, Tensor) {
        (
            stack(self.size, &self.images, ids),
            stack(self.size, &self.masks, ids),
        )
    }
}

/// Images per forward pass when only predictions are needed.
pub const EVAL_BATCH: usize = 16;

/// Eval-mode predictions for every image, in order: `[x, y]` per sample.
pub fn predict_centroids(model: &mut UNetModel, data: &LocalizationData) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(data.len());
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        let y = model.predict_centroids(&x)?;
        out.extend(y.data().chunks(2).map(|c| [c[0], c[1]]));
    }
    Ok(out)
}

/// Eval-mode probability maps for every image, in order.
pub fn predict_masks(model: &mut UNetModel, data: &SegmentationData) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    let ids: Vec<usize> = (0..data.len()).collect();
    let n = data.size * data.size;
    for chunk in ids.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        let y = model.predict_probs(&x)?;
        out.extend(y.data().chunks(n).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Per-coordinate mean squared error over a split.
pub fn localization_mse(model: &mut UNetModel, data: &LocalizationData) -> Result<f64> {
    if data.is_empty() {
        return Err(param_err!("cannot evaluate on an empty split"));
    }
    let pred = predict_centroids(model, data)?;
    let sse: f64 = pred
        .iter()
        .zip(&data.centroids)
        .map(|(p, t)| (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2))
        .sum();
    Ok(sse / (2 * data.len()) as f64)
}

/// Dice of each thresholded prediction against its mask.
pub fn dice_scores(model: &mut UNetModel, data: &SegmentationData) -> Result<Vec<f64>> {
    let probs = predict_masks(model, data)?;
    Ok(probs
        .iter()
        .zip(&data.masks)
        .map(|(p, m)| crate::eval::dice_of_probs(p, m))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation MSE (localizer) or mean Dice (segmenter); `None` without a validation set.
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept, when a validation set drove selection.
    pub best_epoch: Option<usize>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_metric\n");
        for r in &self.epochs {
            let _ = write!(s, "{},{},", r.epoch, r.train_loss);
            if let Some(v) = r.val_metric {
                let _ = write!(s, "{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::file(path, e))
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.train_loss)
    }
}

enum Task<'a> {
    Localize {
        train: &'a LocalizationData,
        val: Option<&'a LocalizationData>,
    },
    Segment {
        train: &'a SegmentationData,
        val: Option<&'a SegmentationData>,
    },
}

impl Task<'_> {
    fn len(&self) -> usize {
        match self {
            Task::Localize { train, .. } => train.len(),
            Task::Segment { train, .. } => train.len(),
        }
    }

    fn size(&self) -> usize {
        match self {
            Task::Localize { train, .. } => train.size,
            Task::Segment { train, .. } => train.size,
        }
    }

    /// Forward + backward on one batch; gradients land in the model.
    fn step(&self, model: &mut UNetModel, ids: &[usize], rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut g = Graph::new();
        let loss = match self {
            Task::Localize { train, .. } => {
                let (x, t) = train.batch(ids);
                let x = g.input(x);
                let y = model.forward_localize(&mut g, x, Mode::Train, rng)?;
                g.mse_loss(y, &t)?
            }
            Task::Segment { train, .. } => {
                let (x, t) = train.batch(ids);
                let x = g.input(x);
                let y = model.forward_segment(&mut g, x, Mode::Train, rng)?;
                g.neg_log_soft_dice(y, &t)?
            }
        };
        g.backward(loss)?;
        model.accumulate_grads(&g);
        Ok(g.value(loss).item().expect("scalar loss"))
    }

    fn validate(&self, model: &mut UNetModel) -> Result<Option<f64>> {
        match self {
            Task::Localize { val: Some(v), .. } => localization_mse(model, v).map(Some),
            Task::Segment { val: Some(v), .. } => {
                let s = dice_scores(model, v)?;
                Ok(Some(s.iter().sum::<f64>() / s.len() as f64))
            }
            _ => Ok(None),
        }
    }

    fn better(&self, a: f64, b: f64) -> bool {
        match self {
            Task::Localize { .. } => a < b,
            Task::Segment { .. } => a > b,
        }
    }
}

fn fit(
    model: &mut UNetModel,
    task: Task<'_>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossCurve> {
    cfg.validate()?;
    if task.len() == 0 {
        return Err(param_err!("training set is empty"));
    }
    if task.size() != model.config().input_size {
        return Err(param_err!(
            "data is {0}×{0} but the model expects {1}×{1}",
            task.size(),
            model.config().input_size
        ));
    }
    if let Task::Localize { val: Some(v), .. } = &task {
        if v.is_empty() {
            return Err(param_err!("validation set is empty"));
        }
    }
    if let Task::Segment { val: Some(v), .. } = &task {
        if v.is_empty() {
            return Err(param_err!("validation set is empty"));
        }
    }
    let mut opt = Optimizer::new(cfg.optimizer, model.params());
    let mut order: Vec<usize> = (0..task.len()).collect();
    let mut curve = LossCurve::default();
    let mut best: Option<(f64, UNetModel)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for ids in order.chunks(cfg.batch_size) {
            model.zero_grads();
            total += task.step(model, ids, rng)? * ids.len() as f64;
            opt.step(model.params_mut(), cfg.learning_rate)?;
        }
        let train_loss = total / task.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Validation(format!(
                "training loss diverged at epoch {epoch}"
            )));
        }
        let val_metric = task.validate(model)?;
        curve.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
        });
        if let Some(m) = val_metric {
            if best.as_ref().is_none_or(|(b, _)| task.better(m, *b)) {
                best = Some((m, model.clone()));
                curve.best_epoch = Some(epoch);
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    model.zero_grads();
    Ok(curve)
}

/// Phase 1: MSE regression of the disc centre. With a validation set the
/// best-validation weights are kept and training stops early after
/// `cfg.patience` stale epochs.
pub fn train_localizer(
    model: &mut UNetModel,
    train: &LocalizationData,
    val: Option<&LocalizationData>,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    if cfg.phase != Phase::Localize {
        return Err(param_err!("train_localizer needs phase localize"));
    }
    if model.kind() != ModelKind::Localizer {
        return Err(Error::State(format!(
            "train_localizer needs a localizer, got a {} model",
            model.kind().name()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fit(model, Task::Localize { train, val }, cfg, &mut rng)
}

/// Phase 2: soft-Dice training of the decoder on top of a frozen encoder.
pub fn train_segmenter(
    model: &mut UNetModel,
    train: &SegmentationData,
    val: Option<&SegmentationData>,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    let want = match model.kind() {
        ModelKind::Localizer => {
            return Err(Error::State(
                "the localizer has not been extended to a U-net".into(),
            ))
        }
        ModelKind::Pretrained => Phase::Segment,
        ModelKind::Baseline => Phase::Baseline,
    };
    if cfg.phase != want {
        return Err(param_err!(
            "a {} model trains under phase {want:?}, config says {:?}",
            model.kind().name(),
            cfg.phase
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fit(model, Task::Segment { train, val }, cfg, &mut rng)
}

/// Builds a randomly initialized U-net from `cfg.seed` and trains every
/// parameter exactly as [`train_segmenter`] would.
pub fn train_baseline(
    model_cfg: &ModelConfig,
    train: &SegmentationData,
    val: Option<&SegmentationData>,
    cfg: &TrainConfig,
) -> Result<(UNetModel, LossCurve)> {
    if cfg.phase != Phase::Baseline {
        return Err(param_err!("train_baseline needs phase baseline"));
    }
    let mut init = ChaCha8Rng::seed_from_u64(init_seed(cfg.seed));
    let mut model = UNetModel::build_unet(model_cfg, &mut init)?;
    let curve = train_segmenter(&mut model, train, val, cfg)?;
    Ok((model, curve))
}

/// Seed for weight initialization, decorrelated from the shuffling stream.
pub fn init_seed(seed: u64) -> u64 {
    crate::data::mix_seed(seed, &[0x1ee7])
}
