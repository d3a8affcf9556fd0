//! Binary cross-entropy on the aggregated prediction, Adam, and the
//! patience-stopped training loop.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::imaging::{AugmentPolicy, Image};
use crate::nn::{backward, forward_cached, SubnetParams};
use crate::patchcore::{chunk_patches, global_forward, mean_probability, PatchConfig};
use crate::tensor::{Real, RngState, Tensor};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// `(-y ln p - (1-y) ln(1-p), dloss/dp)` at the clamped `p`.
pub fn bce_loss(p: f64, y: u8) -> Result<(f64, f64)> {
    if y > 1 {
        return Err(Error::InvalidLabel(y));
    }
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let yf = y as f64;
    let loss = -yf * p.ln() - (1.0 - yf) * (1.0 - p).ln();
    Ok((loss, (p - yf) / (p * (1.0 - p))))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first: Vec<Tensor<T>> = params.into_iter().map(Tensor::zeros_like).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn for_subnet(config: AdamConfig, params: &SubnetParams<T>) -> Self {
        Self::new(config, params.tensors())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: Vec<&Tensor<T>>) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::LengthMismatch {
                left: self.first.len(),
                right: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.first) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    left: m.shape().to_vec(),
                    right: if p.shape() != m.shape() { p.shape() } else { g.shape() }.to_vec(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::of(c.lr);
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let eps = T::of(c.epsilon);
        let correct1 = T::of(1.0 - Float::powi(c.beta1, t));
        let correct2 = T::of(1.0 - Float::powi(c.beta2, t));
        let one = T::one();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step_subnet(&mut self, params: &mut SubnetParams<T>, grads: &SubnetParams<T>) -> Result<()> {
        self.step(params.tensors_mut(), grads.tensors())
    }
}

/// An image with its binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: u8,
}

impl Sample {
    pub fn new(image: Image, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(Error::InvalidLabel(label));
        }
        Ok(Self { image, label })
    }
}

/// Whether augmentations are redrawn every epoch or expanded once up front.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AugmentMode {
    #[default]
    PerEpoch,
    Expanded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Images per optimizer step.
    pub batch_size: usize,
    /// Epochs without a strictly lower validation loss before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Undersample the majority class to the minority count each epoch.
    pub balance_classes: bool,
    pub stop_at_full_train_accuracy: bool,
    pub patch: PatchConfig,
    pub augment: AugmentPolicy,
    pub augment_mode: AugmentMode,
}

impl TrainConfig {
    pub fn new(patch: PatchConfig) -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 4,
            patience: 1000,
            max_epochs: 100_000,
            seed: 0,
            balance_classes: true,
            stop_at_full_train_accuracy: true,
            patch,
            augment: AugmentPolicy::default(),
            augment_mode: AugmentMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.adam.lr.is_finite() || self.adam.lr <= 0.0 {
            return Err(invalid("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(invalid("max epochs", "must be at least 1"));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    TrainAccuracy100,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Validation loss strictly below every earlier epoch.
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept as the best checkpoint.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub optimizer_steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub report: TrainReport,
    pub best: SubnetParams<T>,
    pub last: SubnetParams<T>,
}

/// Sample order for one epoch. With balancing, a seeded subset of the
/// majority class the size of the minority class is kept.
pub fn epoch_order(labels: &[u8], balance: bool, rng: &mut RngState) -> Vec<usize> {
    let mut order: Vec<usize> = if balance {
        let mut zeros: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        let mut ones: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        let keep = zeros.len().min(ones.len());
        rng.shuffle(&mut zeros);
        rng.shuffle(&mut ones);
        zeros.truncate(keep);
        ones.truncate(keep);
        zeros.into_iter().chain(ones).collect()
    } else {
        (0..labels.len()).collect()
    };
    rng.shuffle(&mut order);
    order
}

/// Mean BCE and accuracy (threshold 0.5 inclusive) of the aggregated
/// prediction over `samples`.
pub fn evaluate<T: Real>(params: &SubnetParams<T>, samples: &[Sample], patch: &PatchConfig) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in samples {
        let p = global_forward(params, &s.image, patch)?.p_global.f64();
        loss += bce_loss(p, s.label)?.0;
        correct += usize::from(predict_label(p) == s.label);
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[inline]
pub fn predict_label(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

/// Loss and gradient contribution of one image, accumulated into `grads`
/// with weight `scale`. Returns `(p_global, loss)`.
pub fn accumulate_image<T: Real>(
    params: &SubnetParams<T>,
    image: &Image,
    label: u8,
    patch: &PatchConfig,
    scale: f64,
    grads: &mut SubnetParams<T>,
) -> Result<(f64, f64)> {
    let grid = chunk_patches::<T>(image, patch)?;
    let cache = forward_cached(params, &grid.patches)?;
    let p = mean_probability(cache.probs()).f64();
    let (loss, dldp) = bce_loss(p, label)?;
    let per_patch = T::of(scale * dldp / grid.len() as f64);
    let upstream = vec![per_patch; grid.len()];
    backward(params, &cache, &upstream, grads, false)?;
    Ok((p, loss))
}

/// Trains from `init` until patience runs out, training accuracy reaches
/// 100% (when enabled), or `max_epochs`. `observer` sees every epoch record
/// together with the parameters at the end of that epoch.
pub fn train<T: Real>(
    init: SubnetParams<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord, &SubnetParams<T>),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if !(train_set.iter().any(|s| s.label == 0) && train_set.iter().any(|s| s.label == 1)) {
        return Err(Error::SingleClass);
    }
    for s in train_set.iter().chain(val_set) {
        cfg.patch.validate(s.image.height(), s.image.width())?;
    }
    if init.dims.height != cfg.patch.height || init.dims.width != cfg.patch.width {
        return Err(Error::ShapeMismatch {
            left: vec![init.dims.height, init.dims.width],
            right: vec![cfg.patch.height, cfg.patch.width],
        });
    }

    let expanded;
    let train_set: &[Sample] = if cfg.augment_mode == AugmentMode::Expanded && !cfg.augment.is_identity() {
        let mut out = Vec::new();
        for s in train_set {
            for image in cfg.augment.expand(&s.image)? {
                out.push(Sample { image, label: s.label });
            }
        }
        expanded = out;
        &expanded
    } else {
        train_set
    };
    let per_epoch_augment = cfg.augment_mode == AugmentMode::PerEpoch && !cfg.augment.is_identity();
    let labels: Vec<u8> = train_set.iter().map(|s| s.label).collect();

    let base_rng = RngState::new(cfg.seed);
    let mut params = init;
    let mut adam = AdamState::for_subnet(cfg.adam, &params);
    let mut grads = SubnetParams::zeros_like(&params);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0usize;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        let mut rng = base_rng.derive(epoch as u64);
        let order = epoch_order(&labels, cfg.balance_classes, &mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.fill(T::zero());
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &train_set[i];
                let augmented;
                let image = if per_epoch_augment {
                    augmented = cfg.augment.sample(&s.image, &mut rng)?;
                    &augmented
                } else {
                    &s.image
                };
                let (p, loss) = accumulate_image(&params, image, s.label, &cfg.patch, scale, &mut grads)?;
                if !loss.is_finite() || !p.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        value: loss,
                    });
                }
                loss_sum += loss;
                correct += usize::from(predict_label(p) == s.label);
            }
            adam.step_subnet(&mut params, &grads)?;
        }
        if !params.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: 0,
                value: f64::NAN,
            });
        }
        let seen = order.len() as f64;
        let (val_loss, val_accuracy) = evaluate(&params, val_set, &cfg.patch)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: 0,
                value: val_loss,
            });
        }
        let improved = val_loss < best_val;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen,
            train_accuracy: correct as f64 / seen,
            val_loss,
            val_accuracy,
            improved,
        };
        observer(&record, &params);
        epochs.push(record);
        if improved {
            best_val = val_loss;
            best_epoch = epoch;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                stop_reason = StopReason::Patience;
                break;
            }
        }
        if cfg.stop_at_full_train_accuracy && correct == order.len() {
            stop_reason = StopReason::TrainAccuracy100;
            break;
        }
    }

    Ok(TrainOutcome {
        report: TrainReport {
            epochs,
            best_epoch,
            best_val_loss: best_val,
            stop_reason,
            optimizer_steps: adam.steps(),
        },
        best,
        last: params,
    })
}
