//! Optimizers, learning-rate schedules and the augmented training loop.
//!
//! Every sample gets its own random stream derived from `(seed, epoch,
//! index)`, so the augmentation it receives does not depend on batch
//! composition or on how many threads prepare the batch. The teacher, when
//! present, scores the exact tensor the student is trained on.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{argmax, kd_loss_and_grad, softmax, KdConfig, OneHotLabel, ProbVector};
use crate::error::{Error, Result};
use crate::imageops::{Image, DEFAULT_FILL};
use crate::policy::{augment, mix_seed, sample_rng, PolicySpec};
use crate::smallnet::{backward, forward, images_to_batch, infer, InputShape, ModelParams, Tensor};

const SHUFFLE_TAG: u64 = 0x5348_5546;
const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum {
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    RmsProp {
        decay: f64,
        momentum: f64,
        epsilon: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    /// RMSProp with decay 0.9, momentum 0.9 and weight decay 1e-5.
    pub const RMSPROP_PRESET: OptimizerConfig = OptimizerConfig::RmsProp {
        decay: 0.9,
        momentum: 0.9,
        epsilon: 1e-3,
        weight_decay: 1e-5,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::SgdMomentum {
                momentum,
                weight_decay,
            } => (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            Self::RmsProp {
                decay,
                momentum,
                epsilon,
                weight_decay,
            } => {
                (0.0..1.0).contains(&decay)
                    && (0.0..1.0).contains(&momentum)
                    && epsilon > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    fn weight_decay(&self) -> f64 {
        match *self {
            Self::SgdMomentum { weight_decay, .. } | Self::RmsProp { weight_decay, .. } => {
                weight_decay
            }
        }
    }
}

/// Optimizer settings plus accumulators shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    /// SGD velocity `v`, or the RMSProp momentum buffer `u`.
    velocity: ModelParams,
    /// RMSProp running mean square `s`; unused by SGD.
    mean_square: Option<ModelParams>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        let mean_square = match config {
            OptimizerConfig::RmsProp { .. } => Some(params.zeros_like()),
            OptimizerConfig::SgdMomentum { .. } => None,
        };
        Ok(Self {
            config,
            velocity: params.zeros_like(),
            mean_square,
        })
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn velocity(&self) -> &ModelParams {
        &self.velocity
    }

    pub fn mean_square(&self) -> Option<&ModelParams> {
        self.mean_square.as_ref()
    }

    /// One update with learning rate `lr`. Weight decay is folded into the
    /// gradient as `g + weight_decay * theta` before either rule.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.velocity) {
            return Err(Error::Shape("optimizer, params and grads disagree".into()));
        }
        let wd = self.config.weight_decay();
        let thetas = params.tensors_mut();
        let gs = grads.tensors();
        let vs = self.velocity.tensors_mut();
        match (self.config, self.mean_square.as_mut()) {
            (OptimizerConfig::SgdMomentum { momentum, .. }, _) => {
                for ((theta, g), v) in thetas.into_iter().zip(gs).zip(vs) {
                    for ((t, &g), v) in theta.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        let g = g + wd * *t;
                        *v = momentum * *v + g;
                        *t -= lr * *v;
                    }
                }
            }
            (
                OptimizerConfig::RmsProp {
                    decay,
                    momentum,
                    epsilon,
                    ..
                },
                Some(ms),
            ) => {
                for (((theta, g), u), s) in thetas.into_iter().zip(gs).zip(vs).zip(ms.tensors_mut()) {
                    let it = theta
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(u.data_mut())
                        .zip(s.data_mut());
                    for (((t, &g), u), s) in it {
                        let g = g + wd * *t;
                        *s = decay * *s + (1.0 - decay) * g * g;
                        *u = momentum * *u + lr * g / (*s + epsilon).sqrt();
                        *t -= *u;
                    }
                }
            }
            (OptimizerConfig::RmsProp { .. }, None) => {
                unreachable!("RMSProp state always carries a mean-square buffer")
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `base_lr * factor^floor(epoch / period_epochs)`.
    ExponentialEvery {
        base_lr: f64,
        factor: f64,
        period_epochs: f64,
    },
    /// `base_lr * (1 + cos(pi * epoch / total_epochs)) / 2`.
    Cosine { base_lr: f64 },
}

impl Schedule {
    /// 0.256 decayed by 0.97 every 2.4 epochs.
    pub const EXPONENTIAL_PRESET: Schedule = Schedule::ExponentialEvery {
        base_lr: 0.256,
        factor: 0.97,
        period_epochs: 2.4,
    };

    pub fn base_lr(&self) -> f64 {
        match *self {
            Self::ExponentialEvery { base_lr, .. } | Self::Cosine { base_lr } => base_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::ExponentialEvery {
                base_lr,
                factor,
                period_epochs,
            } => base_lr > 0.0 && factor > 0.0 && period_epochs > 0.0,
            Self::Cosine { base_lr } => base_lr > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid schedule {self:?}")))
        }
    }
}

/// Learning rate at a (fractional) epoch of a run with `total_epochs` main epochs.
pub fn lr_at(schedule: &Schedule, epoch: f64, total_epochs: usize) -> f64 {
    match *schedule {
        Schedule::ExponentialEvery {
            base_lr,
            factor,
            period_epochs,
        } => base_lr * factor.powf((epoch / period_epochs).floor()),
        Schedule::Cosine { base_lr } => {
            let frac = (epoch / total_epochs as f64).clamp(0.0, 1.0);
            base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

fn default_fill() -> u8 {
    DEFAULT_FILL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub optimizer: OptimizerConfig,
    pub kd: KdConfig,
    pub policy: PolicySpec,
    #[serde(default = "default_fill")]
    pub fill: u8,
    #[serde(default)]
    pub seed: u64,
    /// Extra epochs on un-augmented images after the main phase; 0 disables.
    #[serde(default)]
    pub clean_finetune_epochs: usize,
    #[serde(default)]
    pub kd_during_finetune: bool,
    /// Constant learning rate for the clean tail. Defaults to a tenth of the
    /// schedule's base rate.
    #[serde(default)]
    pub finetune_lr: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.kd.validate(classes)?;
        self.policy.validate()?;
        if let Some(lr) = self.finetune_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("finetune_lr {lr} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn uses_teacher(&self) -> bool {
        self.kd.lambda > 0.0
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.clean_finetune_epochs
    }

    fn tail_lr(&self) -> f64 {
        self.finetune_lr.unwrap_or(0.1 * self.schedule.base_lr())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Vec<OneHotLabel>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            let shape = InputShape::of(first);
            if let Some(i) = images.iter().position(|im| InputShape::of(im) != shape) {
                return Err(Error::Dataset(format!("image {i} differs in shape from image 0")));
            }
        }
        let labels = labels
            .into_iter()
            .map(|l| {
                OneHotLabel::new(l, classes)
                    .map_err(|_| Error::Dataset(format!("label {l} outside 0..{classes}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[OneHotLabel] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn input_shape(&self) -> Option<InputShape> {
        self.images.first().map(InputShape::of)
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Dataset(format!("index {i} out of range 0..{}", self.len())));
        }
        Ok(Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Main,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    pub test_error: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Last record of the main (augmented) phase.
    pub fn last_main(&self) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.phase == Phase::Main)
    }
}

/// What the loop saw for one mini-batch.
#[derive(Debug)]
pub struct BatchEvent<'a> {
    pub epoch: usize,
    pub phase: Phase,
    /// Dataset indices of the batch rows.
    pub indices: &'a [usize],
    pub student_input: &'a Tensor,
    /// `None` when the distillation term is inactive for this batch.
    pub teacher_input: Option<&'a Tensor>,
    pub student_logits: &'a Tensor,
    pub teacher_probs: Option<&'a [ProbVector]>,
    pub losses: &'a [f64],
    pub lr: f64,
}

/// Instrumentation hook called once per mini-batch before the update.
pub trait TrainObserver {
    fn on_batch(&mut self, event: &BatchEvent<'_>);
}

impl TrainObserver for () {
    fn on_batch(&mut self, _: &BatchEvent<'_>) {}
}

/// Sample visiting order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64, SHUFFLE_TAG]));
    order.shuffle(&mut rng);
    order
}

/// The augmented image sample `index` receives in `epoch`.
pub fn augmented_sample(
    policy: &PolicySpec,
    img: &Image,
    seed: u64,
    epoch: usize,
    index: usize,
    fill: u8,
) -> Result<Image> {
    let mut rng = sample_rng(seed, epoch as u64, index as u64);
    let instances = policy.sample(&mut rng)?;
    augment(img, &instances, fill)
}

pub fn train(
    teacher: Option<&ModelParams>,
    student_init: &ModelParams,
    data: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    train_observed(teacher, student_init, data, test, cfg, &mut ())
}

fn check_compatible(model: &ModelParams, data: &Dataset, what: &str) -> Result<()> {
    if model.classes() != data.classes() {
        return Err(Error::Shape(format!(
            "{what} has {} classes, dataset {}",
            model.classes(),
            data.classes()
        )));
    }
    if data.input_shape() != Some(model.input_shape()) {
        return Err(Error::Shape(format!(
            "{what} expects {:?}, dataset has {:?}",
            model.input_shape(),
            data.input_shape()
        )));
    }
    Ok(())
}

pub fn train_observed<O: TrainObserver + ?Sized>(
    teacher: Option<&ModelParams>,
    student_init: &ModelParams,
    data: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    observer: &mut O,
) -> Result<(ModelParams, TrainHistory)> {
    if data.is_empty() || test.is_empty() {
        return Err(Error::Dataset("training and test sets must be non-empty".into()));
    }
    cfg.validate(data.classes())?;
    check_compatible(student_init, data, "student")?;
    check_compatible(student_init, test, "student")?;
    match (teacher, cfg.uses_teacher()) {
        (Some(t), true) => check_compatible(t, data, "teacher")?,
        (None, false) => {}
        (None, true) => return Err(Error::Config("lambda > 0 requires a teacher".into())),
        (Some(_), false) => {
            return Err(Error::Config("a teacher was given but lambda is 0".into()))
        }
    }

    let mut params = student_init.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, &params)?;
    let mut history = TrainHistory::default();
    let batches = data.len().div_ceil(cfg.batch_size);

    for epoch in 0..cfg.total_epochs() {
        let phase = if epoch < cfg.epochs {
            Phase::Main
        } else {
            Phase::Finetune
        };
        let kd_teacher = match phase {
            Phase::Main => teacher,
            Phase::Finetune => teacher.filter(|_| cfg.kd_during_finetune),
        };
        let kd = if kd_teacher.is_some() {
            cfg.kd
        } else {
            KdConfig::disabled()
        };
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut loss_sum = 0.0;
        let mut first_lr = None;

        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<Image> = idx
                .par_iter()
                .map(|&i| match phase {
                    Phase::Main => {
                        augmented_sample(&cfg.policy, &data.images[i], cfg.seed, epoch, i, cfg.fill)
                    }
                    Phase::Finetune => Ok(data.images[i].clone()),
                })
                .collect::<Result<_>>()?;
            let x = images_to_batch(&images)?;
            let (logits, trace) = forward(&params, &x)?;
            let teacher_probs = match kd_teacher {
                Some(t) => {
                    let tl = infer(t, &x)?;
                    Some((0..idx.len()).map(|r| softmax(tl.row(r))).collect::<Vec<_>>())
                }
                None => None,
            };

            let classes = params.classes();
            let mut grad = Vec::with_capacity(idx.len() * classes);
            let mut losses = Vec::with_capacity(idx.len());
            for (r, &i) in idx.iter().enumerate() {
                let t = teacher_probs.as_ref().map(|tp| &tp[r]);
                let (loss, g) = kd_loss_and_grad(logits.row(r), t, data.labels[i], &kd)?;
                losses.push(loss);
                grad.extend(g);
            }
            let grad = Tensor::new(vec![idx.len(), classes], grad)?;

            let lr = match phase {
                Phase::Main => lr_at(&cfg.schedule, epoch as f64 + b as f64 / batches as f64, cfg.epochs),
                Phase::Finetune => cfg.tail_lr(),
            };
            first_lr.get_or_insert(lr);
            observer.on_batch(&BatchEvent {
                epoch,
                phase,
                indices: idx,
                student_input: &x,
                teacher_input: kd_teacher.map(|_| &x),
                student_logits: &logits,
                teacher_probs: teacher_probs.as_deref(),
                losses: &losses,
                lr,
            });

            let grads = backward(&params, &trace, &grad)?;
            opt.step(&mut params, &grads, lr)?;
            loss_sum += losses.iter().sum::<f64>();
        }

        if !params.is_finite() {
            return Err(Error::Config(format!(
                "training diverged in epoch {epoch}; lower the learning rate"
            )));
        }
        let record = EpochRecord {
            epoch,
            phase,
            mean_loss: loss_sum / data.len() as f64,
            test_error: evaluate(&params, test)?,
            lr: first_lr.unwrap_or(0.0),
        };
        log::info!(
            "epoch {epoch} ({:?}): loss {:.4}, test error {:.4}, lr {:.5}",
            record.phase,
            record.mean_loss,
            record.test_error,
            record.lr
        );
        history.records.push(record);
    }
    Ok((params, history))
}

/// Predicted class per sample, ties going to the lowest index.
pub fn predict(params: &ModelParams, data: &Dataset) -> Result<Vec<usize>> {
    check_compatible(params, data, "model")?;
    let chunks: Vec<Vec<usize>> = data
        .images
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let logits = infer(params, &images_to_batch(chunk)?)?;
            Ok((0..chunk.len()).map(|r| argmax(logits.row(r))).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Fraction of clean samples whose predicted class differs from the label.
pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty set".into()));
    }
    let wrong = predict(params, test)?
        .iter()
        .zip(&test.labels)
        .filter(|(p, l)| **p != l.class_index)
        .count();
    Ok(wrong as f64 / test.len() as f64)
}
