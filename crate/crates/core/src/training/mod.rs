//! Mini-batch training, the stratified train/validation split, evaluation
//! metrics and training-curve export.

mod curves;
mod metrics;
mod optimizer;

pub use curves::{export_curves, parse_curves, read_curves, CURVES_HEADER};
pub use metrics::{
    compute_metrics, evaluate, f_measure, ConfusionCounts, FireClassifier, MetricsReport, DECISION_THRESHOLD,
};
pub use optimizer::{Optimizer, OptimizerKind};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::{augment, Sample};
use crate::network::{Mode, Network, NetworkError, CLASS_LABELS};
use crate::tensor::{cross_entropy, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("class {class:?} has {count} samples, a split needs at least 2")]
    ClassTooSmall { class: String, count: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f32 },
    #[error("sample {source_id} has shape {got:?}, network expects side {side}")]
    SampleShape {
        source_id: String,
        got: Vec<usize>,
        side: usize,
    },
    #[error("curve file: {0}")]
    Curves(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub val_fraction: f64,
    /// Random flip/crop on every training batch.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::default(),
            seed: 0,
            val_fraction: 0.3,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Returned by the per-epoch callback of [`train_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochControl {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified shuffled split over sample labels. Each class keeps
/// `floor((1 - val_fraction) · n)` samples for training; both index lists are
/// sorted.
pub fn split_indices(labels: &[usize], val_fraction: f64, seed: u64) -> Result<SplitIndices, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(TrainError::InvalidConfig(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(CLASS_LABELS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
    };
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(TrainError::ClassTooSmall {
                class: CLASS_LABELS
                    .get(class)
                    .map_or_else(|| class.to_string(), |s| s.to_string()),
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n_train = ((1.0 - val_fraction) * members.len() as f64).floor() as usize;
        split.train.extend_from_slice(&members[..n_train]);
        split.val.extend_from_slice(&members[n_train..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}

/// Clones of the train and validation samples chosen by [`split_indices`].
pub fn split_train_val(
    dataset: &[Sample],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>), TrainError> {
    let labels: Vec<usize> = dataset.iter().map(|s| s.label).collect();
    let split = split_indices(&labels, val_fraction, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect();
    Ok((pick(&split.train), pick(&split.val)))
}

/// Mean cross-entropy and accuracy (argmax) in evaluation mode.
pub fn loss_and_accuracy(net: &Network, samples: &[&Sample]) -> Result<(f64, f64), NetworkError> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in samples {
        let probs = net.predict_image(&s.image)?;
        loss += cross_entropy(&probs, s.label)?.0 as f64;
        if probs.argmax() == s.label {
            correct += 1;
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn stack(images: &[Tensor]) -> Result<Tensor, NetworkError> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let data: Vec<f32> = images.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub curves: Vec<CurvePoint>,
    pub split: SplitIndices,
}

/// Trains for `config.epochs` epochs. See [`train_with`].
pub fn train(net: &mut Network, dataset: &[Sample], config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(net, dataset, config, |_| EpochControl::Continue)
}

/// Splits `dataset`, runs mini-batch optimization on the training part and
/// records one [`CurvePoint`] per epoch from full evaluation-mode passes over
/// both parts. `on_epoch` sees each point and may stop training early.
pub fn train_with(
    net: &mut Network,
    dataset: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&CurvePoint) -> EpochControl,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let side = net.input_side();
    if let Some(bad) = dataset.iter().find(|s| s.image.shape() != [side, side, 3]) {
        return Err(TrainError::SampleShape {
            source_id: bad.source_id.clone(),
            got: bad.image.shape().to_vec(),
            side,
        });
    }
    let labels: Vec<usize> = dataset.iter().map(|s| s.label).collect();
    let split = split_indices(&labels, config.val_fraction, config.seed)?;
    let train_set: Vec<&Sample> = split.train.iter().map(|&i| &dataset[i]).collect();
    let val_set: Vec<&Sample> = split.val.iter().map(|&i| &dataset[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, net);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curves = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    if config.augment {
                        augment(train_set[i], &mut rng).image
                    } else {
                        train_set[i].image.clone()
                    }
                })
                .collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train_set[i].label).collect();
            let out = net.forward(&stack(&images)?, Mode::Train, &mut rng)?;
            let cache = out.cache.expect("train mode returns a cache");
            let loss = cache.mean_loss(&targets)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no + 1,
                    loss,
                });
            }
            let grads = net.backward(&cache, &targets)?;
            if config.learning_rate > 0.0 {
                optimizer.step(net, &grads);
            }
        }

        let (train_loss, train_accuracy) = loss_and_accuracy(net, &train_set)?;
        let (val_loss, val_accuracy) = loss_and_accuracy(net, &val_set)?;
        let point = CurvePoint {
            epoch,
            train_loss,
            val_loss,
            train_accuracy,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4} acc {train_accuracy:.3}, val loss {val_loss:.4} acc {val_accuracy:.3}"
        );
        curves.push(point);
        if on_epoch(&point) == EpochControl::Stop {
            break;
        }
    }
    Ok(TrainOutcome { curves, split })
}
