use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::Checkpoint;
use super::model::{forward_graph, ModelError};
use crate::autodiff::Graph;
use crate::metrics::{self, ConfusionCounts};
use crate::tensor::{ShapeError, Tensor};
use crate::volume::{argmax_channels, one_hot, LabelVolume, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid train plan: {0}")]
    Plan(String),
    #[error("sample {index}: {reason}")]
    Sample { index: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("round-end hook failed: {0}")]
    Hook(Box<dyn std::error::Error + Send + Sync>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub rounds: Vec<Round>,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            rounds: vec![
                Round {
                    epochs: 50,
                    batch_size: 2,
                },
                Round {
                    epochs: 50,
                    batch_size: 1,
                },
            ],
            lr: 1e-4,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.rounds.is_empty() {
            return Err(TrainError::Plan("at least one round is required".into()));
        }
        if let Some(r) = self
            .rounds
            .iter()
            .find(|r| r.epochs == 0 || r.batch_size == 0)
        {
            return Err(TrainError::Plan(format!(
                "round with {} epochs and batch size {} is empty",
                r.epochs, r.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Plan(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.rounds.iter().map(|r| r.epochs).sum()
    }

    /// Round index and batch size of the zero-based global `epoch`.
    fn round_of(&self, epoch: usize) -> Option<(usize, usize)> {
        let mut end = 0;
        for (i, r) in self.rounds.iter().enumerate() {
            end += r.epochs;
            if epoch < end {
                return Some((i, r.batch_size));
            }
        }
        None
    }

    fn is_round_end(&self, epochs_done: usize) -> bool {
        let mut end = 0;
        self.rounds.iter().any(|r| {
            end += r.epochs;
            end == epochs_done
        })
    }
}

/// One preprocessed training case.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(in_channels, D, H, W)`.
    pub image: Tensor<f32>,
    pub labels: LabelVolume,
    /// One-hot `labels`, `(num_classes, D, H, W)`.
    pub target: Tensor<f32>,
}

impl Sample {
    pub fn new(
        image: Tensor<f32>,
        labels: LabelVolume,
        num_classes: usize,
    ) -> Result<Self, TrainError> {
        let [d, h, w] = labels.dims();
        if image.rank() != 4 || image.shape()[1..] != [d, h, w] {
            return Err(TrainError::Shape(ShapeError::Incompatible {
                op: "sample",
                lhs: image.shape().to_vec(),
                rhs: vec![d, h, w],
            }));
        }
        let target = one_hot(&labels, num_classes)?;
        Ok(Self {
            image,
            labels,
            target,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub loss: f64,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl EpochRecord {
    fn from_counts(epoch: usize, loss: f64, c: &ConfusionCounts) -> Self {
        Self {
            epoch,
            loss,
            dice: metrics::dice_coefficient(c),
            iou: metrics::iou(c),
            accuracy: metrics::accuracy(c),
            sensitivity: metrics::sensitivity(c),
            specificity: metrics::specificity(c),
        }
    }
}

pub const HISTORY_HEADER: &str = "epoch,loss,dice,iou,accuracy,sensitivity,specificity";

pub fn write_history_csv(history: &[EpochRecord], mut out: impl Write) -> std::io::Result<()> {
    let f = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |v| format!("{v:.6}"));
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(
            out,
            "{},{:.6},{},{},{},{},{}",
            r.epoch,
            r.loss,
            f(r.dice),
            f(r.iou),
            f(r.accuracy),
            f(r.sensitivity),
            f(r.specificity)
        )?;
    }
    Ok(())
}

/// Sample order for the zero-based global `epoch`; depends only on (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Foreground counts pooled over the one-vs-rest tallies of classes 1.. .
fn foreground_counts(
    pred: &LabelVolume,
    truth: &LabelVolume,
    num_classes: usize,
) -> Result<ConfusionCounts, TrainError> {
    let mut total = ConfusionCounts::default();
    for class in 1..num_classes.max(2) {
        total = total
            + metrics::confusion_class(pred, truth, class as u8)
                .map_err(|e| TrainError::Plan(e.to_string()))?;
    }
    Ok(total)
}

fn batch_tensors(
    samples: &[Sample],
    idx: &[usize],
) -> Result<(Tensor<f32>, Tensor<f32>), ShapeError> {
    let images: Vec<&Tensor<f32>> = idx.iter().map(|&i| &samples[i].image).collect();
    let targets: Vec<&Tensor<f32>> = idx.iter().map(|&i| &samples[i].target).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&targets)?))
}

fn check_samples(ckpt: &Checkpoint, samples: &[Sample]) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let cfg = ckpt.model.config();
    let dims = samples[0].labels.dims();
    for (index, s) in samples.iter().enumerate() {
        if s.labels.dims() != dims {
            return Err(TrainError::Sample {
                index,
                reason: format!("dims {:?} differ from {:?}", s.labels.dims(), dims),
            });
        }
        if s.image.shape()[0] != cfg.in_channels || s.target.shape()[0] != cfg.num_classes {
            return Err(TrainError::Sample {
                index,
                reason: format!(
                    "image {:?} / target {:?} do not match the model's {} inputs and {} classes",
                    s.image.shape(),
                    s.target.shape(),
                    cfg.in_channels,
                    cfg.num_classes
                ),
            });
        }
    }
    cfg.check_input_dims(dims)?;
    Ok(())
}

/// Mean foreground dice loss of the current model, one sample at a time.
pub fn evaluate_loss(ckpt: &Checkpoint, samples: &[Sample]) -> Result<f64, TrainError> {
    check_samples(ckpt, samples)?;
    let mut total = 0.0;
    for i in 0..samples.len() {
        let (x, t) = batch_tensors(samples, &[i])?;
        let mut g = Graph::<f32>::new();
        let params = ckpt.model.bind(&mut g, false);
        let x = g.constant(x);
        let t = g.constant(t);
        let p = forward_graph(ckpt.model.config(), &mut g, &params, x)?;
        let loss = g.dice_loss(p, t, true)?;
        total += g.value(loss).data()[0] as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Runs the remaining epochs of `plan`, starting after `ckpt.epoch`.
///
/// `on_round_end` sees the checkpoint after the last epoch of each round; an
/// error from it stops training with the checkpoint left at that round end.
pub fn train<F>(
    ckpt: &mut Checkpoint,
    samples: &[Sample],
    plan: &TrainPlan,
    mut on_round_end: F,
) -> Result<(), TrainError>
where
    F: FnMut(&Checkpoint) -> Result<(), Box<dyn std::error::Error + Send + Sync>>,
{
    plan.validate()?;
    check_samples(ckpt, samples)?;
    let cfg = *ckpt.model.config();
    for epoch in ckpt.epoch..plan.total_epochs() {
        let (_, batch_size) = plan.round_of(epoch).expect("epoch within plan");
        let order = epoch_order(samples.len(), plan.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut counts = ConfusionCounts::default();
        for idx in order.chunks(batch_size) {
            let (x, t) = batch_tensors(samples, idx)?;
            let mut g = Graph::<f32>::new();
            let params = ckpt.model.bind(&mut g, true);
            let x = g.constant(x);
            let t = g.constant(t);
            let p = forward_graph(&cfg, &mut g, &params, x)?;
            let loss = g.dice_loss(p, t, true)?;
            g.backward(loss)?;
            loss_sum += g.value(loss).data()[0] as f64;
            batches += 1;

            let probs = g.value(p);
            let per_sample = probs.len() / idx.len();
            for (k, &i) in idx.iter().enumerate() {
                let block = probs.data()[k * per_sample..(k + 1) * per_sample].to_vec();
                let shape = probs.shape()[1..].to_vec();
                let pred = argmax_channels(&Tensor::new(shape, block)?)?;
                counts = counts + foreground_counts(&pred, &samples[i].labels, cfg.num_classes)?;
            }

            let grads: Vec<Tensor<f32>> = params
                .vars()
                .iter()
                .zip(ckpt.model.params())
                .map(|(&v, p)| {
                    g.grad(v)
                        .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
                })
                .collect();
            ckpt.adam.step(ckpt.model.params_mut(), &grads, plan.lr)?;
        }
        ckpt.epoch = epoch + 1;
        ckpt.history.push(EpochRecord::from_counts(
            epoch + 1,
            loss_sum / batches as f64,
            &counts,
        ));
        if plan.is_round_end(ckpt.epoch) {
            on_round_end(ckpt).map_err(TrainError::Hook)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_validation() {
        assert!(TrainPlan::default().validate().is_ok());
        let bad = TrainPlan {
            rounds: vec![Round {
                epochs: 0,
                batch_size: 1,
            }],
            ..TrainPlan::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainPlan {
            rounds: vec![],
            ..TrainPlan::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn round_lookup() {
        let p = TrainPlan {
            rounds: vec![
                Round {
                    epochs: 2,
                    batch_size: 4,
                },
                Round {
                    epochs: 3,
                    batch_size: 2,
                },
            ],
            ..TrainPlan::default()
        };
        assert_eq!(p.round_of(1), Some((0, 4)));
        assert_eq!(p.round_of(2), Some((1, 2)));
        assert_eq!(p.round_of(5), None);
        assert!(p.is_round_end(2) && p.is_round_end(5) && !p.is_round_end(3));
    }

    #[test]
    fn epoch_order_is_seeded_permutation() {
        let a = epoch_order(10, 3, 0);
        assert_eq!(a, epoch_order(10, 3, 0));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_ne!(a, epoch_order(10, 3, 1));
    }

    #[test]
    fn history_csv_layout() {
        let rec = EpochRecord {
            epoch: 1,
            loss: 0.5,
            dice: Some(0.25),
            iou: None,
            accuracy: Some(1.0),
            sensitivity: Some(0.0),
            specificity: Some(1.0),
        };
        let mut buf = Vec::new();
        write_history_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,loss,dice,iou,accuracy,sensitivity,specificity\n1,0.500000,0.250000,NaN,1.000000,0.000000,1.000000\n"
        );
    }
}
