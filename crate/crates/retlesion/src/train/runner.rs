//! Training loops for the segmentation network and the grading network,
//! wiring together batching, augmentation, the losses, SGD and the
//! patience schedule. Deterministic given the seed (single worker).

use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy_grading, dice_seg_loss_grad, dual_loss_grad, focal_loss_grad,
    weighted_cross_entropy_grad, DualLossConfig,
};
use crate::metrics::{pixel_f1, quadratic_weighted_kappa};
use crate::nn::layers::zero_grads;
use crate::nn::lesion_net::{build_lesion_net, LesionNet, LesionNetConfig};
use crate::nn::multitask::{predict_grade, GradingNet};
use crate::tensor::Tensor;
use crate::train::augment::{augment, AugmentConfig};
use crate::train::schedule::{schedule_update, ScheduleEvent, ScheduleState};
use crate::train::sgd::SgdState;
use crate::types::{threshold_maps, DRGrade, FundusImage, LesionMaskStack};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: FundusImage,
    pub masks: LesionMaskStack,
    pub grade: DRGrade,
}

#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegLossKind {
    /// Dice to start, switching to the dual loss at the first LR reduction.
    Dice,
    /// Weighted cross-entropy ablation (inverse-frequency weights).
    Wce,
    /// Focal-loss ablation.
    Focal { alpha: f64, gamma: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Validate every this many batches.
    pub validate_every: u32,
    pub lr_patience: u32,
    pub stop_patience: u32,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Hard batch budget (the schedule may stop earlier).
    pub max_batches: u32,
    /// Threshold for validation-time binarization.
    pub tau: f64,
    pub augment: AugmentConfig,
    pub seg_loss: SegLossKind,
    /// Cap on the WCE inverse-frequency positive weight.
    pub wce_weight_cap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            momentum: 0.95,
            weight_decay: 0.0001,
            validate_every: 1000,
            lr_patience: 4,
            stop_patience: 10,
            lr_factor: 10.0,
            batch_size: 8,
            lambda: 0.8,
            seed: 0,
            max_batches: 20_000,
            tau: 0.5,
            augment: AugmentConfig::default(),
            seg_loss: SegLossKind::Dice,
            wce_weight_cap: 100.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            self.lr0,
            self.momentum,
            self.weight_decay,
            self.lr_factor,
            self.wce_weight_cap,
        ];
        if positives.iter().any(|&v| v < 0.0) || self.lr0 <= 0.0 || self.lr_factor <= 1.0 {
            return Err(Error::Config("bad optimizer constants".into()));
        }
        if self.validate_every == 0
            || self.lr_patience == 0
            || self.stop_patience == 0
            || self.batch_size == 0
            || self.max_batches == 0
        {
            return Err(Error::Config("counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0 < self.tau && self.tau < 1.0) {
            return Err(Error::Config("lambda/tau out of range".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Validation {
        batch: u32,
        score: f64,
        lr: f64,
        using_dual: bool,
    },
    NewBest {
        batch: u32,
        score: f64,
    },
    LrReduced {
        batch: u32,
        lr: f64,
    },
    LossSwitched {
        batch: u32,
    },
    Stopped {
        batch: u32,
    },
    Finished {
        batches: u32,
    },
}

pub fn write_log(path: &Path, events: &[TrainEvent]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for ev in events {
        let line = serde_json::to_string(ev).map_err(|e| Error::Checkpoint(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<TrainEvent>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(events)
}

/// Deterministic epoch-shuffled batch index stream.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha20Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha20Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Inverse-frequency positive weights over the training split, capped.
pub fn wce_weights(train: &[Sample], cap: f64) -> Result<Vec<f64>> {
    let m = train
        .first()
        .ok_or_else(|| Error::InvalidInput("empty training split".into()))?
        .masks
        .m();
    let mut pos = vec![0u64; m];
    let mut total = 0u64;
    for s in train {
        total += (s.masks.masks.h * s.masks.masks.w) as u64;
        for px in s.masks.masks.data.chunks_exact(m) {
            for (ch, &v) in px.iter().enumerate() {
                if v != 0.0 {
                    pos[ch] += 1;
                }
            }
        }
    }
    Ok(pos
        .iter()
        .map(|&p| {
            if p == 0 {
                cap
            } else {
                (((total - p) as f64) / p as f64).clamp(1.0, cap)
            }
        })
        .collect())
}

/// Mean per-lesion pixel F1 of thresholded maps over a split.
pub fn validate_segmentation(net: &LesionNet, split: &[Sample], tau: f64) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::InvalidInput("empty validation split".into()));
    }
    let mut pred = Vec::with_capacity(split.len());
    let mut truth = Vec::with_capacity(split.len());
    for s in split {
        pred.push(threshold_maps(&net.forward(&s.image)?, tau)?);
        truth.push(s.masks.clone());
    }
    Ok(pixel_f1(&pred, &truth)?.mean)
}

/// Quadratic weighted kappa of argmax grades over a split.
pub fn validate_grading(net: &GradingNet, split: &[Sample]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::InvalidInput("empty validation split".into()));
    }
    let mut truth = Vec::with_capacity(split.len());
    let mut pred = Vec::with_capacity(split.len());
    for s in split {
        truth.push(s.grade);
        pred.push(predict_grade(&net.fuse_and_grade(&s.image)?.probs)?);
    }
    quadratic_weighted_kappa(&truth, &pred)
}

pub struct SegTrainResult {
    pub best: LesionNet,
    pub final_net: LesionNet,
    pub best_score: f64,
    pub log: Vec<TrainEvent>,
}

pub fn train_segmentation(
    net_config: &LesionNetConfig,
    splits: &DataSplits,
    config: &TrainConfig,
) -> Result<SegTrainResult> {
    config.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::InvalidInput("train and val splits must be non-empty".into()));
    }
    let mut net = build_lesion_net(net_config, config.seed)?;
    let mut best = net.clone();
    let mut sgd = SgdState::new(&net);
    let mut state = ScheduleState::new(config.lr0);
    let mut sampler = BatchSampler::new(splits.train.len(), config.seed ^ 0x5EED);
    let mut aug_rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0xA06);
    let weights = match config.seg_loss {
        SegLossKind::Wce => Some(wce_weights(&splits.train, config.wce_weight_cap)?),
        _ => None,
    };
    let dual = DualLossConfig {
        lambda: config.lambda,
        epsilon: 1e-6,
    };
    let mut log = Vec::new();
    let mut batch = 0u32;

    while batch < config.max_batches && !state.stopped {
        batch += 1;
        let idx = sampler.next_batch(config.batch_size);
        let mut batch_samples = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &splits.train[i];
            batch_samples.push(augment(&s.image, &s.masks, &config.augment, &mut aug_rng)?);
        }
        let mut traces = Vec::with_capacity(batch_samples.len());
        for (img, _) in &batch_samples {
            traces.push(net.forward_trace(img)?);
        }
        let maps: Vec<&Tensor> = traces.iter().map(|t| &t.maps).collect();
        let targets: Vec<&Tensor> = batch_samples.iter().map(|(_, m)| &m.masks).collect();
        let use_dual = matches!(config.seg_loss, SegLossKind::Dice) && state.using_dual;
        let (_, grads) = match config.seg_loss {
            SegLossKind::Dice => {
                if use_dual {
                    dual_loss_grad(&maps, &targets, &dual)?
                } else {
                    dice_seg_loss_grad(&maps, &targets, dual.epsilon)?
                }
            }
            SegLossKind::Wce => {
                weighted_cross_entropy_grad(&maps, &targets, weights.as_ref().unwrap())?
            }
            SegLossKind::Focal { alpha, gamma } => {
                focal_loss_grad(&maps, &targets, alpha, gamma)?
            }
        };
        zero_grads(&mut net);
        for (trace, g) in traces.iter().zip(&grads) {
            net.backward(trace, g);
        }
        sgd.step(&mut net, state.lr, config.momentum, config.weight_decay)?;

        if batch % config.validate_every == 0 {
            let score = validate_segmentation(&net, &splits.val, config.tau)?;
            log.push(TrainEvent::Validation {
                batch,
                score,
                lr: state.lr,
                using_dual: state.using_dual,
            });
            let events = schedule_update(
                &mut state,
                score,
                config.lr_patience,
                config.stop_patience,
                config.lr_factor,
            )?;
            for ev in events {
                match ev {
                    ScheduleEvent::Improved => {
                        best = net.clone();
                        log.push(TrainEvent::NewBest { batch, score });
                    }
                    ScheduleEvent::LrReduced => {
                        log.push(TrainEvent::LrReduced { batch, lr: state.lr })
                    }
                    ScheduleEvent::LossSwitched => log.push(TrainEvent::LossSwitched { batch }),
                    ScheduleEvent::Stopped => log.push(TrainEvent::Stopped { batch }),
                }
            }
        }
    }
    log.push(TrainEvent::Finished { batches: batch });
    Ok(SegTrainResult {
        best,
        final_net: net,
        best_score: state.best_score,
        log,
    })
}

pub struct GradingTrainResult {
    pub best: GradingNet,
    pub final_net: GradingNet,
    pub best_score: f64,
    pub log: Vec<TrainEvent>,
}

/// Train the grading branch; `net` carries the (frozen) side branch.
pub fn train_grading(
    mut net: GradingNet,
    splits: &DataSplits,
    config: &TrainConfig,
) -> Result<GradingTrainResult> {
    config.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::InvalidInput("train and val splits must be non-empty".into()));
    }
    let mut best = net.clone();
    let mut sgd = SgdState::new(&net);
    let mut state = ScheduleState::new(config.lr0);
    let mut sampler = BatchSampler::new(splits.train.len(), config.seed ^ 0x5EED);
    let mut aug_rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0xA06);
    let mut log = Vec::new();
    let mut batch = 0u32;

    while batch < config.max_batches && !state.stopped {
        batch += 1;
        let idx = sampler.next_batch(config.batch_size);
        zero_grads(&mut net);
        let scale = 1.0 / idx.len() as f64;
        let mut probs_batch = Vec::with_capacity(idx.len());
        let mut grades = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &splits.train[i];
            let (img, _) = augment(&s.image, &s.masks, &config.augment, &mut aug_rng)?;
            let trace = net.forward_trace(&img)?;
            let mut grad = trace.probs.clone();
            grad[s.grade.value() as usize] -= 1.0;
            grad.iter_mut().for_each(|g| *g *= scale);
            net.backward(&trace, &grad);
            probs_batch.push(trace.probs);
            grades.push(s.grade);
        }
        // keeps the loss finite and observable even though only its
        // gradient drives the step
        let _ = cross_entropy_grading(&probs_batch, &grades)?;
        sgd.step(&mut net, state.lr, config.momentum, config.weight_decay)?;

        if batch % config.validate_every == 0 {
            let score = validate_grading(&net, &splits.val)?;
            log.push(TrainEvent::Validation {
                batch,
                score,
                lr: state.lr,
                using_dual: state.using_dual,
            });
            let events = schedule_update(
                &mut state,
                score,
                config.lr_patience,
                config.stop_patience,
                config.lr_factor,
            )?;
            for ev in events {
                match ev {
                    ScheduleEvent::Improved => {
                        best = net.clone();
                        log.push(TrainEvent::NewBest { batch, score });
                    }
                    ScheduleEvent::LrReduced => {
                        log.push(TrainEvent::LrReduced { batch, lr: state.lr })
                    }
                    ScheduleEvent::LossSwitched => {}
                    ScheduleEvent::Stopped => log.push(TrainEvent::Stopped { batch }),
                }
            }
        }
    }
    log.push(TrainEvent::Finished { batches: batch });
    Ok(GradingTrainResult {
        best,
        final_net: net,
        best_score: state.best_score,
        log,
    })
}
