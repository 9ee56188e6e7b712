//! Training stages and the online adaptation loop.

use log::warn;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::loss::{LabelMap, LossConfig};
use crate::maskops::{
    distance_transform, erode, iou, select_negatives, select_positives, threshold, threshold_minus_negatives, BinaryMask,
};
use crate::posteriors::Posteriors;
use crate::rng::{self, tag};
use crate::segnet::NetworkState;
use crate::synth::{augment_image, augment_with, unwarp_plane, AugmentParams, VideoSequence};

/// Hard-negative distance as a fraction of the image diagonal: 220 px at
/// 854x480.
pub fn default_d_rel() -> f64 {
    220.0 / 854f64.hypot(480.0)
}

/// Hyperparameters of one-shot fine-tuning and online adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationConfig {
    /// Positive-example posterior threshold.
    pub alpha: f64,
    /// Loss scale of current-frame updates.
    pub beta: f64,
    /// Negative-example distance relative to the image diagonal.
    pub d_rel: f64,
    pub n_online: usize,
    pub n_curr: usize,
    pub online_lr: f64,
    pub oneshot_steps: usize,
    pub oneshot_lr: f64,
    pub erosion_size: usize,
    pub hardest_fraction: f64,
    /// Train on positive examples.
    pub use_positives: bool,
    /// Train on negative examples and remove them from the output mask.
    pub use_negatives: bool,
    /// Interleave first-frame steps; when off all `n_online` steps use the
    /// current frame.
    pub first_frame_mixing: bool,
    /// Select positives from test-time-augmented posteriors.
    pub tta_targets: bool,
    pub tta_variants: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            alpha: 0.97,
            beta: 0.05,
            d_rel: default_d_rel(),
            n_online: 15,
            n_curr: 3,
            online_lr: 1e-5,
            oneshot_steps: 50,
            oneshot_lr: 3e-6,
            erosion_size: 15,
            hardest_fraction: 0.25,
            use_positives: true,
            use_negatives: true,
            first_frame_mixing: true,
            tta_targets: false,
            tta_variants: 10,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("AdaptationConfig", detail));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} must be positive", self.beta));
        }
        if !(self.d_rel >= 0.0) {
            return bad(format!("d_rel {} must be non-negative", self.d_rel));
        }
        if self.n_curr > self.n_online {
            return bad(format!("n_curr {} exceeds n_online {}", self.n_curr, self.n_online));
        }
        for (name, lr) in [("online_lr", self.online_lr), ("oneshot_lr", self.oneshot_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} {lr} must be non-negative"));
            }
        }
        if self.erosion_size == 0 || self.erosion_size.is_multiple_of(2) {
            return bad(format!("erosion_size {} must be odd", self.erosion_size));
        }
        if self.tta_variants == 0 {
            return bad("tta_variants must be at least 1".into());
        }
        LossConfig { hardest_fraction: self.hardest_fraction, loss_scale: self.beta }.validate()
    }

    /// Negative-example distance in pixels for an `h x w` frame.
    pub fn distance(&self, h: usize, w: usize) -> f64 {
        self.d_rel * (h as f64).hypot(w as f64)
    }

    /// Whether online step `i` (1-based) trains on the current frame.
    pub fn is_current_step(&self, i: usize) -> bool {
        if !self.first_frame_mixing {
            return true;
        }
        let n = self.n_online.max(1);
        i * self.n_curr / n > (i - 1) * self.n_curr / n
    }
}

/// Anything that maps frames to posteriors and can take a training step.
///
/// [`NetworkState`] is the real model; tests drive the loop with scripted
/// stubs.
pub trait OnlineModel {
    fn posteriors(&mut self, frame: &RgbImage) -> Result<Posteriors>;
    fn train_step(&mut self, image: &RgbImage, labels: &LabelMap, cfg: &LossConfig, lr: f64) -> Result<f64>;

    /// Clears optimizer state before a new training stage.
    fn reset_optimizer(&mut self) {}
}

impl OnlineModel for NetworkState {
    fn posteriors(&mut self, frame: &RgbImage) -> Result<Posteriors> {
        NetworkState::posteriors(self, frame)
    }

    fn train_step(&mut self, image: &RgbImage, labels: &LabelMap, cfg: &LossConfig, lr: f64) -> Result<f64> {
        NetworkState::train_step(self, image, labels, cfg, lr)
    }

    fn reset_optimizer(&mut self) {
        self.adam.reset();
    }
}

/// Supervised training schedule for the pretraining stages.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hardest_fraction: f64,
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 10, lr: 3e-6, hardest_fraction: 0.25, augment: true }
    }
}

/// Mean training loss (no augmentation) of `net` over `samples`.
pub fn mean_loss(net: &NetworkState, samples: &[(RgbImage, BinaryMask)], hardest_fraction: f64) -> Result<f64> {
    let cfg = LossConfig { hardest_fraction, loss_scale: 1.0 };
    let mut total = 0.0;
    for (img, mask) in samples {
        total += net.loss_and_gradients(img, &LabelMap::from_mask(mask), &cfg)?.0;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Batch-size-one Adam over `samples`, reshuffled every epoch. Returns the
/// mean training loss of each epoch.
fn pretrain(
    net: &mut NetworkState,
    samples: &[(RgbImage, BinaryMask)],
    cfg: &PretrainConfig,
    seed: u64,
    stage: u64,
    op: &'static str,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset(op));
    }
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    net.adam.reset();
    let loss_cfg = LossConfig { hardest_fraction: cfg.hardest_fraction, loss_scale: 1.0 };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(seed, &[stage, epoch as u64]));
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let (img, mask) = &samples[i];
            let loss = if cfg.augment {
                let p = AugmentParams::sample(&mut rng::stream(seed, &[stage, epoch as u64, step as u64]));
                let (ai, am) = augment_with(img, mask, &p);
                net.train_step(&ai, &LabelMap::from_mask(&am), &loss_cfg, cfg.lr)?
            } else {
                net.train_step(img, &LabelMap::from_mask(mask), &loss_cfg, cfg.lr)?
            };
            total += loss;
        }
        epoch_losses.push(total / samples.len() as f64);
    }
    Ok(epoch_losses)
}

/// Objectness pretraining on images whose objects are all foreground.
pub fn pretrain_objectness(
    net: &mut NetworkState,
    dataset: &[(RgbImage, BinaryMask)],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    pretrain(net, dataset, cfg, seed, tag::OBJECTNESS_TRAIN, "pretrain_objectness")
}

/// Domain pretraining on every annotated frame of the training sequences.
pub fn pretrain_domain(net: &mut NetworkState, sequences: &[VideoSequence], cfg: &PretrainConfig, seed: u64) -> Result<Vec<f64>> {
    let samples: Vec<(RgbImage, BinaryMask)> =
        sequences.iter().flat_map(|s| s.frames.iter().cloned().zip(s.gt_masks.iter().cloned())).collect();
    pretrain(net, &samples, cfg, seed, tag::DOMAIN_TRAIN, "pretrain_domain")
}

/// Fine-tunes on the first frame with freshly sampled augmentations per
/// step. Adam moments start from zero.
pub fn one_shot_finetune<M: OnlineModel + ?Sized>(
    model: &mut M,
    frame1: &RgbImage,
    gt1: &BinaryMask,
    cfg: &AdaptationConfig,
    seed: u64,
) -> Result<()> {
    if frame1.dims() != gt1.dims() {
        return Err(Error::shape("one_shot_finetune", format!("frame {:?} vs mask {:?}", frame1.dims(), gt1.dims())));
    }
    if cfg.oneshot_steps == 0 {
        return Ok(());
    }
    model.reset_optimizer();
    let loss_cfg = LossConfig { hardest_fraction: cfg.hardest_fraction, loss_scale: 1.0 };
    for step in 0..cfg.oneshot_steps {
        let p = AugmentParams::sample(&mut rng::stream(seed, &[tag::ONE_SHOT, step as u64]));
        let (img, mask) = augment_with(frame1, gt1, &p);
        model.train_step(&img, &LabelMap::from_mask(&mask), &loss_cfg, cfg.oneshot_lr)?;
    }
    Ok(())
}

/// Online training targets for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub labels: LabelMap,
    pub positives: BinaryMask,
    pub negatives: BinaryMask,
}

/// Erodes `lastmask`, takes pixels farther than `d` from it as negatives and
/// confident pixels outside the negatives as positives.
pub fn build_targets(post: &Posteriors, lastmask: &BinaryMask, cfg: &AdaptationConfig) -> Result<Targets> {
    if post.dims() != lastmask.dims() {
        return Err(Error::shape("build_targets", format!("posteriors {:?} vs mask {:?}", post.dims(), lastmask.dims())));
    }
    let eroded = erode(lastmask, cfg.erosion_size)?;
    targets_from_eroded(post, &eroded, cfg)
}

fn targets_from_eroded(post: &Posteriors, eroded: &BinaryMask, cfg: &AdaptationConfig) -> Result<Targets> {
    let (h, w) = eroded.dims();
    let negatives = if cfg.use_negatives {
        select_negatives(&distance_transform(eroded), cfg.distance(h, w))?
    } else {
        BinaryMask::empty(h, w)
    };
    let positives =
        if cfg.use_positives { select_positives(post, cfg.alpha, &negatives)? } else { BinaryMask::empty(h, w) };
    let labels = LabelMap::from_selection(&positives, &negatives)?;
    Ok(Targets { labels, positives, negatives })
}

/// `n_online` interleaved Adam steps: current-frame steps on `labels` at
/// loss scale beta, first-frame steps on augmented `(frame1, gt1)` at scale
/// 1. Returns the number of steps taken.
#[allow(clippy::too_many_arguments)]
pub fn adapt_on_frame<M: OnlineModel + ?Sized>(
    model: &mut M,
    frame_t: &RgbImage,
    frame1: &RgbImage,
    gt1: &BinaryMask,
    labels: &LabelMap,
    cfg: &AdaptationConfig,
    seed: u64,
    frame_index: usize,
) -> Result<usize> {
    let current = LossConfig { hardest_fraction: cfg.hardest_fraction, loss_scale: cfg.beta };
    let first = LossConfig { hardest_fraction: cfg.hardest_fraction, loss_scale: 1.0 };
    if labels.labeled_count() == 0 {
        warn!("frame {frame_index}: no labeled pixels, online update skipped");
        return Ok(0);
    }
    let mut steps = 0;
    for i in 1..=cfg.n_online {
        if cfg.is_current_step(i) {
            match model.train_step(frame_t, labels, &current, cfg.online_lr) {
                Err(Error::NoTrainingSignal) => {
                    warn!("frame {frame_index}: labels vanish at loss resolution, current-frame step skipped");
                    continue;
                }
                other => other?,
            };
        } else {
            let p = AugmentParams::sample(&mut rng::stream(seed, &[tag::ONLINE, frame_index as u64, i as u64]));
            let (img, mask) = augment_with(frame1, gt1, &p);
            model.train_step(&img, &LabelMap::from_mask(&mask), &first, cfg.online_lr)?;
        }
        steps += 1;
    }
    Ok(steps)
}

/// Per-frame record of the adaptation loop (frames `1..T`).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub positives: BinaryMask,
    pub negatives: BinaryMask,
    pub lastmask: BinaryMask,
    pub lost: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceResult {
    pub name: String,
    /// Output mask for frames `1..T` (frame 0 is given).
    pub masks: Vec<BinaryMask>,
    /// IoU of each output mask against ground truth.
    pub ious: Vec<f64>,
    /// Adam steps taken on each frame `1..T`.
    pub update_counter: Vec<usize>,
    /// Frame indices (into the full sequence) where the object was lost.
    pub lost_frames: Vec<usize>,
    pub records: Vec<FrameRecord>,
}

/// Options of a single sequence run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub adapt: bool,
    pub tta: bool,
    pub seed: u64,
}

/// Posteriors averaged over `n` augmented copies of `frame`, each mapped back
/// to the frame's geometry. Copy 0 is the unaugmented frame.
pub fn tta_forward<M: OnlineModel + ?Sized>(model: &mut M, frame: &RgbImage, n: usize, seed: u64) -> Result<Posteriors> {
    if n == 0 {
        return Err(Error::invalid("tta_forward", "need at least one variant"));
    }
    let (h, w) = frame.dims();
    let mut sum = vec![0.0; 2 * h * w];
    for k in 0..n {
        let p = if k == 0 {
            AugmentParams::IDENTITY
        } else {
            AugmentParams::sample(&mut rng::stream(seed, &[tag::TTA, k as u64]))
        };
        let post = model.posteriors(&augment_image(frame, &p))?;
        let bg = unwarp_plane(post.background(), h, w, &p);
        let fg = unwarp_plane(post.foreground(), h, w, &p);
        for (s, v) in sum.iter_mut().zip(bg.iter().chain(&fg)) {
            *s += v;
        }
    }
    let probs = sum.iter().map(|v| v / n as f64).collect();
    Ok(Posteriors::from_parts(h, w, probs))
}

fn forward<M: OnlineModel + ?Sized>(model: &mut M, frame: &RgbImage, tta: bool, n: usize, seed: u64) -> Result<Posteriors> {
    if tta {
        tta_forward(model, frame, n, seed)
    } else {
        model.posteriors(frame)
    }
}

/// Runs the online adaptation loop over `seq` (or the unadapted baseline
/// when `opts.adapt` is false). `model` should already be fine-tuned on the
/// first frame.
pub fn run_sequence<M: OnlineModel + ?Sized>(
    model: &mut M,
    seq: &VideoSequence,
    cfg: &AdaptationConfig,
    opts: &RunOptions,
) -> Result<SequenceResult> {
    cfg.validate()?;
    seq.validate()?;
    if seq.len() < 2 {
        return Err(Error::Sequence { name: seq.name.clone(), detail: "need at least two frames".into() });
    }
    let gt1 = &seq.gt_masks[0];
    let frame1 = &seq.frames[0];
    if gt1.dims() != frame1.dims() {
        return Err(Error::Sequence { name: seq.name.clone(), detail: "first-frame ground truth does not match".into() });
    }
    let (h, w) = seq.dims();
    let mut result = SequenceResult {
        name: seq.name.clone(),
        masks: Vec::with_capacity(seq.len() - 1),
        ious: Vec::with_capacity(seq.len() - 1),
        update_counter: Vec::with_capacity(seq.len() - 1),
        lost_frames: Vec::new(),
        records: Vec::with_capacity(seq.len() - 1),
    };
    if opts.adapt {
        model.reset_optimizer();
    }
    let mut lastmask = gt1.clone();
    for t in 1..seq.len() {
        let frame = &seq.frames[t];
        let tta_seed = rng::derive_seed(opts.seed, &[t as u64]);
        let empty = BinaryMask::empty(h, w);
        let (record, steps) = if !opts.adapt {
            let post = forward(model, frame, opts.tta, cfg.tta_variants, tta_seed)?;
            let mask = threshold(&post);
            (FrameRecord { positives: empty.clone(), negatives: empty, lastmask: mask, lost: false }, 0)
        } else {
            let eroded = erode(&lastmask, cfg.erosion_size)?;
            if eroded.is_empty() {
                // Lost object: no updates, plain threshold so it can be found again.
                let post = forward(model, frame, opts.tta, cfg.tta_variants, tta_seed)?;
                result.lost_frames.push(t);
                (FrameRecord { positives: empty.clone(), negatives: empty, lastmask: threshold(&post), lost: true }, 0)
            } else {
                let post = if cfg.tta_targets {
                    tta_forward(model, frame, cfg.tta_variants, tta_seed)?
                } else {
                    model.posteriors(frame)?
                };
                let targets = targets_from_eroded(&post, &eroded, cfg)?;
                let steps = adapt_on_frame(model, frame, frame1, gt1, &targets.labels, cfg, opts.seed, t)?;
                let post = forward(model, frame, opts.tta, cfg.tta_variants, tta_seed)?;
                let mask = threshold_minus_negatives(&post, &targets.negatives)?;
                (FrameRecord { positives: targets.positives, negatives: targets.negatives, lastmask: mask, lost: false }, steps)
            }
        };
        lastmask = record.lastmask.clone();
        result.ious.push(iou(&record.lastmask, &seq.gt_masks[t])?);
        result.masks.push(record.lastmask.clone());
        result.update_counter.push(steps);
        result.records.push(record);
    }
    Ok(result)
}

#[cfg(test)]
mod tests;
