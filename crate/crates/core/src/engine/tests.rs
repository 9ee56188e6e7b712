use super::*;
use crate::segnet::ArchConfig;
use crate::synth::{generate_sequence, Scenario, ScenarioKind};

/// Replays scripted foreground maps and records every training call.
struct Scripted {
    script: Vec<Posteriors>,
    forward_calls: usize,
    steps: Vec<(bool, f64, f64)>,
    current: RgbImage,
}

impl OnlineModel for Scripted {
    fn posteriors(&mut self, _frame: &RgbImage) -> Result<Posteriors> {
        let p = self.script[self.forward_calls % self.script.len()].clone();
        self.forward_calls += 1;
        Ok(p)
    }

    fn train_step(&mut self, image: &RgbImage, _labels: &LabelMap, cfg: &LossConfig, lr: f64) -> Result<f64> {
        // Current-frame steps see the current frame unchanged.
        self.steps.push((image == &self.current, cfg.loss_scale, lr));
        Ok(0.0)
    }
}

fn small_arch() -> ArchConfig {
    ArchConfig { widths: vec![4, 6, 8, 8], dilations: vec![2, 3], use_residual_block: true }
}

fn uniform(h: usize, w: usize, p: f64) -> Posteriors {
    Posteriors::from_foreground(h, w, vec![p; h * w]).unwrap()
}

fn square(h: usize, w: usize, y0: usize, x0: usize, s: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| (y0..y0 + s).contains(&y) && (x0..x0 + s).contains(&x))
}

#[test]
fn default_schedule_spreads_current_steps() {
    let cfg = AdaptationConfig::default();
    let current: Vec<usize> = (1..=15).filter(|&i| cfg.is_current_step(i)).collect();
    assert_eq!(current, vec![5, 10, 15]);
    let none = AdaptationConfig { n_curr: 0, ..AdaptationConfig::default() };
    assert!((1..=15).all(|i| !none.is_current_step(i)));
    let all = AdaptationConfig { n_curr: 15, ..AdaptationConfig::default() };
    assert!((1..=15).all(|i| all.is_current_step(i)));
    let nomix = AdaptationConfig { first_frame_mixing: false, ..AdaptationConfig::default() };
    assert!((1..=15).all(|i| nomix.is_current_step(i)));
}

#[test]
fn config_defaults_and_validation() {
    let cfg = AdaptationConfig::default();
    assert_eq!((cfg.alpha, cfg.beta, cfg.n_online, cfg.n_curr), (0.97, 0.05, 15, 3));
    assert_eq!((cfg.oneshot_steps, cfg.oneshot_lr, cfg.online_lr, cfg.erosion_size), (50, 3e-6, 1e-5, 15));
    assert!((cfg.distance(480, 854) - 220.0).abs() < 1e-9);
    cfg.validate().unwrap();
    for bad in [
        AdaptationConfig { alpha: 1.0, ..cfg.clone() },
        AdaptationConfig { beta: 0.0, ..cfg.clone() },
        AdaptationConfig { n_curr: 16, ..cfg.clone() },
        AdaptationConfig { erosion_size: 4, ..cfg.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn adapt_on_frame_default_mix() {
    let (h, w) = (16, 16);
    let frame1 = RgbImage::filled(h, w, [0.2, 0.4, 0.6]);
    let frame_t = RgbImage::filled(h, w, [0.7, 0.1, 0.3]);
    let gt1 = square(h, w, 4, 4, 6);
    let mut m = Scripted { script: vec![uniform(h, w, 0.5)], forward_calls: 0, steps: vec![], current: frame_t.clone() };
    let labels = LabelMap::from_mask(&gt1);
    let cfg = AdaptationConfig::default();
    let n = adapt_on_frame(&mut m, &frame_t, &frame1, &gt1, &labels, &cfg, 1, 3).unwrap();
    assert_eq!(n, 15);
    let current: Vec<_> = m.steps.iter().filter(|s| s.0).collect();
    assert_eq!(current.len(), 3);
    assert!(current.iter().all(|s| s.1 == 0.05 && s.2 == 1e-5));
    assert!(m.steps.iter().filter(|s| !s.0).all(|s| s.1 == 1.0));
    assert_eq!(m.forward_calls, 0);

    m.steps.clear();
    let rehearsal = AdaptationConfig { n_curr: 0, ..cfg.clone() };
    adapt_on_frame(&mut m, &frame_t, &frame1, &gt1, &labels, &rehearsal, 1, 3).unwrap();
    assert!(m.steps.iter().all(|s| !s.0) && m.steps.len() == 15);

    let dont_care = LabelMap::new(h, w, vec![crate::loss::Label::DontCare; h * w]).unwrap();
    assert_eq!(adapt_on_frame(&mut m, &frame_t, &frame1, &gt1, &dont_care, &cfg, 1, 3).unwrap(), 0);
}

#[test]
fn zero_step_schedules_leave_network_unchanged() {
    let seq = generate_sequence(&Scenario { frames: 3, ..Scenario::new(ScenarioKind::StaticControl, 2) }).unwrap();
    let net = NetworkState::init(&small_arch(), 1).unwrap();
    let mut copy = net.clone();
    let cfg = AdaptationConfig { n_online: 0, n_curr: 0, oneshot_steps: 0, ..AdaptationConfig::default() };
    let labels = LabelMap::from_mask(&seq.gt_masks[1]);
    adapt_on_frame(&mut copy, &seq.frames[1], &seq.frames[0], &seq.gt_masks[0], &labels, &cfg, 0, 1).unwrap();
    one_shot_finetune(&mut copy, &seq.frames[0], &seq.gt_masks[0], &cfg, 0).unwrap();
    let pcfg = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
    pretrain_objectness(&mut copy, &[(seq.frames[0].clone(), seq.gt_masks[0].clone())], &pcfg, 0).unwrap();
    pretrain_domain(&mut copy, std::slice::from_ref(&seq), &pcfg, 0).unwrap();
    assert_eq!(copy, net);
    assert!(matches!(pretrain_objectness(&mut copy, &[], &pcfg, 0), Err(Error::EmptyDataset(_))));
    assert!(one_shot_finetune(&mut copy, &seq.frames[0], &BinaryMask::empty(5, 5), &cfg, 0).is_err());
}

#[test]
fn baseline_run_leaves_network_bit_identical() {
    let seq = generate_sequence(&Scenario { frames: 4, ..Scenario::new(ScenarioKind::AppearanceDrift, 3) }).unwrap();
    let net = NetworkState::init(&small_arch(), 1).unwrap();
    let mut copy = net.clone();
    let opts = RunOptions { adapt: false, tta: false, seed: 5 };
    let res = run_sequence(&mut copy, &seq, &AdaptationConfig::default(), &opts).unwrap();
    assert_eq!(copy, net);
    assert_eq!(res.masks.len(), 3);
    assert_eq!(res.update_counter, vec![0, 0, 0]);
}

#[test]
fn targets_come_from_the_first_forward_and_output_from_the_second() {
    let (h, w) = (40, 40);
    let frames = vec![RgbImage::filled(h, w, [0.5; 3]); 3];
    let gt = square(h, w, 10, 10, 12);
    let seq = VideoSequence { name: "micro".into(), frames, gt_masks: vec![gt.clone(); 3], distractor_masks: None };
    // Calls alternate: pre-update map (confident square), post-update map.
    let pre = Posteriors::from_foreground(h, w, gt.bits().iter().map(|&b| if b { 0.99 } else { 0.01 }).collect()).unwrap();
    let post = uniform(h, w, 0.6);
    let cfg = AdaptationConfig { erosion_size: 3, d_rel: 0.1, ..AdaptationConfig::default() };
    let mut m = Scripted { script: vec![pre, post], forward_calls: 0, steps: vec![], current: seq.frames[1].clone() };
    let res = run_sequence(&mut m, &seq, &cfg, &RunOptions { adapt: true, tta: false, seed: 0 }).unwrap();
    assert_eq!(m.forward_calls, 4);
    for r in &res.records {
        assert_eq!(r.positives, erode(&gt, 1).unwrap().minus(&r.negatives).unwrap());
        assert!(r.positives.and(&r.negatives).unwrap().is_empty());
        // Output comes from the uniform 0.6 map minus negatives.
        assert_eq!(r.lastmask, BinaryMask::full(h, w).minus(&r.negatives).unwrap());
    }
    assert_eq!(res.update_counter, vec![15, 15]);
}

#[test]
fn lost_object_suspends_updates() {
    let (h, w) = (32, 32);
    let frames = vec![RgbImage::filled(h, w, [0.5; 3]); 4];
    let gt1 = square(h, w, 8, 8, 3);
    let seq = VideoSequence { name: "lost".into(), frames, gt_masks: vec![gt1; 4], distractor_masks: None };
    let mut m = Scripted { script: vec![uniform(h, w, 0.2)], forward_calls: 0, steps: vec![], current: seq.frames[1].clone() };
    let cfg = AdaptationConfig { erosion_size: 5, ..AdaptationConfig::default() };
    let res = run_sequence(&mut m, &seq, &cfg, &RunOptions { adapt: true, tta: false, seed: 0 }).unwrap();
    assert_eq!(res.lost_frames, vec![1, 2, 3]);
    assert_eq!(res.update_counter, vec![0, 0, 0]);
    assert!(m.steps.is_empty());
    assert_eq!(m.forward_calls, 3);
}

#[test]
fn build_targets_examples() {
    let (h, w) = (30, 30);
    let cfg = AdaptationConfig { erosion_size: 3, ..AdaptationConfig::default() };
    let t = build_targets(&uniform(h, w, 0.5), &square(h, w, 10, 10, 8), &cfg).unwrap();
    assert!(t.positives.is_empty());
    let t = build_targets(&uniform(h, w, 0.5), &BinaryMask::empty(h, w), &cfg).unwrap();
    assert_eq!(t.negatives.count(), h * w);
    assert!(build_targets(&uniform(h, w, 0.5), &BinaryMask::empty(h, w + 1), &cfg).is_err());
}

#[test]
fn tta_identity_sum_and_determinism() {
    let seq = generate_sequence(&Scenario { frames: 2, ..Scenario::new(ScenarioKind::StaticControl, 1) }).unwrap();
    let mut net = NetworkState::init(&small_arch(), 4).unwrap();
    for p in &mut net.params {
        p.data_mut().iter_mut().for_each(|v| *v *= 30.0);
    }
    let frame = &seq.frames[0];
    assert_eq!(tta_forward(&mut net, frame, 1, 3).unwrap(), net.posteriors(frame).unwrap());
    let a = tta_forward(&mut net, frame, 4, 3).unwrap();
    assert_eq!(a, tta_forward(&mut net, frame, 4, 3).unwrap());
    for (b, f) in a.background().iter().zip(a.foreground()) {
        assert!((b + f - 1.0).abs() < 1e-12);
    }
    assert!(tta_forward(&mut net, frame, 0, 3).is_err());
}

#[test]
fn one_shot_improves_first_frame() {
    let seq = generate_sequence(&Scenario { frames: 2, ..Scenario::new(ScenarioKind::StaticControl, 6) }).unwrap();
    let mut net = NetworkState::init(&ArchConfig::default(), 2).unwrap();
    let before = iou(&threshold(&net.posteriors(&seq.frames[0]).unwrap()), &seq.gt_masks[0]).unwrap();
    let cfg = AdaptationConfig { oneshot_steps: 60, oneshot_lr: 3e-3, ..AdaptationConfig::default() };
    one_shot_finetune(&mut net, &seq.frames[0], &seq.gt_masks[0], &cfg, 9).unwrap();
    let after = iou(&threshold(&net.posteriors(&seq.frames[0]).unwrap()), &seq.gt_masks[0]).unwrap();
    assert!(after > before + 0.4, "{before} -> {after}");
}

#[test]
fn current_step_without_signal_at_loss_resolution_is_skipped() {
    let (h, w) = (16, 16);
    let frame1 = RgbImage::filled(h, w, [0.2, 0.4, 0.6]);
    let frame_t = RgbImage::filled(h, w, [0.7, 0.1, 0.3]);
    let gt1 = square(h, w, 4, 4, 6);
    // A lone positive off every cell centre disappears when downsampled.
    let labels = LabelMap::from_selection(&square(h, w, 0, 0, 1), &BinaryMask::empty(h, w)).unwrap();
    assert_eq!(labels.labeled_count(), 1);
    assert_eq!(labels.downsample(8).labeled_count(), 0);
    let mut net = NetworkState::init(&small_arch(), 5).unwrap();
    let n = adapt_on_frame(&mut net, &frame_t, &frame1, &gt1, &labels, &AdaptationConfig::default(), 1, 2).unwrap();
    assert_eq!(n, 12);
    assert_eq!(net.adam.step_count, 12);
}
