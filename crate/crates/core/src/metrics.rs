//! Region similarity (J) and contour accuracy (F) measures.

use std::fmt::Write as _;

use crate::engine::SequenceResult;
use crate::error::{Error, Result};
use crate::maskops::{iou, BinaryMask};
use crate::synth::VideoSequence;

/// Frames with IoU above this count towards recall.
pub const RECALL_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JStats {
    pub mean: f64,
    pub recall: f64,
    /// Mean of the first `ceil(T/4)` frames minus mean of the last `ceil(T/4)`.
    pub decay: f64,
}

pub fn j_stats(ious: &[f64]) -> Result<JStats> {
    if ious.is_empty() {
        return Err(Error::invalid("j_stats", "empty IoU list"));
    }
    let n = ious.len();
    let mean = ious.iter().sum::<f64>() / n as f64;
    let recall = ious.iter().filter(|&&j| j > RECALL_THRESHOLD).count() as f64 / n as f64;
    let q = n.div_ceil(4);
    let head = ious[..q].iter().sum::<f64>() / q as f64;
    let tail = ious[n - q..].iter().sum::<f64>() / q as f64;
    Ok(JStats { mean, recall, decay: head - tail })
}

/// Foreground pixels with at least one background 4-neighbour; outside the
/// image counts as background.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(h, w, |y, x| {
        mask.get(y, x)
            && (y == 0 || x == 0 || y + 1 == h || x + 1 == w || !mask.get(y - 1, x) || !mask.get(y + 1, x) || !mask.get(y, x - 1) || !mask.get(y, x + 1))
    })
}

/// `ceil(1%` of the image diagonal`)`.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.01 * (height as f64).hypot(width as f64)).ceil() as usize
}

/// Square dilation with half-width `r` (Chebyshev ball), done separably.
fn dilate(mask: &BinaryMask, r: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let rows = BinaryMask::from_fn(h, w, |y, x| (x.saturating_sub(r)..=(x + r).min(w - 1)).any(|xx| mask.get(y, xx)));
    BinaryMask::from_fn(h, w, |y, x| (y.saturating_sub(r)..=(y + r).min(h - 1)).any(|yy| rows.get(yy, x)))
}

/// Contour accuracy: harmonic mean of boundary precision and recall, where a
/// boundary pixel matches if one of the other boundary's pixels lies within
/// Chebyshev distance `tol`.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("boundary_f", format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (np, ng) = (bp.count(), bg.count());
    match (np, ng) {
        (0, 0) => return Ok(if pred == gt { 1.0 } else { 0.0 }),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let precision = bp.and(&dilate(&bg, tol))?.count() as f64 / np as f64;
    let recall = bg.and(&dilate(&bp, tol))?.count() as f64 / ng as f64;
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMetrics {
    pub name: String,
    pub frames: usize,
    pub j_mean: f64,
    pub j_recall: f64,
    pub j_decay: f64,
    pub f_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Sorted by name.
    pub sequences: Vec<SequenceMetrics>,
    pub j_mean: f64,
    pub j_recall: f64,
    pub j_decay: f64,
    pub f_mean: f64,
    pub config_fingerprint: u64,
    pub seed: u64,
}

/// Scores predicted masks against ground truth frame by frame.
pub fn evaluate_masks(name: &str, preds: &[BinaryMask], gts: &[BinaryMask], tol: Option<usize>) -> Result<SequenceMetrics> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Sequence {
            name: name.into(),
            detail: format!("{} predicted masks for {} ground-truth frames", preds.len(), gts.len()),
        });
    }
    let mut ious = Vec::with_capacity(preds.len());
    let mut f_sum = 0.0;
    for (t, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.dims() != g.dims() {
            return Err(Error::Sequence { name: name.into(), detail: format!("frame {t}: mask is {:?}, ground truth {:?}", p.dims(), g.dims()) });
        }
        ious.push(iou(p, g)?);
        f_sum += boundary_f(p, g, tol.unwrap_or_else(|| default_tolerance(g.height(), g.width())))?;
    }
    let j = j_stats(&ious)?;
    Ok(SequenceMetrics {
        name: name.into(),
        frames: preds.len(),
        j_mean: j.mean,
        j_recall: j.recall,
        j_decay: j.decay,
        f_mean: f_sum / preds.len() as f64,
    })
}

impl MetricsReport {
    /// Aggregates are unweighted means over sequences.
    pub fn from_sequences(mut sequences: Vec<SequenceMetrics>, config_fingerprint: u64, seed: u64) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyDataset("MetricsReport"));
        }
        sequences.sort_by(|a, b| a.name.cmp(&b.name));
        let n = sequences.len() as f64;
        let avg = |f: fn(&SequenceMetrics) -> f64| sequences.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            j_mean: avg(|s| s.j_mean),
            j_recall: avg(|s| s.j_recall),
            j_decay: avg(|s| s.j_decay),
            f_mean: avg(|s| s.f_mean),
            sequences,
            config_fingerprint,
            seed,
        })
    }

    pub const CSV_HEADER: &'static str = "sequence,frames,j_mean,j_recall,j_decay,f_mean,seed,config";

    /// One row per sequence plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let tail = format!("{},{:016x}", self.seed, self.config_fingerprint);
        for s in &self.sequences {
            let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6},{:.6},{tail}", s.name, s.frames, s.j_mean, s.j_recall, s.j_decay, s.f_mean);
        }
        let frames: usize = self.sequences.iter().map(|s| s.frames).sum();
        let _ = writeln!(out, "mean,{frames},{:.6},{:.6},{:.6},{:.6},{tail}", self.j_mean, self.j_recall, self.j_decay, self.f_mean);
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.sequences.iter().map(|s| s.name.len()).max().unwrap_or(0).max(8);
        let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>7}  {:>6}\n", "sequence", "J", "J-rec", "J-decay", "F");
        let mut row = |name: &str, j: f64, r: f64, d: f64, f: f64| {
            let _ = writeln!(out, "{name:<width$}  {j:>6.3}  {r:>6.3}  {d:>7.3}  {f:>6.3}");
        };
        for s in &self.sequences {
            row(&s.name, s.j_mean, s.j_recall, s.j_decay, s.f_mean);
        }
        row("mean", self.j_mean, self.j_recall, self.j_decay, self.f_mean);
        out
    }
}

/// Builds a report from engine output. Each result must pair with the
/// ground-truth sequence of the same name and cover frames `1..T`.
pub fn evaluate_run(
    results: &[SequenceResult],
    gts: &[VideoSequence],
    tol: Option<usize>,
    config_fingerprint: u64,
    seed: u64,
) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        let seq = gts
            .iter()
            .find(|s| s.name == r.name)
            .ok_or_else(|| Error::Sequence { name: r.name.clone(), detail: "no ground truth with this name".into() })?;
        if r.masks.len() + 1 != seq.len() {
            return Err(Error::Sequence {
                name: r.name.clone(),
                detail: format!("{} output masks for a {}-frame sequence", r.masks.len(), seq.len()),
            });
        }
        rows.push(evaluate_masks(&r.name, &r.masks, &seq.gt_masks[1..], tol)?);
    }
    MetricsReport::from_sequences(rows, config_fingerprint, seed)
}

/// Predicted-foreground pixels inside the distractor region, summed over
/// frames. `masks` and `distractors` are aligned frame by frame.
pub fn distractor_false_positives(masks: &[BinaryMask], distractors: &[BinaryMask]) -> Result<usize> {
    if masks.len() != distractors.len() {
        return Err(Error::shape("distractor_false_positives", format!("{} masks vs {} distractor masks", masks.len(), distractors.len())));
    }
    masks.iter().zip(distractors).map(|(m, d)| Ok(m.and(d)?.count())).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| (y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x))
    }

    /// Pairwise search over boundary pixels.
    fn brute_boundary_f(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> f64 {
        let pts = |m: &BinaryMask| {
            let (h, w) = m.dims();
            let mut v = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    let inside = |yy: isize, xx: isize| yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && m.get(yy as usize, xx as usize);
                    let (yi, xi) = (y as isize, x as isize);
                    if m.get(y, x) && !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1)) {
                        v.push((yi, xi));
                    }
                }
            }
            v
        };
        let (a, b) = (pts(pred), pts(gt));
        if a.is_empty() && b.is_empty() {
            return if pred == gt { 1.0 } else { 0.0 };
        }
        if a.is_empty() || b.is_empty() {
            return 0.0;
        }
        let hit = |p: &(isize, isize), q: &[(isize, isize)]| q.iter().any(|o| (p.0 - o.0).abs().max((p.1 - o.1).abs()) <= tol as isize);
        let prec = a.iter().filter(|p| hit(p, &b)).count() as f64 / a.len() as f64;
        let rec = b.iter().filter(|p| hit(p, &a)).count() as f64 / b.len() as f64;
        if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        }
    }

    #[test]
    fn j_stats_examples() {
        let j = j_stats(&[0.8; 7]).unwrap();
        assert!((j.mean - 0.8).abs() < 1e-15 && j.recall == 1.0 && j.decay.abs() < 1e-15);
        assert_eq!(j_stats(&[0.4; 5]).unwrap().recall, 0.0);
        let j = j_stats(&[0.9, 0.8, 0.7, 0.6]).unwrap();
        assert!((j.decay - 0.3).abs() < 1e-12);
        // T = 5 -> quartile of 2 frames.
        let j = j_stats(&[1.0, 0.8, 0.5, 0.2, 0.0]).unwrap();
        assert!((j.decay - 0.8).abs() < 1e-12);
        assert!((j.recall - 0.4).abs() < 1e-15);
        assert!(j_stats(&[]).is_err());
    }

    #[test]
    fn distractor_overlap_counts() {
        let d = vec![rect(10, 10, 0, 0, 4, 4), BinaryMask::empty(10, 10)];
        let m = vec![rect(10, 10, 2, 2, 4, 4), BinaryMask::full(10, 10)];
        assert_eq!(distractor_false_positives(&m, &d).unwrap(), 4);
        assert!(distractor_false_positives(&m[..1], &d).is_err());
    }

    #[test]
    fn reversing_flips_decay() {
        let ious = [0.9, 0.1, 0.75, 0.3, 0.6, 0.2, 0.45];
        let rev: Vec<f64> = ious.iter().rev().copied().collect();
        let (a, b) = (j_stats(&ious).unwrap(), j_stats(&rev).unwrap());
        assert!((a.decay + b.decay).abs() < 1e-12);
        assert!((a.mean - b.mean).abs() < 1e-12);
    }

    #[test]
    fn boundary_extraction() {
        let b = boundary(&rect(20, 20, 5, 5, 10, 10));
        assert_eq!(b.count(), 36);
        assert_eq!(boundary(&BinaryMask::full(4, 5)).count(), 14);
        assert_eq!(boundary(&rect(9, 9, 4, 4, 1, 1)).count(), 1);
    }

    #[test]
    fn boundary_f_examples() {
        let sq = rect(20, 20, 5, 5, 10, 10);
        assert_eq!(boundary_f(&sq, &sq, 0).unwrap(), 1.0);
        assert_eq!(boundary_f(&BinaryMask::empty(20, 20), &sq, 3).unwrap(), 0.0);
        assert_eq!(boundary_f(&BinaryMask::empty(20, 20), &BinaryMask::empty(20, 20), 0).unwrap(), 1.0);
        let shifted = rect(20, 20, 5, 6, 10, 10);
        assert_eq!(boundary_f(&sq, &shifted, 1).unwrap(), 1.0);
        // 18 of the 36 ring pixels coincide in each direction.
        assert_eq!(boundary_f(&sq, &shifted, 0).unwrap(), 0.5);
        assert!(boundary_f(&sq, &BinaryMask::empty(20, 21), 1).is_err());
        assert_eq!(default_tolerance(96, 96), 2);
        assert_eq!(default_tolerance(480, 854), 10);
    }

    /// Twenty mixed cases: empty, full, nested, disjoint, border-touching,
    /// single-pixel, shifted and irregular masks.
    fn regression_pairs() -> Vec<(BinaryMask, BinaryMask, usize)> {
        let (h, w) = (24, 28);
        let blob = |cy: f64, cx: f64, r: f64| BinaryMask::from_fn(h, w, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r);
        let checker = BinaryMask::from_fn(h, w, |y, x| (y / 3 + x / 3) % 2 == 0);
        let ring = BinaryMask::from_fn(h, w, |y, x| {
            let d = (y as f64 - 12.0).hypot(x as f64 - 14.0);
            (4.0..8.0).contains(&d)
        });
        vec![
            (rect(h, w, 2, 2, 8, 8), rect(h, w, 2, 2, 8, 8), 0),
            (BinaryMask::empty(h, w), BinaryMask::empty(h, w), 0),
            (BinaryMask::empty(h, w), rect(h, w, 4, 4, 3, 3), 2),
            (BinaryMask::full(h, w), BinaryMask::full(h, w), 0),
            (BinaryMask::full(h, w), rect(h, w, 0, 0, 24, 27), 0),
            (BinaryMask::full(h, w), rect(h, w, 1, 1, 22, 26), 1),
            (rect(h, w, 2, 2, 6, 6), rect(h, w, 14, 16, 6, 6), 3),
            (rect(h, w, 2, 2, 6, 6), rect(h, w, 8, 2, 6, 6), 0),
            (rect(h, w, 2, 2, 6, 6), rect(h, w, 8, 2, 6, 6), 1),
            (rect(h, w, 5, 5, 12, 12), rect(h, w, 8, 8, 6, 6), 2),
            (rect(h, w, 5, 5, 12, 12), rect(h, w, 8, 8, 6, 6), 3),
            (rect(h, w, 0, 0, 5, 5), rect(h, w, 0, 0, 6, 6), 0),
            (rect(h, w, 10, 10, 1, 1), rect(h, w, 11, 11, 1, 1), 0),
            (rect(h, w, 10, 10, 1, 1), rect(h, w, 11, 11, 1, 1), 1),
            (blob(12.0, 14.0, 7.0), blob(12.5, 13.0, 6.5), 0),
            (blob(12.0, 14.0, 7.0), blob(12.5, 13.0, 6.5), 1),
            (blob(6.0, 6.0, 5.0), blob(17.0, 21.0, 5.0), 2),
            (checker.clone(), rect(h, w, 3, 3, 12, 12), 1),
            (ring.clone(), blob(12.0, 14.0, 8.0), 1),
            (ring, checker, 0),
        ]
    }

    #[test]
    fn regression_suite_matches_brute_force() {
        let pairs = regression_pairs();
        assert_eq!(pairs.len(), 20);
        for (i, (p, g, tol)) in pairs.iter().enumerate() {
            let fast = boundary_f(p, g, *tol).unwrap();
            let slow = brute_boundary_f(p, g, *tol);
            assert!((fast - slow).abs() < 1e-12, "pair {i}: {fast} vs {slow}");
            assert_eq!(fast, boundary_f(g, p, *tol).unwrap(), "pair {i} not symmetric");
            assert!((0.0..=1.0).contains(&fast));
        }
    }

    #[test]
    fn regression_suite_frozen_values() {
        let pairs = regression_pairs();
        let f: Vec<f64> = pairs.iter().map(|(p, g, t)| boundary_f(p, g, *t).unwrap()).collect();
        let j: Vec<f64> = pairs.iter().map(|(p, g, _)| iou(p, g).unwrap()).collect();
        // Hand-counted cases.
        assert_eq!(f[0], 1.0);
        assert_eq!(f[1], 1.0);
        assert_eq!(f[2], 0.0);
        assert_eq!(f[3], 1.0);
        assert_eq!(f[6], 0.0);
        // Touching squares, tol 1: only the two facing 6-pixel edges match.
        assert!((f[8] - 0.3).abs() < 1e-15);
        assert_eq!(f[12], 0.0);
        assert_eq!(f[13], 1.0);
        assert_eq!(j[1], 1.0);
        assert_eq!(j[4], 648.0 / 672.0);
        assert_eq!(j[9], 36.0 / 144.0);
        assert_eq!(j[11], 25.0 / 36.0);
        assert_eq!(j[12], 0.0);
        // Touching 6x6 squares, tol 0: the shared edge rows are distinct
        // pixels, so nothing matches.
        assert_eq!(f[7], 0.0);
        // Nested 12x12 / 6x6 squares are 3 px apart.
        assert_eq!(f[9], 0.0);
        assert_eq!(f[10], 1.0);
        // 5x5 vs 6x6 at the corner, tol 0: top row 5 + left column 4 of the
        // small ring coincide with the large ring (9/16 and 9/20 matched).
        let (p, r) = (9.0 / 16.0, 9.0 / 20.0);
        assert!((f[11] - 2.0 * p * r / (p + r)).abs() < 1e-15);
    }

    fn result(name: &str, masks: Vec<BinaryMask>) -> SequenceResult {
        SequenceResult {
            name: name.into(),
            ious: vec![],
            update_counter: vec![0; masks.len()],
            lost_frames: vec![],
            records: vec![],
            masks,
        }
    }

    fn gt_seq(name: &str, masks: Vec<BinaryMask>) -> VideoSequence {
        let frames = masks.iter().map(|m| crate::image::RgbImage::filled(m.height(), m.width(), [0.0; 3])).collect();
        VideoSequence { name: name.into(), frames, gt_masks: masks, distractor_masks: None }
    }

    #[test]
    fn evaluate_run_perfect_and_aggregate() {
        let m = rect(16, 16, 4, 4, 6, 6);
        let gts = vec![gt_seq("b", vec![m.clone(); 4]), gt_seq("a", vec![m.clone(); 3])];
        let half = rect(16, 16, 4, 4, 3, 6);
        let results = vec![result("b", vec![m.clone(); 3]), result("a", vec![half.clone(), half])];
        let rep = evaluate_run(&results, &gts, Some(1), 7, 9).unwrap();
        assert_eq!(rep.sequences[0].name, "a");
        let b = &rep.sequences[1];
        assert_eq!((b.j_mean, b.j_recall, b.j_decay, b.f_mean), (1.0, 1.0, 0.0, 1.0));
        let a = &rep.sequences[0];
        assert_eq!(a.j_mean, 0.5);
        assert_eq!(a.j_recall, 0.0);
        assert_eq!(rep.j_mean, (a.j_mean + b.j_mean) / 2.0);
        assert_eq!(rep.f_mean, (a.f_mean + b.f_mean) / 2.0);
        assert_eq!(rep.to_csv(), evaluate_run(&results, &gts, Some(1), 7, 9).unwrap().to_csv());
        let csv = rep.to_csv();
        assert!(csv.starts_with(MetricsReport::CSV_HEADER));
        assert!(csv.lines().nth(2).unwrap().starts_with("b,3,1.000000,1.000000,0.000000,1.000000,9,0000000000000007"));
        assert!(csv.lines().last().unwrap().starts_with("mean,5,0.750000"));
        assert!(rep.to_table().lines().count() == 4);
    }

    #[test]
    fn evaluate_run_misalignment_names_sequence() {
        let m = rect(16, 16, 4, 4, 6, 6);
        let gts = vec![gt_seq("s1", vec![m.clone(); 4])];
        let err = evaluate_run(&[result("s1", vec![m.clone(); 2])], &gts, None, 0, 0).unwrap_err();
        assert!(err.to_string().contains("s1"));
        let err = evaluate_run(&[result("zz", vec![m; 3])], &gts, None, 0, 0).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }
}
