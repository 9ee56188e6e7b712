//! Bootstrapped cross-entropy over ternary label maps.

use crate::autodiff::{cross_entropy2, Tape, Var};
use crate::error::{Error, Result};
use crate::maskops::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Negative,
    Positive,
    DontCare,
}

impl Label {
    fn class(self) -> Option<u8> {
        match self {
            Label::Negative => Some(0),
            Label::Positive => Some(1),
            Label::DontCare => None,
        }
    }
}

/// Per-pixel training target.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("LabelMap", format!("{height}x{width} needs {} labels", height * width)));
        }
        Ok(LabelMap { height, width, labels })
    }

    /// Fully supervised target: mask pixels positive, the rest negative.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        let labels = mask.bits().iter().map(|&b| if b { Label::Positive } else { Label::Negative }).collect();
        LabelMap { height: mask.height(), width: mask.width(), labels }
    }

    /// Online target: positives and negatives labeled, everything else
    /// don't-care. Positives win if the sets overlap.
    pub fn from_selection(positives: &BinaryMask, negatives: &BinaryMask) -> Result<Self> {
        if positives.dims() != negatives.dims() {
            return Err(Error::shape("LabelMap", "positives and negatives differ in size"));
        }
        let labels = positives
            .bits()
            .iter()
            .zip(negatives.bits())
            .map(|(&p, &n)| match (p, n) {
                (true, _) => Label::Positive,
                (false, true) => Label::Negative,
                _ => Label::DontCare,
            })
            .collect();
        Ok(LabelMap { height: positives.height(), width: positives.width(), labels })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| **l != Label::DontCare).count()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Nearest-neighbour subsampling by an integer factor: output pixel
    /// `(y, x)` takes the label at `(factor*y + factor/2, factor*x + factor/2)`,
    /// clamped to the map.
    pub fn downsample(&self, factor: usize) -> LabelMap {
        let (h, w) = (self.height.div_ceil(factor), self.width.div_ceil(factor));
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = (y * factor + factor / 2).min(self.height - 1);
            for x in 0..w {
                let sx = (x * factor + factor / 2).min(self.width - 1);
                labels.push(self.get(sy, sx));
            }
        }
        LabelMap { height: h, width: w, labels }
    }

    /// Pads bottom/right with don't-care up to `height x width`.
    pub fn pad_dont_care(&self, height: usize, width: usize) -> LabelMap {
        let mut labels = vec![Label::DontCare; height * width];
        for y in 0..self.height.min(height) {
            for x in 0..self.width.min(width) {
                labels[y * width + x] = self.get(y, x);
            }
        }
        LabelMap { height, width, labels }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Fraction of labeled pixels, hardest first, that enter the mean.
    pub hardest_fraction: f64,
    pub loss_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { hardest_fraction: 0.25, loss_scale: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hardest_fraction > 0.0 && self.hardest_fraction <= 1.0) {
            return Err(Error::invalid("LossConfig", format!("hardest_fraction {} not in (0, 1]", self.hardest_fraction)));
        }
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return Err(Error::invalid("LossConfig", format!("loss_scale {} must be positive", self.loss_scale)));
        }
        Ok(())
    }
}

/// Number of pixels kept out of `labeled`: `ceil(fraction * labeled)`, with
/// a 1e-9 slack so products like `0.1 * 30` do not round up spuriously.
pub fn hardest_count(fraction: f64, labeled: usize) -> usize {
    (((fraction * labeled as f64) - 1e-9).ceil() as usize).clamp(1, labeled.max(1))
}

/// Picks the `k` hardest labeled pixels of an `[N=1, 2, h, w]` logit map as
/// `(pixel index, class)`; ties keep row-major order.
pub fn select_hardest(logits: &[f64], labels: &LabelMap, fraction: f64) -> Result<Vec<(usize, u8)>> {
    let plane = labels.height * labels.width;
    if logits.len() != 2 * plane {
        return Err(Error::shape(
            "bootstrapped_ce",
            format!("logits hold {} values but labels are {}x{}", logits.len(), labels.height, labels.width),
        ));
    }
    let mut scored: Vec<(f64, usize, u8)> = labels
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.class().map(|c| (cross_entropy2(logits[i], logits[plane + i], c), i, c)))
        .collect();
    if scored.is_empty() {
        return Err(Error::NoTrainingSignal);
    }
    let k = hardest_count(fraction, scored.len());
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(scored.into_iter().map(|(_, i, c)| (i, c)).collect())
}

/// Mean cross-entropy over the hardest `cfg.hardest_fraction` of labeled
/// pixels, times `cfg.loss_scale`. Only selected pixels receive gradient.
pub fn bootstrapped_ce(tape: &mut Tape, logits: Var, labels: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let value = tape.value(logits);
    let [n, c, h, w] = value.dims4("bootstrapped_ce")?;
    if n != 1 || c != 2 || (h, w) != labels.dims() {
        return Err(Error::shape(
            "bootstrapped_ce",
            format!("logits {:?} do not match labels {}x{}", value.shape(), labels.height, labels.width),
        ));
    }
    let picks = select_hardest(value.data(), labels, cfg.hardest_fraction)?;
    let weight = cfg.loss_scale / picks.len() as f64;
    tape.picked_cross_entropy(logits, picks, weight)
}
