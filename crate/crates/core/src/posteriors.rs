use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel two-class posteriors at image resolution, `[1, 2, H, W]`;
/// channel 1 is the foreground probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Posteriors {
    height: usize,
    width: usize,
    /// Channel 0 followed by channel 1.
    probs: Vec<f64>,
}

impl Posteriors {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.dims4("Posteriors")?;
        if n != 1 || c != 2 {
            return Err(Error::shape("Posteriors", format!("expected [1, 2, H, W], got {:?}", t.shape())));
        }
        Ok(Posteriors { height: h, width: w, probs: t.data().to_vec() })
    }

    /// Builds posteriors from a foreground probability map; background is
    /// `1 - p`.
    pub fn from_foreground(height: usize, width: usize, fg: Vec<f64>) -> Result<Self> {
        if fg.len() != height * width {
            return Err(Error::shape("Posteriors", format!("{height}x{width} needs {} values", height * width)));
        }
        if fg.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("Posteriors", "probabilities must lie in [0, 1]"));
        }
        let mut probs: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
        probs.extend(fg);
        Ok(Posteriors { height, width, probs })
    }

    pub(crate) fn from_parts(height: usize, width: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), 2 * height * width);
        Posteriors { height, width, probs }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn background(&self) -> &[f64] {
        &self.probs[..self.height * self.width]
    }

    pub fn foreground(&self) -> &[f64] {
        &self.probs[self.height * self.width..]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 2, self.height, self.width], self.probs.clone()).expect("consistent dims")
    }
}
