//! Central finite-difference checks of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::image::RgbImage;
use crate::loss::{LabelMap, LossConfig};
use crate::segnet::NetworkState;
use crate::tensor::Tensor;

/// Step used for the central differences.
pub const EPSILON: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub max_relative_error: f64,
    pub entries_checked: usize,
}

impl CheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_relative_error = self.max_relative_error.max(relative_error(analytic, numeric));
        self.entries_checked += 1;
    }
}

/// Compares the tape gradient of the scalar built by `build` with respect to
/// every entry of every leaf.
pub fn check_leaves(leaves: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |ls: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ls.iter().map(|x| t.leaf(x.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).item())
    };
    let mut report = CheckReport::default();
    let mut work = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(vars[li]).expect("leaf requires grad");
        for i in 0..leaf.len() {
            let x = leaf.data()[i];
            work[li].data_mut()[i] = x + EPSILON;
            let plus = eval(&work)?;
            work[li].data_mut()[i] = x - EPSILON;
            let minus = eval(&work)?;
            work[li].data_mut()[i] = x;
            report.record(analytic.data()[i], (plus - minus) / (2.0 * EPSILON));
        }
    }
    Ok(report)
}

/// Checks the training-loss gradient of `net` on `(image, labels)` for the
/// parameter entries accepted by `select(param_index, entry_index)`.
pub fn check_network(
    net: &NetworkState,
    image: &RgbImage,
    labels: &LabelMap,
    cfg: &LossConfig,
    mut select: impl FnMut(usize, usize) -> bool,
) -> Result<CheckReport> {
    let (_, grads) = net.loss_and_gradients(image, labels, cfg)?;
    let mut work = net.clone();
    let mut report = CheckReport::default();
    for p in 0..net.params.len() {
        for i in 0..net.params[p].len() {
            if !select(p, i) {
                continue;
            }
            let x = net.params[p].data()[i];
            work.params[p].data_mut()[i] = x + EPSILON;
            let plus = work.loss_and_gradients(image, labels, cfg)?.0;
            work.params[p].data_mut()[i] = x - EPSILON;
            let minus = work.loss_and_gradients(image, labels, cfg)?.0;
            work.params[p].data_mut()[i] = x;
            report.record(grads[p].data()[i], (plus - minus) / (2.0 * EPSILON));
        }
    }
    Ok(report)
}
