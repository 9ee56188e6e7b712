//! Compact fully-convolutional two-class segmentation network.
//!
//! Three stride-2 3x3 convolutions bring the input down by exactly 8 in each
//! dimension; dilated 3x3 convolutions (the last pair optionally wrapped in a
//! residual block) grow the receptive field without further subsampling; a
//! 1x1 head produces two-class logits. Posteriors are the softmax of the
//! logits, bilinearly upsampled by 8 back to the input resolution.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::loss::{bootstrapped_ce, LabelMap, LossConfig};
use crate::optim::AdamState;
use crate::posteriors::Posteriors;
use crate::rng;
use crate::tensor::Tensor;

/// Total spatial subsampling of the network.
pub const DOWNSAMPLE: usize = 8;

/// Standard deviation of the Gaussian output-head initialisation. Hidden
/// layers use He scaling, `sqrt(2 / fan_in)`.
pub const INIT_STD: f64 = 0.01;

fn init_std(layer: &LayerDef) -> f64 {
    if layer.name == "head" {
        INIT_STD
    } else {
        (2.0 / (layer.c_in * layer.kernel * layer.kernel) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    /// Output channels of the three stride-2 stages followed by the width of
    /// the dilated stage.
    pub widths: Vec<usize>,
    /// One dilated convolution per entry; with `use_residual_block` the last
    /// entry instead becomes a two-convolution residual block.
    pub dilations: Vec<usize>,
    pub use_residual_block: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { widths: vec![16, 24, 32, 48], dilations: vec![2, 4], use_residual_block: true }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 || self.widths.contains(&0) {
            return Err(Error::invalid(
                "ArchConfig",
                format!("need four positive widths (three stride-2 stages + dilated stage), got {:?}", self.widths),
            ));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::invalid("ArchConfig", format!("dilations must be non-empty and >= 1, got {:?}", self.dilations)));
        }
        if self.use_residual_block && self.dilations.len() < 2 {
            return Err(Error::invalid("ArchConfig", "a residual block needs at least two dilation entries"));
        }
        Ok(())
    }

    /// Layer list in execution order.
    pub fn layers(&self) -> Vec<LayerDef> {
        let mut layers = Vec::new();
        let mut c_in = 3;
        for (i, &w) in self.widths[..3].iter().enumerate() {
            layers.push(LayerDef { name: format!("stage{}", i + 1), c_in, c_out: w, kernel: 3, stride: 2, dilation: 1 });
            c_in = w;
        }
        let w = self.widths[3];
        let plain = if self.use_residual_block { self.dilations.len() - 1 } else { self.dilations.len() };
        for (i, &d) in self.dilations[..plain].iter().enumerate() {
            layers.push(LayerDef { name: format!("dilated{}", i + 1), c_in, c_out: w, kernel: 3, stride: 1, dilation: d });
            c_in = w;
        }
        if self.use_residual_block {
            let d = *self.dilations.last().unwrap();
            for part in ["a", "b"] {
                layers.push(LayerDef { name: format!("residual.{part}"), c_in: w, c_out: w, kernel: 3, stride: 1, dilation: d });
            }
            c_in = w;
        }
        layers.push(LayerDef { name: "head".into(), c_in, c_out: 2, kernel: 1, stride: 1, dilation: 1 });
        layers
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDef {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

/// Network parameters with their Adam moments; the checkpointable unit.
///
/// Parameters are stored as `[weight, bias]` pairs in layer order and named
/// `<layer>.weight` / `<layer>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub arch: ArchConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub adam: AdamState,
    pub rng_seed: u64,
}

/// Tape handles produced by one recorded forward pass.
#[derive(Debug)]
pub struct RecordedForward {
    pub params: Vec<Var>,
    /// Output of each layer, in layer order (the last entry is the logits).
    pub activations: Vec<Var>,
    pub logits: Var,
}

impl NetworkState {
    /// Gaussian weights, zero biases, zeroed moments.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for l in arch.layers() {
            let normal = Normal::new(0.0, init_std(&l)).expect("valid std");
            let shape = [l.c_out, l.c_in, l.kernel, l.kernel];
            let n = shape.iter().product();
            let w: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            names.push(format!("{}.weight", l.name));
            params.push(Tensor::new(shape.to_vec(), w)?);
            names.push(format!("{}.bias", l.name));
            params.push(Tensor::zeros(&[l.c_out]));
        }
        let adam = AdamState::zeros_like(&params);
        Ok(NetworkState { arch: arch.clone(), names, params, adam, rng_seed: seed })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    fn head_indices(&self) -> (usize, usize) {
        let n = self.params.len();
        (n - 2, n - 1)
    }

    /// Re-initialises the output head from `seed`; other parameters and
    /// their moments are untouched, head moments are zeroed.
    pub fn replace_output_head(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, &[rng::tag::HEAD]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let (wi, bi) = self.head_indices();
        for v in self.params[wi].data_mut() {
            *v = normal.sample(&mut rng);
        }
        self.params[bi].data_mut().fill(0.0);
        for i in [wi, bi] {
            self.adam.m[i].data_mut().fill(0.0);
            self.adam.v[i].data_mut().fill(0.0);
        }
    }

    /// Records the logit computation for an `[1, 3, H, W]` input.
    pub fn record(&self, tape: &mut Tape, input: Var, requires_grad: bool) -> Result<RecordedForward> {
        let [_, c, h, w] = tape.value(input).dims4("forward")?;
        if c != 3 {
            return Err(Error::shape("forward", format!("expected 3 input channels, got {c}")));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::shape(
                "forward",
                format!("input {h}x{w} must be divisible by {DOWNSAMPLE}; pad it first"),
            ));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.requires_grad = requires_grad;
                tape.leaf(t)
            })
            .collect();
        let layers = self.arch.layers();
        let mut activations = Vec::with_capacity(layers.len());
        let mut x = input;
        let mut skip = None;
        for (i, l) in layers.iter().enumerate() {
            let (wv, bv) = (params[2 * i], params[2 * i + 1]);
            let y = tape.conv2d(x, wv, bv, l.stride, l.dilation)?;
            x = match l.name.as_str() {
                "head" => y,
                "residual.a" => {
                    skip = Some(x);
                    tape.relu(y)?
                }
                "residual.b" => {
                    let sum = tape.add(y, skip.take().expect("residual.a precedes residual.b"))?;
                    tape.relu(sum)?
                }
                _ => tape.relu(y)?,
            };
            activations.push(x);
        }
        Ok(RecordedForward { params, activations, logits: x })
    }

    /// Posteriors for an `[1, 3, H, W]` input with `H`, `W` divisible by 8.
    pub fn forward(&self, image: &Tensor) -> Result<Posteriors> {
        let mut tape = Tape::new();
        let input = tape.leaf(image.clone());
        let rec = self.record(&mut tape, input, false)?;
        let probs = tape.softmax2(rec.logits)?;
        let up = tape.bilinear_upsample(probs, DOWNSAMPLE)?;
        Posteriors::from_tensor(tape.value(up))
    }

    /// Posteriors for an image of any size: reflect-padded to a multiple of
    /// 8, then cropped back.
    pub fn posteriors(&self, image: &RgbImage) -> Result<Posteriors> {
        let (h, w) = image.dims();
        let (ph, pw) = (h.next_multiple_of(DOWNSAMPLE), w.next_multiple_of(DOWNSAMPLE));
        if (ph, pw) == (h, w) {
            return self.forward(&image.to_input_tensor());
        }
        let full = self.forward(&image.reflect_pad(ph, pw).to_input_tensor())?;
        let mut probs = Vec::with_capacity(2 * h * w);
        for c in 0..2 {
            for y in 0..h {
                probs.extend_from_slice(&full.probs()[(c * ph + y) * pw..][..w]);
            }
        }
        Ok(Posteriors::from_parts(h, w, probs))
    }

    /// Loss and parameter gradients for one image/target pair. The loss is
    /// taken on the `H/8 x W/8` logits against nearest-subsampled labels.
    pub fn loss_and_gradients(&self, image: &RgbImage, labels: &LabelMap, cfg: &LossConfig) -> Result<(f64, Vec<Tensor>)> {
        if image.dims() != labels.dims() {
            return Err(Error::shape(
                "train_step",
                format!("image {:?} vs labels {:?}", image.dims(), labels.dims()),
            ));
        }
        let (h, w) = image.dims();
        let (ph, pw) = (h.next_multiple_of(DOWNSAMPLE), w.next_multiple_of(DOWNSAMPLE));
        let (input, labels) = if (ph, pw) == (h, w) {
            (image.to_input_tensor(), labels.downsample(DOWNSAMPLE))
        } else {
            (image.reflect_pad(ph, pw).to_input_tensor(), labels.pad_dont_care(ph, pw).downsample(DOWNSAMPLE))
        };
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let rec = self.record(&mut tape, x, true)?;
        let loss = bootstrapped_ce(&mut tape, rec.logits, &labels, cfg)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let g = rec.params.iter().map(|&p| grads.take(p).expect("parameters require grad")).collect();
        Ok((value, g))
    }

    pub fn adam_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        self.adam.step(&mut self.params, grads, lr)
    }

    /// One Adam step on `(image, labels)`; returns the loss before the step.
    pub fn train_step(&mut self, image: &RgbImage, labels: &LabelMap, cfg: &LossConfig, lr: f64) -> Result<f64> {
        let (loss, grads) = self.loss_and_gradients(image, labels, cfg)?;
        self.adam_step(&grads, lr)?;
        Ok(loss)
    }
}
