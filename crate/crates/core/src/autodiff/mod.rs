//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Ops append a
//! node whose inputs all have smaller indices, so walking the nodes in
//! reverse visits each op once and only after all of its consumers.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Upsample { input: Var, factor: usize },
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    Add(Var, Var),
    Softmax2(Var),
    Sum(Var),
    Reshape(Var),
    /// Weighted sum of per-pixel two-class cross-entropies over `picks`
    /// (flat `n*h*w` pixel index, target class).
    PickedCrossEntropy { logits: Var, picks: Vec<(usize, u8)>, weight: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if it did not require one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Its gradient is reported iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad;
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        value.check_finite(op_name)?;
        Ok(self.push(value, op, needs_grad))
    }

    /// Zero-padded, dilated cross-correlation. `input` is `[N,C,H,W]`,
    /// `kernel` is `[K,C,kh,kw]` with odd spatial size, `bias` is `[K]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, dilation: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        let b = self.value(bias);
        let xd = x.dims4("conv2d")?;
        let wd = w.dims4("conv2d")?;
        if b.rank() != 1 {
            return Err(Error::shape("conv2d", format!("bias must be rank 1, got shape {:?}", b.shape())));
        }
        let geom = ConvGeom::new(xd, wd, b.len(), stride, dilation)?;
        let out = kernels::conv2d_forward(x.data(), w.data(), b.data(), &geom);
        let value = Tensor::new(vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w], out)?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        self.record("conv2d", value, Op::Conv2d { input, kernel, bias, geom }, needs)
    }

    /// Bilinear upsampling by an integer factor, half-pixel centers.
    pub fn bilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("bilinear_upsample", "factor must be >= 1"));
        }
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("bilinear_upsample")?;
        if h == 0 || w == 0 {
            return Err(Error::shape("bilinear_upsample", "empty spatial extent"));
        }
        let out = kernels::upsample_forward(x.data(), [n, c, h, w], factor);
        let value = Tensor::new(vec![n, c, h * factor, w * factor], out)?;
        let needs = self.needs(input);
        self.record("bilinear_upsample", value, Op::Upsample { input, factor }, needs)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(input);
        self.record("relu", value, Op::Relu(input), needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(input);
        self.record("sigmoid", value, Op::Sigmoid(input), needs)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(input);
        self.record("scale", value, Op::Scale(input, factor), needs)
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let bc = Broadcast::new(ta.shape(), tb.shape())?;
        let (da, db) = (ta.data(), tb.data());
        let data = (0..bc.len()).map(|i| {
            let (ia, ib) = bc.source_indices(i);
            da[ia] + db[ib]
        });
        let value = Tensor::new(bc.out_shape.clone(), data.collect())?;
        let needs = self.needs(a) || self.needs(b);
        self.record("add", value, Op::Add(a, b), needs)
    }

    /// Two-class softmax over the channel axis of an `[N,2,H,W]` tensor.
    pub fn softmax2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("softmax2")?;
        if c != 2 {
            return Err(Error::shape("softmax2", format!("expected exactly 2 channels, got {c}")));
        }
        let plane = h * w;
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            let base = b * 2 * plane;
            for p in 0..plane {
                let (p0, p1) = softmax_pair(src[base + p], src[base + plane + p]);
                out[base + p] = p0;
                out[base + plane + p] = p1;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.needs(input);
        self.record("softmax2", value, Op::Softmax2(input), needs)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::new(shape, x.data().to_vec())
            .map_err(|_| Error::shape("reshape", format!("cannot view {:?} as a different element count", x.shape())))?;
        let needs = self.needs(input);
        self.record("reshape", value, Op::Reshape(input), needs)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().sum();
        let needs = self.needs(input);
        self.record("sum", Tensor::scalar(total), Op::Sum(input), needs)
    }

    /// `weight * Σ CE(softmax(logits[pixel]), class)` over `picks`; the
    /// loss functions build on this.
    pub(crate) fn picked_cross_entropy(&mut self, logits: Var, picks: Vec<(usize, u8)>, weight: f64) -> Result<Var> {
        let x = self.value(logits);
        let [n, c, h, w] = x.dims4("cross_entropy")?;
        if c != 2 {
            return Err(Error::shape("cross_entropy", format!("expected exactly 2 channels, got {c}")));
        }
        let plane = h * w;
        let src = x.data();
        let mut total = 0.0;
        for &(pix, class) in &picks {
            if pix >= n * plane || class > 1 {
                return Err(Error::invalid("cross_entropy", format!("pick ({pix}, {class}) out of range")));
            }
            let base = (pix / plane) * 2 * plane + pix % plane;
            total += cross_entropy2(src[base], src[base + plane], class);
        }
        let needs = self.needs(logits);
        self.record(
            "cross_entropy",
            Tensor::scalar(weight * total),
            Op::PickedCrossEntropy { logits, picks, weight },
            needs,
        )
    }

    /// Reverse pass from the scalar `loss`. Consumes the tape; gradients
    /// of leaves used several times are summed.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Tape { nodes } = self;
        if loss.0 >= nodes.len() {
            return Err(Error::invalid("backward", "loss is not on this tape"));
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, contrib: Vec<f64>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::Conv2d { input, kernel, bias, geom } => {
                    if nodes[input.0].needs_grad {
                        let kv = nodes[kernel.0].value.data();
                        acc(*input, kernels::conv2d_grad_input(kv, &g, geom));
                    }
                    if nodes[kernel.0].needs_grad || nodes[bias.0].needs_grad {
                        let xv = nodes[input.0].value.data();
                        let (gk, gb) = kernels::conv2d_grad_params(xv, &g, geom);
                        acc(*kernel, gk);
                        acc(*bias, gb);
                    }
                }
                Op::Upsample { input, factor } => {
                    let dims = nodes[input.0].value.dims4("bilinear_upsample")?;
                    acc(*input, kernels::upsample_backward(&g, dims, *factor));
                }
                Op::Relu(input) => {
                    let x = nodes[input.0].value.data();
                    acc(*input, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
                }
                Op::Sigmoid(input) => {
                    let y = node.value.data();
                    acc(*input, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::Scale(input, f) => {
                    acc(*input, g.iter().map(|g| g * f).collect());
                }
                Op::Add(a, b) => {
                    let bc = Broadcast::new(nodes[a.0].value.shape(), nodes[b.0].value.shape())?;
                    let mut ga = vec![0.0; nodes[a.0].value.len()];
                    let mut gb = vec![0.0; nodes[b.0].value.len()];
                    for (i, gv) in g.iter().enumerate() {
                        let (ia, ib) = bc.source_indices(i);
                        ga[ia] += gv;
                        gb[ib] += gv;
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Softmax2(input) => {
                    let y = node.value.data();
                    let [n, _, h, w] = node.value.dims4("softmax2")?;
                    let plane = h * w;
                    let mut gi = vec![0.0; y.len()];
                    for b in 0..n {
                        let base = b * 2 * plane;
                        for p in 0..plane {
                            let (i0, i1) = (base + p, base + plane + p);
                            let dot = g[i0] * y[i0] + g[i1] * y[i1];
                            gi[i0] = y[i0] * (g[i0] - dot);
                            gi[i1] = y[i1] * (g[i1] - dot);
                        }
                    }
                    acc(*input, gi);
                }
                Op::Reshape(input) => {
                    acc(*input, g);
                }
                Op::Sum(input) => {
                    acc(*input, vec![g[0]; nodes[input.0].value.len()]);
                }
                Op::PickedCrossEntropy { logits, picks, weight } => {
                    let x = &nodes[logits.0].value;
                    let [_, _, h, w] = x.dims4("cross_entropy")?;
                    let plane = h * w;
                    let src = x.data();
                    let scale = g[0] * weight;
                    let mut gi = vec![0.0; src.len()];
                    for &(pix, class) in picks {
                        let base = (pix / plane) * 2 * plane + pix % plane;
                        let (p0, p1) = softmax_pair(src[base], src[base + plane]);
                        let (t0, t1) = if class == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
                        gi[base] += scale * (p0 - t0);
                        gi[base + plane] += scale * (p1 - t1);
                    }
                    acc(*logits, gi);
                }
            }
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => Tensor::new(node.value.shape().to_vec(), g).ok(),
                (Op::Leaf, None) if node.needs_grad => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable two-class softmax.
pub fn softmax_pair(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let s = e0 + e1;
    (e0 / s, e1 / s)
}

/// Cross-entropy `-log softmax(l)[class]` computed via log-sum-exp.
pub fn cross_entropy2(l0: f64, l1: f64, class: u8) -> f64 {
    let m = l0.max(l1);
    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
    lse - if class == 0 { l0 } else { l1 }
}

/// Index mapping for numpy-style broadcasting of two shapes.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (i, (&x, &y)) in pa.iter().zip(&pb).enumerate() {
            let d = match (x, y) {
                _ if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::shape(
                        "add",
                        format!("shapes {a:?} and {b:?} are not broadcast-compatible at axis {i} ({x} vs {y})"),
                    ))
                }
            };
            out_shape.push(d);
        }
        let strides = |s: &[usize]| -> Vec<usize> {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        Ok(Broadcast { a_strides: strides(&pa), b_strides: strides(&pb), out_shape })
    }

    fn len(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn source_indices(&self, mut flat: usize) -> (usize, usize) {
        let (mut ia, mut ib) = (0, 0);
        for axis in (0..self.out_shape.len()).rev() {
            let d = self.out_shape[axis];
            let coord = flat % d;
            flat /= d;
            ia += coord * self.a_strides[axis];
            ib += coord * self.b_strides[axis];
        }
        (ia, ib)
    }
}
