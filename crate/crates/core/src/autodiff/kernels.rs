//! Numeric kernels behind the differentiable ops.
//!
//! Convolution is a zero-padded cross-correlation with "same" padding for
//! stride 1, so an input of height `H` yields `ceil(H / stride)` rows. Every
//! output element accumulates its taps in `(channel, ky, kx)` order starting
//! from `0.0` and adds the bias last; both the reference loop and the blocked
//! kernel follow that order, which keeps them bit-identical.

use crate::error::{Error, Result};
use crate::par;

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], kernel: [usize; 4], bias_len: usize, stride: usize, dilation: usize) -> Result<Self> {
        let [n, c, h, w] = input;
        let [k, kc, kh, kw] = kernel;
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("conv2d", format!("stride {stride} and dilation {dilation} must be >= 1")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel spatial size {kh}x{kw} must be odd")));
        }
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels but input has C={c}"),
            ));
        }
        if bias_len != k {
            return Err(Error::shape("conv2d", format!("bias has {bias_len} entries but kernel has K={k} filters")));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("conv2d", format!("empty spatial extent {h}x{w}")));
        }
        Ok(ConvGeom {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: k,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            dilation,
            out_h: h.div_ceil(stride),
            out_w: w.div_ceil(stride),
        })
    }

    fn pad_h(&self) -> isize {
        (self.dilation * (self.kernel_h - 1) / 2) as isize
    }

    fn pad_w(&self) -> isize {
        (self.dilation * (self.kernel_w - 1) / 2) as isize
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_channels * self.out_h * self.out_w
    }
}

/// Output index range `[lo, hi)` whose input coordinate `o * stride + offset`
/// lies inside `[0, extent)`.
#[inline]
fn valid_range(offset: isize, extent: usize, stride: usize, out_extent: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { ((-offset) + s - 1) / s } else { 0 };
    let limit = extent as isize - offset;
    let hi = if limit <= 0 { 0 } else { (limit + s - 1) / s };
    let lo = lo.max(0) as usize;
    let hi = (hi as usize).min(out_extent);
    (lo, hi.max(lo))
}

/// Straightforward direct convolution. Kept as the bit-exact reference for
/// [`conv2d_forward`].
pub fn conv2d_forward_reference(input: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.out_len()];
    let (ph, pw) = (g.pad_h(), g.pad_w());
    for n in 0..g.batch {
        for k in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for c in 0..g.in_channels {
                        for i in 0..g.kernel_h {
                            let iy = (oy * g.stride) as isize + (i * g.dilation) as isize - ph;
                            if iy < 0 || iy >= g.height as isize {
                                continue;
                            }
                            for j in 0..g.kernel_w {
                                let ix = (ox * g.stride) as isize + (j * g.dilation) as isize - pw;
                                if ix < 0 || ix >= g.width as isize {
                                    continue;
                                }
                                let wv = kernel[((k * g.in_channels + c) * g.kernel_h + i) * g.kernel_w + j];
                                let xv = input[((n * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize];
                                acc += wv * xv;
                            }
                        }
                    }
                    out[((n * g.out_channels + k) * g.out_h + oy) * g.out_w + ox] = acc + bias[k];
                }
            }
        }
    }
    out
}

/// Blocked convolution: one output plane per work item, taps applied as
/// row-wise multiply-adds.
pub fn conv2d_forward(input: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.out_len()];
    let (ph, pw) = (g.pad_h(), g.pad_w());
    par::chunks_mut(&mut out, plane, |idx, dst| {
        let n = idx / g.out_channels;
        let k = idx % g.out_channels;
        for c in 0..g.in_channels {
            let src = &input[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
            for i in 0..g.kernel_h {
                let dy = (i * g.dilation) as isize - ph;
                let (y_lo, y_hi) = valid_range(dy, g.height, g.stride, g.out_h);
                for j in 0..g.kernel_w {
                    let dx = (j * g.dilation) as isize - pw;
                    let (x_lo, x_hi) = valid_range(dx, g.width, g.stride, g.out_w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let wv = kernel[((k * g.in_channels + c) * g.kernel_h + i) * g.kernel_w + j];
                    for oy in y_lo..y_hi {
                        let iy = (oy * g.stride) as isize + dy;
                        let row = &src[iy as usize * g.width..][..g.width];
                        let drow = &mut dst[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                        let ix0 = (x_lo * g.stride) as isize + dx;
                        if g.stride == 1 {
                            let srow = &row[ix0 as usize..ix0 as usize + drow.len()];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += wv * s;
                            }
                        } else {
                            for (t, d) in drow.iter_mut().enumerate() {
                                *d += wv * row[ix0 as usize + t * g.stride];
                            }
                        }
                    }
                }
            }
        }
        let b = bias[k];
        for v in dst.iter_mut() {
            *v += b;
        }
    });
    out
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_grad_input(kernel: &[f64], grad_out: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ph, pw) = (g.pad_h(), g.pad_w());
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let mut grad_in = vec![0.0; g.batch * g.in_channels * in_plane];
    par::chunks_mut(&mut grad_in, in_plane, |idx, dst| {
        let n = idx / g.in_channels;
        let c = idx % g.in_channels;
        for k in 0..g.out_channels {
            let go = &grad_out[(n * g.out_channels + k) * out_plane..][..out_plane];
            for i in 0..g.kernel_h {
                let dy = (i * g.dilation) as isize - ph;
                let (y_lo, y_hi) = valid_range(dy, g.height, g.stride, g.out_h);
                for j in 0..g.kernel_w {
                    let dx = (j * g.dilation) as isize - pw;
                    let (x_lo, x_hi) = valid_range(dx, g.width, g.stride, g.out_w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let wv = kernel[((k * g.in_channels + c) * g.kernel_h + i) * g.kernel_w + j];
                    for oy in y_lo..y_hi {
                        let iy = ((oy * g.stride) as isize + dy) as usize;
                        let grow = &go[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                        let ix0 = ((x_lo * g.stride) as isize + dx) as usize;
                        let drow = &mut dst[iy * g.width..][..g.width];
                        if g.stride == 1 {
                            for (d, s) in drow[ix0..ix0 + grow.len()].iter_mut().zip(grow) {
                                *d += wv * s;
                            }
                        } else {
                            for (t, s) in grow.iter().enumerate() {
                                drow[ix0 + t * g.stride] += wv * s;
                            }
                        }
                    }
                }
            }
        }
    });
    grad_in
}

/// Gradients of a convolution with respect to its kernel and bias.
pub fn conv2d_grad_params(input: &[f64], grad_out: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (ph, pw) = (g.pad_h(), g.pad_w());
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let taps = g.kernel_h * g.kernel_w;

    // One work item per filter: kernel gradient followed by the bias gradient.
    let per_filter = g.in_channels * taps + 1;
    let mut packed = vec![0.0; g.out_channels * per_filter];
    par::chunks_mut(&mut packed, per_filter, |k, dst| {
        for c in 0..g.in_channels {
            for i in 0..g.kernel_h {
                let dy = (i * g.dilation) as isize - ph;
                let (y_lo, y_hi) = valid_range(dy, g.height, g.stride, g.out_h);
                for j in 0..g.kernel_w {
                    let dx = (j * g.dilation) as isize - pw;
                    let (x_lo, x_hi) = valid_range(dx, g.width, g.stride, g.out_w);
                    let mut acc = 0.0;
                    if x_lo < x_hi {
                        for n in 0..g.batch {
                            let go = &grad_out[(n * g.out_channels + k) * out_plane..][..out_plane];
                            let src = &input[(n * g.in_channels + c) * in_plane..][..in_plane];
                            for oy in y_lo..y_hi {
                                let iy = ((oy * g.stride) as isize + dy) as usize;
                                let grow = &go[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                                let ix0 = ((x_lo * g.stride) as isize + dx) as usize;
                                let row = &src[iy * g.width..][..g.width];
                                if g.stride == 1 {
                                    for (a, b) in grow.iter().zip(&row[ix0..ix0 + grow.len()]) {
                                        acc += a * b;
                                    }
                                } else {
                                    for (t, a) in grow.iter().enumerate() {
                                        acc += a * row[ix0 + t * g.stride];
                                    }
                                }
                            }
                        }
                    }
                    dst[(c * g.kernel_h + i) * g.kernel_w + j] = acc;
                }
            }
        }
        let mut b = 0.0;
        for n in 0..g.batch {
            for v in &grad_out[(n * g.out_channels + k) * out_plane..][..out_plane] {
                b += v;
            }
        }
        dst[per_filter - 1] = b;
    });

    let mut grad_kernel = Vec::with_capacity(g.out_channels * g.in_channels * taps);
    let mut grad_bias = Vec::with_capacity(g.out_channels);
    for chunk in packed.chunks(per_filter) {
        grad_kernel.extend_from_slice(&chunk[..per_filter - 1]);
        grad_bias.push(chunk[per_filter - 1]);
    }
    (grad_kernel, grad_bias)
}

/// Per-output-index interpolation taps for half-pixel bilinear resampling.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn upsample_taps(src: usize, factor: usize) -> Vec<Tap> {
    (0..src * factor)
        .map(|o| {
            let pos = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            Tap { i0, i1, frac: pos - i0 as f64 }
        })
        .collect()
}

/// Bilinear upsampling by an integer factor with half-pixel centers
/// (`align_corners = false`), clamping at the borders.
pub fn upsample_forward(input: &[f64], dims: [usize; 4], factor: usize) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut out = vec![0.0; n * c * oh * ow];
    par::chunks_mut(&mut out, oh * ow, |idx, dst| {
        let src = &input[idx * h * w..][..h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let top = (1.0 - b.frac) * src[a.i0 * w + b.i0] + b.frac * src[a.i0 * w + b.i1];
                let bot = (1.0 - b.frac) * src[a.i1 * w + b.i0] + b.frac * src[a.i1 * w + b.i1];
                dst[oy * ow + ox] = (1.0 - a.frac) * top + a.frac * bot;
            }
        }
    });
    out
}

pub fn upsample_backward(grad_out: &[f64], dims: [usize; 4], factor: usize) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut grad = vec![0.0; n * c * h * w];
    par::chunks_mut(&mut grad, h * w, |idx, dst| {
        let go = &grad_out[idx * oh * ow..][..oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = go[oy * ow + ox];
                let gt = (1.0 - a.frac) * g;
                let gb = a.frac * g;
                dst[a.i0 * w + b.i0] += (1.0 - b.frac) * gt;
                dst[a.i0 * w + b.i1] += b.frac * gt;
                dst[a.i1 * w + b.i0] += (1.0 - b.frac) * gb;
                dst[a.i1 * w + b.i1] += b.frac * gb;
            }
        }
    });
    grad
}
