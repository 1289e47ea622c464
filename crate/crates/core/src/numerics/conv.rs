//! Direct 2-D convolution kernels over `[C, H, W]` buffers.
//!
//! Taps that land in the zero padding are skipped rather than materialized,
//! so large dilation rates on small maps cost no more than a 1x1 conv.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of one convolution layer (`3x3-d-R` style notation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub has_relu: bool,
}

impl ConvSpec {
    /// Stride 1, dilation 1, padding `k / 2`, followed by ReLU.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            dilation: 1,
            padding: k / 2,
            has_relu: true,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Sets dilation and padding together so a 3x3 kernel preserves size.
    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel.0 / 2);
        self
    }

    pub fn with_relu(mut self, relu: bool) -> Self {
        self.has_relu = relu;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    fn out_dim(&self, input: usize, kernel: usize, axis: &str) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid(
                "conv2d",
                "stride and dilation must be positive",
            ));
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if kernel == 0 || padded < span {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "{axis}: padded input {padded} is smaller than the dilated kernel span {span}"
                ),
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// Output `(H', W')` for an `(H, W)` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            self.out_dim(h, self.kernel.0, "height")?,
            self.out_dim(w, self.kernel.1, "width")?,
        ))
    }
}

/// Output indices `o` in `[0, n_out)` with `o * stride + offset` in `[0, n_in)`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = n_in as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(n_out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub oh: usize,
    pub ow: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn new(spec: &ConvSpec, h: usize, w: usize) -> Result<Self> {
        let (oh, ow) = spec.output_size(h, w)?;
        Ok(Self {
            c_in: spec.in_channels,
            h,
            w,
            c_out: spec.out_channels,
            oh,
            ow,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
        })
    }

    #[inline]
    fn tap(&self, ky: usize, kx: usize) -> (usize, usize, usize, usize, isize, isize) {
        let dy = (ky * self.dilation) as isize - self.padding as isize;
        let dx = (kx * self.dilation) as isize - self.padding as isize;
        let (y0, y1) = valid_range(self.h, self.oh, self.stride, dy);
        let (x0, x1) = valid_range(self.w, self.ow, self.stride, dx);
        (y0, y1, x0, x1, dy, dx)
    }
}

pub(crate) fn forward(g: &Geometry, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.c_out * plane_out];
    for o in 0..g.c_out {
        let dst = &mut out[o * plane_out..(o + 1) * plane_out];
        if let Some(b) = bias {
            dst.fill(b[o]);
        }
        for c in 0..g.c_in {
            let src = &input[c * plane_in..(c + 1) * plane_in];
            let wbase = (o * g.c_in + c) * g.kh * g.kw;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = weight[wbase + ky * g.kw + kx];
                    let (y0, y1, x0, x1, dy, dx) = g.tap(ky, kx);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = (oy * g.stride) as isize + dy;
                        let row_in = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let row_out = &mut dst[oy * g.ow + x0..oy * g.ow + x1];
                        if g.stride == 1 {
                            let start = (x0 as isize + dx) as usize;
                            let seg = &row_in[start..start + (x1 - x0)];
                            for (o_v, i_v) in row_out.iter_mut().zip(seg) {
                                *o_v += wv * i_v;
                            }
                        } else {
                            for (k, o_v) in row_out.iter_mut().enumerate() {
                                let ix = ((x0 + k) * g.stride) as isize + dx;
                                *o_v += wv * row_in[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)` for upstream gradient `grad_out`.
pub(crate) fn backward(
    g: &Geometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut d_in = vec![0.0; g.c_in * plane_in];
    let mut d_w = vec![0.0; weight.len()];
    let d_b: Vec<f64> = grad_out
        .chunks_exact(plane_out)
        .map(|p| p.iter().sum())
        .collect();

    for o in 0..g.c_out {
        let gsrc = &grad_out[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.c_in {
            let src = &input[c * plane_in..(c + 1) * plane_in];
            let dst = &mut d_in[c * plane_in..(c + 1) * plane_in];
            let wbase = (o * g.c_in + c) * g.kh * g.kw;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = wbase + ky * g.kw + kx;
                    let wv = weight[widx];
                    let (y0, y1, x0, x1, dy, dx) = g.tap(ky, kx);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = ((oy * g.stride) as isize + dy) as usize;
                        let grow = &gsrc[oy * g.ow + x0..oy * g.ow + x1];
                        if g.stride == 1 {
                            let start = (x0 as isize + dx) as usize;
                            let base = iy * g.w + start;
                            let seg_in = &src[base..base + (x1 - x0)];
                            let seg_d = &mut dst[base..base + (x1 - x0)];
                            for ((gv, iv), dv) in grow.iter().zip(seg_in).zip(seg_d.iter_mut()) {
                                acc += gv * iv;
                                *dv += wv * gv;
                            }
                        } else {
                            for (k, gv) in grow.iter().enumerate() {
                                let ix = (((x0 + k) * g.stride) as isize + dx) as usize;
                                acc += gv * src[iy * g.w + ix];
                                dst[iy * g.w + ix] += wv * gv;
                            }
                        }
                    }
                    d_w[widx] += acc;
                }
            }
        }
    }
    (d_in, d_w, d_b)
}
