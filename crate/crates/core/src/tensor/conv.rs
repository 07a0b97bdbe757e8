//! Spatial operators on `[C, H, W]` feature maps and the token-axis
//! depthwise convolution on `[L, C]` sequences.

use super::gemm;
use super::tape::{GradSink, Op, Var};
use super::Tensor;
use crate::error::{Error, Result};

fn out_extent(op: &'static str, input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config(format!("{op}: stride must be positive")));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Config(format!(
            "{op}: kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn image_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds `x` into `[C_in·k·k, Ho·Wo]` patch columns.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let Geometry {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        } = *self;
        let mut cols = vec![0.0; c_in * k * k * ho * wo];
        for ci in 0..c_in {
            let plane = &x[ci * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Geometry::im2col`], accumulating into `dx`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let Geometry {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        } = *self;
        for ci in 0..c_in {
            let plane = &mut dx[ci * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[oy * wo..][..wo];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output-to-input sampling taps along one axis for bilinear resizing.
#[derive(Clone, Debug)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    /// Half-pixel centres: `src = (dst + 0.5)·in/out − 0.5`, clamped at 0.
    fn new(input: usize, output: usize) -> Self {
        let ratio = input as f64 / output as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(src - lo as f64);
        }
        taps
    }
}

/// Precomputed bilinear sampling plan shared by forward and backward.
#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    channels: usize,
    in_hw: (usize, usize),
    rows: AxisTaps,
    cols: AxisTaps,
}

impl ResizePlan {
    fn out_hw(&self) -> (usize, usize) {
        (self.rows.lo.len(), self.cols.lo.len())
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (h, w) = self.in_hw;
        let (ho, wo) = self.out_hw();
        let mut out = vec![0.0; self.channels * ho * wo];
        for c in 0..self.channels {
            let plane = &x[c * h * w..][..h * w];
            for oy in 0..ho {
                let (y0, y1, fy) = (self.rows.lo[oy], self.rows.hi[oy], self.rows.frac[oy]);
                for ox in 0..wo {
                    let (x0, x1, fx) = (self.cols.lo[ox], self.cols.hi[ox], self.cols.frac[ox]);
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out[(c * ho + oy) * wo + ox] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        out
    }

    pub(crate) fn backward(&self, g: &[f64], gx: &mut [f64]) {
        let (h, w) = self.in_hw;
        let (ho, wo) = self.out_hw();
        for c in 0..self.channels {
            let plane = &mut gx[c * h * w..][..h * w];
            for oy in 0..ho {
                let (y0, y1, fy) = (self.rows.lo[oy], self.rows.hi[oy], self.rows.frac[oy]);
                for ox in 0..wo {
                    let (x0, x1, fx) = (self.cols.lo[ox], self.cols.hi[ox], self.cols.frac[ox]);
                    let gv = g[(c * ho + oy) * wo + ox];
                    plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                    plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                    plane[y1 * w + x1] += gv * fy * fx;
                }
            }
        }
    }
}

/// Supported bilinear resize factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeScale {
    Half,
    Double,
}

impl ResizeScale {
    fn apply(self, n: usize) -> usize {
        match self {
            ResizeScale::Half => (n as f64 * 0.5).round() as usize,
            ResizeScale::Double => n * 2,
        }
    }
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation of `[C_in, H, W]` with `[C_out, C_in, k, k]`
    /// weights and an optional `[C_out]` bias.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let (c_in, h, wd) = image_dims("conv2d", &x)?;
        let &[c_out, wc_in, k, k2] = w.shape() else {
            return Err(Error::shape("conv2d", format!("weight {:?} not [Co, Ci, k, k]", w.shape())));
        };
        if wc_in != c_in || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("weight {:?} incompatible with input {:?}", w.shape(), x.shape()),
            ));
        }
        let geo = Geometry {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad: padding,
            ho: out_extent("conv2d", h, k, stride, padding)?,
            wo: out_extent("conv2d", wd, k, stride, padding)?,
        };
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} outputs", b.shape())));
            }
        }
        let n = geo.ho * geo.wo;
        let mut out = vec![0.0; c_out * n];
        if let Some(b) = &b {
            for (row, &bv) in out.chunks_exact_mut(n).zip(b.data()) {
                row.fill(bv);
            }
        }
        let kk = c_in * k * k;
        if geo.is_pointwise() {
            gemm(c_out, kk, n, w.data(), false, x.data(), false, &mut out, 1.0);
        } else {
            let cols = geo.im2col(x.data());
            gemm(c_out, kk, n, w.data(), false, &cols, false, &mut out, 1.0);
        }
        self.tape.push(
            "conv2d",
            Tensor::new([c_out, geo.ho, geo.wo], out)?,
            Op::Conv2d {
                x: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                stride,
                padding,
            },
        )
    }

    /// Per-channel 2-D convolution: `[C, H, W]` with `[C, k, k]` weights.
    pub fn depthwise_conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let (c, h, wd) = image_dims("depthwise_conv2d", &x)?;
        let &[wc, k, k2] = w.shape() else {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("weight {:?} not [C, k, k]", w.shape()),
            ));
        };
        if wc != c || k != k2 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("weight {:?} incompatible with input {:?}", w.shape(), x.shape()),
            ));
        }
        let ho = out_extent("depthwise_conv2d", h, k, stride, padding)?;
        let wo = out_extent("depthwise_conv2d", wd, k, stride, padding)?;
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [c] {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("bias {:?} for {c} channels", b.shape()),
                ));
            }
        }
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let plane = &x.data()[ch * h * wd..][..h * wd];
            let kern = &w.data()[ch * k * k..][..k * k];
            let dst = &mut out[ch * ho * wo..][..ho * wo];
            if let Some(b) = &b {
                dst.fill(b.data()[ch]);
            }
            for_each_tap(h, wd, k, stride, padding, ho, wo, |o, i, t| {
                dst[o] += kern[t] * plane[i];
            });
        }
        self.tape.push(
            "depthwise_conv2d",
            Tensor::new([c, ho, wo], out)?,
            Op::DepthwiseConv2d {
                x: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                stride,
                padding,
            },
        )
    }

    /// Per-channel convolution along the token axis of `[L, C]` with `[C, k]`
    /// weights. `causal` left-pads with `k − 1` zeros so position `t` only
    /// sees positions `≤ t`; otherwise padding is centred.
    pub fn conv1d_depthwise(self, weight: Var<'t>, causal: bool) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let &[l, c] = x.shape() else {
            return Err(Error::shape("conv1d_depthwise", format!("input {:?} not [L, C]", x.shape())));
        };
        if l < 1 {
            return Err(Error::Input("conv1d_depthwise on an empty sequence".into()));
        }
        let &[wc, k] = w.shape() else {
            return Err(Error::shape("conv1d_depthwise", format!("weight {:?} not [C, k]", w.shape())));
        };
        if wc != c || k == 0 {
            return Err(Error::shape(
                "conv1d_depthwise",
                format!("weight {:?} incompatible with input {:?}", w.shape(), x.shape()),
            ));
        }
        let left_pad = if causal { k - 1 } else { (k - 1) / 2 };
        let mut out = vec![0.0; l * c];
        conv1d_taps(l, k, left_pad, |t, src, j| {
            let (dst, inp) = (&mut out[t * c..][..c], &x.data()[src * c..][..c]);
            for ch in 0..c {
                dst[ch] += w.data()[ch * k + j] * inp[ch];
            }
        });
        self.tape.push(
            "conv1d_depthwise",
            Tensor::new([l, c], out)?,
            Op::Conv1dDepthwise {
                x: self.id,
                weight: weight.id,
                left_pad,
            },
        )
    }

    /// Bilinear resize of `[C, H, W]` with half-pixel sample centres.
    pub fn resize_bilinear(self, scale: ResizeScale) -> Result<Var<'t>> {
        let x = self.value();
        let (c, h, w) = image_dims("resize_bilinear", &x)?;
        let (ho, wo) = (scale.apply(h), scale.apply(w));
        if ho < 1 || wo < 1 || h < 1 || w < 1 {
            return Err(Error::Config(format!(
                "resize of {h}x{w} by {scale:?} gives empty output"
            )));
        }
        let plan = ResizePlan {
            channels: c,
            in_hw: (h, w),
            rows: AxisTaps::new(h, ho),
            cols: AxisTaps::new(w, wo),
        };
        let out = plan.forward(x.data());
        self.tape.push(
            "resize_bilinear",
            Tensor::new([c, ho, wo], out)?,
            Op::Resize { x: self.id, plan },
        )
    }
}

/// Visits every (output index, input index, kernel tap) triple of a single
/// channel's 2-D convolution that lands inside the input.
#[allow(clippy::too_many_arguments)]
fn for_each_tap(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    for ky in 0..k {
        for oy in 0..ho {
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..k {
                for ox in 0..wo {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix >= 0 && ix < w as isize {
                        f(oy * wo + ox, iy as usize * w + ix as usize, ky * k + kx);
                    }
                }
            }
        }
    }
}

/// Visits every (output position, source position, tap) of the token-axis
/// convolution `y[t] = Σ_j w[j] · x[t + j − left_pad]`.
fn conv1d_taps(l: usize, k: usize, left_pad: usize, mut f: impl FnMut(usize, usize, usize)) {
    for t in 0..l {
        for j in 0..k {
            let src = (t + j) as isize - left_pad as isize;
            if src >= 0 && (src as usize) < l {
                f(t, src as usize, j);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    x_id: usize,
    w_id: usize,
    bias_id: Option<usize>,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
    g: &[f64],
    sink: &mut GradSink,
) {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let geo = Geometry {
        c_in,
        h,
        w: wd,
        k,
        stride,
        pad: padding,
        ho: out_shape[1],
        wo: out_shape[2],
    };
    let n = geo.ho * geo.wo;
    let kk = c_in * k * k;
    if let Some(b) = bias_id {
        if let Some(gb) = sink.slot(b) {
            for (s, row) in gb.iter_mut().zip(g.chunks_exact(n)) {
                *s += row.iter().sum::<f64>();
            }
        }
    }
    let pointwise = geo.is_pointwise();
    if let Some(gw) = sink.slot(w_id) {
        if pointwise {
            gemm(c_out, n, kk, g, false, x.data(), true, gw, 1.0);
        } else {
            let cols = geo.im2col(x.data());
            gemm(c_out, n, kk, g, false, &cols, true, gw, 1.0);
        }
    }
    if let Some(gx) = sink.slot(x_id) {
        if pointwise {
            gemm(kk, c_out, n, w.data(), true, g, false, gx, 1.0);
        } else {
            let mut dcols = vec![0.0; kk * n];
            gemm(kk, c_out, n, w.data(), true, g, false, &mut dcols, 0.0);
            geo.col2im(&dcols, gx);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    x_id: usize,
    w_id: usize,
    bias_id: Option<usize>,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
    g: &[f64],
    sink: &mut GradSink,
) {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let (ho, wo) = (out_shape[1], out_shape[2]);
    if let Some(b) = bias_id {
        if let Some(gb) = sink.slot(b) {
            for (s, row) in gb.iter_mut().zip(g.chunks_exact(ho * wo)) {
                *s += row.iter().sum::<f64>();
            }
        }
    }
    if let Some(gw) = sink.slot(w_id) {
        for ch in 0..c {
            let plane = &x.data()[ch * h * wd..][..h * wd];
            let gp = &g[ch * ho * wo..][..ho * wo];
            let dk = &mut gw[ch * k * k..][..k * k];
            for_each_tap(h, wd, k, stride, padding, ho, wo, |o, i, t| {
                dk[t] += gp[o] * plane[i];
            });
        }
    }
    if let Some(gx) = sink.slot(x_id) {
        for ch in 0..c {
            let kern = &w.data()[ch * k * k..][..k * k];
            let gp = &g[ch * ho * wo..][..ho * wo];
            let dp = &mut gx[ch * h * wd..][..h * wd];
            for_each_tap(h, wd, k, stride, padding, ho, wo, |o, i, t| {
                dp[i] += gp[o] * kern[t];
            });
        }
    }
}

pub(crate) fn conv1d_depthwise_backward(
    x: &Tensor,
    w: &Tensor,
    x_id: usize,
    w_id: usize,
    left_pad: usize,
    g: &[f64],
    sink: &mut GradSink,
) {
    let (l, c) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    if let Some(gw) = sink.slot(w_id) {
        conv1d_taps(l, k, left_pad, |t, src, j| {
            let (gr, xr) = (&g[t * c..][..c], &x.data()[src * c..][..c]);
            for ch in 0..c {
                gw[ch * k + j] += gr[ch] * xr[ch];
            }
        });
    }
    if let Some(gx) = sink.slot(x_id) {
        conv1d_taps(l, k, left_pad, |t, src, j| {
            let gr = &g[t * c..][..c];
            let dr = &mut gx[src * c..][..c];
            for ch in 0..c {
                dr[ch] += gr[ch] * w.data()[ch * k + j];
            }
        });
    }
}
