//! The layer zoo: reference integer convolution, duplicated-weight and
//! duplicated-feature-map convolution, pooling, batch-norm folding, leaky
//! activation, and the anchor-based detection head.
//!
//! One exact f64 convolution kernel serves both the real-valued training
//! path and the integer inference path: integer codes and levels are
//! represented as exact integral f64s, so integer-domain equalities hold
//! bit for bit.

use crate::quant::{QTensor, QWeights};
use crate::tensor::{channel_group_mean, channel_group_sum, channel_tile, ShapeError, Tensor};

/// Gradient reduction across duplicated channels. `Average` matches the
/// stated backward rule; `Sum` is the exact adjoint of tiling (average
/// rescales the effective learning rate by 1/d).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Average,
    Sum,
}

/// Forward strategy for duplicated convolutions. `Expand` materializes the
/// duplicated operand (tile mode for weights, dup mode for features);
/// `Fast` group-sums the other operand instead. Both produce identical
/// results on integer inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DupMode {
    Expand,
    Fast,
}

#[inline]
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn check_conv_shapes(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize), ShapeError> {
    let (_, c_in, in_h, in_w) = x.shape();
    let (_, wc, k, _) = w.shape();
    if wc != c_in {
        return Err(ShapeError::ChannelMismatch {
            context: "conv2d weight input channels",
            expected: c_in,
            got: wc,
        });
    }
    assert!(stride >= 1, "stride must be >= 1");
    assert!(
        in_h + 2 * pad >= k && in_w + 2 * pad >= k,
        "kernel larger than padded input"
    );
    Ok((
        conv_out_dim(in_h, k, stride, pad),
        conv_out_dim(in_w, k, stride, pad),
    ))
}

/// Direct convolution, zero padding, deterministic summation order.
pub fn conv2d_real(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor, ShapeError> {
    let (out_h, out_w) = check_conv_shapes(x, w, stride, pad)?;
    let (nb, c_in, in_h, in_w) = x.shape();
    let (c_out, _, k, _) = w.shape();
    let mut out = Tensor::zeros(nb, c_out, out_h, out_w);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for n in 0..nb {
        for o in 0..c_out {
            let o_base = (n * c_out + o) * out_h * out_w;
            for ci in 0..c_in {
                let x_base = (n * c_in + ci) * in_h * in_w;
                let w_base = (o * c_in + ci) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wd[w_base + kh * k + kw];
                        let (oy_lo, oy_hi) = valid_range(out_h, in_h, kh, stride, pad);
                        let (ox_lo, ox_hi) = valid_range(out_w, in_w, kw, stride, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + kh - pad;
                            let xrow = &xd[x_base + iy * in_w..x_base + (iy + 1) * in_w];
                            let orow = &mut od[o_base + oy * out_w..o_base + (oy + 1) * out_w];
                            let mut ix = ox_lo * stride + kw - pad;
                            for ov in orow[ox_lo..ox_hi].iter_mut() {
                                *ov += wv * xrow[ix];
                                ix += stride;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output positions for which `o*stride + koff - pad` lands inside the
/// input; returns a half-open range.
#[inline]
fn valid_range(out_dim: usize, in_dim: usize, koff: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if koff >= pad {
        0
    } else {
        (pad - koff).div_ceil(stride)
    };
    let last_in = in_dim + pad;
    if last_in <= koff {
        return (0, 0);
    }
    let hi = ((last_in - koff - 1) / stride + 1).min(out_dim);
    (lo.min(hi), hi)
}

/// Gradient of [`conv2d_real`] with respect to its input.
pub fn conv2d_backward_input(
    dy: &Tensor,
    w: &Tensor,
    in_h: usize,
    in_w: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (nb, c_out, out_h, out_w) = dy.shape();
    let (_, c_in, k, _) = w.shape();
    let mut dx = Tensor::zeros(nb, c_in, in_h, in_w);
    let dyd = dy.data();
    let wd = w.data();
    let dxd = dx.data_mut();
    for n in 0..nb {
        for o in 0..c_out {
            let dy_base = (n * c_out + o) * out_h * out_w;
            for ci in 0..c_in {
                let dx_base = (n * c_in + ci) * in_h * in_w;
                let w_base = (o * c_in + ci) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wd[w_base + kh * k + kw];
                        let (oy_lo, oy_hi) = valid_range(out_h, in_h, kh, stride, pad);
                        let (ox_lo, ox_hi) = valid_range(out_w, in_w, kw, stride, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + kh - pad;
                            let dyrow = &dyd[dy_base + oy * out_w..dy_base + (oy + 1) * out_w];
                            let dxrow = &mut dxd[dx_base + iy * in_w..dx_base + (iy + 1) * in_w];
                            let mut ix = ox_lo * stride + kw - pad;
                            for &g in dyrow[ox_lo..ox_hi].iter() {
                                dxrow[ix] += wv * g;
                                ix += stride;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of [`conv2d_real`] with respect to its weights.
pub fn conv2d_backward_weights(
    dy: &Tensor,
    x: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (nb, c_out, out_h, out_w) = dy.shape();
    let (_, c_in, in_h, in_w) = x.shape();
    let mut dw = Tensor::zeros(c_out, c_in, k, k);
    let dyd = dy.data();
    let xd = x.data();
    let dwd = dw.data_mut();
    for o in 0..c_out {
        for ci in 0..c_in {
            let w_base = (o * c_in + ci) * k * k;
            for kh in 0..k {
                for kw in 0..k {
                    let (oy_lo, oy_hi) = valid_range(out_h, in_h, kh, stride, pad);
                    let (ox_lo, ox_hi) = valid_range(out_w, in_w, kw, stride, pad);
                    let mut acc = 0.0;
                    for n in 0..nb {
                        let dy_base = (n * c_out + o) * out_h * out_w;
                        let x_base = (n * c_in + ci) * in_h * in_w;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + kh - pad;
                            let dyrow = &dyd[dy_base + oy * out_w..dy_base + (oy + 1) * out_w];
                            let xrow = &xd[x_base + iy * in_w..x_base + (iy + 1) * in_w];
                            let mut ix = ox_lo * stride + kw - pad;
                            for &g in dyrow[ox_lo..ox_hi].iter() {
                                acc += g * xrow[ix];
                                ix += stride;
                            }
                        }
                    }
                    dwd[w_base + kh * k + kw] = acc;
                }
            }
        }
    }
    dw
}

/// Reference integer convolution: exact sum of code * level products.
pub fn conv2d_int_ref(
    x: &QTensor,
    w: &QWeights,
    stride: usize,
    pad: usize,
) -> Result<Tensor, ShapeError> {
    conv2d_real(&x.codes_tensor(), &w.levels_tensor(), stride, pad)
}

/// Duplicated-weight convolution on the integer path. `wt` holds template
/// levels with `x.c() / d_w` input channels. `Expand` tiles the template to
/// full width; `Fast` group-sums the input codes instead.
pub fn dupweight_conv_int(
    x: &QTensor,
    wt: &QWeights,
    d_w: usize,
    mode: DupMode,
    stride: usize,
    pad: usize,
) -> Result<Tensor, ShapeError> {
    let grouping = crate::tensor::ChannelGrouping::new(x.c(), d_w)?;
    if wt.c_in != grouping.base_channels {
        return Err(ShapeError::ChannelMismatch {
            context: "template weight channels",
            expected: grouping.base_channels,
            got: wt.c_in,
        });
    }
    let codes = x.codes_tensor();
    let levels = wt.levels_tensor();
    match mode {
        DupMode::Expand => conv2d_real(&codes, &channel_tile(&levels, d_w), stride, pad),
        DupMode::Fast => conv2d_real(&channel_group_sum(&codes, d_w)?, &levels, stride, pad),
    }
}

/// Duplicated-feature-map convolution on the integer path. `w` holds
/// `x.c() * d_x` input channels. `Expand` tiles the input codes; `Fast`
/// group-sums the weight channels instead.
pub fn dupfeature_conv_int(
    x: &QTensor,
    w: &QWeights,
    d_x: usize,
    mode: DupMode,
    stride: usize,
    pad: usize,
) -> Result<Tensor, ShapeError> {
    if w.c_in != x.c() * d_x {
        return Err(ShapeError::ChannelMismatch {
            context: "duplicated-feature weight channels",
            expected: x.c() * d_x,
            got: w.c_in,
        });
    }
    let codes = x.codes_tensor();
    let levels = w.levels_tensor();
    match mode {
        DupMode::Expand => conv2d_real(&channel_tile(&codes, d_x), &levels, stride, pad),
        DupMode::Fast => conv2d_real(&codes, &weight_group_sum(&levels, d_x)?, stride, pad),
    }
}

/// Group-sums weight channels along the input-channel axis. For 1-bit
/// levels and factor d the results lie in {-d, -d+2, ..., d}.
pub fn weight_group_sum(w: &Tensor, d: usize) -> Result<Tensor, ShapeError> {
    channel_group_sum(w, d)
}

/// Reduces a full duplicated-weight gradient to the template gradient.
pub fn dupweight_grad_template(
    dw_dup: &Tensor,
    d_w: usize,
    reduce: Reduce,
) -> Result<Tensor, ShapeError> {
    match reduce {
        Reduce::Average => channel_group_mean(dw_dup, d_w),
        Reduce::Sum => channel_group_sum(dw_dup, d_w),
    }
}

/// Reduces the duplicated-input gradient back to the producing layer's
/// channel count.
pub fn dupfeature_grad_input(
    dx_dup: &Tensor,
    d_x: usize,
    reduce: Reduce,
) -> Result<Tensor, ShapeError> {
    match reduce {
        Reduce::Average => channel_group_mean(dx_dup, d_x),
        Reduce::Sum => channel_group_sum(dx_dup, d_x),
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Folds batch-norm parameters into a per-channel affine:
/// scale = gamma / sqrt(var + eps), shift = beta - mean * scale.
pub fn batchnorm_fold(
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let scale: Vec<f64> = gamma
        .iter()
        .zip(var.iter())
        .map(|(&g, &v)| g / (v + eps).sqrt())
        .collect();
    let shift: Vec<f64> = beta
        .iter()
        .zip(mean.iter().zip(scale.iter()))
        .map(|(&b, (&m, &s))| b - m * s)
        .collect();
    (scale, shift)
}

/// Applies a per-channel affine y = scale[c] * x + shift[c].
pub fn affine_apply(x: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    let (n, c, h, w) = x.shape();
    assert_eq!(scale.len(), c);
    assert_eq!(shift.len(), c);
    let mut out = x.clone();
    let od = out.data_mut();
    let plane = h * w;
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let (s, b) = (scale[ch], shift[ch]);
            for v in od[base..base + plane].iter_mut() {
                *v = s * *v + b;
            }
        }
    }
    out
}

/// Window max pooling. Stride 1 keeps the input size (implicit -inf padding
/// at the right/bottom edges); larger strides tile the input exactly.
/// Also returns the flat input index of each selected maximum (first
/// maximal element in scan order) for the backward pass.
pub fn maxpool_with_argmax(x: &Tensor, size: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.shape();
    let (out_h, out_w) = if stride == 1 {
        (h, w)
    } else {
        ((h - size) / stride + 1, (w - size) / stride + 1)
    };
    let mut out = Tensor::zeros(n, c, out_h, out_w);
    let mut argmax = vec![0usize; n * c * out_h * out_w];
    let xd = x.data();
    let od = out.data_mut();
    let mut oi = 0;
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..size {
                        let iy = oy * stride + ky;
                        if iy >= h {
                            break;
                        }
                        for kx in 0..size {
                            let ix = ox * stride + kx;
                            if ix >= w {
                                break;
                            }
                            let v = xd[base + iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = base + iy * w + ix;
                            }
                        }
                    }
                    od[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool(x: &Tensor, size: usize, stride: usize) -> Tensor {
    maxpool_with_argmax(x, size, stride).0
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_backward(dy: &Tensor, x: &Tensor, slope: f64) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data().iter()) {
        if v <= 0.0 {
            *g *= slope;
        }
    }
    dx
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Anchor prior dimensions in grid-cell units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub pw: f64,
    pub ph: f64,
}

/// A decoded detection, all geometry normalized to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub objectness: f64,
    pub class_idx: usize,
    pub score: f64,
}

/// Decodes one image of an anchor-head tensor into boxes for every anchor
/// and cell. Channel count must equal anchors * (5 + classes).
pub fn yolo_decode(
    head: &Tensor,
    image: usize,
    anchors: &[Anchor],
    classes: usize,
) -> Result<Vec<DetectionBox>, ShapeError> {
    let (_, c, gh, gw) = head.shape();
    let per_anchor = 5 + classes;
    if c != anchors.len() * per_anchor {
        return Err(ShapeError::ChannelMismatch {
            context: "detection head channels",
            expected: anchors.len() * per_anchor,
            got: c,
        });
    }
    let mut boxes = Vec::with_capacity(anchors.len() * gh * gw);
    for (a, anchor) in anchors.iter().enumerate() {
        let base = a * per_anchor;
        for gy in 0..gh {
            for gx in 0..gw {
                let tx = head.at(image, base, gy, gx);
                let ty = head.at(image, base + 1, gy, gx);
                let tw = head.at(image, base + 2, gy, gx);
                let th = head.at(image, base + 3, gy, gx);
                let to = head.at(image, base + 4, gy, gx);
                let objectness = sigmoid(to);
                let (mut class_idx, mut class_prob) = (0usize, sigmoid(head.at(image, base + 5, gy, gx)));
                for cls in 1..classes {
                    let p = sigmoid(head.at(image, base + 5 + cls, gy, gx));
                    if p > class_prob {
                        class_prob = p;
                        class_idx = cls;
                    }
                }
                boxes.push(DetectionBox {
                    cx: (gx as f64 + sigmoid(tx)) / gw as f64,
                    cy: (gy as f64 + sigmoid(ty)) / gh as f64,
                    w: anchor.pw * tw.exp() / gw as f64,
                    h: anchor.ph * th.exp() / gh as f64,
                    objectness,
                    class_idx,
                    score: objectness * class_prob,
                });
            }
        }
    }
    Ok(boxes)
}

/// Intersection over union of two center-format boxes.
pub fn iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    iou_rect(
        (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0),
        (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0),
    )
}

pub fn iou_rect(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let union = (a.2 - a.0) * (a.3 - a.1) + (b.2 - b.0) * (b.3 - b.1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub const NMS_IOU_THRESHOLD: f64 = 0.45;

/// Greedy descending-score suppression; survivors are pairwise at or below
/// the IoU threshold. Ties in score keep the earlier box first.
pub fn nms(boxes: &[DetectionBox], iou_threshold: f64) -> Vec<DetectionBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .score
            .partial_cmp(&boxes[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut kept: Vec<DetectionBox> = Vec::new();
    for &i in &order {
        let candidate = &boxes[i];
        if kept.iter().all(|k| iou(k, candidate) <= iou_threshold) {
            kept.push(*candidate);
        }
    }
    kept
}
