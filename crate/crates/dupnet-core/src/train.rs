//! Desk-scale quantization-aware training: a layer tape with reverse-mode
//! gradients over the full zoo (quantizers via straight-through estimators,
//! duplicated convolutions in both forward modes, batch-norm on batch
//! statistics, pooling, leaky units and the detection loss), SGD with a
//! stepped learning-rate schedule, finite-difference verification, and the
//! detection-rate-at-false-positive-budget metric.

use crate::config::{Activation, LayerKind};
use crate::layers::{
    conv2d_backward_input, conv2d_backward_weights, conv2d_real, dupfeature_grad_input,
    dupweight_grad_template, leaky, leaky_backward, maxpool_with_argmax, sigmoid, Anchor,
    DetectionBox, DupMode, Reduce, LEAKY_SLOPE,
};
use crate::model::Model;
use crate::quant::{quantize_act, quantize_act_backward, quantize_weights, ste_weight_backward};
use crate::synth::GtBox;
use crate::tensor::{channel_group_sum, channel_tile, ShapeError, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite values at layer {layer}")]
    NonFinite { layer: String },
    #[error("{layer}: {source}")]
    Shape {
        layer: String,
        #[source]
        source: ShapeError,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("batch image shape {got:?} does not match network input {want:?}")]
    BatchShape {
        got: (usize, usize, usize),
        want: (usize, usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub base_lr: f64,
    /// Schedule steps as fractions of `total_iters`.
    pub lr_milestones: Vec<f64>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub reduce: Reduce,
    pub dup_mode: DupMode,
    pub weight_decay: f64,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub bn_momentum: f64,
    /// Global L2 gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub hflip: bool,
    pub rand_crop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 2000,
            base_lr: 0.01,
            lr_milestones: vec![0.3, 0.6, 0.8, 0.9],
            lr_factor: 0.1,
            momentum: 0.9,
            batch_size: 4,
            seed: 0,
            reduce: Reduce::Average,
            dup_mode: DupMode::Expand,
            weight_decay: 0.0,
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            bn_momentum: 0.99,
            grad_clip: 5.0,
            hflip: false,
            rand_crop: false,
        }
    }
}

/// Stepped schedule: the base rate decays by `lr_factor` at every passed
/// milestone fraction.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg
        .lr_milestones
        .iter()
        .filter(|&&frac| iter as f64 >= frac * cfg.total_iters as f64)
        .count();
    cfg.base_lr * cfg.lr_factor.powi(passed as i32)
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub gts: Vec<Vec<GtBox>>,
}

/// Per-layer parameter gradients, aligned with the model's layer slots.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrads>>,
    /// Gradient with respect to the batch input (used by gradcheck).
    pub input: Tensor,
}

struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

enum TapeRecord {
    Conv {
        layer_idx: usize,
        x_raw: Tensor,
        x_conv: Tensor,
        w_conv: Tensor,
        bn: Option<BnCache>,
        y_preact: Tensor,
    },
    Pool {
        argmax: Vec<usize>,
        in_shape: (usize, usize, usize, usize),
    },
}

fn per_channel_bias_add(y: &mut Tensor, bias: &[f64]) {
    let (n, c, h, w) = y.shape();
    let plane = h * w;
    let data = y.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for v in data[base..base + plane].iter_mut() {
                *v += bias[ch];
            }
        }
    }
}

/// Batch-statistics batch-norm forward; updates running stats and returns
/// the cache the backward pass needs.
fn batchnorm_train_forward(
    x: &Tensor,
    bn: &mut crate::model::BnParams,
    momentum: f64,
    eps: f64,
) -> (Tensor, BnCache) {
    let (n, c, h, w) = x.shape();
    let m = (n * h * w) as f64;
    let plane = h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for &v in &x.data()[base..base + plane] {
                mean[ch] += v;
            }
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for &v in &x.data()[base..base + plane] {
                let d = v - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = x.clone();
    let mut y = Tensor::zeros(n, c, h, w);
    {
        let xh = x_hat.data_mut();
        let yd = y.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for off in base..base + plane {
                    xh[off] = (xh[off] - mean[ch]) * inv_std[ch];
                    yd[off] = bn.gamma[ch] * xh[off] + bn.beta[ch];
                }
            }
        }
    }
    for ch in 0..c {
        bn.running_mean[ch] = momentum * bn.running_mean[ch] + (1.0 - momentum) * mean[ch];
        bn.running_var[ch] = momentum * bn.running_var[ch] + (1.0 - momentum) * var[ch];
    }
    (y, BnCache { x_hat, inv_std })
}

/// Standard batch-norm backward on batch statistics.
fn batchnorm_backward(
    dy: &Tensor,
    cache: &BnCache,
    gamma: &[f64],
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dy.shape();
    let m = (n * h * w) as f64;
    let plane = h * w;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for off in base..base + plane {
                dbeta[ch] += dy.data()[off];
                dgamma[ch] += dy.data()[off] * cache.x_hat.data()[off];
            }
        }
    }
    let mut dx = Tensor::zeros(n, c, h, w);
    {
        let dxd = dx.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                let scale = gamma[ch] * cache.inv_std[ch];
                let mean_dy = dbeta[ch] / m;
                let mean_dy_xhat = dgamma[ch] / m;
                for off in base..base + plane {
                    dxd[off] = scale
                        * (dy.data()[off] - mean_dy - cache.x_hat.data()[off] * mean_dy_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// One forward and reverse pass over the network for a batch; returns the
/// loss and gradients for every trainable parameter. Running batch-norm
/// statistics update as a side effect.
pub fn forward_backward(
    model: &mut Model,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(f64, Gradients), TrainError> {
    let (bn_count, c, h, w) = batch.images.shape();
    if c != model.spec.in_c || h != model.spec.in_h || w != model.spec.in_w {
        return Err(TrainError::BatchShape {
            got: (c, h, w),
            want: (model.spec.in_c, model.spec.in_h, model.spec.in_w),
        });
    }
    debug_assert_eq!(bn_count, batch.gts.len());

    let spec = model.spec.clone();
    let mut tape: Vec<TapeRecord> = Vec::with_capacity(spec.layers.len());
    let mut x = batch.images.clone();

    // ---- forward ----
    for (layer_idx, layer) in spec.layers.iter().enumerate() {
        match layer.kind {
            LayerKind::Detect => break,
            LayerKind::Maxpool => {
                let in_shape = x.shape();
                let (y, argmax) = maxpool_with_argmax(&x, layer.k, layer.stride);
                tape.push(TapeRecord::Pool { argmax, in_shape });
                x = y;
            }
            LayerKind::Conv => {
                let params = model.layers[layer_idx].as_mut().expect("conv has params");
                let x_raw = x.clone();
                let shape_err = |source: ShapeError| TrainError::Shape {
                    layer: layer.name.clone(),
                    source,
                };
                // input quantizer (straight-through in the backward pass)
                let (x_codes, x_used, delta) = if layer.quant.acts_quantized() {
                    let mut q = layer.quant;
                    q.clip_alpha = params.clip_alpha;
                    let codes = quantize_act(&x_raw, &q).map_err(|_| TrainError::NonFinite {
                        layer: layer.name.clone(),
                    })?;
                    let dequant = codes.dequantize();
                    (Some(codes.codes_tensor()), dequant, codes.delta)
                } else {
                    (None, x_raw.clone(), 1.0)
                };
                // weight quantizer
                let (w_levels, w_eff, w_scales) = if layer.quant.weights_quantized() {
                    let qw = quantize_weights(&params.weights, &layer.quant);
                    let scales = qw.scale.clone();
                    (Some(qw.levels_tensor()), qw.dequantize(), scales)
                } else {
                    (None, params.weights.clone(), vec![1.0; layer.c_out])
                };
                // duplication, in the configured forward mode; the same
                // transform applies to the scaled pair saved for backward
                // and to the integer pair driving the forward value
                let transform = |xs: Tensor, ws: Tensor| -> Result<(Tensor, Tensor), TrainError> {
                    if layer.d_w > 1 {
                        match cfg.dup_mode {
                            DupMode::Expand => Ok((xs, channel_tile(&ws, layer.d_w))),
                            DupMode::Fast => Ok((
                                channel_group_sum(&xs, layer.d_w).map_err(&shape_err)?,
                                ws,
                            )),
                        }
                    } else if layer.d_x > 1 {
                        match cfg.dup_mode {
                            DupMode::Expand => Ok((channel_tile(&xs, layer.d_x), ws)),
                            DupMode::Fast => Ok((
                                xs,
                                channel_group_sum(&ws, layer.d_x).map_err(&shape_err)?,
                            )),
                        }
                    } else {
                        Ok((xs, ws))
                    }
                };
                let (x_conv, w_conv) = transform(x_used, w_eff)?;
                // with both sides quantized, run the exact integer core so
                // the forward value is identical in either mode, then apply
                // the step-times-scale affine
                let mut y = match (x_codes, w_levels) {
                    (Some(codes), Some(levels)) => {
                        let (xi, wi) = transform(codes, levels)?;
                        let acc =
                            conv2d_real(&xi, &wi, layer.stride, layer.pad).map_err(&shape_err)?;
                        let scale: Vec<f64> = w_scales.iter().map(|&s| s * delta).collect();
                        crate::layers::affine_apply(&acc, &scale, &vec![0.0; layer.c_out][..])
                    }
                    _ => conv2d_real(&x_conv, &w_conv, layer.stride, layer.pad)
                        .map_err(&shape_err)?,
                };
                if let Some(bias) = &params.bias {
                    per_channel_bias_add(&mut y, bias);
                }
                let bn_cache = match params.bn.as_mut() {
                    Some(bn) => {
                        let (z, cache) =
                            batchnorm_train_forward(&y, bn, cfg.bn_momentum, crate::layers::BN_EPS);
                        y = z;
                        Some(cache)
                    }
                    None => None,
                };
                let y_preact = y.clone();
                let out = match layer.activation {
                    Activation::Leaky => leaky(&y, LEAKY_SLOPE),
                    Activation::Linear | Activation::Quant => y,
                };
                if !out.all_finite() {
                    return Err(TrainError::NonFinite {
                        layer: layer.name.clone(),
                    });
                }
                tape.push(TapeRecord::Conv {
                    layer_idx,
                    x_raw,
                    x_conv,
                    w_conv,
                    bn: bn_cache,
                    y_preact,
                });
                x = out;
            }
        }
    }

    // ---- loss on the head ----
    let (loss, mut grad) = head_loss(
        &x,
        &batch.gts,
        &spec.anchors,
        spec.classes,
        cfg.lambda_coord,
        cfg.lambda_noobj,
    );
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            layer: "Detect".into(),
        });
    }

    // ---- backward, strict reverse order ----
    let mut grads: Vec<Option<LayerGrads>> = vec![None; spec.layers.len()];
    for record in tape.iter().rev() {
        match record {
            TapeRecord::Pool {
                argmax, in_shape, ..
            } => {
                let mut dx = Tensor::zeros(in_shape.0, in_shape.1, in_shape.2, in_shape.3);
                let dxd = dx.data_mut();
                for (out_idx, &in_idx) in argmax.iter().enumerate() {
                    dxd[in_idx] += grad.data()[out_idx];
                }
                grad = dx;
            }
            TapeRecord::Conv {
                layer_idx,
                x_raw,
                x_conv,
                w_conv,
                bn,
                y_preact,
            } => {
                let layer = &spec.layers[*layer_idx];
                let params = model.layers[*layer_idx].as_ref().expect("conv has params");
                let mut dy = match layer.activation {
                    Activation::Leaky => leaky_backward(&grad, y_preact, LEAKY_SLOPE),
                    Activation::Linear | Activation::Quant => grad.clone(),
                };
                let (mut dgamma, mut dbeta) = (None, None);
                if let (Some(cache), Some(bn_params)) = (bn, params.bn.as_ref()) {
                    let (dx_bn, dg, db) = batchnorm_backward(&dy, cache, &bn_params.gamma);
                    dy = dx_bn;
                    dgamma = Some(dg);
                    dbeta = Some(db);
                }
                let dbias = params.bias.as_ref().map(|_| {
                    let (n, c, hh, ww) = dy.shape();
                    let plane = hh * ww;
                    let mut acc = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            acc[ch] += dy.data()[base..base + plane].iter().sum::<f64>();
                        }
                    }
                    acc
                });

                let dw_conv =
                    conv2d_backward_weights(&dy, x_conv, layer.k, layer.stride, layer.pad);
                let dx_conv = conv2d_backward_input(
                    &dy,
                    w_conv,
                    x_conv.h(),
                    x_conv.w(),
                    layer.stride,
                    layer.pad,
                );

                // undo the duplication transforms
                let (dw_eff, dx_used) = if layer.d_w > 1 {
                    match cfg.dup_mode {
                        DupMode::Expand => (
                            dupweight_grad_template(&dw_conv, layer.d_w, cfg.reduce)
                                .expect("divisibility validated"),
                            dx_conv,
                        ),
                        DupMode::Fast => {
                            let dw = match cfg.reduce {
                                Reduce::Sum => dw_conv,
                                Reduce::Average => dw_conv.scaled(1.0 / layer.d_w as f64),
                            };
                            (dw, channel_tile(&dx_conv, layer.d_w))
                        }
                    }
                } else if layer.d_x > 1 {
                    match cfg.dup_mode {
                        DupMode::Expand => (
                            dw_conv,
                            dupfeature_grad_input(&dx_conv, layer.d_x, cfg.reduce)
                                .expect("divisibility validated"),
                        ),
                        DupMode::Fast => {
                            let dx = match cfg.reduce {
                                Reduce::Sum => dx_conv,
                                Reduce::Average => dx_conv.scaled(1.0 / layer.d_x as f64),
                            };
                            (channel_tile(&dw_conv, layer.d_x), dx)
                        }
                    }
                } else {
                    (dw_conv, dx_conv)
                };

                let dw_master = if layer.quant.weights_quantized() {
                    ste_weight_backward(&dw_eff, &params.weights)
                } else {
                    dw_eff
                };
                let (dx, dalpha) = if layer.quant.acts_quantized() {
                    quantize_act_backward(&dx_used, x_raw, params.clip_alpha)
                } else {
                    (dx_used, 0.0)
                };
                grads[*layer_idx] = Some(LayerGrads {
                    weights: dw_master,
                    bias: dbias,
                    gamma: dgamma,
                    beta: dbeta,
                    alpha: dalpha,
                });
                grad = dx;
            }
        }
    }

    Ok((
        loss,
        Gradients {
            layers: grads,
            input: grad,
        },
    ))
}

// ---- detection loss ----

/// Training-path logit clamp, an overflow guard for the exp transform and
/// a saturation backstop for the sigmoids. Inference decoding stays
/// unclamped.
pub const LOGIT_CLAMP: f64 = 12.0;

/// Decoded head values for one image, flattened as [anchor][gy][gx].
#[derive(Debug, Clone)]
pub struct DecodedGrid {
    pub gh: usize,
    pub gw: usize,
    pub anchors: Vec<Anchor>,
    pub classes: usize,
    pub cx: Vec<f64>,
    pub cy: Vec<f64>,
    pub w: Vec<f64>,
    pub h: Vec<f64>,
    pub obj: Vec<f64>,
    /// [anchor][gy][gx][class]
    pub cls: Vec<f64>,
}

pub fn decode_head_grid(
    head: &Tensor,
    image: usize,
    anchors: &[Anchor],
    classes: usize,
) -> DecodedGrid {
    let (_, _, gh, gw) = head.shape();
    let per_anchor = 5 + classes;
    let cells = anchors.len() * gh * gw;
    let mut grid = DecodedGrid {
        gh,
        gw,
        anchors: anchors.to_vec(),
        classes,
        cx: Vec::with_capacity(cells),
        cy: Vec::with_capacity(cells),
        w: Vec::with_capacity(cells),
        h: Vec::with_capacity(cells),
        obj: Vec::with_capacity(cells),
        cls: Vec::with_capacity(cells * classes),
    };
    let clamp = |v: f64| v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    for (a, anchor) in anchors.iter().enumerate() {
        let base = a * per_anchor;
        for gy in 0..gh {
            for gx in 0..gw {
                grid.cx
                    .push((gx as f64 + sigmoid(clamp(head.at(image, base, gy, gx)))) / gw as f64);
                grid.cy
                    .push((gy as f64 + sigmoid(clamp(head.at(image, base + 1, gy, gx)))) / gh as f64);
                grid.w
                    .push(anchor.pw * clamp(head.at(image, base + 2, gy, gx)).exp() / gw as f64);
                grid.h
                    .push(anchor.ph * clamp(head.at(image, base + 3, gy, gx)).exp() / gh as f64);
                grid.obj
                    .push(sigmoid(clamp(head.at(image, base + 4, gy, gx))));
                for cl in 0..classes {
                    grid.cls
                        .push(sigmoid(clamp(head.at(image, base + 5 + cl, gy, gx))));
                }
            }
        }
    }
    grid
}

/// Derivative gate for the training clamp: zero outside the clamp window.
#[inline]
fn clamp_gate(logit: f64) -> f64 {
    if logit.abs() >= LOGIT_CLAMP {
        0.0
    } else {
        1.0
    }
}

fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

/// Assigns each ground-truth box to the best-shape-IoU anchor in its cell;
/// a second box falling on a taken anchor tries the next best, and is
/// dropped if the cell is full. Returns (gt index, anchor, gy, gx).
pub fn assign_ground_truth(
    gts: &[GtBox],
    anchors: &[Anchor],
    gh: usize,
    gw: usize,
) -> Vec<(usize, usize, usize, usize)> {
    let mut taken = vec![false; anchors.len() * gh * gw];
    let mut out = Vec::with_capacity(gts.len());
    for (gi, gt) in gts.iter().enumerate() {
        let gx = ((gt.cx * gw as f64).floor() as usize).min(gw - 1);
        let gy = ((gt.cy * gh as f64).floor() as usize).min(gh - 1);
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        let iou_of = |a: usize| {
            shape_iou(
                gt.w,
                gt.h,
                anchors[a].pw / gw as f64,
                anchors[a].ph / gh as f64,
            )
        };
        order.sort_by(|&i, &j| iou_of(j).partial_cmp(&iou_of(i)).unwrap().then(i.cmp(&j)));
        for a in order {
            let slot = (a * gh + gy) * gw + gx;
            if !taken[slot] {
                taken[slot] = true;
                out.push((gi, a, gy, gx));
                break;
            }
        }
    }
    out
}

/// Sum-squared detection loss over decoded values: coordinate and
/// objectness terms on assigned anchors, down-weighted objectness on the
/// rest, and a class term on assigned anchors. Coordinates are compared in
/// the anchor transform space (cell-relative for centers, log for sizes)
/// so the size gradients stay well conditioned.
pub fn detection_loss(
    grid: &DecodedGrid,
    gts: &[GtBox],
    lambda_coord: f64,
    lambda_noobj: f64,
) -> f64 {
    let assignments = assign_ground_truth(gts, &grid.anchors, grid.gh, grid.gw);
    let mut assigned = vec![None; grid.obj.len()];
    for &(gi, a, gy, gx) in &assignments {
        assigned[(a * grid.gh + gy) * grid.gw + gx] = Some(gi);
    }
    let (gh, gw) = (grid.gh, grid.gw);
    let mut loss = 0.0;
    for (slot, slot_gt) in assigned.iter().enumerate() {
        match slot_gt {
            Some(gi) => {
                let gt = &gts[*gi];
                let dx = (grid.cx[slot] - gt.cx) * gw as f64;
                let dy = (grid.cy[slot] - gt.cy) * gh as f64;
                let dw = (grid.w[slot] / gt.w).ln();
                let dh = (grid.h[slot] / gt.h).ln();
                loss += lambda_coord * (dx * dx + dy * dy + dw * dw + dh * dh);
                let dobj = grid.obj[slot] - 1.0;
                loss += dobj * dobj;
                for cl in 0..grid.classes {
                    let target = if cl == gt.class { 1.0 } else { 0.0 };
                    let d = grid.cls[slot * grid.classes + cl] - target;
                    loss += d * d;
                }
            }
            None => {
                loss += lambda_noobj * grid.obj[slot] * grid.obj[slot];
            }
        }
    }
    loss
}

/// Loss over a batch head plus the gradient with respect to the head
/// logits; the loss is averaged over the batch.
pub fn head_loss(
    head: &Tensor,
    gts: &[Vec<GtBox>],
    anchors: &[Anchor],
    classes: usize,
    lambda_coord: f64,
    lambda_noobj: f64,
) -> (f64, Tensor) {
    let (n, _, gh, gw) = head.shape();
    let per_anchor = 5 + classes;
    let mut total = 0.0;
    let mut dhead = Tensor::zeros(n, head.c(), gh, gw);
    let inv_n = 1.0 / n as f64;
    for img in 0..n {
        let grid = decode_head_grid(head, img, anchors, classes);
        let img_gts = &gts[img];
        total += detection_loss(&grid, img_gts, lambda_coord, lambda_noobj);

        let assignments = assign_ground_truth(img_gts, anchors, gh, gw);
        let mut assigned = vec![None; grid.obj.len()];
        for &(gi, a, gy, gx) in &assignments {
            assigned[(a * gh + gy) * gw + gx] = Some(gi);
        }
        for a in 0..anchors.len() {
            let base = a * per_anchor;
            for gy in 0..gh {
                for gx in 0..gw {
                    let slot = (a * gh + gy) * gw + gx;
                    let obj = grid.obj[slot];
                    match assigned[slot] {
                        Some(gi) => {
                            let gt = &img_gts[gi];
                            // chain through the decode transforms, gating
                            // each logit by the training clamp
                            let sx = grid.cx[slot] * gw as f64 - gx as f64; // sigmoid(tx)
                            let sy = grid.cy[slot] * gh as f64 - gy as f64;
                            let dcx =
                                2.0 * lambda_coord * (grid.cx[slot] - gt.cx) * gw as f64 * inv_n;
                            let dcy =
                                2.0 * lambda_coord * (grid.cy[slot] - gt.cy) * gh as f64 * inv_n;
                            dhead.set(
                                img,
                                base,
                                gy,
                                gx,
                                dcx * sx * (1.0 - sx) * clamp_gate(head.at(img, base, gy, gx)),
                            );
                            dhead.set(
                                img,
                                base + 1,
                                gy,
                                gx,
                                dcy * sy * (1.0 - sy)
                                    * clamp_gate(head.at(img, base + 1, gy, gx)),
                            );
                            // log-space size terms: d ln(w) / d tw = 1
                            let dwv =
                                2.0 * lambda_coord * (grid.w[slot] / gt.w).ln() * inv_n;
                            let dhv =
                                2.0 * lambda_coord * (grid.h[slot] / gt.h).ln() * inv_n;
                            dhead.set(
                                img,
                                base + 2,
                                gy,
                                gx,
                                dwv * clamp_gate(head.at(img, base + 2, gy, gx)),
                            );
                            dhead.set(
                                img,
                                base + 3,
                                gy,
                                gx,
                                dhv * clamp_gate(head.at(img, base + 3, gy, gx)),
                            );
                            let dobj = 2.0 * (obj - 1.0) * obj * (1.0 - obj) * inv_n;
                            dhead.set(
                                img,
                                base + 4,
                                gy,
                                gx,
                                dobj * clamp_gate(head.at(img, base + 4, gy, gx)),
                            );
                            for cl in 0..classes {
                                let p = grid.cls[slot * classes + cl];
                                let target = if cl == gt.class { 1.0 } else { 0.0 };
                                let d = 2.0 * (p - target) * p * (1.0 - p) * inv_n;
                                dhead.set(
                                    img,
                                    base + 5 + cl,
                                    gy,
                                    gx,
                                    d * clamp_gate(head.at(img, base + 5 + cl, gy, gx)),
                                );
                            }
                        }
                        None => {
                            let d = 2.0 * lambda_noobj * obj * obj * (1.0 - obj) * inv_n;
                            dhead.set(
                                img,
                                base + 4,
                                gy,
                                gx,
                                d * clamp_gate(head.at(img, base + 4, gy, gx)),
                            );
                        }
                    }
                }
            }
        }
    }
    (total * inv_n, dhead)
}

// ---- optimizer ----

#[derive(Debug, Clone)]
struct LayerVel {
    weights: Tensor,
    bias: Option<Vec<f64>>,
    gamma: Option<Vec<f64>>,
    beta: Option<Vec<f64>>,
    alpha: f64,
}

/// Momentum buffers aligned with the model's layers.
#[derive(Debug, Clone)]
pub struct Velocity {
    layers: Vec<Option<LayerVel>>,
}

impl Velocity {
    pub fn zeros(model: &Model) -> Velocity {
        let layers = model
            .layers
            .iter()
            .map(|slot| {
                slot.as_ref().map(|p| LayerVel {
                    weights: Tensor::zeros(
                        p.weights.n(),
                        p.weights.c(),
                        p.weights.h(),
                        p.weights.w(),
                    ),
                    bias: p.bias.as_ref().map(|b| vec![0.0; b.len()]),
                    gamma: p.bn.as_ref().map(|bn| vec![0.0; bn.gamma.len()]),
                    beta: p.bn.as_ref().map(|bn| vec![0.0; bn.beta.len()]),
                    alpha: 0.0,
                })
            })
            .collect();
        Velocity { layers }
    }
}

fn sgd_vec(p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64) {
    for i in 0..p.len() {
        v[i] = momentum * v[i] + g[i];
        p[i] -= lr * v[i];
    }
}

/// Caps the global L2 norm of all parameter gradients.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let mut sq = 0.0;
    for g in grads.layers.iter().flatten() {
        sq += g.weights.data().iter().map(|v| v * v).sum::<f64>();
        for v in [&g.bias, &g.gamma, &g.beta].into_iter().flatten() {
            sq += v.iter().map(|v| v * v).sum::<f64>();
        }
        sq += g.alpha * g.alpha;
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return;
    }
    let scale = max_norm / norm;
    for g in grads.layers.iter_mut().flatten() {
        for v in g.weights.data_mut() {
            *v *= scale;
        }
        for v in [&mut g.bias, &mut g.gamma, &mut g.beta].into_iter().flatten() {
            for x in v.iter_mut() {
                *x *= scale;
            }
        }
        g.alpha *= scale;
    }
}

/// v <- momentum * v + g (+ weight_decay * p on weights); p <- p - lr * v.
/// The activation clip threshold updates like any other parameter.
pub fn sgd_step(
    model: &mut Model,
    vel: &mut Velocity,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for (slot, (vslot, gslot)) in model
        .layers
        .iter_mut()
        .zip(vel.layers.iter_mut().zip(grads.layers.iter()))
    {
        let (Some(p), Some(v), Some(g)) = (slot.as_mut(), vslot.as_mut(), gslot.as_ref()) else {
            continue;
        };
        {
            let pw = p.weights.data_mut();
            let vw = v.weights.data_mut();
            let gw = g.weights.data();
            for i in 0..pw.len() {
                vw[i] = momentum * vw[i] + gw[i] + weight_decay * pw[i];
                pw[i] -= lr * vw[i];
            }
        }
        if let (Some(pb), Some(vb), Some(gb)) = (p.bias.as_mut(), v.bias.as_mut(), g.bias.as_ref())
        {
            sgd_vec(pb, vb, gb, lr, momentum);
        }
        if let Some(bn) = p.bn.as_mut() {
            if let (Some(vg), Some(gg)) = (v.gamma.as_mut(), g.gamma.as_ref()) {
                sgd_vec(&mut bn.gamma, vg, gg, lr, momentum);
            }
            if let (Some(vb), Some(gb)) = (v.beta.as_mut(), g.beta.as_ref()) {
                sgd_vec(&mut bn.beta, vb, gb, lr, momentum);
            }
        }
        if p.alpha_trainable {
            v.alpha = momentum * v.alpha + g.alpha;
            p.clip_alpha -= lr * v.alpha;
        }
    }
}

/// Post-step constraints: masters of quantized-weight layers stay in the
/// unit clip (outside it the straight-through gradient is zero and the
/// weight would freeze), and the clip threshold stays positive.
pub fn apply_constraints(model: &mut Model) {
    let spec_layers = model.spec.layers.clone();
    for (layer, slot) in spec_layers.iter().zip(model.layers.iter_mut()) {
        let Some(p) = slot.as_mut() else { continue };
        if layer.quant.weights_quantized() {
            for w in p.weights.data_mut() {
                *w = w.clamp(-1.0, 1.0);
            }
        }
        if p.clip_alpha < 0.05 {
            p.clip_alpha = 0.05;
        }
    }
}

// ---- training loop ----

fn hflip_image(image: &Tensor) -> Tensor {
    let (n, c, h, w) = image.shape();
    Tensor::from_fn(n, c, h, w, |i, ch, y, x| image.at(i, ch, y, w - 1 - x))
}

fn translate_image(image: &Tensor, dy: i64, dx: i64) -> Tensor {
    let (n, c, h, w) = image.shape();
    Tensor::from_fn(n, c, h, w, |i, ch, y, x| {
        let sy = y as i64 + dy;
        let sx = x as i64 + dx;
        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
            0.0
        } else {
            image.at(i, ch, sy as usize, sx as usize)
        }
    })
}

/// Runs SGD for `cfg.total_iters` iterations over the dataset, invoking
/// `on_iter(iter, lr, loss)` after every step. Deterministic for a fixed
/// seed and config.
pub fn train<F: FnMut(usize, f64, f64)>(
    model: &mut Model,
    data: &[(Tensor, Vec<GtBox>)],
    cfg: &TrainConfig,
    mut on_iter: F,
) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (in_c, in_h, in_w) = (model.spec.in_c, model.spec.in_h, model.spec.in_w);
    for (img, _) in data {
        let (_, c, h, w) = img.shape();
        if (c, h, w) != (in_c, in_h, in_w) {
            return Err(TrainError::BatchShape {
                got: (c, h, w),
                want: (in_c, in_h, in_w),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vel = Velocity::zeros(model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    for iter in 0..cfg.total_iters {
        let mut images = Tensor::zeros(cfg.batch_size, in_c, in_h, in_w);
        let mut gts: Vec<Vec<GtBox>> = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (img, boxes) = &data[order[cursor]];
            cursor += 1;
            let mut img = img.clone();
            let mut boxes = boxes.clone();
            if cfg.hflip && rng.gen_bool(0.5) {
                img = hflip_image(&img);
                for bx in boxes.iter_mut() {
                    bx.cx = 1.0 - bx.cx;
                }
            }
            if cfg.rand_crop {
                let dy = rng.gen_range(-3..=3i64);
                let dx = rng.gen_range(-3..=3i64);
                img = translate_image(&img, dy, dx);
                boxes = boxes
                    .into_iter()
                    .filter_map(|mut bx| {
                        bx.cx -= dx as f64 / in_w as f64;
                        bx.cy -= dy as f64 / in_h as f64;
                        ((0.0..1.0).contains(&bx.cx) && (0.0..1.0).contains(&bx.cy)).then_some(bx)
                    })
                    .collect();
            }
            let plane = in_c * in_h * in_w;
            images.data_mut()[b * plane..(b + 1) * plane].copy_from_slice(img.data());
            gts.push(boxes);
        }
        let batch = Batch { images, gts };
        let lr = lr_at(iter, cfg);
        let (loss, mut grads) = forward_backward(model, &batch, cfg)?;
        clip_gradients(&mut grads, cfg.grad_clip);
        sgd_step(model, &mut vel, &grads, lr, cfg.momentum, cfg.weight_decay);
        apply_constraints(model);
        on_iter(iter, lr, loss);
    }
    Ok(())
}

// ---- evaluation ----

pub fn default_fp_budget(num_images: usize) -> usize {
    (num_images as f64 * 0.1).ceil() as usize
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty dataset (no images or no ground-truth boxes)")]
    EmptyDataset,
}

/// Detection rate at a false-positive budget: walk predictions in
/// descending score order (equivalent to sweeping the confidence threshold
/// down), greedily matching each to an unmatched ground truth of its image
/// at the IoU threshold, and stop once the budget of false positives is
/// reached. Returns matched ground truth as a fraction of all ground truth.
pub fn eval_detection(
    preds: &[Vec<DetectionBox>],
    gts: &[Vec<GtBox>],
    fp_budget: usize,
    iou_threshold: f64,
) -> Result<f64, EvalError> {
    assert_eq!(preds.len(), gts.len());
    let total_gt: usize = gts.iter().map(|g| g.len()).sum();
    if preds.is_empty() || total_gt == 0 {
        return Err(EvalError::EmptyDataset);
    }
    let mut flat: Vec<(usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(img, boxes)| (0..boxes.len()).map(move |b| (img, b)))
        .collect();
    flat.sort_by(|&(ia, ba), &(ib, bb)| {
        preds[ib][bb]
            .score
            .partial_cmp(&preds[ia][ba].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ia.cmp(&ib))
            .then(ba.cmp(&bb))
    });
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (img, b) in flat {
        let pred = &preds[img][b];
        let pred_rect = (
            pred.cx - pred.w / 2.0,
            pred.cy - pred.h / 2.0,
            pred.cx + pred.w / 2.0,
            pred.cy + pred.h / 2.0,
        );
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts[img].iter().enumerate() {
            if matched[img][gi] {
                continue;
            }
            let overlap = crate::layers::iou_rect(pred_rect, gt.corners());
            if overlap >= iou_threshold && best.map(|(_, b)| overlap > b).unwrap_or(true) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[img][gi] = true;
                tp += 1;
            }
            None => {
                fp += 1;
                if fp >= fp_budget {
                    break;
                }
            }
        }
    }
    Ok(tp as f64 / total_gt as f64)
}

// ---- finite-difference gradient checking ----

/// Central differences of a scalar function, one coordinate at a time.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &mut [f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let hi = f(x);
        x[i] = orig - eps;
        let lo = f(x);
        x[i] = orig;
        out[i] = (hi - lo) / (2.0 * eps);
    }
    out
}

/// Relative error with a max(1, |analytic|) denominator.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

/// Runs the finite-difference checks for every layer type on seeded random
/// small shapes (real-valued path). Returns one row per check.
pub fn gradcheck_suite(eps: f64) -> Vec<GradCheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9);
    let mut results = Vec::new();

    let rand_tensor = |rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize| {
        Tensor::from_fn(n, c, h, w, |_, _, _, _| rng.gen_range(-1.0..1.0))
    };

    // plain convolution: gradients for input and weights
    {
        let x = rand_tensor(&mut rng, 1, 3, 5, 5);
        let w = rand_tensor(&mut rng, 2, 3, 3, 3);
        let r = rand_tensor(&mut rng, 1, 2, 5, 5);
        let loss = |x: &Tensor, w: &Tensor| {
            conv2d_real(x, w, 1, 1).unwrap().dot(&r).unwrap()
        };
        let dy = r.clone();
        let analytic_dw = conv2d_backward_weights(&dy, &x, 3, 1, 1);
        let analytic_dx = conv2d_backward_input(&dy, &w, 5, 5, 1, 1);
        let mut xv = x.data().to_vec();
        let mut err: f64 = 0.0;
        let fd = finite_diff(
            &mut |v: &[f64]| {
                let xt = Tensor::new(1, 3, 5, 5, v.to_vec()).unwrap();
                loss(&xt, &w)
            },
            &mut xv,
            eps,
        );
        err = err.max(max_rel_error(analytic_dx.data(), &fd));
        let mut wv = w.data().to_vec();
        let fd = finite_diff(
            &mut |v: &[f64]| {
                let wt = Tensor::new(2, 3, 3, 3, v.to_vec()).unwrap();
                loss(&x, &wt)
            },
            &mut wv,
            eps,
        );
        err = err.max(max_rel_error(analytic_dw.data(), &fd));
        results.push(GradCheckResult {
            name: "conv".into(),
            max_rel_err: err,
        });
    }

    // duplicated-weight convolution, both forward modes, sum reduction
    for (mode, name) in [(DupMode::Expand, "dupweight-tile"), (DupMode::Fast, "dupweight-fast")] {
        let d = 2usize;
        let x = rand_tensor(&mut rng, 1, 4, 4, 4);
        let wt = rand_tensor(&mut rng, 2, 2, 3, 3);
        let r = rand_tensor(&mut rng, 1, 2, 4, 4);
        let forward = |x: &Tensor, wt: &Tensor| match mode {
            DupMode::Expand => conv2d_real(x, &channel_tile(wt, d), 1, 1).unwrap(),
            DupMode::Fast => {
                conv2d_real(&channel_group_sum(x, d).unwrap(), wt, 1, 1).unwrap()
            }
        };
        let dy = r.clone();
        let (analytic_dw, analytic_dx) = match mode {
            DupMode::Expand => {
                let dw_full = conv2d_backward_weights(&dy, &x, 3, 1, 1);
                (
                    dupweight_grad_template(&dw_full, d, Reduce::Sum).unwrap(),
                    conv2d_backward_input(&dy, &channel_tile(&wt, d), 4, 4, 1, 1),
                )
            }
            DupMode::Fast => {
                let xs = channel_group_sum(&x, d).unwrap();
                (
                    conv2d_backward_weights(&dy, &xs, 3, 1, 1),
                    channel_tile(&conv2d_backward_input(&dy, &wt, 4, 4, 1, 1), d),
                )
            }
        };
        let mut err: f64 = 0.0;
        let mut wv = wt.data().to_vec();
        let fd = finite_diff(
            &mut |v: &[f64]| {
                let w = Tensor::new(2, 2, 3, 3, v.to_vec()).unwrap();
                forward(&x, &w).dot(&r).unwrap()
            },
            &mut wv,
            eps,
        );
        err = err.max(max_rel_error(analytic_dw.data(), &fd));
        let mut xv = x.data().to_vec();
        let fd = finite_diff(
            &mut |v: &[f64]| {
                let xt = Tensor::new(1, 4, 4, 4, v.to_vec()).unwrap();
                forward(&xt, &wt).dot(&r).unwrap()
            },
            &mut xv,
            eps,
        );
        err = err.max(max_rel_error(analytic_dx.data(), &fd));
        results.push(GradCheckResult {
            name: name.into(),
            max_rel_err: err,
        });
    }

    // duplicated-feature convolution, both forward modes, sum reduction
    for (mode, name) in [(DupMode::Expand, "dupfeature-dup"), (DupMode::Fast, "dupfeature-fast")] {
        let d = 2usize;
        let x = rand_tensor(&mut rng, 1, 2, 4, 4);
        let w = rand_tensor(&mut rng, 2, 4, 3, 3);
        let r = rand_tensor(&mut rng, 1, 2, 4, 4);
        let forward = |x: &Tensor, w: &Tensor| match mode {
            DupMode::Expand => conv2d_real(&channel_tile(x, d), w, 1, 1).unwrap(),
            DupMode::Fast => {
                conv2d_real(x, &channel_group_sum(w, d).unwrap(), 1, 1).unwrap()
            }
        };
        let dy = r.clone();
        let (analytic_dw, analytic_dx) = match mode {
            DupMode::Expand => {
                let xd = channel_tile(&x, d);
                (
                    conv2d_backward_weights(&dy, &xd, 3, 1, 1),
                    dupfeature_grad_input(
                        &conv2d_backward_input(&dy, &w, 4, 4, 1, 1),
                        d,
                        Reduce::Sum,
                    )
                    .unwrap(),
                )
            }
            DupMode::Fast => {
                let ws = channel_group_sum(&w, d).unwrap();
                (
                    channel_tile(&conv2d_backward_weights(&dy, &x, 3, 1, 1), d),
                    conv2d_backward_input(&dy, &ws, 4, 4, 1, 1),
                )
            }
        };
        let mut err: f64 = 0.0;
        let mut wv = w.data().to_vec();
        let fd = finite_diff(
            &mut |v: &[f64]| {
                let wt = Tensor::new(2, 4, 3, 3, v.to_vec()).unwrap();
                forward(&x, &wt).dot(&r).unwrap()
            },
            &mut wv,
            eps,
        );
        err = err.max(max_rel_error(analytic_dw.data(), &fd));
        let mut xv = x.data().to_vec();
        let fd = finite_diff(
            &mut |v: &[f64]| {
                let xt = Tensor::new(1, 2, 4, 4, v.to_vec()).unwrap();
                forward(&xt, &w).dot(&r).unwrap()
            },
            &mut xv,
            eps,
        );
        err = err.max(max_rel_error(analytic_dx.data(), &fd));
        results.push(GradCheckResult {
            name: name.into(),
            max_rel_err: err,
        });
    }

    // batch-norm on batch statistics
    {
        let x = rand_tensor(&mut rng, 2, 3, 4, 4);
        let gamma: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let r = rand_tensor(&mut rng, 2, 3, 4, 4);
        let eval = |xv: &[f64], g: &[f64], b: &[f64]| {
            let xt = Tensor::new(2, 3, 4, 4, xv.to_vec()).unwrap();
            let mut bn = crate::model::BnParams {
                gamma: g.to_vec(),
                beta: b.to_vec(),
                running_mean: vec![0.0; 3],
                running_var: vec![1.0; 3],
            };
            let (y, _) = batchnorm_train_forward(&xt, &mut bn, 1.0, crate::layers::BN_EPS);
            y.dot(&r).unwrap()
        };
        let mut bn = crate::model::BnParams {
            gamma: gamma.clone(),
            beta: beta.clone(),
            running_mean: vec![0.0; 3],
            running_var: vec![1.0; 3],
        };
        let (_, cache) = batchnorm_train_forward(&x, &mut bn, 1.0, crate::layers::BN_EPS);
        let (adx, adg, adb) = batchnorm_backward(&r, &cache, &gamma);
        let mut err: f64 = 0.0;
        let mut xv = x.data().to_vec();
        let fd = finite_diff(&mut |v: &[f64]| eval(v, &gamma, &beta), &mut xv, eps);
        err = err.max(max_rel_error(adx.data(), &fd));
        let mut gv = gamma.clone();
        let fd = finite_diff(&mut |v: &[f64]| eval(x.data(), v, &beta), &mut gv, eps);
        err = err.max(max_rel_error(&adg, &fd));
        let mut bv = beta.clone();
        let fd = finite_diff(&mut |v: &[f64]| eval(x.data(), &gamma, v), &mut bv, eps);
        err = err.max(max_rel_error(&adb, &fd));
        results.push(GradCheckResult {
            name: "batchnorm".into(),
            max_rel_err: err,
        });
    }

    // max pooling on a tie-free input
    {
        let mut values: Vec<f64> = (0..2 * 6 * 6).map(|i| i as f64 * 0.25).collect();
        values.shuffle(&mut rng);
        let x = Tensor::new(1, 2, 6, 6, values).unwrap();
        let r = rand_tensor(&mut rng, 1, 2, 3, 3);
        let (_, argmax) = maxpool_with_argmax(&x, 2, 2);
        let mut analytic = Tensor::zeros(1, 2, 6, 6);
        for (oi, &ii) in argmax.iter().enumerate() {
            analytic.data_mut()[ii] += r.data()[oi];
        }
        let mut xv = x.data().to_vec();
        let fd = finite_diff(
            &mut |v: &[f64]| {
                let xt = Tensor::new(1, 2, 6, 6, v.to_vec()).unwrap();
                maxpool_with_argmax(&xt, 2, 2).0.dot(&r).unwrap()
            },
            &mut xv,
            eps,
        );
        results.push(GradCheckResult {
            name: "maxpool".into(),
            max_rel_err: max_rel_error(analytic.data(), &fd),
        });
    }

    // leaky activation away from the kink
    {
        let x = Tensor::from_fn(1, 2, 4, 4, |_, _, _, _| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let r = rand_tensor(&mut rng, 1, 2, 4, 4);
        let analytic = leaky_backward(&r, &x, LEAKY_SLOPE);
        let mut xv = x.data().to_vec();
        let fd = finite_diff(
            &mut |v: &[f64]| {
                let xt = Tensor::new(1, 2, 4, 4, v.to_vec()).unwrap();
                leaky(&xt, LEAKY_SLOPE).dot(&r).unwrap()
            },
            &mut xv,
            eps,
        );
        results.push(GradCheckResult {
            name: "leaky".into(),
            max_rel_err: max_rel_error(analytic.data(), &fd),
        });
    }

    // detection loss against the head logits
    {
        let anchors = vec![
            Anchor { pw: 1.0, ph: 1.3 },
            Anchor { pw: 2.0, ph: 2.5 },
        ];
        let head = Tensor::from_fn(1, 12, 2, 2, |_, _, _, _| rng.gen_range(-1.5..1.5));
        let gts = vec![vec![
            GtBox {
                class: 0,
                cx: 0.3,
                cy: 0.4,
                w: 0.35,
                h: 0.4,
            },
            GtBox {
                class: 0,
                cx: 0.7,
                cy: 0.72,
                w: 0.5,
                h: 0.6,
            },
        ]];
        let (_, analytic) = head_loss(&head, &gts, &anchors, 1, 5.0, 0.5);
        let mut hv = head.data().to_vec();
        let fd = finite_diff(
            &mut |v: &[f64]| {
                let ht = Tensor::new(1, 12, 2, 2, v.to_vec()).unwrap();
                head_loss(&ht, &gts, &anchors, 1, 5.0, 0.5).0
            },
            &mut hv,
            eps,
        );
        results.push(GradCheckResult {
            name: "detection-loss".into(),
            max_rel_err: max_rel_error(analytic.data(), &fd),
        });
    }

    results
}
