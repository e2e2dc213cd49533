//! Runtime model: per-layer parameters, seeded initialization, and the
//! reference / packed inference paths.
//!
//! Inference runs the integer convolution core (codes times levels) and a
//! per-filter affine that folds the activation step, any per-filter weight
//! scale, and batch-norm. The reference and packed paths share everything
//! except the integer kernel, so their outputs are byte-identical.

use crate::bitpack::{pack_act, pack_weights, packed_conv2d, PackError};
use crate::config::{Activation, LayerKind, LayerSpec, NetworkSpec};
use crate::layers::{
    affine_apply, batchnorm_fold, conv2d_int_ref, conv2d_real, leaky, maxpool, nms, yolo_decode,
    DetectionBox, BN_EPS, LEAKY_SLOPE, NMS_IOU_THRESHOLD,
};
use crate::quant::{quantize_act, quantize_weights, QuantError};
use crate::tensor::{channel_tile, ShapeError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{layer}: {source}")]
    Quant {
        layer: String,
        #[source]
        source: QuantError,
    },
    #[error("{layer}: {source}")]
    Shape {
        layer: String,
        #[source]
        source: ShapeError,
    },
    #[error("{layer}: {source}")]
    Pack {
        layer: String,
        #[source]
        source: PackError,
    },
    #[error("input shape (c={got_c}, h={got_h}, w={got_w}) does not match network input (c={want_c}, h={want_h}, w={want_w})")]
    InputMismatch {
        got_c: usize,
        got_h: usize,
        got_w: usize,
        want_c: usize,
        want_h: usize,
        want_w: usize,
    },
}

/// Batch-norm parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn fold(&self) -> (Vec<f64>, Vec<f64>) {
        batchnorm_fold(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            BN_EPS,
        )
    }
}

/// Trainable state of one conv layer. Weights are stored at template size
/// `[c_out, c_in * d_x / d_w, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Option<Vec<f64>>,
    pub bn: Option<BnParams>,
    pub clip_alpha: f64,
    pub alpha_trainable: bool,
    /// Explicit per-filter weight scales from a loaded container; when
    /// absent the quantizer derives them from the master weights.
    pub stored_scales: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferPath {
    Reference,
    Packed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    /// Aligned with `spec.layers`; `None` for non-conv layers.
    pub layers: Vec<Option<ConvParams>>,
}

impl Model {
    /// Seeded He-style initialization; training starts from scratch.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first_conv = spec
            .layers
            .iter()
            .position(|l| l.kind == LayerKind::Conv)
            .expect("validated spec has convs");
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(idx, layer)| {
                if layer.kind != LayerKind::Conv {
                    return None;
                }
                let c_in_w = layer.weight_c_in();
                let fan_in = (c_in_w * layer.k * layer.k) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                let weights = Tensor::from_fn(layer.c_out, c_in_w, layer.k, layer.k, |_, _, _, _| {
                    normal.sample(&mut rng)
                });
                // the first a8 layer consumes raw image codes: step 1/255,
                // clip fixed at 1
                let raw_input = idx == first_conv && layer.quant.a_bits == 8;
                Some(ConvParams {
                    weights,
                    bias: (!layer.has_bn).then(|| vec![0.0; layer.c_out]),
                    bn: layer.has_bn.then(|| BnParams::identity(layer.c_out)),
                    clip_alpha: if raw_input { 1.0 } else { layer.quant.clip_alpha },
                    alpha_trainable: !raw_input && layer.quant.acts_quantized(),
                    stored_scales: None,
                })
            })
            .collect();
        Model {
            spec: spec.clone(),
            layers,
        }
    }

    pub fn conv_params(&self) -> impl Iterator<Item = (&LayerSpec, &ConvParams)> {
        self.spec
            .layers
            .iter()
            .zip(self.layers.iter())
            .filter_map(|(spec, params)| params.as_ref().map(|p| (spec, p)))
    }

    /// Per-filter weight scales used at inference: stored scales win,
    /// otherwise the quantizer derives them (1.0 for full precision).
    pub fn effective_scales(&self, layer: &LayerSpec, params: &ConvParams) -> Vec<f64> {
        if let Some(scales) = &params.stored_scales {
            return scales.clone();
        }
        if layer.quant.weights_quantized() {
            quantize_weights(&params.weights, &layer.quant).scale
        } else {
            vec![1.0; layer.c_out]
        }
    }

    /// Runs the network on one image (real values in [0, 1]) and returns
    /// the raw head tensor.
    pub fn infer_head(&self, image: &Tensor, path: InferPath) -> Result<Tensor, ModelError> {
        let (n, c, h, w) = image.shape();
        if n != 1 || c != self.spec.in_c || h != self.spec.in_h || w != self.spec.in_w {
            return Err(ModelError::InputMismatch {
                got_c: c,
                got_h: h,
                got_w: w,
                want_c: self.spec.in_c,
                want_h: self.spec.in_h,
                want_w: self.spec.in_w,
            });
        }
        let mut x = image.clone();
        for (layer, params) in self.spec.layers.iter().zip(self.layers.iter()) {
            match layer.kind {
                LayerKind::Maxpool => x = maxpool(&x, layer.k, layer.stride),
                LayerKind::Detect => break,
                LayerKind::Conv => {
                    let params = params.as_ref().expect("conv layer has params");
                    x = self.conv_forward_infer(layer, params, &x, path)?;
                }
            }
        }
        Ok(x)
    }

    fn conv_forward_infer(
        &self,
        layer: &LayerSpec,
        params: &ConvParams,
        x: &Tensor,
        path: InferPath,
    ) -> Result<Tensor, ModelError> {
        let shape_err = |source: ShapeError| ModelError::Shape {
            layer: layer.name.clone(),
            source,
        };
        let scales = self.effective_scales(layer, params);
        // weight levels stay unscaled here; per-filter scales fold into the
        // affine below
        let weight_levels = layer
            .quant
            .weights_quantized()
            .then(|| quantize_weights(&params.weights, &layer.quant).levels_tensor());
        let (acc, act_delta) = if layer.quant.acts_quantized() {
            let mut quant = layer.quant;
            quant.clip_alpha = params.clip_alpha;
            let q = quantize_act(x, &quant).map_err(|source| ModelError::Quant {
                layer: layer.name.clone(),
                source,
            })?;
            let codes = q.tile_channels(layer.d_x);
            let acc = match &weight_levels {
                Some(levels) if layer.quant.w_bits == 1 => {
                    let qw = crate::quant::QWeights {
                        levels: levels.data().iter().map(|&v| v as i32).collect(),
                        c_out: layer.c_out,
                        c_in: levels.c(),
                        k: layer.k,
                        scale: vec![1.0; layer.c_out],
                        w_bits: 1,
                    }
                    .tile_input_channels(layer.d_w);
                    match path {
                        InferPath::Reference => {
                            conv2d_int_ref(&codes, &qw, layer.stride, layer.pad)
                                .map_err(shape_err)?
                        }
                        InferPath::Packed => {
                            let pa = pack_act(&codes).map_err(|source| ModelError::Pack {
                                layer: layer.name.clone(),
                                source,
                            })?;
                            let pw = pack_weights(&qw).map_err(|source| ModelError::Pack {
                                layer: layer.name.clone(),
                                source,
                            })?;
                            packed_conv2d(&pa, &pw, layer.stride, layer.pad).map_err(
                                |source| ModelError::Pack {
                                    layer: layer.name.clone(),
                                    source,
                                },
                            )?
                        }
                    }
                }
                // k-bit or full-precision weights run on the reference path
                Some(levels) => conv2d_real(
                    &codes.codes_tensor(),
                    &channel_tile(levels, layer.d_w),
                    layer.stride,
                    layer.pad,
                )
                .map_err(shape_err)?,
                None => conv2d_real(
                    &codes.codes_tensor(),
                    &channel_tile(&params.weights, layer.d_w),
                    layer.stride,
                    layer.pad,
                )
                .map_err(shape_err)?,
            };
            (acc, codes.delta)
        } else {
            let x_conv = channel_tile(x, layer.d_x);
            let w = match &weight_levels {
                Some(levels) => channel_tile(levels, layer.d_w),
                None => channel_tile(&params.weights, layer.d_w),
            };
            let y = conv2d_real(&x_conv, &w, layer.stride, layer.pad).map_err(shape_err)?;
            (y, 1.0)
        };

        // fold the activation step, weight scales, and batch-norm (running
        // stats) or bias into one per-filter affine
        let (mut scale, shift) = match &params.bn {
            Some(bn) => bn.fold(),
            None => (
                vec![1.0; layer.c_out],
                params.bias.clone().unwrap_or_else(|| vec![0.0; layer.c_out]),
            ),
        };
        for (s, ws) in scale.iter_mut().zip(scales.iter()) {
            *s *= act_delta * ws;
        }
        let y = affine_apply(&acc, &scale, &shift);
        Ok(match layer.activation {
            Activation::Leaky => leaky(&y, LEAKY_SLOPE),
            Activation::Linear | Activation::Quant => y,
        })
    }

    /// Full detection pipeline: head, decode, score threshold, NMS.
    pub fn detect(
        &self,
        image: &Tensor,
        threshold: f64,
        path: InferPath,
    ) -> Result<Vec<DetectionBox>, ModelError> {
        let head = self.infer_head(image, path)?;
        let boxes =
            yolo_decode(&head, 0, &self.spec.anchors, self.spec.classes).map_err(|source| {
                ModelError::Shape {
                    layer: "Detect".into(),
                    source,
                }
            })?;
        let above: Vec<DetectionBox> = boxes.into_iter().filter(|b| b.score >= threshold).collect();
        Ok(nms(&above, NMS_IOU_THRESHOLD))
    }

    /// Folds per-filter weight scales into batch-norm so stored weights are
    /// pure sign bits; layers without batch-norm keep explicit scales. The
    /// fold is idempotent and leaves inference outputs unchanged.
    pub fn fold_scales_for_export(&mut self) {
        let spec_layers = self.spec.layers.clone();
        for (layer, slot) in spec_layers.iter().zip(self.layers.iter_mut()) {
            let Some(params) = slot.as_mut() else { continue };
            if !layer.quant.weights_quantized() {
                continue;
            }
            let qw = quantize_weights(&params.weights, &layer.quant);
            let scales = params
                .stored_scales
                .clone()
                .unwrap_or_else(|| qw.scale.clone());
            match params.bn.as_mut() {
                Some(bn) => {
                    // rewrite (gamma, beta, mean, var) into the already
                    // folded affine so fold-after-load reproduces it
                    let (bscale, bshift) = bn.fold();
                    for o in 0..layer.c_out {
                        bn.gamma[o] = bscale[o] * scales[o];
                        bn.beta[o] = bshift[o];
                        bn.running_mean[o] = 0.0;
                        bn.running_var[o] = 1.0 - BN_EPS;
                    }
                    params.stored_scales = None;
                }
                None => params.stored_scales = Some(scales),
            }
            // masters collapse to their sign levels; re-quantizing is then
            // the identity with unit scales
            params.weights = qw.levels_tensor();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn init_is_seed_deterministic() {
        let spec = NetworkSpec::parse(presets::DESK64_CFG).unwrap();
        let a = Model::init(&spec, 7);
        let b = Model::init(&spec, 7);
        assert_eq!(a, b);
        let c = Model::init(&spec, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn first_a8_layer_alpha_is_frozen_at_one() {
        let spec = NetworkSpec::parse(presets::DESK64_CFG).unwrap();
        let model = Model::init(&spec, 1);
        let (first_spec, first) = model.conv_params().next().unwrap();
        assert_eq!(first_spec.quant.a_bits, 8);
        assert_eq!(first.clip_alpha, 1.0);
        assert!(!first.alpha_trainable);
        let (_, second) = model.conv_params().nth(1).unwrap();
        assert!(second.alpha_trainable);
        assert_eq!(second.clip_alpha, crate::quant::DEFAULT_CLIP_ALPHA);
    }

    #[test]
    fn reference_and_packed_paths_agree_exactly() {
        let spec = NetworkSpec::parse(presets::DESK64_CFG).unwrap();
        let model = Model::init(&spec, 42);
        let image = Tensor::from_fn(1, 1, 64, 64, |_, _, y, x| {
            ((y * 31 + x * 17) % 256) as f64 / 255.0
        });
        let a = model.infer_head(&image, InferPath::Reference).unwrap();
        let b = model.infer_head(&image, InferPath::Packed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dup_variants_infer_and_agree_across_paths() {
        for (dx, dw) in [(4, 1), (1, 4)] {
            let spec = presets::desk64_variant(dx, dw).unwrap();
            let model = Model::init(&spec, 9);
            let image = Tensor::from_fn(1, 1, 64, 64, |_, _, y, x| {
                ((y * 7 + x * 13) % 200) as f64 / 255.0
            });
            let a = model.infer_head(&image, InferPath::Reference).unwrap();
            let b = model.infer_head(&image, InferPath::Packed).unwrap();
            assert_eq!(a, b, "dx={dx} dw={dw}");
        }
    }

    #[test]
    fn untrained_net_detects_nothing_at_full_threshold() {
        let spec = NetworkSpec::parse(presets::DESK64_CFG).unwrap();
        let model = Model::init(&spec, 3);
        let image = Tensor::zeros(1, 1, 64, 64);
        let boxes = model.detect(&image, 1.0, InferPath::Reference).unwrap();
        assert!(boxes.is_empty());
    }

    #[test]
    fn mixed_precision_inference_matches_hand_composition() {
        // one binary-weight layer with real activations, one real-weight
        // layer with quantized activations, composed by hand from the
        // quantizer and convolution primitives
        let cfg = "\
[net]
channels=1
height=8
width=8

[conv]
filters=4
size=3
stride=1
pad=1
a_bits=32
w_bits=1
bn=0
activation=leaky

[conv]
filters=6
size=3
stride=1
pad=1
a_bits=2
w_bits=32
bn=0
activation=linear

[detect]
anchors=2,2
classes=1
";
        let spec = NetworkSpec::parse(cfg).unwrap();
        let model = Model::init(&spec, 21);
        let image = Tensor::from_fn(1, 1, 8, 8, |_, _, y, x| ((y * 13 + x * 7) % 97) as f64 / 97.0);
        let infer = model.infer_head(&image, InferPath::Reference).unwrap();

        // hand-composed reference: dequantized weights for the first layer,
        // dequantized codes for the second
        let (l1, p1) = model.conv_params().next().unwrap();
        let (l2, p2) = model.conv_params().nth(1).unwrap();
        let w1 = quantize_weights(&p1.weights, &l1.quant).dequantize();
        let mut y1 = conv2d_real(&image, &w1, 1, 1).unwrap();
        let bias1 = p1.bias.as_ref().unwrap();
        for ch in 0..l1.c_out {
            let base = ch * 64;
            for v in y1.data_mut()[base..base + 64].iter_mut() {
                *v += bias1[ch];
            }
        }
        let y1 = leaky(&y1, LEAKY_SLOPE);
        let mut q2 = l2.quant;
        q2.clip_alpha = p2.clip_alpha;
        let x2 = quantize_act(&y1, &q2).unwrap().dequantize();
        let mut y2 = conv2d_real(&x2, &p2.weights, 1, 1).unwrap();
        let bias2 = p2.bias.as_ref().unwrap();
        for ch in 0..l2.c_out {
            let base = ch * 64;
            for v in y2.data_mut()[base..base + 64].iter_mut() {
                *v += bias2[ch];
            }
        }
        for (a, b) in infer.data().iter().zip(y2.data().iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn input_shape_is_validated() {
        let spec = NetworkSpec::parse(presets::DESK64_CFG).unwrap();
        let model = Model::init(&spec, 3);
        let image = Tensor::zeros(1, 1, 32, 32);
        assert!(matches!(
            model.infer_head(&image, InferPath::Reference),
            Err(ModelError::InputMismatch { .. })
        ));
    }

    #[test]
    fn scale_folding_preserves_inference_and_is_idempotent() {
        let spec = NetworkSpec::parse(presets::DESK64_CFG).unwrap();
        let mut model = Model::init(&spec, 11);
        let image = Tensor::from_fn(1, 1, 64, 64, |_, _, y, x| {
            ((y ^ x) % 251) as f64 / 255.0
        });
        let before = model.infer_head(&image, InferPath::Reference).unwrap();
        model.fold_scales_for_export();
        let after = model.infer_head(&image, InferPath::Reference).unwrap();
        for (a, b) in before.data().iter().zip(after.data().iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let snapshot = model.clone();
        model.fold_scales_for_export();
        assert_eq!(model, snapshot);
    }
}
