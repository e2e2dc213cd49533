//! The bit-packed weight container: magic `DUPW`, version, then per-layer
//! descriptors and payloads. 1-bit layers store the flattened sign
//! bitstream (bit i of word j is flattened weight index 64*j + i, words
//! little-endian); other layers store 32-bit little-endian reals. Batch
//! norm is four real arrays, the activation clip is one real, and
//! per-filter weight scales appear only when they have not been folded.
//! Dup-weight layers store only the template payload.

use crate::bitpack::{pack_bitstream, unpack_bitstream};
use crate::config::{LayerSpec, NetworkSpec};
use crate::model::{BnParams, ConvParams, Model};
use crate::quant::quantize_weights;
use crate::tensor::Tensor;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"DUPW";
pub const VERSION: u32 = 1;

const FLAG_BN: u8 = 1;
const FLAG_BIAS: u8 = 1 << 1;
const FLAG_SCALES: u8 = 1 << 2;
const FLAG_ALPHA: u8 = 1 << 3;

#[derive(Debug, Error, PartialEq)]
pub enum ContainerError {
    #[error("bad magic (expected DUPW)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("container has {got} conv layers, network needs {expected}")]
    LayerCount { expected: usize, got: usize },
    #[error("{layer}: descriptor mismatch: {detail}")]
    DescriptorMismatch { layer: String, detail: String },
    #[error("truncated container (needed {needed} more bytes)")]
    Truncated { needed: usize },
    #[error("{0} trailing bytes after the last layer")]
    TrailingBytes(usize),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.bytes.len() {
            return Err(ContainerError::Truncated {
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>, ContainerError> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }

    fn u64_vec(&mut self, n: usize) -> Result<Vec<u64>, ContainerError> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Weight payload size in bytes for one conv layer (bits or reals only,
/// no batch-norm or scale overhead).
pub fn layer_payload_bytes(layer: &LayerSpec) -> usize {
    let count = layer.c_out * layer.weight_c_in() * layer.k * layer.k;
    if layer.quant.w_bits == 1 {
        count.div_ceil(64) * 8
    } else {
        count * 4
    }
}

/// Total weight payload bytes across the network.
pub fn weight_payload_bytes(spec: &NetworkSpec) -> usize {
    spec.conv_layers().map(layer_payload_bytes).sum()
}

/// Serializes the model. With `fold` the per-filter weight scales are
/// folded into batch-norm first (layers without batch-norm keep explicit
/// scales); without it scales are stored explicitly for every quantized
/// layer.
pub fn save_weights(model: &Model, fold: bool) -> Vec<u8> {
    let mut m = model.clone();
    if fold {
        m.fold_scales_for_export();
    } else {
        let spec_layers = m.spec.layers.clone();
        for (layer, slot) in spec_layers.iter().zip(m.layers.iter_mut()) {
            let Some(params) = slot.as_mut() else { continue };
            if layer.quant.weights_quantized() && params.stored_scales.is_none() {
                params.stored_scales =
                    Some(quantize_weights(&params.weights, &layer.quant).scale);
            }
        }
    }

    let convs: Vec<(&LayerSpec, &ConvParams)> = m.conv_params().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(convs.len() as u32).to_le_bytes());
    for (layer, params) in convs {
        let mut flags = 0u8;
        if params.bn.is_some() {
            flags |= FLAG_BN;
        }
        if params.bias.is_some() {
            flags |= FLAG_BIAS;
        }
        if params.stored_scales.is_some() {
            flags |= FLAG_SCALES;
        }
        if layer.quant.acts_quantized() {
            flags |= FLAG_ALPHA;
        }
        out.push(0u8); // kind: conv
        out.push(flags);
        out.push(layer.quant.w_bits);
        out.push(layer.quant.a_bits);
        for dim in [
            layer.c_out,
            layer.weight_c_in(),
            layer.k,
            layer.d_w,
            layer.d_x,
        ] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        if layer.quant.w_bits == 1 {
            let qw = quantize_weights(&params.weights, &layer.quant);
            for word in pack_bitstream(&qw.levels) {
                out.extend_from_slice(&word.to_le_bytes());
            }
        } else {
            push_f32s(&mut out, params.weights.data());
        }
        if let Some(bn) = &params.bn {
            push_f32s(&mut out, &bn.gamma);
            push_f32s(&mut out, &bn.beta);
            push_f32s(&mut out, &bn.running_mean);
            push_f32s(&mut out, &bn.running_var);
        }
        if let Some(bias) = &params.bias {
            push_f32s(&mut out, bias);
        }
        if layer.quant.acts_quantized() {
            push_f32s(&mut out, &[params.clip_alpha]);
        }
        if let Some(scales) = &params.stored_scales {
            push_f32s(&mut out, scales);
        }
    }
    out
}

/// Deserializes a container against the network it must match.
pub fn load_weights(bytes: &[u8], spec: &NetworkSpec) -> Result<Model, ContainerError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    let expected_convs: Vec<(usize, &LayerSpec)> = spec
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_conv())
        .collect();
    let count = cur.u32()? as usize;
    if count != expected_convs.len() {
        return Err(ContainerError::LayerCount {
            expected: expected_convs.len(),
            got: count,
        });
    }

    let first_conv = expected_convs[0].0;
    let mut loaded: Vec<ConvParams> = Vec::with_capacity(count);
    for &(position, layer) in &expected_convs {
        let mismatch = |detail: String| ContainerError::DescriptorMismatch {
            layer: layer.name.clone(),
            detail,
        };
        let kind = cur.u8()?;
        if kind != 0 {
            return Err(mismatch(format!("kind {kind}, expected conv")));
        }
        let flags = cur.u8()?;
        let w_bits = cur.u8()?;
        let a_bits = cur.u8()?;
        let dims = [cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?];
        let want = [
            layer.c_out as u32,
            layer.weight_c_in() as u32,
            layer.k as u32,
            layer.d_w as u32,
            layer.d_x as u32,
        ];
        if w_bits != layer.quant.w_bits || a_bits != layer.quant.a_bits {
            return Err(mismatch(format!(
                "precision a{a_bits}w{w_bits}, expected a{}w{}",
                layer.quant.a_bits, layer.quant.w_bits
            )));
        }
        if dims != want {
            return Err(mismatch(format!(
                "dims {dims:?}, expected {want:?} (c_out, c_in, k, d_w, d_x)"
            )));
        }
        if (flags & FLAG_BN != 0) != layer.has_bn {
            return Err(mismatch("batch-norm flag disagrees with the network".into()));
        }
        if (flags & FLAG_BIAS != 0) == layer.has_bn {
            return Err(mismatch("bias flag disagrees with the network".into()));
        }
        if (flags & FLAG_ALPHA != 0) != layer.quant.acts_quantized() {
            return Err(mismatch("clip flag disagrees with the network".into()));
        }

        let count = layer.c_out * layer.weight_c_in() * layer.k * layer.k;
        let weights = if w_bits == 1 {
            let words = cur.u64_vec(count.div_ceil(64))?;
            let levels = unpack_bitstream(&words, count);
            let data = levels.iter().map(|&l| l as f64).collect();
            Tensor::new(layer.c_out, layer.weight_c_in(), layer.k, layer.k, data)
                .expect("length derived from dims")
        } else {
            let data = cur.f32_vec(count)?;
            Tensor::new(layer.c_out, layer.weight_c_in(), layer.k, layer.k, data)
                .expect("length derived from dims")
        };
        let bn = if flags & FLAG_BN != 0 {
            Some(BnParams {
                gamma: cur.f32_vec(layer.c_out)?,
                beta: cur.f32_vec(layer.c_out)?,
                running_mean: cur.f32_vec(layer.c_out)?,
                running_var: cur.f32_vec(layer.c_out)?,
            })
        } else {
            None
        };
        let bias = if flags & FLAG_BIAS != 0 {
            Some(cur.f32_vec(layer.c_out)?)
        } else {
            None
        };
        let clip_alpha = if flags & FLAG_ALPHA != 0 {
            cur.f32_vec(1)?[0]
        } else {
            crate::quant::DEFAULT_CLIP_ALPHA
        };
        let stored_scales = if flags & FLAG_SCALES != 0 {
            Some(cur.f32_vec(layer.c_out)?)
        } else {
            None
        };
        let raw_input = position == first_conv && layer.quant.a_bits == 8;
        loaded.push(ConvParams {
            weights,
            bias,
            bn,
            clip_alpha,
            alpha_trainable: !raw_input && layer.quant.acts_quantized(),
            stored_scales,
        });
    }
    if cur.pos != bytes.len() {
        return Err(ContainerError::TrailingBytes(bytes.len() - cur.pos));
    }

    let mut slots: Vec<Option<ConvParams>> = Vec::with_capacity(spec.layers.len());
    let mut it = loaded.into_iter();
    for layer in &spec.layers {
        slots.push(if layer.is_conv() { it.next() } else { None });
    }
    Ok(Model {
        spec: spec.clone(),
        layers: slots,
    })
}
