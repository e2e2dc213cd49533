//! Activation and weight quantizers with straight-through-estimator
//! backwards and a trainable clipping threshold for activations.
//!
//! Activations use a uniform half-wave grid on [0, alpha] with
//! `delta = alpha / (2^a_bits - 1)`; weights use a symmetric odd-integer
//! grid ({-1,+1} for 1 bit). 32 bits on either side means full precision
//! and bypasses the quantizer.

use crate::tensor::Tensor;
use thiserror::Error;

pub const DEFAULT_CLIP_ALPHA: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("non-finite activation value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("invalid activation bit width {0} (expected 1, 2, 4, 8 or 32)")]
    BadABits(u8),
    #[error("invalid weight bit width {0} (expected 1, 2, 3, 4, 8 or 32)")]
    BadWBits(u8),
    #[error("clip threshold must be positive, got {0}")]
    BadAlpha(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScaleMode {
    None,
    PerFilterMeanAbs,
}

/// Per-layer quantization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    pub a_bits: u8,
    pub w_bits: u8,
    pub clip_alpha: f64,
    pub weight_scale_mode: WeightScaleMode,
}

impl QuantSpec {
    pub fn new(a_bits: u8, w_bits: u8, clip_alpha: f64) -> Result<Self, QuantError> {
        if ![1, 2, 4, 8, 32].contains(&a_bits) {
            return Err(QuantError::BadABits(a_bits));
        }
        if ![1, 2, 3, 4, 8, 32].contains(&w_bits) {
            return Err(QuantError::BadWBits(w_bits));
        }
        if clip_alpha <= 0.0 || clip_alpha.is_nan() {
            return Err(QuantError::BadAlpha(clip_alpha));
        }
        Ok(QuantSpec {
            a_bits,
            w_bits,
            clip_alpha,
            weight_scale_mode: WeightScaleMode::PerFilterMeanAbs,
        })
    }

    pub fn full_precision() -> Self {
        QuantSpec {
            a_bits: 32,
            w_bits: 32,
            clip_alpha: DEFAULT_CLIP_ALPHA,
            weight_scale_mode: WeightScaleMode::None,
        }
    }

    #[inline]
    pub fn acts_quantized(&self) -> bool {
        self.a_bits < 32
    }

    #[inline]
    pub fn weights_quantized(&self) -> bool {
        self.w_bits < 32
    }

    #[inline]
    pub fn max_code(&self) -> i32 {
        (1i32 << self.a_bits) - 1
    }

    #[inline]
    pub fn delta(&self) -> f64 {
        self.clip_alpha / self.max_code() as f64
    }
}

/// Integer-coded activations: value = code * delta, codes in
/// [0, 2^a_bits - 1].
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub codes: Vec<i32>,
    pub shape: (usize, usize, usize, usize),
    pub delta: f64,
    pub a_bits: u8,
}

impl QTensor {
    pub fn from_codes(
        codes: Vec<i32>,
        shape: (usize, usize, usize, usize),
        delta: f64,
        a_bits: u8,
    ) -> Self {
        debug_assert_eq!(codes.len(), shape.0 * shape.1 * shape.2 * shape.3);
        QTensor {
            codes,
            shape,
            delta,
            a_bits,
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape.0
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape.1
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape.2
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape.3
    }

    /// Dequantized real values (code * delta).
    pub fn dequantize(&self) -> Tensor {
        let (n, c, h, w) = self.shape;
        let data = self.codes.iter().map(|&q| q as f64 * self.delta).collect();
        Tensor::new(n, c, h, w, data).expect("code count matches shape")
    }

    /// Codes as exact integral f64s, for the shared convolution kernel.
    pub fn codes_tensor(&self) -> Tensor {
        let (n, c, h, w) = self.shape;
        let data = self.codes.iter().map(|&q| q as f64).collect();
        Tensor::new(n, c, h, w, data).expect("code count matches shape")
    }

    /// Block-contiguous channel tiling on the code domain.
    pub fn tile_channels(&self, d: usize) -> QTensor {
        assert!(d >= 1);
        if d == 1 {
            return self.clone();
        }
        let (n, c, h, w) = self.shape;
        let plane = h * w;
        let mut codes = Vec::with_capacity(n * c * d * plane);
        for i in 0..n {
            let base = i * c * plane;
            let image = &self.codes[base..base + c * plane];
            for _ in 0..d {
                codes.extend_from_slice(image);
            }
        }
        QTensor::from_codes(codes, (n, c * d, h, w), self.delta, self.a_bits)
    }
}

/// Quantized weights: `levels[o, i, kh, kw] * scale[o]` reconstructs the real
/// value. For 1-bit weights levels are in {-1, +1} and scale is the
/// per-filter mean absolute value (or 1); for k-bit weights levels are odd
/// integers and scale is the per-filter step size.
#[derive(Debug, Clone, PartialEq)]
pub struct QWeights {
    pub levels: Vec<i32>,
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub scale: Vec<f64>,
    pub w_bits: u8,
}

impl QWeights {
    #[inline]
    pub fn filter_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    #[inline]
    pub fn filter_levels(&self, o: usize) -> &[i32] {
        let len = self.filter_len();
        &self.levels[o * len..(o + 1) * len]
    }

    /// Levels as exact integral f64s with the output-filter axis in the
    /// tensor's n slot.
    pub fn levels_tensor(&self) -> Tensor {
        let data = self.levels.iter().map(|&l| l as f64).collect();
        Tensor::new(self.c_out, self.c_in, self.k, self.k, data).expect("level count matches dims")
    }

    /// Dequantized real weights.
    pub fn dequantize(&self) -> Tensor {
        let len = self.filter_len();
        let data = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, &l)| l as f64 * self.scale[i / len])
            .collect();
        Tensor::new(self.c_out, self.c_in, self.k, self.k, data).expect("level count matches dims")
    }

    /// Block-contiguous tiling along the input-channel axis; per-filter
    /// scales are unaffected.
    pub fn tile_input_channels(&self, d: usize) -> QWeights {
        assert!(d >= 1);
        if d == 1 {
            return self.clone();
        }
        let block = self.c_in * self.k * self.k;
        let mut levels = Vec::with_capacity(self.levels.len() * d);
        for o in 0..self.c_out {
            let filter = &self.levels[o * block..(o + 1) * block];
            for _ in 0..d {
                levels.extend_from_slice(filter);
            }
        }
        QWeights {
            levels,
            c_out: self.c_out,
            c_in: self.c_in * d,
            k: self.k,
            scale: self.scale.clone(),
            w_bits: self.w_bits,
        }
    }
}

/// Half-wave uniform quantization: code = clamp(round(x / delta), 0, max).
/// Negative inputs map to code 0. Non-finite inputs are rejected.
pub fn quantize_act(x: &Tensor, spec: &QuantSpec) -> Result<QTensor, QuantError> {
    assert!(spec.acts_quantized(), "32-bit activations bypass the quantizer");
    let max_code = spec.max_code();
    let delta = spec.delta();
    let mut codes = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(QuantError::NonFinite { index: i, value: v });
        }
        let q = (v / delta).round();
        let q = if q < 0.0 {
            0
        } else if q > max_code as f64 {
            max_code
        } else {
            q as i32
        };
        codes.push(q);
    }
    Ok(QTensor::from_codes(codes, x.shape(), delta, spec.a_bits))
}

/// Straight-through backward for the clipped activation quantizer:
/// dx = dy inside [0, alpha], 0 outside; dalpha accumulates dy where
/// x exceeds alpha.
pub fn quantize_act_backward(dy: &Tensor, x: &Tensor, clip_alpha: f64) -> (Tensor, f64) {
    assert_eq!(dy.shape(), x.shape(), "gradient/input shape mismatch");
    let mut dx = Tensor::zeros(x.n(), x.c(), x.h(), x.w());
    let mut dalpha = 0.0;
    let dxd = dx.data_mut();
    for (i, (&g, &v)) in dy.data().iter().zip(x.data().iter()).enumerate() {
        if v > clip_alpha {
            dalpha += g;
        } else if v >= 0.0 {
            dxd[i] = g;
        }
    }
    (dx, dalpha)
}

/// Sign binarization with tie-break sign(0) = +1. Scale is the per-filter
/// mean absolute value in `PerFilterMeanAbs` mode, 1 otherwise.
pub fn binarize_weights(w: &Tensor, mode: WeightScaleMode) -> QWeights {
    let (c_out, c_in, kh, kw) = w.shape();
    debug_assert_eq!(kh, kw, "square kernels only");
    let levels: Vec<i32> = w.data().iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
    let filter_len = c_in * kh * kw;
    let scale = match mode {
        WeightScaleMode::None => vec![1.0; c_out],
        WeightScaleMode::PerFilterMeanAbs => (0..c_out)
            .map(|o| {
                let f = &w.data()[o * filter_len..(o + 1) * filter_len];
                f.iter().map(|v| v.abs()).sum::<f64>() / filter_len as f64
            })
            .collect(),
    };
    QWeights {
        levels,
        c_out,
        c_in,
        k: kh,
        scale,
        w_bits: 1,
    }
}

/// Symmetric odd-integer grid for 2..8 bit weights:
/// level = 2 * clamp(round((w/step - 1)/2), -2^(b-1), 2^(b-1)-1) + 1 with
/// step = per-filter max |w| / (2^b - 1). An all-zero filter gets step 1.
pub fn quantize_weights_kbit(w: &Tensor, w_bits: u8) -> QWeights {
    assert!((2..=8).contains(&w_bits), "k-bit grid covers 2..=8 bits");
    let (c_out, c_in, kh, kw) = w.shape();
    debug_assert_eq!(kh, kw, "square kernels only");
    let filter_len = c_in * kh * kw;
    let top = ((1i32 << w_bits) - 1) as f64;
    let half = 1i32 << (w_bits - 1);
    let mut levels = Vec::with_capacity(w.len());
    let mut scale = Vec::with_capacity(c_out);
    for o in 0..c_out {
        let f = &w.data()[o * filter_len..(o + 1) * filter_len];
        let max_abs = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let step = if max_abs > 0.0 { max_abs / top } else { 1.0 };
        scale.push(step);
        for &v in f {
            // ties round to even so an exact zero lands on +1, matching the
            // 1-bit sign tie-break
            let idx = ((v / step - 1.0) / 2.0).round_ties_even();
            let idx = idx.max(-half as f64).min((half - 1) as f64) as i32;
            levels.push(2 * idx + 1);
        }
    }
    QWeights {
        levels,
        c_out,
        c_in,
        k: kh,
        scale,
        w_bits,
    }
}

/// Dispatches on the spec's weight bit width; 1 bit delegates to
/// [`binarize_weights`].
pub fn quantize_weights(w: &Tensor, spec: &QuantSpec) -> QWeights {
    assert!(spec.weights_quantized(), "32-bit weights bypass the quantizer");
    if spec.w_bits == 1 {
        binarize_weights(w, spec.weight_scale_mode)
    } else {
        quantize_weights_kbit(w, spec.w_bits)
    }
}

/// Straight-through backward for weight quantization: pass the gradient
/// where the master weight is inside the unit clip, zero it elsewhere.
pub fn ste_weight_backward(dy_levels: &Tensor, w: &Tensor) -> Tensor {
    assert_eq!(dy_levels.shape(), w.shape(), "gradient/weight shape mismatch");
    let mut dw = dy_levels.clone();
    for (g, &v) in dw.data_mut().iter_mut().zip(w.data().iter()) {
        if v.abs() > 1.0 {
            *g = 0.0;
        }
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(values: &[f64]) -> Tensor {
        Tensor::new(1, 1, 1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn quantize_act_hand_values() {
        let spec = QuantSpec::new(2, 1, 3.0).unwrap(); // delta = 1
        let q = quantize_act(&flat(&[0.0, 1.6, 5.0, -0.2]), &spec).unwrap();
        assert_eq!(q.codes, vec![0, 2, 3, 0]);
        assert_eq!(q.delta, 1.0);
    }

    #[test]
    fn quantize_act_rejects_non_finite() {
        let spec = QuantSpec::new(2, 1, 3.0).unwrap();
        let err = quantize_act(&flat(&[0.0, f64::NAN]), &spec).unwrap_err();
        assert!(matches!(err, QuantError::NonFinite { index: 1, .. }));
        assert!(quantize_act(&flat(&[f64::INFINITY]), &spec).is_err());
    }

    #[test]
    fn quantize_act_backward_hand_values() {
        let x = flat(&[-1.0, 0.5, 9.0]);
        let dy = flat(&[1.0, 1.0, 1.0]);
        let (dx, dalpha) = quantize_act_backward(&dy, &x, 3.0);
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0]);
        assert_eq!(dalpha, 1.0);
        // pass-through region and zero-gradient cases
        let inside = flat(&[0.5, 1.0, 2.9]);
        let (dx, dalpha) = quantize_act_backward(&dy, &inside, 3.0);
        assert_eq!(dx.data(), dy.data());
        assert_eq!(dalpha, 0.0);
        let (dx, dalpha) = quantize_act_backward(&flat(&[0.0, 0.0, 0.0]), &x, 3.0);
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert_eq!(dalpha, 0.0);
    }

    #[test]
    fn binarize_sign_and_tie_break() {
        let w = Tensor::new(1, 2, 1, 1, vec![0.3, -0.2]).unwrap();
        let q = binarize_weights(&w, WeightScaleMode::None);
        assert_eq!(q.levels, vec![1, -1]);
        let zero = Tensor::new(1, 1, 1, 1, vec![0.0]).unwrap();
        assert_eq!(binarize_weights(&zero, WeightScaleMode::None).levels, vec![1]);
    }

    #[test]
    fn binarize_per_filter_mean_abs_scale() {
        let w = Tensor::new(1, 1, 2, 2, vec![0.4, -0.2, 0.2, 0.0]).unwrap();
        let q = binarize_weights(&w, WeightScaleMode::PerFilterMeanAbs);
        assert!((q.scale[0] - 0.2).abs() < 1e-15);
        assert_eq!(q.levels, vec![1, -1, 1, 1]);
    }

    #[test]
    fn kbit_level_set_for_two_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::from_fn(2, 3, 3, 3, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let q = quantize_weights_kbit(&w, 2);
        for &l in &q.levels {
            assert!([-3, -1, 1, 3].contains(&l), "unexpected level {l}");
        }
        // the extreme value maps to the extreme level
        let w = Tensor::new(1, 3, 1, 1, vec![0.9, -0.1, 0.3]).unwrap();
        let q = quantize_weights_kbit(&w, 2);
        assert_eq!(q.levels[0], 3);
    }

    #[test]
    fn kbit_all_zero_filter_uses_unit_step() {
        let w = Tensor::zeros(1, 1, 3, 3);
        let q = quantize_weights_kbit(&w, 2);
        assert_eq!(q.scale[0], 1.0);
        assert!(q.levels.iter().all(|&l| l == 1)); // ties-even: round((0-1)/2) = 0 -> level 1
    }

    #[test]
    fn one_bit_dispatch_matches_binarize() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::from_fn(2, 2, 3, 3, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let spec = QuantSpec::new(2, 1, 3.0).unwrap();
        assert_eq!(
            quantize_weights(&w, &spec),
            binarize_weights(&w, WeightScaleMode::PerFilterMeanAbs)
        );
    }

    #[test]
    fn ste_weight_backward_masks_outside_unit_clip() {
        let w = flat(&[2.0, 0.5]);
        let dy = flat(&[1.0, 1.0]);
        let dw = ste_weight_backward(&dy, &w);
        assert_eq!(dw.data(), &[0.0, 1.0]);
        let dz = ste_weight_backward(&flat(&[0.0, 0.0]), &w);
        assert!(dz.data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn codes_stay_in_range_and_monotone(seed in 0u64..500, a_bits in prop::sample::select(vec![1u8, 2, 4, 8])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let alpha = rng.gen_range(0.5..4.0);
            let spec = QuantSpec::new(a_bits, 1, alpha).unwrap();
            let mut vals: Vec<f64> = (0..32).map(|_| rng.gen_range(-2.0..6.0)).collect();
            let q = quantize_act(&flat(&vals), &spec).unwrap();
            for &code in &q.codes {
                prop_assert!(code >= 0 && code <= spec.max_code());
            }
            // monotonicity: sort inputs, codes must be non-decreasing
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = quantize_act(&flat(&vals), &spec).unwrap();
            for pair in q.codes.windows(2) {
                prop_assert!(pair[0] <= pair[1]);
            }
        }

        #[test]
        fn requantizing_dequantized_codes_is_identity(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = QuantSpec::new(2, 1, rng.gen_range(0.5..4.0)).unwrap();
            let vals: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..5.0)).collect();
            let q = quantize_act(&flat(&vals), &spec).unwrap();
            let q2 = quantize_act(&q.dequantize(), &spec).unwrap();
            prop_assert_eq!(q.codes, q2.codes);
        }

        #[test]
        fn kbit_levels_are_odd_and_bounded(seed in 0u64..200, bits in 2u8..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Tensor::from_fn(2, 2, 3, 3, |_, _, _, _| rng.gen_range(-1.5..1.5));
            let q = quantize_weights_kbit(&w, bits);
            let bound = (1i32 << bits) - 1;
            for &l in &q.levels {
                prop_assert!(l.rem_euclid(2) == 1 || l.rem_euclid(2) == -1 || l % 2 != 0);
                prop_assert!(l % 2 != 0, "level {} must be odd", l);
                prop_assert!(l.abs() <= bound);
            }
        }
    }
}
