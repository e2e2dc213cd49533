//! Bit-plane packing and popcount-based convolution for 1-bit weights with
//! 1/2/8-bit activations, bit-exact against the reference integer path.
//!
//! Activations are decomposed into one bit plane per activation bit; a dot
//! product against sign weights becomes
//! `2 * sum_p 2^p * popcount(w & plane_p) - sum_p 2^p * popcount(plane_p)`.
//! Words are 64 bits; word width is an internal constant, not a format
//! guarantee. The on-disk weight payload (see the weight container) is the
//! whole-tensor flattened bit stream produced by [`pack_bitstream`].

use crate::quant::{QTensor, QWeights};
use crate::tensor::Tensor;
use thiserror::Error;

pub const WORD_BITS: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PackError {
    #[error("activation code {code} at flat index {index} is out of range for {a_bits}-bit packing")]
    CodeOutOfRange { index: usize, code: i32, a_bits: u8 },
    #[error("packed kernels require 1-bit weights, got {0}-bit")]
    NotBinaryWeights(u8),
    #[error("packed conv geometry mismatch: weights expect {expected} input channels, activations have {got}")]
    ChannelMismatch { expected: usize, got: usize },
}

#[inline]
fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

#[inline]
fn get_bit(words: &[u64], pos: usize) -> u64 {
    (words[pos / WORD_BITS] >> (pos % WORD_BITS)) & 1
}

#[inline]
fn set_bit(words: &mut [u64], pos: usize) {
    words[pos / WORD_BITS] |= 1u64 << (pos % WORD_BITS);
}

/// Bit-plane decomposition of an activation code tensor. Plane `p` holds
/// bit `p` of every code at the code's flattened (n, c, h, w) position.
/// `channel_sums` caches the per-pixel sum of codes across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedActivations {
    pub planes: Vec<Vec<u64>>,
    pub channel_sums: Vec<i64>,
    pub shape: (usize, usize, usize, usize),
    pub delta: f64,
    pub a_bits: u8,
}

/// Sign weights as bits (1 means +1), one word-padded stream per output
/// filter in flattened (c, kh, kw) order. The tail mask keeps unused bits
/// of the last word zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights {
    pub bits: Vec<u64>,
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub words_per_filter: usize,
    pub tail_mask: u64,
}

impl PackedWeights {
    #[inline]
    pub fn filter_bits(&self) -> usize {
        self.c_in * self.k * self.k
    }

    #[inline]
    pub fn filter_words(&self, o: usize) -> &[u64] {
        &self.bits[o * self.words_per_filter..(o + 1) * self.words_per_filter]
    }

    /// Re-applies the tail mask to every filter stream.
    pub fn mask_tails(&mut self) {
        for o in 0..self.c_out {
            let last = (o + 1) * self.words_per_filter - 1;
            self.bits[last] &= self.tail_mask;
        }
    }
}

/// Packs activation codes into bit planes; rejects out-of-range codes.
pub fn pack_act(q: &QTensor) -> Result<PackedActivations, PackError> {
    let (n, c, h, w) = q.shape;
    let total = n * c * h * w;
    let words = words_for(total);
    let max_code = (1i64 << q.a_bits) - 1;
    let mut planes = vec![vec![0u64; words]; q.a_bits as usize];
    for (i, &code) in q.codes.iter().enumerate() {
        if code < 0 || code as i64 > max_code {
            return Err(PackError::CodeOutOfRange {
                index: i,
                code,
                a_bits: q.a_bits,
            });
        }
        for (p, plane) in planes.iter_mut().enumerate() {
            if code & (1 << p) != 0 {
                set_bit(plane, i);
            }
        }
    }
    let plane_len = h * w;
    let mut channel_sums = vec![0i64; n * plane_len];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane_len;
            let dst = &mut channel_sums[i * plane_len..(i + 1) * plane_len];
            for (d, &code) in dst.iter_mut().zip(q.codes[base..base + plane_len].iter()) {
                *d += code as i64;
            }
        }
    }
    Ok(PackedActivations {
        planes,
        channel_sums,
        shape: q.shape,
        delta: q.delta,
        a_bits: q.a_bits,
    })
}

/// Inverse of [`pack_act`].
pub fn unpack_act(p: &PackedActivations) -> QTensor {
    let (n, c, h, w) = p.shape;
    let total = n * c * h * w;
    let mut codes = vec![0i32; total];
    for (bit, plane) in p.planes.iter().enumerate() {
        for (i, code) in codes.iter_mut().enumerate() {
            *code |= (get_bit(plane, i) as i32) << bit;
        }
    }
    QTensor::from_codes(codes, p.shape, p.delta, p.a_bits)
}

/// Packs 1-bit weight levels into per-filter word streams.
pub fn pack_weights(w: &QWeights) -> Result<PackedWeights, PackError> {
    if w.w_bits != 1 {
        return Err(PackError::NotBinaryWeights(w.w_bits));
    }
    let filter_bits = w.filter_len();
    let words_per_filter = words_for(filter_bits);
    let tail_bits = filter_bits % WORD_BITS;
    let tail_mask = if tail_bits == 0 {
        u64::MAX
    } else {
        (1u64 << tail_bits) - 1
    };
    let mut bits = vec![0u64; w.c_out * words_per_filter];
    for o in 0..w.c_out {
        let filter = w.filter_levels(o);
        let stream = &mut bits[o * words_per_filter..(o + 1) * words_per_filter];
        for (i, &level) in filter.iter().enumerate() {
            debug_assert!(level == 1 || level == -1);
            if level > 0 {
                set_bit(stream, i);
            }
        }
    }
    Ok(PackedWeights {
        bits,
        c_out: w.c_out,
        c_in: w.c_in,
        k: w.k,
        words_per_filter,
        tail_mask,
    })
}

/// Inverse of [`pack_weights`] (bit b maps to level 2b - 1); scales are
/// not part of the packed form and come back as 1.
pub fn unpack_weights(p: &PackedWeights) -> QWeights {
    let filter_bits = p.filter_bits();
    let mut levels = Vec::with_capacity(p.c_out * filter_bits);
    for o in 0..p.c_out {
        let stream = p.filter_words(o);
        for i in 0..filter_bits {
            levels.push(if get_bit(stream, i) != 0 { 1 } else { -1 });
        }
    }
    QWeights {
        levels,
        c_out: p.c_out,
        c_in: p.c_in,
        k: p.k,
        scale: vec![1.0; p.c_out],
        w_bits: 1,
    }
}

/// Popcount dot product of sign-weight bits against activation bit planes.
/// Tail bits of every plane word must be zero.
pub fn packed_dot(wbits: &[u64], planes: &[&[u64]]) -> i64 {
    let mut weighted: i64 = 0;
    let mut total: i64 = 0;
    for (p, plane) in planes.iter().enumerate() {
        let mut and_count: i64 = 0;
        let mut plane_count: i64 = 0;
        for (&w, &a) in wbits.iter().zip(plane.iter()) {
            and_count += (w & a).count_ones() as i64;
            plane_count += a.count_ones() as i64;
        }
        weighted += and_count << p;
        total += plane_count << p;
    }
    2 * weighted - total
}

/// Popcount convolution; equals [`crate::layers::conv2d_int_ref`] bit for
/// bit. Windows are gathered per output position into (c, kh, kw)-ordered
/// scratch planes so each filter dot is a contiguous word stream.
pub fn packed_conv2d(
    px: &PackedActivations,
    pw: &PackedWeights,
    stride: usize,
    pad: usize,
) -> Result<Tensor, PackError> {
    let (nb, c, h, w) = px.shape;
    if pw.c_in != c {
        return Err(PackError::ChannelMismatch {
            expected: pw.c_in,
            got: c,
        });
    }
    let k = pw.k;
    let out_h = crate::layers::conv_out_dim(h, k, stride, pad);
    let out_w = crate::layers::conv_out_dim(w, k, stride, pad);
    let window_bits = c * k * k;
    let window_words = words_for(window_bits);
    debug_assert_eq!(window_words, pw.words_per_filter);
    let n_planes = px.a_bits as usize;
    let mut scratch = vec![vec![0u64; window_words]; n_planes];
    let mut out = Tensor::zeros(nb, pw.c_out, out_h, out_w);
    let od = out.data_mut();
    let pixel_plane = h * w;
    for n in 0..nb {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for plane in scratch.iter_mut() {
                    plane.iter_mut().for_each(|wd| *wd = 0);
                }
                let mut window_total: i64 = 0;
                let mut cursor = 0usize;
                for ci in 0..c {
                    let chan_base = ((n * c + ci) * h) * w;
                    for kh in 0..k {
                        let iy = (oy * stride + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            cursor += k;
                            continue;
                        }
                        let row_base = chan_base + iy as usize * w;
                        for kw in 0..k {
                            let ix = (ox * stride + kw) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                let pos = row_base + ix as usize;
                                for (p, plane) in scratch.iter_mut().enumerate() {
                                    if get_bit(&px.planes[p], pos) != 0 {
                                        set_bit(plane, cursor);
                                    }
                                }
                                if ci == 0 {
                                    window_total +=
                                        px.channel_sums[n * pixel_plane + iy as usize * w + ix as usize];
                                }
                            }
                            cursor += 1;
                        }
                    }
                }
                for o in 0..pw.c_out {
                    let wbits = pw.filter_words(o);
                    let mut weighted: i64 = 0;
                    for (p, plane) in scratch.iter().enumerate() {
                        let mut and_count: i64 = 0;
                        for (&wv, &av) in wbits.iter().zip(plane.iter()) {
                            and_count += (wv & av).count_ones() as i64;
                        }
                        weighted += and_count << p;
                    }
                    let acc = 2 * weighted - window_total;
                    od[((n * pw.c_out + o) * out_h + oy) * out_w + ox] = acc as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Packs integer levels/bits into the on-disk continuous bit stream: bit
/// `i` of word `j` corresponds to flattened index `64*j + i`. A set bit
/// means +1 (or a 1 bit for generic payloads).
pub fn pack_bitstream(levels: &[i32]) -> Vec<u64> {
    let mut words = vec![0u64; words_for(levels.len())];
    for (i, &level) in levels.iter().enumerate() {
        if level > 0 {
            set_bit(&mut words, i);
        }
    }
    words
}

/// Inverse of [`pack_bitstream`] for sign levels.
pub fn unpack_bitstream(words: &[u64], len: usize) -> Vec<i32> {
    (0..len)
        .map(|i| if get_bit(words, i) != 0 { 1 } else { -1 })
        .collect()
}
