//! NCHW tensors and the block-contiguous channel algebra (tile, group-sum,
//! group-mean) that weight and feature-map duplication reduce to.
//!
//! Channel grouping is block-contiguous: duplicate `g` of base channel `j`
//! lives at channel `g * base_channels + j`. Weight tensors reuse [`Tensor`]
//! with the output-filter axis in the `n` slot, so the same channel ops apply
//! to the input-channel axis of weights.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: (usize, usize, usize, usize),
        expected: usize,
        got: usize,
    },
    #[error("channel count {channels} is not divisible by duplication factor {factor}")]
    ChannelsNotDivisible { channels: usize, factor: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Mismatch {
        left: (usize, usize, usize, usize),
        right: (usize, usize, usize, usize),
    },
    #[error("{context}: input channels {got}, expected {expected}")]
    ChannelMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
}

/// A duplication factor validated against a channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelGrouping {
    pub factor: usize,
    pub base_channels: usize,
}

impl ChannelGrouping {
    pub fn new(channels: usize, factor: usize) -> Result<Self, ShapeError> {
        assert!(factor >= 1, "duplication factor must be >= 1");
        if !channels.is_multiple_of(factor) {
            return Err(ShapeError::ChannelsNotDivisible { channels, factor });
        }
        Ok(ChannelGrouping {
            factor,
            base_channels: channels / factor,
        })
    }
}

/// Dense rank-4 tensor, row-major in (n, c, h, w) order. Values are f64;
/// integer-valued tensors (conv accumulators, summed weights) use exact
/// integral f64s.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        let expected = n * c * h * w;
        if data.len() != expected {
            return Err(ShapeError::DataLength {
                shape: (n, c, h, w),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_fn<F: FnMut(usize, usize, usize, usize) -> f64>(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: F,
    ) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(i, j, y, x));
                    }
                }
            }
        }
        Tensor { n, c, h, w, data }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Contiguous (h, w) plane of one (n, c) slot.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Tensor {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    /// Elementwise dot product; shapes must match.
    pub fn dot(&self, other: &Tensor) -> Result<f64, ShapeError> {
        if self.shape() != other.shape() {
            return Err(ShapeError::Mismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), ShapeError> {
        if self.shape() != other.shape() {
            return Err(ShapeError::Mismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Repeats the channel block of `x` `d` times: out channel `g*c' + j` is a
/// copy of input channel `j`.
pub fn channel_tile(x: &Tensor, d: usize) -> Tensor {
    assert!(d >= 1, "duplication factor must be >= 1");
    let (n, c, h, w) = x.shape();
    if d == 1 {
        return x.clone();
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * c * d * plane);
    for i in 0..n {
        let base = i * c * plane;
        let image = &x.data()[base..base + c * plane];
        for _ in 0..d {
            data.extend_from_slice(image);
        }
    }
    Tensor {
        n,
        c: c * d,
        h,
        w,
        data,
    }
}

/// Sums each group of `c/d` block-contiguous duplicate channels:
/// out[n, j] = sum over g of x[n, g*(c/d) + j].
pub fn channel_group_sum(x: &Tensor, d: usize) -> Result<Tensor, ShapeError> {
    assert!(d >= 1, "duplication factor must be >= 1");
    let (n, c, h, w) = x.shape();
    let grouping = ChannelGrouping::new(c, d)?;
    if d == 1 {
        return Ok(x.clone());
    }
    let cb = grouping.base_channels;
    let plane = h * w;
    let mut out = Tensor::zeros(n, cb, h, w);
    for i in 0..n {
        for g in 0..d {
            let src_base = (i * c + g * cb) * plane;
            let src = &x.data()[src_base..src_base + cb * plane];
            let dst_base = i * cb * plane;
            let dst = &mut out.data_mut()[dst_base..dst_base + cb * plane];
            for (o, s) in dst.iter_mut().zip(src.iter()) {
                *o += s;
            }
        }
    }
    Ok(out)
}

/// Group sum scaled by 1/d; exact for power-of-two factors.
pub fn channel_group_mean(x: &Tensor, d: usize) -> Result<Tensor, ShapeError> {
    let sum = channel_group_sum(x, d)?;
    Ok(sum.scaled(1.0 / d as f64))
}
