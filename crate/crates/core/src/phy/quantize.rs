//! Uniform 8-bit per-pack quantizer.

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const BITS_PER_VALUE: usize = 8;
const LEVELS: f64 = 255.0;

/// Payload bits (MSB first per value) plus out-of-band framing.
#[derive(Debug, Clone, PartialEq)]
pub struct BitStream {
    pub bits: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    pub min: f64,
    pub step: f64,
}

/// Affine map of `[min, max]` onto codes `0..=255`, rounding half away from
/// zero. A constant pack gets `step = 0` and all-zero codes.
pub fn quantize(features: &Tensor) -> Result<BitStream> {
    let &[rows, cols] = features.shape() else {
        return Err(Error::shape("quantize", "[K, C]", features.shape()));
    };
    if !features.is_finite() {
        return Err(Error::contract("quantize needs finite features"));
    }
    let d = features.data();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (min, step) = if d.is_empty() {
        (0.0, 0.0)
    } else {
        (min, (max - min) / LEVELS)
    };
    let mut bits = Vec::with_capacity(d.len() * BITS_PER_VALUE);
    for &v in d {
        let code = if step > 0.0 {
            ((v - min) / step).round().clamp(0.0, LEVELS) as u8
        } else {
            0
        };
        bits.extend((0..BITS_PER_VALUE).rev().map(|b| (code >> b) & 1));
    }
    Ok(BitStream {
        bits,
        rows,
        cols,
        min,
        step,
    })
}

pub fn codes(stream: &BitStream) -> Vec<u8> {
    stream
        .bits
        .chunks(BITS_PER_VALUE)
        .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | (b & 1)))
        .collect()
}

pub fn dequantize(stream: &BitStream) -> Result<Tensor> {
    if stream.bits.len() != stream.rows * stream.cols * BITS_PER_VALUE {
        return Err(Error::shape(
            "dequantize",
            stream.rows * stream.cols * BITS_PER_VALUE,
            stream.bits.len(),
        ));
    }
    Tensor::new(
        &[stream.rows, stream.cols],
        codes(stream)
            .into_iter()
            .map(|c| stream.min + c as f64 * stream.step)
            .collect(),
    )
}
