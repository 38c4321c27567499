//! Square Gray-mapped QAM with a max-log soft demapper.
//!
//! The first half of each symbol's bits selects the in-phase level and the
//! second half the quadrature level. Each axis uses a binary-reflected Gray
//! PAM labelling, so for 16-QAM `00 -> -3, 01 -> -1, 11 -> +1, 10 -> +3`.

use crate::error::{Error, Result};
use num_complex::Complex64;

#[derive(Debug, Clone)]
pub struct Qam {
    pub order: u32,
    pub bits_per_symbol: usize,
    axis_bits: usize,
    /// Unnormalized PAM amplitude for each axis label.
    levels: Vec<f64>,
    pub scale: f64,
}

fn gray_to_binary(mut g: usize) -> usize {
    let mut b = 0;
    while g != 0 {
        b ^= g;
        g >>= 1;
    }
    b
}

impl Qam {
    pub fn new(order: u32) -> Result<Self> {
        let bits = order.trailing_zeros() as usize;
        if !order.is_power_of_two() || !bits.is_multiple_of(2) || bits == 0 {
            return Err(Error::Unknown {
                kind: "square QAM order",
                value: order.to_string(),
            });
        }
        let axis_bits = bits / 2;
        let side = 1usize << axis_bits;
        let levels = (0..side)
            .map(|label| (2 * gray_to_binary(label)) as f64 - (side - 1) as f64)
            .collect();
        let mean_energy = 2.0 * ((side * side - 1) as f64) / 3.0;
        Ok(Qam {
            order,
            bits_per_symbol: bits,
            axis_bits,
            levels,
            scale: 1.0 / mean_energy.sqrt(),
        })
    }

    fn label(bits: &[u8]) -> usize {
        bits.iter().fold(0, |acc, &b| (acc << 1) | (b & 1) as usize)
    }

    /// Unnormalized integer-grid point for one symbol's bits.
    pub fn grid_point(&self, bits: &[u8]) -> (f64, f64) {
        let (i, q) = bits.split_at(self.axis_bits);
        (self.levels[Self::label(i)], self.levels[Self::label(q)])
    }

    /// Every constellation point in label order.
    pub fn constellation(&self) -> Vec<Complex64> {
        (0..self.order as usize)
            .map(|l| {
                let bits: Vec<u8> = (0..self.bits_per_symbol)
                    .rev()
                    .map(|b| ((l >> b) & 1) as u8)
                    .collect();
                let (i, q) = self.grid_point(&bits);
                Complex64::new(i * self.scale, q * self.scale)
            })
            .collect()
    }

    pub fn modulate(&self, bits: &[u8]) -> Result<Vec<Complex64>> {
        if !bits.len().is_multiple_of(self.bits_per_symbol) {
            return Err(Error::contract(format!(
                "{} bits not divisible by {} bits per {}-QAM symbol",
                bits.len(),
                self.bits_per_symbol,
                self.order
            )));
        }
        Ok(bits
            .chunks(self.bits_per_symbol)
            .map(|c| {
                let (i, q) = self.grid_point(c);
                Complex64::new(i * self.scale, q * self.scale)
            })
            .collect())
    }

    /// Nearest-point decisions.
    pub fn hard_demodulate(&self, symbols: &[Complex64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(symbols.len() * self.bits_per_symbol);
        for s in symbols {
            for v in [s.re, s.im] {
                let label = (0..self.levels.len())
                    .min_by(|&a, &b| {
                        let da = (v - self.levels[a] * self.scale).abs();
                        let db = (v - self.levels[b] * self.scale).abs();
                        da.total_cmp(&db)
                    })
                    .unwrap_or(0);
                out.extend((0..self.axis_bits).rev().map(|b| ((label >> b) & 1) as u8));
            }
        }
        out
    }

    /// Max-log LLRs on equalized symbols `y / h`:
    /// `|h|^2 / sigma2 * (min_{b=1} d^2 - min_{b=0} d^2)`, positive favouring 0.
    pub fn demodulate(
        &self,
        equalized: &[Complex64],
        gains: &[Complex64],
        sigma2: f64,
    ) -> Result<Vec<f64>> {
        if sigma2.is_nan() || sigma2 <= 0.0 {
            return Err(Error::contract(format!(
                "noise variance must be positive, got {sigma2}"
            )));
        }
        if gains.len() != equalized.len() {
            return Err(Error::shape("qam_demodulate", equalized.len(), gains.len()));
        }
        let mut out = Vec::with_capacity(equalized.len() * self.bits_per_symbol);
        for (y, h) in equalized.iter().zip(gains) {
            let w = h.norm_sqr() / sigma2;
            for v in [y.re, y.im] {
                let mut best = vec![[f64::INFINITY; 2]; self.axis_bits];
                for (label, &a) in self.levels.iter().enumerate() {
                    let d = (v - a * self.scale).powi(2);
                    for (k, slot) in best.iter_mut().enumerate() {
                        let bit = (label >> (self.axis_bits - 1 - k)) & 1;
                        if d < slot[bit] {
                            slot[bit] = d;
                        }
                    }
                }
                out.extend(best.iter().map(|b| w * (b[1] - b[0])));
            }
        }
        Ok(out)
    }
}
