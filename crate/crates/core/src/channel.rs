//! AWGN and per-symbol Rayleigh fading with zero-forcing equalization.
//!
//! SNR is per complex symbol under unit signal power: `sigma2 = 10^(-snr/10)`,
//! split equally between I and Q. An infinite SNR means a noiseless link.

use crate::codec::SymbolBlock;
use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Gains below this magnitude are treated as erasures by [`equalize`].
pub const DEEP_FADE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelModel {
    Awgn,
    Rayleigh,
}

impl fmt::Display for ChannelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelModel::Awgn => "awgn",
            ChannelModel::Rayleigh => "rayleigh",
        })
    }
}

impl FromStr for ChannelModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(ChannelModel::Awgn),
            "rayleigh" => Ok(ChannelModel::Rayleigh),
            other => Err(Error::Unknown {
                kind: "channel model",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub model: ChannelModel,
    pub gains: Vec<Complex64>,
    pub sigma2: f64,
    pub snr_db: f64,
}

pub fn snr_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

fn cn<R: rand::Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// `Y = H * C + n` element-wise.
pub fn transmit(
    block: &SymbolBlock,
    model: ChannelModel,
    snr_db: f64,
    seed: u64,
) -> Result<(SymbolBlock, ChannelRealization)> {
    if !block.is_power_normalized() {
        return Err(Error::contract(format!(
            "transmit needs a unit-power block, got mean power {}",
            block.power()
        )));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::contract(format!("invalid SNR {snr_db} dB")));
    }
    let sigma2 = if snr_db == f64::INFINITY {
        0.0
    } else {
        snr_to_sigma2(snr_db)
    };
    let mut rng = rng_from(seed, &[stream::CHANNEL]);
    let gains: Vec<Complex64> = match model {
        ChannelModel::Awgn => vec![Complex64::new(1.0, 0.0); block.len()],
        ChannelModel::Rayleigh => (0..block.len()).map(|_| cn(&mut rng, 1.0)).collect(),
    };
    let received = block
        .symbols
        .iter()
        .zip(&gains)
        .map(|(c, h)| {
            let y = h * c;
            if sigma2 > 0.0 {
                y + cn(&mut rng, sigma2)
            } else {
                y
            }
        })
        .collect();
    Ok((
        SymbolBlock::new(received, block.rows, block.cols)?,
        ChannelRealization {
            model,
            gains,
            sigma2,
            snr_db,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equalized {
    pub block: SymbolBlock,
    /// Positions zeroed because the gain was a deep fade.
    pub erased: Vec<usize>,
}

impl Equalized {
    pub fn erasures(&self) -> usize {
        self.erased.len()
    }
}

/// Zero-forcing with perfect CSI: `C_hat = Y / H`.
pub fn equalize(received: &SymbolBlock, real: &ChannelRealization) -> Result<Equalized> {
    if real.gains.len() != received.len() {
        return Err(Error::shape("equalize", received.len(), real.gains.len()));
    }
    let mut erased = Vec::new();
    let symbols = received
        .symbols
        .iter()
        .zip(&real.gains)
        .enumerate()
        .map(|(i, (y, h))| {
            if h.norm() < DEEP_FADE {
                erased.push(i);
                Complex64::new(0.0, 0.0)
            } else {
                y / h
            }
        })
        .collect();
    Ok(Equalized {
        block: SymbolBlock::new(symbols, received.rows, received.cols)?,
        erased,
    })
}
