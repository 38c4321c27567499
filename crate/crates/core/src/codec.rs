//! Learned joint source-channel codec over sparse feature packs.
//!
//! A pack `[K, C]` is treated as a one-pixel-wide image `[1, K, 1, C]` so the
//! encoder's 3x1 convolutions slide along the row axis. The encoder emits
//! `2C` reals per row, read as `C` complex symbols with I on even channels and
//! Q on odd channels.
//!
//! Each pack is sent at unit power. Its rms amplitude (the gain) travels out
//! of band and the decoder multiplies the clipped symbols by it, so the
//! decoder input scale does not depend on how many rows were retained.

use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm, Conv2d, ConvSpec, Deconv2d, Dense, Grads, Layer, Mode, ParamStore, Sequential, Tape,
    Tensor,
};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const POWER_TOLERANCE: f64 = 1e-6;

/// `rows x cols` complex baseband symbols, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolBlock {
    pub symbols: Vec<Complex64>,
    pub rows: usize,
    pub cols: usize,
    unit_energy_source: bool,
}

impl SymbolBlock {
    pub fn new(symbols: Vec<Complex64>, rows: usize, cols: usize) -> Result<Self> {
        if symbols.len() != rows * cols {
            return Err(Error::shape("SymbolBlock", rows * cols, symbols.len()));
        }
        if symbols
            .iter()
            .any(|s| !s.re.is_finite() || !s.im.is_finite())
        {
            return Err(Error::contract("symbol block holds non-finite values"));
        }
        Ok(SymbolBlock {
            symbols,
            rows,
            cols,
            unit_energy_source: false,
        })
    }

    /// Symbols drawn from a constellation whose average energy is one. The
    /// block passes the transmit power check even though its own empirical
    /// power fluctuates with the payload.
    pub fn from_constellation(symbols: Vec<Complex64>, rows: usize, cols: usize) -> Result<Self> {
        let mut b = Self::new(symbols, rows, cols)?;
        b.unit_energy_source = true;
        Ok(b)
    }

    /// Interleaved `(I, Q)` pairs along the last axis of a `[rows, 2 * cols]`
    /// real layout.
    pub fn from_reals(reals: &[f64], rows: usize, cols: usize) -> Result<Self> {
        if reals.len() != rows * cols * 2 {
            return Err(Error::shape(
                "SymbolBlock::from_reals",
                rows * cols * 2,
                reals.len(),
            ));
        }
        Self::new(
            reals
                .chunks(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect(),
            rows,
            cols,
        )
    }

    pub fn to_reals(&self) -> Vec<f64> {
        self.symbols.iter().flat_map(|s| [s.re, s.im]).collect()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Mean `|c|^2`.
    pub fn power(&self) -> f64 {
        if self.symbols.is_empty() {
            return 0.0;
        }
        self.symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.symbols.len() as f64
    }

    pub fn is_power_normalized(&self) -> bool {
        self.unit_energy_source || (self.power() - 1.0).abs() <= POWER_TOLERANCE
    }

    /// Interleaved little-endian `f32` I/Q.
    pub fn to_iq_bytes(&self) -> Vec<u8> {
        self.symbols
            .iter()
            .flat_map(|s| {
                let mut b = [0u8; 8];
                b[..4].copy_from_slice(&(s.re as f32).to_le_bytes());
                b[4..].copy_from_slice(&(s.im as f32).to_le_bytes());
                b
            })
            .collect()
    }

    pub fn from_iq_bytes(bytes: &[u8], rows: usize, cols: usize) -> Result<Self> {
        if bytes.len() != rows * cols * 8 {
            return Err(Error::shape(
                "SymbolBlock::from_iq_bytes",
                rows * cols * 8,
                bytes.len(),
            ));
        }
        let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        Self::new(
            bytes
                .chunks(8)
                .map(|c| Complex64::new(f(&c[..4]), f(&c[4..])))
                .collect(),
            rows,
            cols,
        )
    }
}

/// Scales by `1 / sqrt(mean |c|^2)`.
pub fn power_normalize(block: &SymbolBlock) -> Result<SymbolBlock> {
    let p = block.power();
    if p.is_nan() || p <= 0.0 {
        return Err(Error::contract("cannot power-normalize an all-zero block"));
    }
    let s = 1.0 / p.sqrt();
    SymbolBlock::new(
        block.symbols.iter().map(|c| c * s).collect(),
        block.rows,
        block.cols,
    )
}

/// Power normalization on the real layout: `y = r / sqrt(sum(r^2) / n)` with
/// `n` the number of complex symbols.
pub fn normalize_reals(r: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = r.len() as f64 / 2.0;
    let energy: f64 = r.iter().map(|v| v * v).sum();
    if energy.is_nan() || energy <= 0.0 {
        return Err(Error::contract("cannot power-normalize an all-zero block"));
    }
    let s = (n / energy).sqrt();
    Ok((r.iter().map(|v| v * s).collect(), s))
}

/// `g_r = s (g - r (r . g) / sum(r^2))`.
pub fn normalize_reals_backward(r: &[f64], scale: f64, g: &[f64]) -> Vec<f64> {
    let energy: f64 = r.iter().map(|v| v * v).sum();
    let rg: f64 = r.iter().zip(g).map(|(a, b)| a * b).sum();
    r.iter()
        .zip(g)
        .map(|(ri, gi)| scale * (gi - ri * rg / energy))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Kernel length along the row axis.
    pub kernel: usize,
    /// Equalized symbols are clipped to `[-clip, clip]` per real component
    /// before decoding.
    pub decoder_clip: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            kernel: 3,
            decoder_clip: 4.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Codec {
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub channels: usize,
    pub clip: f64,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    tape: Tape,
    raw: Tensor,
    scales: Vec<f64>,
}

impl EncodeCache {
    /// Per-pack rms amplitude of the raw encoder output.
    pub fn gains(&self) -> Vec<f64> {
        self.scales.iter().map(|s| 1.0 / s).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DecodeCache {
    tape: Tape,
    input: Tensor,
    gains: Vec<f64>,
}

impl Codec {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &CodecConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.kernel.is_multiple_of(2) {
            return Err(Error::Config("codec kernel must be odd".into()));
        }
        let c2 = 2 * channels;
        let spec = |cin| ConvSpec::new(cin, c2, (cfg.kernel, 1)).pad((cfg.kernel / 2, 0));
        let encoder = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(
                store,
                &format!("{name}.enc.conv1"),
                spec(channels),
                rng,
            )?),
            Layer::BatchNorm(BatchNorm::new(store, &format!("{name}.enc.bn1"), c2)?),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(
                store,
                &format!("{name}.enc.conv2"),
                spec(c2),
                rng,
            )?),
            Layer::BatchNorm(BatchNorm::new(store, &format!("{name}.enc.bn2"), c2)?),
            Layer::Relu,
            Layer::Dense(Dense::new(
                store,
                &format!("{name}.enc.head"),
                c2,
                c2,
                true,
                rng,
            )?),
        ]);
        let decoder = Sequential::new(vec![
            Layer::Deconv2d(Deconv2d::new(
                store,
                &format!("{name}.dec.deconv1"),
                spec(c2),
                rng,
            )?),
            Layer::BatchNorm(BatchNorm::new(store, &format!("{name}.dec.bn1"), c2)?),
            Layer::Relu,
            Layer::Deconv2d(Deconv2d::new(
                store,
                &format!("{name}.dec.deconv2"),
                spec(c2),
                rng,
            )?),
            Layer::BatchNorm(BatchNorm::new(store, &format!("{name}.dec.bn2"), c2)?),
            Layer::Relu,
            Layer::Dense(Dense::new(
                store,
                &format!("{name}.dec.head"),
                c2,
                channels,
                true,
                rng,
            )?),
        ]);
        Ok(Codec {
            encoder,
            decoder,
            channels,
            clip: cfg.decoder_clip,
        })
    }

    /// Stacks `[K, C]` packs of equal size into `[B, K, 1, C]`.
    pub fn batch_packs(rows: &[&Tensor]) -> Result<Tensor> {
        let first = rows
            .first()
            .ok_or_else(|| Error::contract("codec needs at least one pack"))?;
        let &[k, c] = first.shape() else {
            return Err(Error::shape("codec", "[K, C]", first.shape()));
        };
        if k == 0 {
            return Err(Error::contract("cannot encode an empty pack (K = 0)"));
        }
        let mut data = Vec::with_capacity(rows.len() * k * c);
        for r in rows {
            if r.shape() != [k, c] {
                return Err(Error::shape("codec batch", [k, c], r.shape()));
            }
            data.extend_from_slice(r.data());
        }
        Tensor::new(&[rows.len(), k, 1, c], data)
    }

    /// `[B, K, 1, C] -> [B, K, 1, 2C]`, each batch entry unit power.
    pub fn encode_train(
        &self,
        store: &ParamStore,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, EncodeCache)> {
        if x.ndim() != 4 || x.shape()[1] == 0 || x.last_dim() != self.channels {
            return Err(Error::shape(
                "encoder",
                format!("[B, K>0, 1, {}]", self.channels),
                x.shape(),
            ));
        }
        let (raw, tape) = self.encoder.forward_train(store, x, mode)?;
        let per = raw.numel() / raw.shape()[0];
        let mut out = Vec::with_capacity(raw.numel());
        let mut scales = Vec::with_capacity(raw.shape()[0]);
        for chunk in raw.data().chunks(per) {
            let (y, s) = normalize_reals(chunk)?;
            out.extend(y);
            scales.push(s);
        }
        Ok((
            Tensor::new(raw.shape(), out)?,
            EncodeCache { tape, raw, scales },
        ))
    }

    /// `grad_gains` is the gradient with respect to [`EncodeCache::gains`].
    pub fn encode_backward(
        &self,
        store: &ParamStore,
        cache: &EncodeCache,
        grad_out: &Tensor,
        grad_gains: &[f64],
        mode: Mode,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        if grad_out.shape() != cache.raw.shape() {
            return Err(Error::shape(
                "encoder backward",
                cache.raw.shape(),
                grad_out.shape(),
            ));
        }
        if grad_gains.len() != cache.scales.len() {
            return Err(Error::shape(
                "encoder gain gradient",
                cache.scales.len(),
                grad_gains.len(),
            ));
        }
        let per = cache.raw.numel() / cache.raw.shape()[0];
        let n = per as f64 / 2.0;
        let mut g_raw = Vec::with_capacity(cache.raw.numel());
        for (((r, g), &s), &gg) in cache
            .raw
            .data()
            .chunks(per)
            .zip(grad_out.data().chunks(per))
            .zip(&cache.scales)
            .zip(grad_gains)
        {
            let g_norm = normalize_reals_backward(r, s, g);
            g_raw.extend(g_norm.iter().zip(r).map(|(gn, ri)| gn + gg * ri * s / n));
        }
        let g_raw = Tensor::new(cache.raw.shape(), g_raw)?;
        self.encoder
            .backward(store, &cache.tape, &g_raw, mode, grads)
    }

    /// `[B, K, 1, 2C] -> [B, K, 1, C]`. Each real component is clipped, then
    /// scaled by its pack's gain.
    pub fn decode_train(
        &self,
        store: &ParamStore,
        y: &Tensor,
        gains: &[f64],
        mode: Mode,
    ) -> Result<(Tensor, DecodeCache)> {
        if y.ndim() != 4 || y.last_dim() != 2 * self.channels {
            return Err(Error::shape(
                "decoder",
                format!("[B, K, 1, {}]", 2 * self.channels),
                y.shape(),
            ));
        }
        if gains.len() != y.shape()[0] {
            return Err(Error::shape("decoder gains", y.shape()[0], gains.len()));
        }
        let clip = self.clip;
        let per = y.numel() / y.shape()[0];
        let scaled: Vec<f64> = y
            .data()
            .chunks(per)
            .zip(gains)
            .flat_map(|(chunk, &g)| chunk.iter().map(move |v| v.clamp(-clip, clip) * g))
            .collect();
        let (out, tape) =
            self.decoder
                .forward_train(store, &Tensor::new(y.shape(), scaled)?, mode)?;
        Ok((
            out,
            DecodeCache {
                tape,
                input: y.clone(),
                gains: gains.to_vec(),
            },
        ))
    }

    pub fn decode_backward(
        &self,
        store: &ParamStore,
        cache: &DecodeCache,
        grad_out: &Tensor,
        mode: Mode,
        grads: &mut Grads,
    ) -> Result<(Tensor, Vec<f64>)> {
        let g = self
            .decoder
            .backward(store, &cache.tape, grad_out, mode, grads)?;
        let clip = self.clip;
        let per = g.numel() / cache.gains.len();
        let mut g_y = Vec::with_capacity(g.numel());
        let mut g_gains = Vec::with_capacity(cache.gains.len());
        for ((y, gu), &gain) in cache
            .input
            .data()
            .chunks(per)
            .zip(g.data().chunks(per))
            .zip(&cache.gains)
        {
            g_y.extend(
                y.iter()
                    .zip(gu)
                    .map(|(v, g)| if v.abs() <= clip { g * gain } else { 0.0 }),
            );
            g_gains.push(
                y.iter()
                    .zip(gu)
                    .map(|(v, g)| v.clamp(-clip, clip) * g)
                    .sum(),
            );
        }
        Ok((Tensor::new(g.shape(), g_y)?, g_gains))
    }

    /// Updates batch-norm running statistics from training caches.
    pub fn commit_running_stats(
        &self,
        store: &mut ParamStore,
        enc: &EncodeCache,
        dec: &DecodeCache,
    ) -> Result<()> {
        self.encoder.commit_running_stats(store, &enc.tape)?;
        self.decoder.commit_running_stats(store, &dec.tape)
    }

    /// Evaluation-mode encode of one pack into a unit-power symbol block and
    /// its gain.
    pub fn encode(&self, store: &ParamStore, features: &Tensor) -> Result<(SymbolBlock, f64)> {
        let x = Self::batch_packs(&[features])?;
        let (y, cache) = self.encode_train(store, &x, Mode::Eval)?;
        let block = SymbolBlock::from_reals(y.data(), features.shape()[0], self.channels)?;
        Ok((block, cache.gains()[0]))
    }

    /// Evaluation-mode decode of `K x C` symbols into `[K, C]` features.
    pub fn decode(
        &self,
        store: &ParamStore,
        received: &SymbolBlock,
        gain: f64,
        k: usize,
    ) -> Result<Tensor> {
        if received.rows != k || received.cols != self.channels {
            return Err(Error::shape(
                "decode",
                (k, self.channels),
                (received.rows, received.cols),
            ));
        }
        let y = Tensor::new(&[1, k, 1, 2 * self.channels], received.to_reals())?;
        let (out, _) = self.decode_train(store, &y, &[gain], Mode::Eval)?;
        out.reshape(&[k, self.channels])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lone_symbol_among_zeros_is_already_unit_power() {
        let z = Complex64::new(0.0, 0.0);
        let b = SymbolBlock::new(vec![Complex64::new(2.0, 0.0), z, z, z], 1, 4).unwrap();
        let n = power_normalize(&b).unwrap();
        assert!((n.symbols[0].re - 2.0).abs() < 1e-12);
        assert!((n.power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_block_cannot_be_normalized() {
        let b = SymbolBlock::new(vec![Complex64::new(0.0, 0.0); 3], 1, 3).unwrap();
        assert!(power_normalize(&b).is_err());
    }

    #[test]
    fn iq_bytes_round_trip() {
        let b = SymbolBlock::new(
            vec![Complex64::new(0.5, -1.25), Complex64::new(3.0, 0.0)],
            1,
            2,
        )
        .unwrap();
        let back = SymbolBlock::from_iq_bytes(&b.to_iq_bytes(), 1, 2).unwrap();
        assert_eq!(back.symbols, b.symbols);
    }
}
