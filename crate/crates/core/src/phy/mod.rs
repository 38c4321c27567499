//! Classical baseline chain: 8-bit quantization, rate-1/2 LDPC, Gray QAM.

pub mod ldpc;
pub mod qam;
pub mod quantize;

pub use ldpc::{Ldpc, LdpcDecoded};
pub use qam::Qam;
pub use quantize::{dequantize, quantize, BitStream};

/// Complex channel uses needed to carry `s_m * lambda` 8-bit values at code
/// rate `rate` over an `order`-point constellation.
pub fn channel_uses(s_m: f64, lambda: f64, rate: f64, order: u32) -> f64 {
    s_m * lambda * 8.0 / (rate * (order as f64).log2())
}

/// Baseline ratio giving the same channel uses as a learned codec sending
/// one complex symbol per retained value at ratio `lambda`.
pub fn parity_lambda(lambda: f64, rate: f64, order: u32) -> f64 {
    lambda * rate * (order as f64).log2() / 8.0
}

use crate::channel::{equalize, transmit, ChannelModel};
use crate::codec::SymbolBlock;
use crate::error::Result;

/// Output of one pass through the coded link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkOutput {
    pub bits: Vec<u8>,
    pub codewords: usize,
    pub channel_uses: usize,
    pub failed_codewords: usize,
}

/// Rate-1/2 LDPC plus square QAM over a fading or AWGN channel.
#[derive(Debug, Clone)]
pub struct ClassicLink {
    pub ldpc: Ldpc,
    pub qam: Qam,
}

impl ClassicLink {
    pub fn new(order: u32) -> Result<Self> {
        Ok(ClassicLink {
            ldpc: Ldpc::new(),
            qam: Qam::new(order)?,
        })
    }

    pub fn rate(&self) -> f64 {
        ldpc::K as f64 / ldpc::N as f64
    }

    pub fn symbols_per_codeword(&self) -> usize {
        ldpc::N / self.qam.bits_per_symbol
    }

    /// Channel uses for `bits` payload bits after zero padding to whole codewords.
    pub fn channel_uses_for(&self, bits: usize) -> usize {
        bits.div_ceil(ldpc::K) * self.symbols_per_codeword()
    }

    /// Pads `bits` with zeros to whole codewords, sends them, and returns the
    /// decoder's hard decisions truncated to the payload length.
    pub fn send(
        &self,
        bits: &[u8],
        model: ChannelModel,
        snr_db: f64,
        seed: u64,
    ) -> Result<LinkOutput> {
        let codewords = bits.len().div_ceil(ldpc::K);
        let mut coded = Vec::with_capacity(codewords * ldpc::N);
        for c in 0..codewords {
            let mut info = vec![0u8; ldpc::K];
            let chunk = &bits[c * ldpc::K..bits.len().min((c + 1) * ldpc::K)];
            info[..chunk.len()].copy_from_slice(chunk);
            coded.extend(self.ldpc.encode(&info)?);
        }
        let symbols = self.qam.modulate(&coded)?;
        let n = symbols.len();
        let block = SymbolBlock::from_constellation(symbols, 1, n)?;
        let (rx, real) = transmit(&block, model, snr_db, seed)?;
        let eq = equalize(&rx, &real)?;
        // A noiseless link still needs a finite LLR scale.
        let sigma2 = if real.sigma2 > 0.0 {
            real.sigma2
        } else {
            1e-12
        };
        let llr = self
            .qam
            .demodulate(&eq.block.symbols, &real.gains, sigma2)?;
        let mut out = Vec::with_capacity(codewords * ldpc::K);
        let mut failed = 0;
        for word in llr.chunks(ldpc::N) {
            let d = self.ldpc.decode(word)?;
            failed += usize::from(!d.converged);
            out.extend(d.info);
        }
        out.truncate(bits.len());
        Ok(LinkOutput {
            bits: out,
            codewords,
            channel_uses: n,
            failed_codewords: failed,
        })
    }
}

/// One named check of [`self_test`].
#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Fast sanity checks of the coded link: parity checks on random codewords,
/// Gray labelling, unit energy, exact noiseless round trips and a clean
/// high-SNR link.
pub fn self_test(seed: u64) -> Result<Vec<SelfCheck>> {
    use crate::rng::rng_from;
    use rand::Rng;

    let mut rng = rng_from(seed, &[0x5E1F]);
    let ldpc = Ldpc::new();
    let mut checks = Vec::new();

    let words = 1000;
    let mut bad = 0;
    for _ in 0..words {
        let info: Vec<u8> = (0..ldpc::K).map(|_| rng.random_range(0..2)).collect();
        bad += usize::from(!ldpc.is_codeword(&ldpc.encode(&info)?));
    }
    checks.push(SelfCheck {
        name: "ldpc parity checks",
        passed: bad == 0,
        detail: format!("{bad} of {words} random codewords violate H c = 0"),
    });

    for order in [16u32, 256] {
        let qam = Qam::new(order)?;
        let pts = qam.constellation();
        let energy = pts.iter().map(|p| p.norm_sqr()).sum::<f64>() / pts.len() as f64;
        let mut gray_ok = true;
        for (a, pa) in pts.iter().enumerate() {
            for (b, pb) in pts.iter().enumerate().skip(a + 1) {
                let d = (pa - pb).norm() / (2.0 * qam.scale);
                if (d - 1.0).abs() < 1e-9 && (a ^ b).count_ones() != 1 {
                    gray_ok = false;
                }
            }
        }
        checks.push(SelfCheck {
            name: if order == 16 {
                "16-QAM gray and energy"
            } else {
                "256-QAM gray and energy"
            },
            passed: gray_ok && (energy - 1.0).abs() <= 1e-12,
            detail: format!(
                "gray adjacency {}, mean energy {energy:.15}",
                if gray_ok { "ok" } else { "broken" }
            ),
        });

        let link = ClassicLink::new(order)?;
        let bits: Vec<u8> = (0..3 * ldpc::K + 17)
            .map(|_| rng.random_range(0..2))
            .collect();
        let clean = link.send(&bits, ChannelModel::Awgn, f64::INFINITY, rng.random())?;
        let high = link.send(&bits, ChannelModel::Awgn, 30.0, rng.random())?;
        checks.push(SelfCheck {
            name: if order == 16 {
                "16-QAM link round trip"
            } else {
                "256-QAM link round trip"
            },
            passed: clean.bits == bits && high.bits == bits,
            detail: format!(
                "noiseless exact: {}, 30 dB exact: {} ({} codewords, {} channel uses)",
                clean.bits == bits,
                high.bits == bits,
                clean.codewords,
                clean.channel_uses
            ),
        });
    }
    Ok(checks)
}
