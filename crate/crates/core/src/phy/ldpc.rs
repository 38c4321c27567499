//! IEEE 802.11n rate-1/2 QC-LDPC code (n = 648, Z = 27).
//!
//! Block `(i, j)` of the parity-check matrix is the `Z x Z` identity cyclically
//! shifted by `BASE[i][j]` (`-1` is the zero block): row `r` of that block has
//! its one in column `(r + s) mod Z`.

use crate::error::{Error, Result};

pub const Z: usize = 27;
pub const N: usize = 648;
pub const K: usize = 324;
const ROWS: usize = 12;
const COLS: usize = 24;
const INFO_COLS: usize = COLS - ROWS;

#[rustfmt::skip]
pub const BASE: [[i8; COLS]; ROWS] = [
    [ 0, -1, -1, -1,  0,  0, -1, -1,  0, -1, -1,  0,  1,  0, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [22,  0, -1, -1, 17, -1,  0,  0, 12, -1, -1, -1, -1,  0,  0, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [ 6, -1,  0, -1, 10, -1, -1, -1, 24, -1,  0, -1, -1, -1,  0,  0, -1, -1, -1, -1, -1, -1, -1, -1],
    [ 2, -1, -1,  0, 20, -1, -1, -1, 25,  0, -1, -1, -1, -1, -1,  0,  0, -1, -1, -1, -1, -1, -1, -1],
    [23, -1, -1, -1,  3, -1, -1, -1,  0, -1,  9, 11, -1, -1, -1, -1,  0,  0, -1, -1, -1, -1, -1, -1],
    [24, -1, 23,  1, 17, -1,  3, -1, 10, -1, -1, -1, -1, -1, -1, -1, -1,  0,  0, -1, -1, -1, -1, -1],
    [25, -1, -1, -1,  8, -1, -1, -1,  7, 18, -1, -1,  0, -1, -1, -1, -1, -1,  0,  0, -1, -1, -1, -1],
    [13, 24, -1, -1,  0, -1,  8, -1,  6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1,  0,  0, -1, -1, -1],
    [ 7, 20, -1, 16, 22, 10, -1, -1, 23, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1,  0,  0, -1, -1],
    [11, -1, -1, -1, 19, -1, -1, -1, 13, -1,  3, 17, -1, -1, -1, -1, -1, -1, -1, -1, -1,  0,  0, -1],
    [25, -1,  8, -1, 23, 18, -1, 14,  9, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1,  0,  0],
    [ 3, -1, -1, -1, 16, -1, -1,  2, 25,  5, -1, -1,  1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1,  0],
];

/// `out ^= P^s x` for one Z-bit block.
fn xor_shifted(out: &mut [u8], x: &[u8], s: usize) {
    for r in 0..Z {
        out[r] ^= x[(r + s) % Z];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdpcDecoded {
    pub info: Vec<u8>,
    pub converged: bool,
    pub iterations: usize,
}

/// Encoder and normalized min-sum decoder with a prebuilt Tanner graph.
#[derive(Debug, Clone)]
pub struct Ldpc {
    /// Variable index of every edge, grouped by check.
    edges: Vec<usize>,
    /// `check_start[c]..check_start[c + 1]` indexes `edges`.
    check_start: Vec<usize>,
    pub scale: f64,
    pub max_iterations: usize,
}

impl Default for Ldpc {
    fn default() -> Self {
        Self::new()
    }
}

impl Ldpc {
    pub fn new() -> Self {
        let mut edges = Vec::new();
        let mut check_start = vec![0];
        for row in BASE.iter() {
            for a in 0..Z {
                for (j, &s) in row.iter().enumerate() {
                    if s >= 0 {
                        edges.push(j * Z + (a + s as usize) % Z);
                    }
                }
                check_start.push(edges.len());
            }
        }
        Ldpc {
            edges,
            check_start,
            scale: 0.8,
            max_iterations: 25,
        }
    }

    pub fn checks(&self) -> usize {
        self.check_start.len() - 1
    }

    /// `H c^T` over GF(2).
    pub fn syndrome(&self, word: &[u8]) -> Vec<u8> {
        (0..self.checks())
            .map(|c| {
                self.edges[self.check_start[c]..self.check_start[c + 1]]
                    .iter()
                    .fold(0u8, |acc, &v| acc ^ (word[v] & 1))
            })
            .collect()
    }

    pub fn is_codeword(&self, word: &[u8]) -> bool {
        word.len() == N && self.syndrome(word).iter().all(|&s| s == 0)
    }

    /// Systematic encoding `[info | parity]` via the dual-diagonal structure.
    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>> {
        if info.len() != K {
            return Err(Error::shape("ldpc_encode", K, info.len()));
        }
        let mut lam = vec![[0u8; Z]; ROWS];
        for (i, row) in BASE.iter().enumerate() {
            for (j, &s) in row[..INFO_COLS].iter().enumerate() {
                if s >= 0 {
                    xor_shifted(&mut lam[i], &info[j * Z..(j + 1) * Z], s as usize);
                }
            }
        }
        let mut p = vec![[0u8; Z]; ROWS];
        for l in &lam {
            for r in 0..Z {
                p[0][r] ^= l[r];
            }
        }
        let p0 = p[0];
        let mut next = lam[0];
        xor_shifted(&mut next, &p0, BASE[0][INFO_COLS] as usize);
        p[1] = next;
        for i in 1..ROWS - 1 {
            let mut next = lam[i];
            for r in 0..Z {
                next[r] ^= p[i][r];
            }
            if BASE[i][INFO_COLS] >= 0 {
                xor_shifted(&mut next, &p0, BASE[i][INFO_COLS] as usize);
            }
            p[i + 1] = next;
        }
        let mut word = info.to_vec();
        for block in &p {
            word.extend_from_slice(block);
        }
        Ok(word)
    }

    /// Flooding normalized min-sum. Positive LLR favours bit 0. The syndrome
    /// of the channel hard decision is checked before the first iteration.
    pub fn decode(&self, llr: &[f64]) -> Result<LdpcDecoded> {
        if llr.len() != N {
            return Err(Error::shape("ldpc_decode", N, llr.len()));
        }
        let hard = |t: &[f64]| t.iter().map(|&v| u8::from(v < 0.0)).collect::<Vec<u8>>();
        let mut word = hard(llr);
        if self.is_codeword(&word) {
            return Ok(LdpcDecoded {
                info: word[..K].to_vec(),
                converged: true,
                iterations: 0,
            });
        }
        let mut c2v = vec![0.0; self.edges.len()];
        let mut total = llr.to_vec();
        let mut v2c = Vec::with_capacity(16);
        for it in 1..=self.max_iterations {
            for c in 0..self.checks() {
                let range = self.check_start[c]..self.check_start[c + 1];
                v2c.clear();
                let mut sign = 1.0;
                let (mut min1, mut min2, mut arg) = (f64::INFINITY, f64::INFINITY, 0);
                for (k, e) in range.clone().enumerate() {
                    let m = total[self.edges[e]] - c2v[e];
                    v2c.push(m);
                    if m < 0.0 {
                        sign = -sign;
                    }
                    let a = m.abs();
                    if a < min1 {
                        min2 = min1;
                        min1 = a;
                        arg = k;
                    } else if a < min2 {
                        min2 = a;
                    }
                }
                for (k, e) in range.enumerate() {
                    let own = if v2c[k] < 0.0 { -1.0 } else { 1.0 };
                    let mag = if k == arg { min2 } else { min1 };
                    c2v[e] = self.scale * sign * own * mag;
                }
            }
            total.copy_from_slice(llr);
            for (e, &v) in self.edges.iter().enumerate() {
                total[v] += c2v[e];
            }
            word = hard(&total);
            if self.is_codeword(&word) {
                return Ok(LdpcDecoded {
                    info: word[..K].to_vec(),
                    converged: true,
                    iterations: it,
                });
            }
        }
        Ok(LdpcDecoded {
            info: word[..K].to_vec(),
            converged: false,
            iterations: self.max_iterations,
        })
    }
}
