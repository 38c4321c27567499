//! Importance-aware spatial selection: score, top-K gate, gather, scatter.

use crate::error::{Error, Result};
use crate::nn::layers::sigmoid;
use crate::nn::{Conv2d, ConvSpec, Grads, ParamStore, Tensor};
use rand::Rng;
use std::io::{Read, Write};

/// Spatial importance scores in `(0, 1)`, row-major over `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Retained rows of a map in increasing linear-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeaturePack {
    /// `[K, C]`
    pub features: Tensor,
    pub indices: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub lambda: f64,
}

impl SparseFeaturePack {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn channels(&self) -> usize {
        self.features.last_dim()
    }

    /// Same support and shape with different row contents.
    pub fn with_features(&self, features: Tensor) -> Result<SparseFeaturePack> {
        if features.shape() != self.features.shape() {
            return Err(Error::shape(
                "pack features",
                self.features.shape(),
                features.shape(),
            ));
        }
        Ok(SparseFeaturePack {
            features,
            indices: self.indices.clone(),
            height: self.height,
            width: self.width,
            lambda: self.lambda,
        })
    }

    /// Little-endian: magic `CMSCPACK`, u32 K, f64 lambda, u32 H, u32 W,
    /// u32 C, K x u32 indices, K*C x f64 row-major features.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"CMSCPACK")?;
        w.write_all(&(self.k() as u32).to_le_bytes())?;
        w.write_all(&self.lambda.to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.channels() as u32).to_le_bytes())?;
        for &i in &self.indices {
            w.write_all(&(i as u32).to_le_bytes())?;
        }
        for v in self.features.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<SparseFeaturePack> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"CMSCPACK" {
            return Err(Error::Parse("not a feature pack".into()));
        }
        let mut u32_buf = [0u8; 4];
        let mut f64_buf = [0u8; 8];
        let mut next_u32 = |r: &mut R| -> Result<usize> {
            r.read_exact(&mut u32_buf)?;
            Ok(u32::from_le_bytes(u32_buf) as usize)
        };
        let k = next_u32(&mut r)?;
        r.read_exact(&mut f64_buf)?;
        let lambda = f64::from_le_bytes(f64_buf);
        let height = next_u32(&mut r)?;
        let width = next_u32(&mut r)?;
        let c = next_u32(&mut r)?;
        let indices = (0..k)
            .map(|_| next_u32(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let mut data = vec![0.0; k * c];
        for v in &mut data {
            r.read_exact(&mut f64_buf)?;
            *v = f64::from_le_bytes(f64_buf);
        }
        validate_indices(&indices, height * width)?;
        Ok(SparseFeaturePack {
            features: Tensor::new(&[k, c], data)?,
            indices,
            height,
            width,
            lambda,
        })
    }
}

fn validate_indices(indices: &[usize], cells: usize) -> Result<()> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= cells) {
        return Err(Error::contract(format!(
            "pack index {bad} outside {cells} cells"
        )));
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("pack indices must be strictly increasing"));
    }
    Ok(())
}

/// `K = ceil(lambda * H * W)`. A relative slack of 1e-9 absorbs products
/// such as `0.07 * 100 = 7.000000000000001`.
pub fn retained_count(lambda: f64, height: usize, width: usize) -> Result<usize> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::contract(format!(
            "compression ratio {lambda} outside (0, 1]"
        )));
    }
    let exact = lambda * (height * width) as f64;
    Ok((exact - 1e-9 * exact.max(1.0)).ceil().max(1.0) as usize)
}

/// Indices of the `k` largest values, ties to the lowest index, returned in
/// increasing order.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Hard top-K gate on `map` (`[H, W, C]`). Retained cells are multiplied by
/// their importance; every other cell is zero.
pub fn select(
    map: &Tensor,
    imp: &ImportanceMap,
    lambda: f64,
) -> Result<(Tensor, SparseFeaturePack)> {
    let &[h, w, c] = map.shape() else {
        return Err(Error::shape("select", "[H, W, C]", map.shape()));
    };
    if (imp.height, imp.width) != (h, w) || imp.values.len() != h * w {
        return Err(Error::shape("select", (h, w), (imp.height, imp.width)));
    }
    let k = retained_count(lambda, h, w)?;
    let indices = top_k(&imp.values, k);
    let mut masked = vec![0.0; h * w * c];
    let mut rows = Vec::with_capacity(k * c);
    for &i in &indices {
        let s = imp.values[i];
        for ch in 0..c {
            let v = map.data()[i * c + ch] * s;
            masked[i * c + ch] = v;
            rows.push(v);
        }
    }
    Ok((
        Tensor::new(&[h, w, c], masked)?,
        SparseFeaturePack {
            features: Tensor::new(&[k, c], rows)?,
            indices,
            height: h,
            width: w,
            lambda,
        },
    ))
}

/// Gradients of the gathered pack rows with respect to the map and the
/// importance values. Returns `(grad_map [H, W, C], grad_importance [H*W])`.
pub fn select_backward(
    map: &Tensor,
    imp: &ImportanceMap,
    pack: &SparseFeaturePack,
    grad_rows: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let c = map.last_dim();
    if grad_rows.shape() != [pack.k(), c] {
        return Err(Error::shape(
            "select_backward",
            [pack.k(), c],
            grad_rows.shape(),
        ));
    }
    let mut gx = vec![0.0; map.numel()];
    let mut gi = vec![0.0; imp.values.len()];
    for (r, &i) in pack.indices.iter().enumerate() {
        let g = &grad_rows.data()[r * c..(r + 1) * c];
        let x = &map.data()[i * c..(i + 1) * c];
        for ch in 0..c {
            gx[i * c + ch] = g[ch] * imp.values[i];
            gi[i] += g[ch] * x[ch];
        }
    }
    Ok((Tensor::new(map.shape(), gx)?, gi))
}

/// Places decoded rows back on the grid; unselected cells are zero.
pub fn scatter(pack: &SparseFeaturePack, decoded: &Tensor) -> Result<Tensor> {
    let c = decoded.last_dim();
    if decoded.ndim() != 2 || decoded.shape()[0] != pack.k() {
        return Err(Error::shape("scatter", [pack.k(), c], decoded.shape()));
    }
    validate_indices(&pack.indices, pack.height * pack.width)?;
    let mut out = vec![0.0; pack.height * pack.width * c];
    for (r, &i) in pack.indices.iter().enumerate() {
        out[i * c..(i + 1) * c].copy_from_slice(&decoded.data()[r * c..(r + 1) * c]);
    }
    Tensor::new(&[pack.height, pack.width, c], out)
}

/// Adjoint of [`scatter`]: gathers grid gradients at the pack support.
pub fn scatter_backward(pack: &SparseFeaturePack, grad_map: &Tensor) -> Result<Tensor> {
    let c = grad_map.last_dim();
    let mut rows = Vec::with_capacity(pack.k() * c);
    for &i in &pack.indices {
        rows.extend_from_slice(&grad_map.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(&[pack.k(), c], rows)
}

/// Learned scorer: 1x1 conv `C -> 1` followed by a sigmoid.
#[derive(Debug, Clone)]
pub struct Selector {
    pub conv: Conv2d,
}

impl Selector {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Selector {
            conv: Conv2d::new(store, name, ConvSpec::new(channels, 1, (1, 1)), rng)?,
        })
    }

    /// `x` is `[N, H, W, C]`; one map per batch entry.
    pub fn importance(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<ImportanceMap>> {
        let logits = self.conv.forward(store, x)?;
        let &[n, h, w, _] = logits.shape() else {
            unreachable!("conv output is rank 4")
        };
        Ok((0..n)
            .map(|b| ImportanceMap {
                height: h,
                width: w,
                values: logits.data()[b * h * w..(b + 1) * h * w]
                    .iter()
                    .map(|&v| sigmoid(v))
                    .collect(),
            })
            .collect())
    }

    /// Backpropagates importance gradients (one `H*W` vector per batch entry)
    /// to the input and the scorer weights.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        maps: &[ImportanceMap],
        grad_imp: &[Vec<f64>],
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let &[n, h, w, _] = x.shape() else {
            return Err(Error::shape("selector", "[N, H, W, C]", x.shape()));
        };
        if maps.len() != n || grad_imp.len() != n {
            return Err(Error::shape("selector", n, grad_imp.len()));
        }
        let mut g_logits = Vec::with_capacity(n * h * w);
        for (m, g) in maps.iter().zip(grad_imp) {
            g_logits.extend(m.values.iter().zip(g).map(|(s, g)| g * s * (1.0 - s)));
        }
        let g_logits = Tensor::new(&[n, h, w, 1], g_logits)?;
        self.conv.backward(store, x, &g_logits, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ratio_on_default_grid() {
        assert_eq!(retained_count(0.06, 32, 32).unwrap(), 62);
        assert_eq!(retained_count(0.5, 2, 2).unwrap(), 2);
        assert_eq!(retained_count(1.0, 32, 32).unwrap(), 1024);
        assert_eq!(retained_count(0.07, 10, 10).unwrap(), 7);
    }

    #[test]
    fn invalid_ratio_rejected() {
        assert!(retained_count(0.0, 4, 4).is_err());
        assert!(retained_count(1.01, 4, 4).is_err());
        assert!(retained_count(f64::NAN, 4, 4).is_err());
    }

    #[test]
    fn top_two_of_four() {
        assert_eq!(top_k(&[0.9, 0.1, 0.5, 0.7], 2), vec![0, 3]);
        assert_eq!(top_k(&[0.5, 0.5, 0.5, 0.5], 2), vec![0, 1]);
    }
}
