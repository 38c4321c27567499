//! Layer primitives with hand-written backward passes.
//!
//! Every layer is a parameter-free description holding [`ParamId`]s into a
//! shared [`ParamStore`]. `forward` is read-only; `backward` takes the same
//! input that was fed to `forward` and recomputes whatever it needs.

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Deconv2d,
    Dense,
    BatchNorm,
    Relu,
    Gelu,
    Sigmoid,
    GlobalAvgPool,
    LayerNorm,
    ResidualAdd,
    ChannelScale,
}

/// `C (m x n) = op(A) (m x k) * op(B) (k x n) + beta * C`, row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices were checked to hold at least the addressed extent
    // for the given strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sliding-window geometry shared by conv and deconv.
///
/// `rows` is the grid whose positions index the column matrix; `grid` is the
/// grid addressed through `row * stride - pad + tap`.
#[derive(Debug, Clone, Copy)]
struct Window {
    rows_h: usize,
    rows_w: usize,
    grid_h: usize,
    grid_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
}

impl Window {
    fn grid_pos(&self, ry: usize, rx: usize, a: usize, b: usize) -> Option<(usize, usize)> {
        let y = (ry * self.stride + a) as isize - self.pad_h as isize;
        let x = (rx * self.stride + b) as isize - self.pad_w as isize;
        if y < 0 || x < 0 || y >= self.grid_h as isize || x >= self.grid_w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    fn grid_row(&self, ry: usize, a: usize) -> Option<usize> {
        let y = (ry * self.stride + a) as isize - self.pad_h as isize;
        (y >= 0 && y < self.grid_h as isize).then_some(y as usize)
    }

    /// Row positions `rx` whose column tap `b` lands inside the grid.
    fn col_span(&self, b: usize) -> std::ops::Range<usize> {
        let s = self.stride as isize;
        let off = b as isize - self.pad_w as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (self.grid_w as isize - off + s - 1) / s;
        lo.max(0) as usize..(hi.max(0) as usize).min(self.rows_w)
    }

    /// cols[(ry, rx), (a, b, ch)] = grid[row * s - p + tap, ch]
    fn gather(&self, grid: &[f64], ch: usize) -> Vec<f64> {
        let row_len = self.kh * self.kw * ch;
        let mut cols = vec![0.0; self.rows_h * self.rows_w * row_len];
        for ry in 0..self.rows_h {
            for rx in 0..self.rows_w {
                let base = (ry * self.rows_w + rx) * row_len;
                for a in 0..self.kh {
                    for b in 0..self.kw {
                        if let Some((y, x)) = self.grid_pos(ry, rx, a, b) {
                            let src = (y * self.grid_w + x) * ch;
                            let dst = base + (a * self.kw + b) * ch;
                            cols[dst..dst + ch].copy_from_slice(&grid[src..src + ch]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Window::gather`]: grid[row * s - p + tap, ch] += cols[...]
    fn scatter_add(&self, cols: &[f64], grid: &mut [f64], ch: usize) {
        let row_len = self.kh * self.kw * ch;
        for ry in 0..self.rows_h {
            for rx in 0..self.rows_w {
                let base = (ry * self.rows_w + rx) * row_len;
                for a in 0..self.kh {
                    for b in 0..self.kw {
                        if let Some((y, x)) = self.grid_pos(ry, rx, a, b) {
                            let dst = (y * self.grid_w + x) * ch;
                            let src = base + (a * self.kw + b) * ch;
                            for c in 0..ch {
                                grid[dst + c] += cols[src + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

fn expect_rank4(name: &str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        &[n, h, w, c] => Ok((n, h, w, c)),
        s => Err(Error::shape(name, "[N, H, W, C]", s)),
    }
}

/// 2-D convolution over `[N, H, W, C]` maps; `depthwise` sets groups = C.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub depthwise: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: (usize, usize),
    pub depthwise: bool,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: (usize, usize)) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad: (0, 0),
            depthwise: false,
            bias: true,
        }
    }

    pub fn same(mut self) -> Self {
        self.pad = ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2);
        self
    }

    pub fn pad(mut self, pad: (usize, usize)) -> Self {
        self.pad = pad;
        self
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.depthwise = true;
        self.out_ch = self.in_ch;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let (kh, kw) = spec.kernel;
        if spec.stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::Config(format!("{name}: zero stride or kernel")));
        }
        if spec.depthwise && spec.in_ch != spec.out_ch {
            return Err(Error::Config(format!(
                "{name}: depthwise conv needs in == out"
            )));
        }
        let (wshape, fan_in) = if spec.depthwise {
            (vec![kh, kw, spec.in_ch], kh * kw)
        } else {
            (vec![kh, kw, spec.in_ch, spec.out_ch], kh * kw * spec.in_ch)
        };
        let weight = store.add(&format!("{name}.w"), he_uniform(&wshape, fan_in, rng))?;
        let bias = if spec.bias {
            Some(store.add(&format!("{name}.b"), Tensor::zeros(&[spec.out_ch]))?)
        } else {
            None
        };
        Ok(Conv2d {
            name: name.to_string(),
            weight,
            bias,
            in_ch: spec.in_ch,
            out_ch: spec.out_ch,
            kh,
            kw,
            stride: spec.stride,
            pad_h: spec.pad.0,
            pad_w: spec.pad.1,
            depthwise: spec.depthwise,
        })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * self.pad_h < self.kh || w + 2 * self.pad_w < self.kw {
            return Err(Error::shape(
                &self.name,
                format!(
                    "spatial dims >= kernel {}x{} minus padding {}x{}",
                    self.kh,
                    self.kw,
                    2 * self.pad_h,
                    2 * self.pad_w
                ),
                (h, w),
            ));
        }
        Ok((
            (h + 2 * self.pad_h - self.kh) / self.stride + 1,
            (w + 2 * self.pad_w - self.kw) / self.stride + 1,
        ))
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let (n, h, w, c) = expect_rank4(&self.name, x)?;
        if c != self.in_ch {
            return Err(Error::shape(
                &self.name,
                format!("{} input channels", self.in_ch),
                x.shape(),
            ));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((n, h, w, oh, ow))
    }

    fn window(&self, h: usize, w: usize, oh: usize, ow: usize) -> Window {
        Window {
            rows_h: oh,
            rows_w: ow,
            grid_h: h,
            grid_w: w,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad_h: self.pad_h,
            pad_w: self.pad_w,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (n, h, w, oh, ow) = self.check(x)?;
        let (cin, cout) = (self.in_ch, self.out_ch);
        let wt = store.get(self.weight).data();
        let mut out = vec![0.0; n * oh * ow * cout];
        let in_sz = h * w * cin;
        let out_sz = oh * ow * cout;
        let win = self.window(h, w, oh, ow);
        for s in 0..n {
            let xs = &x.data()[s * in_sz..(s + 1) * in_sz];
            let os = &mut out[s * out_sz..(s + 1) * out_sz];
            if self.depthwise {
                for oy in 0..oh {
                    for a in 0..self.kh {
                        let Some(y) = win.grid_row(oy, a) else {
                            continue;
                        };
                        for b in 0..self.kw {
                            let k = &wt[(a * self.kw + b) * cin..(a * self.kw + b + 1) * cin];
                            for ox in win.col_span(b) {
                                let xx = ox * self.stride + b - self.pad_w;
                                let src = &xs[(y * w + xx) * cin..(y * w + xx + 1) * cin];
                                let o = &mut os[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                                for c in 0..cin {
                                    o[c] += src[c] * k[c];
                                }
                            }
                        }
                    }
                }
            } else if self.is_pointwise() {
                gemm(h * w, cin, cout, xs, false, wt, false, os, 0.0);
            } else {
                let cols = win.gather(xs, cin);
                gemm(
                    oh * ow,
                    self.kh * self.kw * cin,
                    cout,
                    &cols,
                    false,
                    wt,
                    false,
                    os,
                    0.0,
                );
            }
        }
        if let Some(b) = self.bias {
            let b = store.get(b).data();
            for row in out.chunks_mut(cout) {
                for (v, bi) in row.iter_mut().zip(b) {
                    *v += bi;
                }
            }
        }
        Tensor::new(&[n, oh, ow, cout], out)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let (n, h, w, oh, ow) = self.check(x)?;
        let (cin, cout) = (self.in_ch, self.out_ch);
        if grad_out.shape() != [n, oh, ow, cout] {
            return Err(Error::shape(
                &self.name,
                [n, oh, ow, cout],
                grad_out.shape(),
            ));
        }
        let wt = store.get(self.weight).data();
        let wshape = store.get(self.weight).shape().to_vec();
        let want_w = grads.wants(self.weight);
        let mut gw = vec![0.0; wt.len()];
        let mut gx = vec![0.0; x.numel()];
        let in_sz = h * w * cin;
        let out_sz = oh * ow * cout;
        let win = self.window(h, w, oh, ow);
        for s in 0..n {
            let xs = &x.data()[s * in_sz..(s + 1) * in_sz];
            let gs = &grad_out.data()[s * out_sz..(s + 1) * out_sz];
            let gxs = &mut gx[s * in_sz..(s + 1) * in_sz];
            if self.depthwise {
                for oy in 0..oh {
                    for a in 0..self.kh {
                        let Some(y) = win.grid_row(oy, a) else {
                            continue;
                        };
                        for b in 0..self.kw {
                            let koff = (a * self.kw + b) * cin;
                            let k = &wt[koff..koff + cin];
                            let gk = &mut gw[koff..koff + cin];
                            for ox in win.col_span(b) {
                                let xx = ox * self.stride + b - self.pad_w;
                                let off = (y * w + xx) * cin;
                                let g = &gs[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                                let gxc = &mut gxs[off..off + cin];
                                let xc = &xs[off..off + cin];
                                for c in 0..cin {
                                    gxc[c] += g[c] * k[c];
                                    gk[c] += g[c] * xc[c];
                                }
                            }
                        }
                    }
                }
            } else if self.is_pointwise() {
                if want_w {
                    gemm(cin, h * w, cout, xs, true, gs, false, &mut gw, 1.0);
                }
                gemm(h * w, cout, cin, gs, false, wt, true, gxs, 0.0);
            } else {
                let kdim = self.kh * self.kw * cin;
                if want_w {
                    let cols = win.gather(xs, cin);
                    gemm(kdim, oh * ow, cout, &cols, true, gs, false, &mut gw, 1.0);
                }
                let mut gcols = vec![0.0; oh * ow * kdim];
                gemm(oh * ow, cout, kdim, gs, false, wt, true, &mut gcols, 0.0);
                win.scatter_add(&gcols, gxs, cin);
            }
        }
        if want_w {
            grads.accumulate(self.weight, Tensor::new(&wshape, gw)?);
        }
        if let Some(b) = self.bias {
            grads.accumulate_with(b, &[cout], |gb| {
                for row in grad_out.data().chunks(cout) {
                    for (acc, g) in gb.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
            });
        }
        Tensor::new(x.shape(), gx)
    }
}

/// Transposed 2-D convolution; weight layout `[Cin, kh, kw, Cout]`.
#[derive(Debug, Clone)]
pub struct Deconv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Deconv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let (kh, kw) = spec.kernel;
        if spec.stride == 0 || kh == 0 || kw == 0 || spec.depthwise {
            return Err(Error::Config(format!("{name}: unsupported deconv spec")));
        }
        // Each output receives contributions from about kh*kw/stride^2 taps.
        let fan_in = (kh * kw * spec.in_ch / (spec.stride * spec.stride)).max(1);
        let weight = store.add(
            &format!("{name}.w"),
            he_uniform(&[spec.in_ch, kh, kw, spec.out_ch], fan_in, rng),
        )?;
        let bias = if spec.bias {
            Some(store.add(&format!("{name}.b"), Tensor::zeros(&[spec.out_ch]))?)
        } else {
            None
        };
        Ok(Deconv2d {
            name: name.to_string(),
            weight,
            bias,
            in_ch: spec.in_ch,
            out_ch: spec.out_ch,
            kh,
            kw,
            stride: spec.stride,
            pad_h: spec.pad.0,
            pad_w: spec.pad.1,
        })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = ((h.max(1) - 1) * self.stride + self.kh) as isize - 2 * self.pad_h as isize;
        let ow = ((w.max(1) - 1) * self.stride + self.kw) as isize - 2 * self.pad_w as isize;
        if h == 0 || w == 0 || oh <= 0 || ow <= 0 {
            return Err(Error::shape(&self.name, "positive output size", (h, w)));
        }
        Ok((oh as usize, ow as usize))
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let (n, h, w, c) = expect_rank4(&self.name, x)?;
        if c != self.in_ch {
            return Err(Error::shape(
                &self.name,
                format!("{} input channels", self.in_ch),
                x.shape(),
            ));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((n, h, w, oh, ow))
    }

    fn window(&self, h: usize, w: usize, oh: usize, ow: usize) -> Window {
        Window {
            rows_h: h,
            rows_w: w,
            grid_h: oh,
            grid_w: ow,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad_h: self.pad_h,
            pad_w: self.pad_w,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (n, h, w, oh, ow) = self.check(x)?;
        let (cin, cout) = (self.in_ch, self.out_ch);
        let kdim = self.kh * self.kw * cout;
        let wt = store.get(self.weight).data();
        let win = self.window(h, w, oh, ow);
        let (in_sz, out_sz) = (h * w * cin, oh * ow * cout);
        let mut out = vec![0.0; n * out_sz];
        let mut cols = vec![0.0; h * w * kdim];
        for s in 0..n {
            let xs = &x.data()[s * in_sz..(s + 1) * in_sz];
            gemm(h * w, cin, kdim, xs, false, wt, false, &mut cols, 0.0);
            win.scatter_add(&cols, &mut out[s * out_sz..(s + 1) * out_sz], cout);
        }
        if let Some(b) = self.bias {
            let b = store.get(b).data();
            for row in out.chunks_mut(cout) {
                for (v, bi) in row.iter_mut().zip(b) {
                    *v += bi;
                }
            }
        }
        Tensor::new(&[n, oh, ow, cout], out)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let (n, h, w, oh, ow) = self.check(x)?;
        let (cin, cout) = (self.in_ch, self.out_ch);
        if grad_out.shape() != [n, oh, ow, cout] {
            return Err(Error::shape(
                &self.name,
                [n, oh, ow, cout],
                grad_out.shape(),
            ));
        }
        let kdim = self.kh * self.kw * cout;
        let wt = store.get(self.weight).data();
        let wshape = store.get(self.weight).shape().to_vec();
        let want_w = grads.wants(self.weight);
        let win = self.window(h, w, oh, ow);
        let (in_sz, out_sz) = (h * w * cin, oh * ow * cout);
        let mut gw = vec![0.0; wt.len()];
        let mut gx = vec![0.0; x.numel()];
        for s in 0..n {
            let xs = &x.data()[s * in_sz..(s + 1) * in_sz];
            let gcols = win.gather(&grad_out.data()[s * out_sz..(s + 1) * out_sz], cout);
            gemm(
                h * w,
                kdim,
                cin,
                &gcols,
                false,
                wt,
                true,
                &mut gx[s * in_sz..(s + 1) * in_sz],
                0.0,
            );
            if want_w {
                gemm(cin, h * w, kdim, xs, true, &gcols, false, &mut gw, 1.0);
            }
        }
        if want_w {
            grads.accumulate(self.weight, Tensor::new(&wshape, gw)?);
        }
        if let Some(b) = self.bias {
            grads.accumulate_with(b, &[cout], |gb| {
                for row in grad_out.data().chunks(cout) {
                    for (acc, g) in gb.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
            });
        }
        Tensor::new(x.shape(), gx)
    }
}

/// Affine map over the innermost axis: `y = x W + b`, `W` is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.w"),
            he_uniform(&[in_dim, out_dim], in_dim, rng),
        )?;
        let bias = if bias {
            Some(store.add(&format!("{name}.b"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Dense {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    fn out_shape(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.ndim() == 0 || x.last_dim() != self.in_dim {
            return Err(Error::shape(
                &self.name,
                format!("[..., {}]", self.in_dim),
                x.shape(),
            ));
        }
        let mut s = x.shape().to_vec();
        *s.last_mut().unwrap() = self.out_dim;
        Ok(s)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let shape = self.out_shape(x)?;
        let rows = x.numel() / self.in_dim;
        let mut out = vec![0.0; rows * self.out_dim];
        gemm(
            rows,
            self.in_dim,
            self.out_dim,
            x.data(),
            false,
            store.get(self.weight).data(),
            false,
            &mut out,
            0.0,
        );
        if let Some(b) = self.bias {
            let b = store.get(b).data();
            for row in out.chunks_mut(self.out_dim) {
                for (v, bi) in row.iter_mut().zip(b) {
                    *v += bi;
                }
            }
        }
        Tensor::new(&shape, out)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let shape = self.out_shape(x)?;
        if grad_out.shape() != shape.as_slice() {
            return Err(Error::shape(&self.name, &shape, grad_out.shape()));
        }
        let rows = x.numel() / self.in_dim;
        let (i, o) = (self.in_dim, self.out_dim);
        if grads.wants(self.weight) {
            let mut gw = vec![0.0; i * o];
            gemm(
                i,
                rows,
                o,
                x.data(),
                true,
                grad_out.data(),
                false,
                &mut gw,
                0.0,
            );
            grads.accumulate(self.weight, Tensor::new(&[i, o], gw)?);
        }
        if let Some(b) = self.bias {
            grads.accumulate_with(b, &[o], |gb| {
                for row in grad_out.data().chunks(o) {
                    for (acc, g) in gb.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
            });
        }
        let mut gx = vec![0.0; rows * i];
        gemm(
            rows,
            o,
            i,
            grad_out.data(),
            false,
            store.get(self.weight).data(),
            true,
            &mut gx,
            0.0,
        );
        Tensor::new(x.shape(), gx)
    }
}

/// Per-channel normalization over every axis but the last.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            name: name.to_string(),
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store
                .add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(
                &format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
            )?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        if x.ndim() < 2 || x.last_dim() != self.channels {
            return Err(Error::shape(
                &self.name,
                format!("[..., {}]", self.channels),
                x.shape(),
            ));
        }
        Ok(x.numel() / self.channels)
    }

    /// Biased per-channel mean and variance of `x`.
    pub fn batch_stats(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let rows = self.check(x)?;
        let c = self.channels;
        let mut mean = vec![0.0; c];
        for row in x.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in x.data().chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        Ok((mean, var))
    }

    fn stats(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<(Vec<f64>, Vec<f64>)> {
        match mode {
            Mode::Train => self.batch_stats(x),
            Mode::Eval => {
                self.check(x)?;
                Ok((
                    store.get(self.running_mean).data().to_vec(),
                    store.get(self.running_var).data().to_vec(),
                ))
            }
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (mean, var) = self.stats(store, x, mode)?;
        let g = store.get(self.gamma).data();
        let b = store.get(self.beta).data();
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(self.channels) {
            for c in 0..self.channels {
                row[c] = g[c] * (row[c] - mean[c]) * inv[c] + b[c];
            }
        }
        Tensor::new(x.shape(), out)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        grad_out: &Tensor,
        mode: Mode,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        if grad_out.shape() != x.shape() {
            return Err(Error::shape(&self.name, x.shape(), grad_out.shape()));
        }
        let rows = self.check(x)? as f64;
        let c = self.channels;
        let (mean, var) = self.stats(store, x, mode)?;
        let g = store.get(self.gamma).data();
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut sum_g = vec![0.0; c];
        let mut sum_gxh = vec![0.0; c];
        for (xr, gr) in x.data().chunks(c).zip(grad_out.data().chunks(c)) {
            for k in 0..c {
                let xh = (xr[k] - mean[k]) * inv[k];
                sum_g[k] += gr[k];
                sum_gxh[k] += gr[k] * xh;
            }
        }
        grads.accumulate(self.gamma, Tensor::new(&[c], sum_gxh.clone())?);
        grads.accumulate(self.beta, Tensor::new(&[c], sum_g.clone())?);
        let mut gx = vec![0.0; x.numel()];
        for ((xr, gr), out) in x
            .data()
            .chunks(c)
            .zip(grad_out.data().chunks(c))
            .zip(gx.chunks_mut(c))
        {
            for k in 0..c {
                out[k] = match mode {
                    Mode::Eval => gr[k] * g[k] * inv[k],
                    Mode::Train => {
                        let xh = (xr[k] - mean[k]) * inv[k];
                        g[k] * inv[k] * (gr[k] - sum_g[k] / rows - xh * sum_gxh[k] / rows)
                    }
                };
            }
        }
        Tensor::new(x.shape(), gx)
    }

    /// Folds the batch statistics of `x` into the running estimates. Skipped
    /// when the layer's affine parameters are frozen.
    pub fn update_running(&self, store: &mut ParamStore, x: &Tensor) -> Result<()> {
        if store.is_frozen(self.gamma) {
            return Ok(());
        }
        let rows = self.check(x)?;
        let (mean, var) = self.batch_stats(x)?;
        let unbias = if rows > 1 {
            rows as f64 / (rows - 1) as f64
        } else {
            1.0
        };
        let m = self.momentum;
        for (r, v) in store
            .get_mut(self.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&mean)
        {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in store
            .get_mut(self.running_var)
            .data_mut()
            .iter_mut()
            .zip(&var)
        {
            *r = (1.0 - m) * *r + m * v * unbias;
        }
        Ok(())
    }
}

/// Normalization over the innermost axis at every position.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            name: name.to_string(),
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            dim,
            eps: 1e-6,
        })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.ndim() == 0 || x.last_dim() != self.dim {
            return Err(Error::shape(
                &self.name,
                format!("[..., {}]", self.dim),
                x.shape(),
            ));
        }
        Ok(())
    }

    fn row_stats(&self, row: &[f64]) -> (f64, f64) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, 1.0 / (var + self.eps).sqrt())
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let g = store.get(self.gamma).data();
        let b = store.get(self.beta).data();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(self.dim) {
            let (mean, inv) = self.row_stats(row);
            for k in 0..self.dim {
                row[k] = g[k] * (row[k] - mean) * inv + b[k];
            }
        }
        Tensor::new(x.shape(), out)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        self.check(x)?;
        if grad_out.shape() != x.shape() {
            return Err(Error::shape(&self.name, x.shape(), grad_out.shape()));
        }
        let d = self.dim;
        let g = store.get(self.gamma).data();
        let mut gg = vec![0.0; d];
        let mut gb = vec![0.0; d];
        let mut gx = vec![0.0; x.numel()];
        let mut dxh = vec![0.0; d];
        for ((xr, gr), out) in x
            .data()
            .chunks(d)
            .zip(grad_out.data().chunks(d))
            .zip(gx.chunks_mut(d))
        {
            let (mean, inv) = self.row_stats(xr);
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for k in 0..d {
                let xh = (xr[k] - mean) * inv;
                gg[k] += gr[k] * xh;
                gb[k] += gr[k];
                dxh[k] = gr[k] * g[k];
                s1 += dxh[k];
                s2 += dxh[k] * xh;
            }
            for k in 0..d {
                let xh = (xr[k] - mean) * inv;
                out[k] = inv * (dxh[k] - s1 / d as f64 - xh * s2 / d as f64);
            }
        }
        grads.accumulate(self.gamma, Tensor::new(&[d], gg)?);
        grads.accumulate(self.beta, Tensor::new(&[d], gb)?);
        Tensor::new(x.shape(), gx)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

fn gelu_grad(v: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + v * pdf
}

fn check_same(name: &str, x: &Tensor, g: &Tensor) -> Result<()> {
    if x.shape() != g.shape() {
        return Err(Error::shape(name, x.shape(), g.shape()));
    }
    Ok(())
}

/// `[N, H, W, C] -> [N, C]` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = expect_rank4("global_avg_pool", x)?;
    let mut out = vec![0.0; n * c];
    let hw = h * w;
    for s in 0..n {
        for row in x.data()[s * hw * c..(s + 1) * hw * c].chunks(c) {
            for (o, v) in out[s * c..(s + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= hw as f64);
    Tensor::new(&[n, c], out)
}

pub fn global_avg_pool_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = expect_rank4("global_avg_pool", x)?;
    if grad_out.shape() != [n, c] {
        return Err(Error::shape("global_avg_pool", [n, c], grad_out.shape()));
    }
    let hw = h * w;
    let mut gx = vec![0.0; x.numel()];
    for s in 0..n {
        let g = &grad_out.data()[s * c..(s + 1) * c];
        for row in gx[s * hw * c..(s + 1) * hw * c].chunks_mut(c) {
            for (o, gv) in row.iter_mut().zip(g) {
                *o = gv / hw as f64;
            }
        }
    }
    Tensor::new(x.shape(), gx)
}

pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("residual_add", a.shape(), b.shape()));
    }
    a.zip_map(b, |u, v| u + v)
}

/// `y[n, h, w, c] = x[n, h, w, c] * s[n, c]`.
pub fn channel_scale(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = expect_rank4("channel_scale", x)?;
    if s.shape() != [n, c] {
        return Err(Error::shape("channel_scale", [n, c], s.shape()));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for b in 0..n {
        let sc = &s.data()[b * c..(b + 1) * c];
        for row in out[b * hw * c..(b + 1) * hw * c].chunks_mut(c) {
            for (v, f) in row.iter_mut().zip(sc) {
                *v *= f;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Returns `(grad_x, grad_s)`.
pub fn channel_scale_backward(
    x: &Tensor,
    s: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, h, w, c) = expect_rank4("channel_scale", x)?;
    check_same("channel_scale", x, grad_out)?;
    let hw = h * w;
    let gx = channel_scale(grad_out, s)?;
    let mut gs = vec![0.0; n * c];
    for b in 0..n {
        let range = b * hw * c..(b + 1) * hw * c;
        for (xr, gr) in x.data()[range.clone()]
            .chunks(c)
            .zip(grad_out.data()[range].chunks(c))
        {
            for k in 0..c {
                gs[b * c + k] += xr[k] * gr[k];
            }
        }
    }
    Ok((gx, Tensor::new(&[n, c], gs)?))
}

/// One entry of a [`Sequential`] stack.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    Deconv2d(Deconv2d),
    Dense(Dense),
    BatchNorm(BatchNorm),
    LayerNorm(LayerNorm),
    Relu,
    Gelu,
    Sigmoid,
    GlobalAvgPool,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Deconv2d(_) => LayerKind::Deconv2d,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::LayerNorm(_) => LayerKind::LayerNorm,
            Layer::Relu => LayerKind::Relu,
            Layer::Gelu => LayerKind::Gelu,
            Layer::Sigmoid => LayerKind::Sigmoid,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.forward(store, x),
            Layer::Deconv2d(l) => l.forward(store, x),
            Layer::Dense(l) => l.forward(store, x),
            Layer::BatchNorm(l) => l.forward(store, x, mode),
            Layer::LayerNorm(l) => l.forward(store, x),
            Layer::Relu => Ok(x.map(|v| v.max(0.0))),
            Layer::Gelu => Ok(x.map(gelu)),
            Layer::Sigmoid => Ok(x.map(sigmoid)),
            Layer::GlobalAvgPool => global_avg_pool(x),
        }
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        grad_out: &Tensor,
        mode: Mode,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.backward(store, x, grad_out, grads),
            Layer::Deconv2d(l) => l.backward(store, x, grad_out, grads),
            Layer::Dense(l) => l.backward(store, x, grad_out, grads),
            Layer::BatchNorm(l) => l.backward(store, x, grad_out, mode, grads),
            Layer::LayerNorm(l) => l.backward(store, x, grad_out, grads),
            // Subgradient 0 at the kink.
            Layer::Relu => {
                check_same("relu", x, grad_out)?;
                x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
            }
            Layer::Gelu => {
                check_same("gelu", x, grad_out)?;
                x.zip_map(grad_out, |v, g| g * gelu_grad(v))
            }
            Layer::Sigmoid => {
                check_same("sigmoid", x, grad_out)?;
                x.zip_map(grad_out, |v, g| {
                    let s = sigmoid(v);
                    g * s * (1.0 - s)
                })
            }
            Layer::GlobalAvgPool => global_avg_pool_backward(x, grad_out),
        }
    }
}

/// Activations cached by [`Sequential::forward_train`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inputs: Vec<Tensor>,
}

impl Tape {
    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(store, &h, mode)?;
        }
        Ok(h)
    }

    pub fn forward_train(
        &self,
        store: &ParamStore,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Tape)> {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for l in &self.layers {
            let next = l.forward(store, &h, mode)?;
            tape.inputs.push(h);
            h = next;
        }
        Ok((h, tape))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        tape: &Tape,
        grad_out: &Tensor,
        mode: Mode,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "backward needs {} cached activations, tape holds {}",
                self.layers.len(),
                tape.inputs.len()
            )));
        }
        let mut g = grad_out.clone();
        for (l, x) in self.layers.iter().zip(&tape.inputs).rev() {
            g = l.backward(store, x, &g, mode, grads)?;
        }
        Ok(g)
    }

    /// Updates batch-norm running statistics from a training tape.
    pub fn commit_running_stats(&self, store: &mut ParamStore, tape: &Tape) -> Result<()> {
        for (l, x) in self.layers.iter().zip(&tape.inputs) {
            if let Layer::BatchNorm(bn) = l {
                bn.update_running(store, x)?;
            }
        }
        Ok(())
    }
}
