//! Squeeze-and-excitation and ConvNeXt blocks.

use super::layers::{
    channel_scale, channel_scale_backward, global_avg_pool, global_avg_pool_backward, sigmoid,
    Conv2d, ConvSpec, Dense, Layer, LayerNorm, Mode,
};
use super::params::{Grads, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;

/// Channel attention: `x * sigmoid(fc2(relu(fc1(gap(x)))))`.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub name: String,
    pub fc1: Dense,
    pub fc2: Dense,
    pub channels: usize,
    pub reduction: usize,
}

#[derive(Debug, Clone)]
pub struct SeCache {
    x: Tensor,
    pooled: Tensor,
    hidden: Tensor,
    activated: Tensor,
    logits: Tensor,
    scales: Tensor,
}

impl SeCache {
    pub fn scales(&self) -> &Tensor {
        &self.scales
    }
}

impl SeBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::contract(format!(
                "{name}: {channels} channels not divisible by reduction ratio {reduction}"
            )));
        }
        let squeezed = channels / reduction;
        Ok(SeBlock {
            name: name.to_string(),
            fc1: Dense::new(store, &format!("{name}.fc1"), channels, squeezed, true, rng)?,
            fc2: Dense::new(store, &format!("{name}.fc2"), squeezed, channels, true, rng)?,
            channels,
            reduction,
        })
    }

    pub fn forward_train(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, SeCache)> {
        if x.ndim() != 4 || x.last_dim() != self.channels {
            return Err(Error::shape(
                &self.name,
                format!("[N, H, W, {}]", self.channels),
                x.shape(),
            ));
        }
        let pooled = global_avg_pool(x)?;
        let hidden = self.fc1.forward(store, &pooled)?;
        let activated = hidden.map(|v| v.max(0.0));
        let logits = self.fc2.forward(store, &activated)?;
        let scales = logits.map(sigmoid);
        let y = channel_scale(x, &scales)?;
        Ok((
            y,
            SeCache {
                x: x.clone(),
                pooled,
                hidden,
                activated,
                logits,
                scales,
            },
        ))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(store, x)?.0)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &SeCache,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let (mut gx, gs) = channel_scale_backward(&cache.x, &cache.scales, grad_out)?;
        let g_logits = Layer::Sigmoid.backward(store, &cache.logits, &gs, Mode::Eval, grads)?;
        let g_act = self
            .fc2
            .backward(store, &cache.activated, &g_logits, grads)?;
        let g_hidden = Layer::Relu.backward(store, &cache.hidden, &g_act, Mode::Eval, grads)?;
        let g_pooled = self.fc1.backward(store, &cache.pooled, &g_hidden, grads)?;
        gx.add_assign(&global_avg_pool_backward(&cache.x, &g_pooled)?)?;
        Ok(gx)
    }
}

/// Depthwise conv, layer norm, inverted-bottleneck MLP with GELU, residual.
#[derive(Debug, Clone)]
pub struct ConvNextBlock {
    pub name: String,
    pub dwconv: Conv2d,
    pub norm: LayerNorm,
    pub expand: Dense,
    pub project: Dense,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct ConvNextCache {
    x: Tensor,
    dw: Tensor,
    normed: Tensor,
    expanded: Tensor,
    activated: Tensor,
}

impl ConvNextBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        expansion: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel size must be odd")));
        }
        let hidden = channels * expansion;
        Ok(ConvNextBlock {
            name: name.to_string(),
            dwconv: Conv2d::new(
                store,
                &format!("{name}.dwconv"),
                ConvSpec::new(channels, channels, (kernel, kernel))
                    .same()
                    .depthwise(),
                rng,
            )?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels)?,
            expand: Dense::new(
                store,
                &format!("{name}.expand"),
                channels,
                hidden,
                true,
                rng,
            )?,
            project: Dense::new(
                store,
                &format!("{name}.project"),
                hidden,
                channels,
                true,
                rng,
            )?,
            channels,
        })
    }

    pub fn forward_train(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, ConvNextCache)> {
        let dw = self.dwconv.forward(store, x)?;
        let normed = self.norm.forward(store, &dw)?;
        let expanded = self.expand.forward(store, &normed)?;
        let activated = Layer::Gelu.forward(store, &expanded, Mode::Eval)?;
        let projected = self.project.forward(store, &activated)?;
        let y = projected.zip_map(x, |a, b| a + b)?;
        Ok((
            y,
            ConvNextCache {
                x: x.clone(),
                dw,
                normed,
                expanded,
                activated,
            },
        ))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(store, x)?.0)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvNextCache,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let g_act = self
            .project
            .backward(store, &cache.activated, grad_out, grads)?;
        let g_exp = Layer::Gelu.backward(store, &cache.expanded, &g_act, Mode::Eval, grads)?;
        let g_norm = self.expand.backward(store, &cache.normed, &g_exp, grads)?;
        let g_dw = self.norm.backward(store, &cache.dw, &g_norm, grads)?;
        let mut gx = self.dwconv.backward(store, &cache.x, &g_dw, grads)?;
        gx.add_assign(grad_out)?;
        Ok(gx)
    }
}
