//! Semantic converters between a sensor space and the standard space.
//!
//! Each direction is `y = SE(ConvNeXt(x))` followed by a 1x1 projection with
//! an identity skip, `out = y + proj(y)`.

use crate::error::{Error, Result};
use crate::nn::{
    Conv2d, ConvNextBlock, ConvNextCache, ConvSpec, Grads, ParamStore, SeBlock, SeCache, Tensor,
};
use crate::scene::{FeatureMap, Modality};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConverterConfig {
    pub convnext_kernel: usize,
    pub convnext_expansion: usize,
    pub se_reduction: usize,
}

impl Default for ConverterConfig {
    fn default() -> Self {
        ConverterConfig {
            convnext_kernel: 7,
            convnext_expansion: 4,
            se_reduction: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Converter {
    pub name: String,
    pub convnext: ConvNextBlock,
    pub se: SeBlock,
    pub proj: Conv2d,
    pub source: Modality,
    pub target: Modality,
}

#[derive(Debug, Clone)]
pub struct ConverterCache {
    convnext: ConvNextCache,
    se: SeCache,
    y: Tensor,
}

impl Converter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        source: Modality,
        target: Modality,
        cfg: &ConverterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Converter {
            name: name.to_string(),
            convnext: ConvNextBlock::new(
                store,
                &format!("{name}.convnext"),
                channels,
                cfg.convnext_kernel,
                cfg.convnext_expansion,
                rng,
            )?,
            se: SeBlock::new(
                store,
                &format!("{name}.se"),
                channels,
                cfg.se_reduction,
                rng,
            )?,
            proj: Conv2d::new(
                store,
                &format!("{name}.proj"),
                ConvSpec::new(channels, channels, (1, 1)),
                rng,
            )?,
            source,
            target,
        })
    }

    /// `[N, H, W, C] -> [N, H, W, C]`.
    pub fn forward_train(
        &self,
        store: &ParamStore,
        x: &Tensor,
    ) -> Result<(Tensor, ConverterCache)> {
        let (a, convnext) = self.convnext.forward_train(store, x)?;
        let (y, se) = self.se.forward_train(store, &a)?;
        let mut out = self.proj.forward(store, &y)?;
        out.add_assign(&y)?;
        Ok((out, ConverterCache { convnext, se, y }))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(store, x)?.0)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConverterCache,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let mut gy = self.proj.backward(store, &cache.y, grad_out, grads)?;
        gy.add_assign(grad_out)?;
        let ga = self.se.backward(store, &cache.se, &gy, grads)?;
        self.convnext.backward(store, &cache.convnext, &ga, grads)
    }
}

/// `to_standard` and `from_standard` for one sensor modality.
#[derive(Debug, Clone)]
pub struct ConverterPair {
    pub modality: Modality,
    pub to_standard: Converter,
    pub from_standard: Converter,
}

fn single(map: &FeatureMap) -> Result<Tensor> {
    let &[h, w, c] = map.tensor.shape() else {
        return Err(Error::shape("converter", "[H, W, C]", map.tensor.shape()));
    };
    map.tensor.clone().reshape(&[1, h, w, c])
}

fn unbatch(t: Tensor) -> Result<Tensor> {
    let s = t.shape()[1..].to_vec();
    t.reshape(&s)
}

impl ConverterPair {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        modality: Modality,
        channels: usize,
        cfg: &ConverterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if modality == Modality::Standard {
            return Err(Error::Usage(
                "no converter pair for the standard space".into(),
            ));
        }
        Ok(ConverterPair {
            modality,
            to_standard: Converter::new(
                store,
                &format!("{prefix}.to_std"),
                channels,
                modality,
                Modality::Standard,
                cfg,
                rng,
            )?,
            from_standard: Converter::new(
                store,
                &format!("{prefix}.from_std"),
                channels,
                Modality::Standard,
                modality,
                cfg,
                rng,
            )?,
        })
    }

    pub fn to_standard(&self, store: &ParamStore, map: &FeatureMap) -> Result<FeatureMap> {
        if map.modality == Modality::Standard {
            return Err(Error::contract("map is already in the standard space"));
        }
        if map.modality != self.modality {
            return Err(Error::contract(format!(
                "{} converter applied to a {} map",
                self.modality, map.modality
            )));
        }
        let out = self.to_standard.forward(store, &single(map)?)?;
        FeatureMap::new(unbatch(out)?, Modality::Standard, map.vehicle_id)
    }

    pub fn from_standard(
        &self,
        store: &ParamStore,
        map: &FeatureMap,
        target: Modality,
    ) -> Result<FeatureMap> {
        if map.modality != Modality::Standard {
            return Err(Error::contract(format!(
                "from_standard expects a standard-space map, got {}",
                map.modality
            )));
        }
        if target != self.modality {
            return Err(Error::Unknown {
                kind: "target modality for this converter",
                value: target.to_string(),
            });
        }
        let out = self.from_standard.forward(store, &single(map)?)?;
        FeatureMap::new(unbatch(out)?, target, map.vehicle_id)
    }

    /// `m -> s -> m`.
    pub fn cycle(&self, store: &ParamStore, map: &FeatureMap) -> Result<FeatureMap> {
        let s = self.to_standard(store, map)?;
        self.from_standard(store, &s, map.modality)
    }
}
