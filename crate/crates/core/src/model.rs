//! Every learned component of the system in one parameter store.

use crate::codec::{Codec, CodecConfig};
use crate::converter::{ConverterConfig, ConverterPair};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::perception::{DetectionHead, Fusion, PerceptionConfig};
use crate::rng::{rng_from, stream};
use crate::scene::Modality;
use crate::selector::Selector;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const CONVERTER_PREFIX: &str = "conv.";
pub const SELECTOR_PREFIX: &str = "selector";
pub const CODEC_PREFIX: &str = "codec.";
pub const FUSION_PREFIX: &str = "fusion.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub converter: ConverterConfig,
    pub codec: CodecConfig,
}

#[derive(Debug, Clone)]
pub struct Models {
    pub store: ParamStore,
    /// Indexed by [`Modality::index`].
    pub converters: [ConverterPair; 2],
    pub selector: Selector,
    pub codec: Codec,
    pub fusion: [Fusion; 2],
    pub heads: [DetectionHead; 2],
    pub channels: usize,
}

fn sensor_index(m: Modality) -> Result<usize> {
    match m {
        Modality::Lidar | Modality::Camera => Ok(m.index()),
        Modality::Standard => Err(Error::Usage(
            "expected a sensor modality, got standard".into(),
        )),
    }
}

impl Models {
    pub fn new(
        channels: usize,
        cfg: &ModelConfig,
        perception: &PerceptionConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed, &[stream::INIT]);
        let mut pair = |store: &mut ParamStore, m: Modality| {
            ConverterPair::new(
                store,
                &format!("{CONVERTER_PREFIX}{m}"),
                m,
                channels,
                &cfg.converter,
                &mut rng,
            )
        };
        let converters = [
            pair(&mut store, Modality::Lidar)?,
            pair(&mut store, Modality::Camera)?,
        ];
        let selector = Selector::new(&mut store, SELECTOR_PREFIX, channels, &mut rng)?;
        let codec = Codec::new(&mut store, "codec", channels, &cfg.codec, &mut rng)?;
        let mut fusion_for = |store: &mut ParamStore, m: Modality| {
            Fusion::new(
                store,
                &format!("{FUSION_PREFIX}{m}"),
                channels,
                perception.fusion_kernel,
                &mut rng,
            )
        };
        let fusion = [
            fusion_for(&mut store, Modality::Lidar)?,
            fusion_for(&mut store, Modality::Camera)?,
        ];
        let mut head_for = |store: &mut ParamStore, m: Modality| {
            DetectionHead::new(store, &format!("{HEAD_PREFIX}{m}"), channels, &mut rng)
        };
        let heads = [
            head_for(&mut store, Modality::Lidar)?,
            head_for(&mut store, Modality::Camera)?,
        ];
        Ok(Models {
            store,
            converters,
            selector,
            codec,
            fusion,
            heads,
            channels,
        })
    }

    pub fn converter(&self, m: Modality) -> Result<&ConverterPair> {
        Ok(&self.converters[sensor_index(m)?])
    }

    pub fn fusion(&self, m: Modality) -> Result<&Fusion> {
        Ok(&self.fusion[sensor_index(m)?])
    }

    pub fn head(&self, m: Modality) -> Result<&DetectionHead> {
        Ok(&self.heads[sensor_index(m)?])
    }

    pub fn fusion_prefix(m: Modality) -> String {
        format!("{FUSION_PREFIX}{m}")
    }

    pub fn head_prefix(m: Modality) -> String {
        format!("{HEAD_PREFIX}{m}")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        self.store.save(BufWriter::new(f))
    }

    /// Fails when the file is missing or does not match this architecture.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let f = File::open(path).map_err(|e| {
            Error::Checkpoint(format!("cannot open checkpoint {}: {e}", path.display()))
        })?;
        self.store.load_into(BufReader::new(f))
    }
}
