//! End-to-end inference for one scene under each transmission method.

use crate::channel::{equalize, transmit, ChannelModel};
use crate::error::{Error, Result};
use crate::model::Models;
use crate::nn::Tensor;
use crate::perception::{detect, DetectionSet, PerceptionConfig};
use crate::phy::{dequantize, parity_lambda, quantize, ClassicLink};
use crate::rng::derive_seed;
use crate::scene::{render_features, FeatureMap, Modality, RenderConfig, Scene};
use crate::selector::{scatter, select};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Code rate of the classical baselines.
pub const BASELINE_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "cmsc")]
    Cmsc,
    #[serde(rename = "baseline_jscc")]
    BaselineJscc,
    #[serde(rename = "baseline_16qam")]
    Baseline16Qam,
    #[serde(rename = "baseline_256qam")]
    Baseline256Qam,
    #[serde(rename = "upper_bound")]
    UpperBound,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Cmsc,
        Method::BaselineJscc,
        Method::Baseline16Qam,
        Method::Baseline256Qam,
        Method::UpperBound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cmsc => "cmsc",
            Method::BaselineJscc => "baseline_jscc",
            Method::Baseline16Qam => "baseline_16qam",
            Method::Baseline256Qam => "baseline_256qam",
            Method::UpperBound => "upper_bound",
        }
    }

    pub fn qam_order(self) -> Option<u32> {
        match self {
            Method::Baseline16Qam => Some(16),
            Method::Baseline256Qam => Some(256),
            _ => None,
        }
    }

    /// Ratio actually used by this method for a learned-codec ratio `lambda`.
    /// With `parity`, classical baselines keep the same channel-use budget.
    pub fn effective_lambda(self, lambda: f64, parity: bool) -> f64 {
        match (self.qam_order(), self) {
            (Some(order), _) if parity => parity_lambda(lambda, BASELINE_RATE, order),
            (_, Method::UpperBound) => 1.0,
            _ => lambda,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "method",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub model: ChannelModel,
    pub snr_db: f64,
}

/// One scene with a sensor assignment; vehicle 0 is the ego.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlan {
    pub scene: Scene,
    pub modalities: Vec<Modality>,
    pub noise_seed: u64,
}

impl ScenePlan {
    pub fn render(&self, cfg: &RenderConfig) -> Result<Vec<FeatureMap>> {
        if self.modalities.len() != self.scene.vehicles.len() {
            return Err(Error::shape(
                "scene plan",
                self.scene.vehicles.len(),
                self.modalities.len(),
            ));
        }
        self.modalities
            .iter()
            .enumerate()
            .map(|(v, &m)| render_features(&self.scene, v, m, self.noise_seed, cfg))
            .collect()
    }
}

/// Takes `view` at the delivered cells and `ego` everywhere else, so that
/// cells a collaborator did not send carry no evidence into max fusion.
/// Both tensors hold one map, `[H, W, C]` or `[1, H, W, C]`.
pub fn keep_delivered(view: &Tensor, ego: &Tensor, cells: &[usize]) -> Result<Tensor> {
    if view.shape() != ego.shape() {
        return Err(Error::shape("delivered view", ego.shape(), view.shape()));
    }
    let c = *view.shape().last().unwrap_or(&1);
    let mut out = ego.clone();
    let n = view.numel() / c.max(1);
    for &i in cells {
        if i >= n {
            return Err(Error::contract(format!(
                "delivered cell {i} outside a {n}-cell map"
            )));
        }
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&view.data()[i * c..(i + 1) * c]);
    }
    Ok(out)
}

/// Gradient of [`keep_delivered`] with respect to `view`.
pub fn keep_delivered_backward(grad: &Tensor, cells: &[usize]) -> Result<Tensor> {
    let zeros = Tensor::zeros(grad.shape());
    keep_delivered(grad, &zeros, cells)
}

/// What the ego receives from one collaborator.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    /// Collaborator features in the ego's modality.
    pub view: FeatureMap,
    /// Complex channel uses spent.
    pub channel_uses: usize,
    /// Cells that were transmitted; `None` when the whole map was.
    pub cells: Option<Vec<usize>>,
}

impl Delivery {
    /// The view with every cell that was not transmitted replaced by the
    /// ego's own features.
    pub fn onto(&self, ego: &FeatureMap) -> Result<FeatureMap> {
        match &self.cells {
            None => Ok(self.view.clone()),
            Some(cells) => FeatureMap::new(
                keep_delivered(&self.view.tensor, &ego.tensor, cells)?,
                self.view.modality,
                self.view.vehicle_id,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneOutcome {
    pub detections: DetectionSet,
    /// Complex channel uses spent by one collaborator.
    pub channel_uses: usize,
}

impl Models {
    /// Head output `[H, W, 5]` for an ego map and collaborator maps already
    /// expressed in the ego's modality.
    pub fn perceive(&self, ego: &FeatureMap, collab: &[FeatureMap]) -> Result<Tensor> {
        if let Some(bad) = collab.iter().find(|c| c.modality != ego.modality) {
            return Err(Error::contract(format!(
                "collaborator map in {} space fused with a {} ego",
                bad.modality, ego.modality
            )));
        }
        let batch = |m: &FeatureMap| {
            let mut s = vec![1];
            s.extend_from_slice(m.tensor.shape());
            m.tensor.clone().reshape(&s)
        };
        let e = batch(ego)?;
        let c: Vec<Tensor> = collab.iter().map(batch).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = c.iter().collect();
        let fused = self.fusion(ego.modality)?.forward(&self.store, &e, &refs)?;
        let raw = self.head(ego.modality)?.forward(&self.store, &fused)?;
        let s = raw.shape()[1..].to_vec();
        raw.reshape(&s)
    }

    /// What the ego receives from one collaborator.
    pub fn collaborator_view(
        &self,
        method: Method,
        cav: &FeatureMap,
        ego_modality: Modality,
        lambda: f64,
        link: Link,
        seed: u64,
    ) -> Result<Delivery> {
        let (h, w) = cav.hw();
        let c = cav.channels();
        if method == Method::UpperBound {
            let s = self
                .converter(cav.modality)?
                .to_standard(&self.store, cav)?;
            let view =
                self.converter(ego_modality)?
                    .from_standard(&self.store, &s, ego_modality)?;
            return Ok(Delivery {
                view,
                channel_uses: h * w * c,
                cells: None,
            });
        }
        let source = if method == Method::BaselineJscc {
            cav.clone()
        } else {
            self.converter(cav.modality)?
                .to_standard(&self.store, cav)?
        };
        let x = source.tensor.clone().reshape(&[1, h, w, c])?;
        let imp = self.selector.importance(&self.store, &x)?.remove(0);
        let (_, pack) = select(&source.tensor, &imp, lambda)?;
        let (decoded, uses) = match method.qam_order() {
            Some(order) => {
                let link_phy = ClassicLink::new(order)?;
                let mut stream = quantize(&pack.features)?;
                let out = link_phy.send(&stream.bits, link.model, link.snr_db, seed)?;
                stream.bits = out.bits;
                (dequantize(&stream)?, out.channel_uses)
            }
            None => {
                let (block, gain) = self.codec.encode(&self.store, &pack.features)?;
                let (rx, real) = transmit(&block, link.model, link.snr_db, seed)?;
                let eq = equalize(&rx, &real)?;
                (
                    self.codec.decode(&self.store, &eq.block, gain, pack.k())?,
                    block.len(),
                )
            }
        };
        let grid = scatter(&pack, &decoded)?;
        let view = if method == Method::BaselineJscc {
            // No converters: the raw grid is handed to the ego as is.
            FeatureMap::new(grid, ego_modality, cav.vehicle_id)?
        } else {
            let s_hat = FeatureMap::new(grid, Modality::Standard, cav.vehicle_id)?;
            self.converter(ego_modality)?
                .from_standard(&self.store, &s_hat, ego_modality)?
        };
        Ok(Delivery {
            view,
            channel_uses: uses,
            cells: Some(pack.indices),
        })
    }

    /// Runs the full chain on one scene. `channel_seed` keys every
    /// collaborator's channel draw.
    #[allow(clippy::too_many_arguments)]
    pub fn run_scene(
        &self,
        method: Method,
        plan: &ScenePlan,
        lambda: f64,
        link: Link,
        channel_seed: u64,
        render: &RenderConfig,
        perception: &PerceptionConfig,
    ) -> Result<SceneOutcome> {
        let maps = plan.render(render)?;
        let (ego, cavs) = maps
            .split_first()
            .ok_or_else(|| Error::contract("scene has no ego vehicle"))?;
        let mut views = Vec::with_capacity(cavs.len());
        let mut uses = 0;
        for (i, cav) in cavs.iter().enumerate() {
            let seed = derive_seed(channel_seed, &[i as u64 + 1]);
            let d = self.collaborator_view(method, cav, ego.modality, lambda, link, seed)?;
            views.push(d.onto(ego)?);
            uses = d.channel_uses;
        }
        let raw = self.perceive(ego, &views)?;
        Ok(SceneOutcome {
            detections: detect(&raw, perception)?,
            channel_uses: uses,
        })
    }
}
