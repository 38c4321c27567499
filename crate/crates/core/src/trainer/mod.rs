//! Pretraining and the three-stage training schedule.
//!
//! * Pretraining fits each modality's fusion and detection head on clean,
//!   homogeneous scenes without any communication.
//! * Stage 1 trains the converters alone on homogeneous batches.
//! * Stage 2 trains the selector and codec over a fading channel with every
//!   other block frozen (gradients still flow through frozen blocks).
//! * Stage 3 fine-tunes everything end to end, on both the transmitted
//!   sparse maps and complete lossless maps.

pub mod losses;

use crate::channel::{equalize, transmit, ChannelModel};
use crate::codec::{Codec, DecodeCache, EncodeCache, SymbolBlock};
use crate::error::{Error, Result};
use crate::model::{Models, CODEC_PREFIX, CONVERTER_PREFIX, SELECTOR_PREFIX};
use crate::nn::{Adam, Grads, Mode, Tensor};
use crate::pipeline::{keep_delivered, keep_delivered_backward, ScenePlan};
use crate::rng::{derive_seed, rng_from, stream};
use crate::scene::{
    ground_truth_targets, render_features, sample_scene, Modality, RenderConfig, SceneConfig,
};
use crate::selector::{scatter, scatter_backward, select, select_backward};
use losses::detection_loss;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;

const PROBE_STREAM: u64 = 0x9B;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub stage3_lr: f64,
    pub stage2_channel: ChannelModel,
    pub stage3_channel: ChannelModel,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Ratios drawn from, one per step, in stages 2 and 3.
    pub lambdas: Vec<f64>,
    /// Scenes in the fixed batch used to measure loss before and after a stage.
    pub probe_scenes: usize,
    /// Adds the detection loss on complete, lossless collaborator maps to
    /// stage 3 so the shared perception stays valid for full features.
    pub stage3_complete_maps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 4,
            eta: 2.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            mu: 1.0,
            pretrain_steps: 1000,
            pretrain_lr: 1e-3,
            stage1_steps: 2000,
            stage2_steps: 2000,
            stage3_steps: 1000,
            stage1_lr: 1e-3,
            stage2_lr: 1e-3,
            stage3_lr: 1e-4,
            stage2_channel: ChannelModel::Rayleigh,
            stage3_channel: ChannelModel::Rayleigh,
            snr_min_db: 0.0,
            snr_max_db: 20.0,
            lambdas: vec![0.01, 0.02, 0.04, 0.06, 0.1, 0.2],
            probe_scenes: 8,
            stage3_complete_maps: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.eta, self.alpha, self.beta, self.gamma, self.mu];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.probe_scenes == 0 {
            return Err(Error::Config(
                "batch_size and probe_scenes must be positive".into(),
            ));
        }
        if self.stage2_channel != ChannelModel::Rayleigh {
            return Err(Error::Config(
                "stage 2 trains over a rayleigh channel".into(),
            ));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
            return Err(Error::Config(
                "training lambdas must be non-empty and in (0, 1]".into(),
            ));
        }
        if !self.snr_min_db.is_finite()
            || !self.snr_max_db.is_finite()
            || self.snr_min_db > self.snr_max_db
        {
            return Err(Error::Config(
                "training SNR range must be finite and ordered".into(),
            ));
        }
        for lr in [
            self.pretrain_lr,
            self.stage1_lr,
            self.stage2_lr,
            self.stage3_lr,
        ] {
            if lr.is_nan() || lr <= 0.0 {
                return Err(Error::Config("learning rates must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            eta: self.eta,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            mu: self.mu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pretrain, Stage::Stage1, Stage::Stage2, Stage::Stage3];

    pub fn number(self) -> u64 {
        match self {
            Stage::Pretrain => 0,
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
            Stage::Stage3 => 3,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Loss components of one step. Unused components are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub stage: Stage,
    pub cls: f64,
    pub reg: f64,
    pub mse_ms: f64,
    pub mse_sm: f64,
    pub mse_cycle: f64,
    pub mse_feat: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,stage,cls,reg,mse_ms,mse_sm,mse_cycle,mse_feat,total";

impl LossReport {
    pub fn new(stage: Stage) -> Self {
        LossReport {
            step: 0,
            stage,
            cls: 0.0,
            reg: 0.0,
            mse_ms: 0.0,
            mse_sm: 0.0,
            mse_cycle: 0.0,
            mse_feat: 0.0,
            total: 0.0,
        }
    }

    /// `cls + eta reg + alpha mse_ms + beta mse_sm + gamma mse_cycle + mu mse_feat`.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.cls
            + w.eta * self.reg
            + w.alpha * self.mse_ms
            + w.beta * self.mse_sm
            + w.gamma * self.mse_cycle
            + w.mu * self.mse_feat
    }

    fn finish(mut self, w: &LossWeights) -> Self {
        self.total = self.weighted_total(w);
        self
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.step,
            self.stage,
            self.cls,
            self.reg,
            self.mse_ms,
            self.mse_sm,
            self.mse_cycle,
            self.mse_feat,
            self.total
        )
    }
}

pub fn write_loss_csv<W: Write>(mut w: W, history: &[LossReport]) -> Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for r in history {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Channel draws for one communication step.
#[derive(Debug, Clone, PartialEq)]
pub struct CommContext {
    pub lambda: f64,
    pub model: ChannelModel,
    /// One SNR and one seed per collaborator pack, in batch order.
    pub snr_db: Vec<f64>,
    pub seeds: Vec<u64>,
}

fn batched(t: &Tensor) -> Result<Tensor> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.clone().reshape(&s)
}

fn unbatched(t: Tensor) -> Result<Tensor> {
    let s = t.shape()[1..].to_vec();
    t.reshape(&s)
}

fn homogeneous(batch: &[ScenePlan]) -> Result<Modality> {
    let first = batch
        .first()
        .and_then(|p| p.modalities.first().copied())
        .ok_or_else(|| Error::contract("empty training batch"))?;
    if batch
        .iter()
        .flat_map(|p| &p.modalities)
        .any(|&m| m != first)
    {
        return Err(Error::contract(
            "batch mixes sensor modalities; this stage needs a homogeneous batch",
        ));
    }
    if first == Modality::Standard {
        return Err(Error::contract("batch rendered in the standard space"));
    }
    Ok(first)
}

/// Detection loss of raw sensor maps through one modality's fusion and head.
pub fn pretrain_pass(
    models: &Models,
    batch: &[ScenePlan],
    render: &RenderConfig,
    w: &LossWeights,
    grads: &mut Grads,
) -> Result<LossReport> {
    let m = homogeneous(batch)?;
    let fusion = models.fusion(m)?;
    let head = models.head(m)?;
    let scale = 1.0 / batch.len() as f64;
    let mut report = LossReport::new(Stage::Pretrain);
    for plan in batch {
        let maps = plan.render(render)?;
        let inputs: Vec<Tensor> = maps
            .iter()
            .map(|f| batched(&f.tensor))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = inputs[1..].iter().collect();
        let (fused, cache) = fusion.forward_train(&models.store, &inputs[0], &refs)?;
        let raw = head.forward(&models.store, &fused)?;
        let targets = ground_truth_targets(&plan.scene, maps[0].hw());
        let (cls, reg, mut g) = detection_loss(&raw, &targets, w.eta)?;
        report.cls += cls * scale;
        report.reg += reg * scale;
        g.scale(scale);
        let g_fused = head.backward(&models.store, &fused, &g, grads)?;
        fusion.backward(&models.store, &cache, &g_fused, grads)?;
    }
    Ok(report.finish(w))
}

/// Converter losses on a homogeneous batch; detection runs through the
/// lidar fusion and head on the converted maps.
pub fn stage1_pass(
    models: &Models,
    batch: &[ScenePlan],
    render: &RenderConfig,
    w: &LossWeights,
    grads: &mut Grads,
) -> Result<LossReport> {
    let m = homogeneous(batch)?;
    let pair = models.converter(m)?;
    let fusion = models.fusion(Modality::Lidar)?;
    let head = models.head(Modality::Lidar)?;
    let store = &models.store;
    let scale = 1.0 / batch.len() as f64;
    let mut report = LossReport::new(Stage::Stage1);
    for plan in batch {
        let maps = plan.render(render)?;
        let vehicles = maps.len() as f64;
        let per_vehicle = scale / vehicles;
        let mut standard = Vec::with_capacity(maps.len());
        let mut caches = Vec::with_capacity(maps.len());
        let mut g_std = Vec::with_capacity(maps.len());
        for (v, map) in maps.iter().enumerate() {
            let x = batched(&map.tensor)?;
            let anchor = if m == Modality::Lidar {
                x.clone()
            } else {
                batched(
                    &render_features(&plan.scene, v, Modality::Lidar, plan.noise_seed, render)?
                        .tensor,
                )?
            };
            let (s, c_to) = pair.to_standard.forward_train(store, &x)?;
            let (back, c_back) = pair.from_standard.forward_train(store, &anchor)?;
            let (cyc, c_cyc) = pair.from_standard.forward_train(store, &s)?;
            report.mse_ms += s.mean_squared_error(&anchor)? * per_vehicle;
            report.mse_sm += back.mean_squared_error(&x)? * per_vehicle;
            report.mse_cycle += cyc.mean_squared_error(&x)? * per_vehicle;

            let mut g_back = back.mse_grad(&x)?;
            g_back.scale(w.beta * per_vehicle);
            pair.from_standard
                .backward(store, &c_back, &g_back, grads)?;

            let mut g_cyc = cyc.mse_grad(&x)?;
            g_cyc.scale(w.gamma * per_vehicle);
            let mut g_s = pair.from_standard.backward(store, &c_cyc, &g_cyc, grads)?;
            let mut g_ms = s.mse_grad(&anchor)?;
            g_ms.scale(w.alpha * per_vehicle);
            g_s.add_assign(&g_ms)?;

            standard.push(s);
            caches.push(c_to);
            g_std.push(g_s);
        }
        let refs: Vec<&Tensor> = standard[1..].iter().collect();
        let (fused, f_cache) = fusion.forward_train(store, &standard[0], &refs)?;
        let raw = head.forward(store, &fused)?;
        let targets = ground_truth_targets(&plan.scene, maps[0].hw());
        let (cls, reg, mut g) = detection_loss(&raw, &targets, w.eta)?;
        report.cls += cls * scale;
        report.reg += reg * scale;
        g.scale(scale);
        let g_fused = head.backward(store, &fused, &g, grads)?;
        let g_src = fusion.backward(store, &f_cache, &g_fused, grads)?;
        for ((cache, mut gs), gd) in caches.iter().zip(g_std).zip(g_src) {
            gs.add_assign(&gd)?;
            pair.to_standard.backward(store, cache, &gs, grads)?;
        }
    }
    Ok(report.finish(w))
}

/// Intermediate state of a communication pass kept for backpropagation and
/// running-statistics updates.
pub struct CommCaches {
    pub encode: EncodeCache,
    pub decode: DecodeCache,
}

struct CavRecord {
    scene: usize,
    modality: Modality,
    to_std: Option<crate::converter::ConverterCache>,
    standard: Tensor,
    importance: crate::selector::ImportanceMap,
    pack: crate::selector::SparseFeaturePack,
}

/// Full communication chain: to_standard, selection, codec, channel,
/// scatter, from_standard, fusion and detection. Backpropagates into every
/// block whose parameters `grads` accepts, and into the converters only when
/// `through_to_std` is set. With `complete_maps` the detection loss also
/// covers the ego fusing complete, lossless collaborator maps.
#[allow(clippy::too_many_arguments)]
pub fn comm_pass(
    models: &Models,
    batch: &[ScenePlan],
    render: &RenderConfig,
    ctx: &CommContext,
    w: &LossWeights,
    stage: Stage,
    through_to_std: bool,
    complete_maps: bool,
    grads: &mut Grads,
) -> Result<(LossReport, CommCaches)> {
    let store = &models.store;
    let scale = 1.0 / batch.len() as f64;
    let mut report = LossReport::new(stage);
    let mut egos = Vec::with_capacity(batch.len());
    let mut cavs: Vec<CavRecord> = Vec::new();
    for (j, plan) in batch.iter().enumerate() {
        let maps = plan.render(render)?;
        let (ego, rest) = maps
            .split_first()
            .ok_or_else(|| Error::contract("scene has no ego vehicle"))?;
        if ego.modality == Modality::Standard {
            return Err(Error::contract("ego map rendered in the standard space"));
        }
        egos.push((
            ego.modality,
            batched(&ego.tensor)?,
            ground_truth_targets(&plan.scene, ego.hw()),
        ));
        for cav in rest {
            let x = batched(&cav.tensor)?;
            let (s, cache) = models
                .converter(cav.modality)?
                .to_standard
                .forward_train(store, &x)?;
            let importance = models.selector.importance(store, &s)?.remove(0);
            let s = unbatched(s)?;
            let (_, pack) = select(&s, &importance, ctx.lambda)?;
            cavs.push(CavRecord {
                scene: j,
                modality: cav.modality,
                to_std: through_to_std.then_some(cache),
                standard: s,
                importance,
                pack,
            });
        }
    }
    if cavs.len() != ctx.snr_db.len() || cavs.len() != ctx.seeds.len() {
        return Err(Error::shape("comm context", cavs.len(), ctx.snr_db.len()));
    }
    if cavs.is_empty() {
        return Err(Error::contract(
            "communication stages need at least one collaborator",
        ));
    }
    let rows: Vec<&Tensor> = cavs.iter().map(|c| &c.pack.features).collect();
    let x = Codec::batch_packs(&rows)?;
    let (y, enc) = models.codec.encode_train(store, &x, Mode::Train)?;
    let per = y.numel() / cavs.len();
    let k = cavs[0].pack.k();
    let c = models.channels;
    let mut received = Vec::with_capacity(y.numel());
    let mut pass_mask = Vec::with_capacity(y.numel());
    for (p, chunk) in y.data().chunks(per).enumerate() {
        let block = SymbolBlock::from_reals(chunk, k, c)?;
        let (rx, real) = transmit(&block, ctx.model, ctx.snr_db[p], ctx.seeds[p])?;
        let eq = equalize(&rx, &real)?;
        received.extend(eq.block.to_reals());
        let mut mask = vec![1.0; per];
        for &e in &eq.erased {
            mask[2 * e] = 0.0;
            mask[2 * e + 1] = 0.0;
        }
        pass_mask.extend(mask);
    }
    let y_hat = Tensor::new(y.shape(), received)?;
    let (decoded, dec) = models
        .codec
        .decode_train(store, &y_hat, &enc.gains(), Mode::Train)?;

    let mut g_decoded = vec![0.0; decoded.numel()];
    let mut views: Vec<Vec<(Tensor, crate::converter::ConverterCache)>> =
        (0..batch.len()).map(|_| Vec::new()).collect();
    for (p, cav) in cavs.iter().enumerate() {
        let f_hat = decoded.index0(p).reshape(&[k, c])?;
        report.mse_feat += f_hat.mean_squared_error(&cav.pack.features)? * scale;
        let mut g = f_hat.mse_grad(&cav.pack.features)?;
        g.scale(w.mu * scale);
        g_decoded[p * k * c..(p + 1) * k * c].copy_from_slice(g.data());
        let grid = batched(&scatter(&cav.pack, &f_hat)?)?;
        let ego_m = egos[cav.scene].0;
        let (view, cache) = models
            .converter(ego_m)?
            .from_standard
            .forward_train(store, &grid)?;
        let view = keep_delivered(&view, &egos[cav.scene].1, &cav.pack.indices)?;
        views[cav.scene].push((view, cache));
    }

    let mut p = 0;
    for (j, (ego_m, ego, targets)) in egos.iter().enumerate() {
        let fusion = models.fusion(*ego_m)?;
        let head = models.head(*ego_m)?;
        let refs: Vec<&Tensor> = views[j].iter().map(|(v, _)| v).collect();
        let (fused, f_cache) = fusion.forward_train(store, ego, &refs)?;
        let raw = head.forward(store, &fused)?;
        let (cls, reg, mut g) = detection_loss(&raw, targets, w.eta)?;
        report.cls += cls * scale;
        report.reg += reg * scale;
        g.scale(scale);
        let g_fused = head.backward(store, &fused, &g, grads)?;
        let g_src = fusion.backward(store, &f_cache, &g_fused, grads)?;
        for ((_, cache), g_view) in views[j].iter().zip(&g_src[1..]) {
            let cav = &cavs[p];
            let g_view = keep_delivered_backward(g_view, &cav.pack.indices)?;
            let g_grid = models
                .converter(*ego_m)?
                .from_standard
                .backward(store, cache, &g_view, grads)?;
            let g_rows = scatter_backward(&cav.pack, &unbatched(g_grid)?)?;
            for (d, s) in g_decoded[p * k * c..(p + 1) * k * c]
                .iter_mut()
                .zip(g_rows.data())
            {
                *d += s;
            }
            p += 1;
        }
    }

    let mut g_complete: Vec<Option<Tensor>> = (0..cavs.len()).map(|_| None).collect();
    if complete_maps {
        let mut p = 0;
        for (j, (ego_m, ego, targets)) in egos.iter().enumerate() {
            let pair = models.converter(*ego_m)?;
            let first = p;
            let mut full = Vec::new();
            while p < cavs.len() && cavs[p].scene == j {
                full.push(
                    pair.from_standard
                        .forward_train(store, &batched(&cavs[p].standard)?)?,
                );
                p += 1;
            }
            let refs: Vec<&Tensor> = full.iter().map(|(v, _)| v).collect();
            let fusion = models.fusion(*ego_m)?;
            let head = models.head(*ego_m)?;
            let (fused, f_cache) = fusion.forward_train(store, ego, &refs)?;
            let raw = head.forward(store, &fused)?;
            let (cls, reg, mut g) = detection_loss(&raw, targets, w.eta)?;
            report.cls += cls * scale;
            report.reg += reg * scale;
            g.scale(scale);
            let g_fused = head.backward(store, &fused, &g, grads)?;
            let g_src = fusion.backward(store, &f_cache, &g_fused, grads)?;
            for (i, ((_, cache), g_view)) in full.iter().zip(&g_src[1..]).enumerate() {
                g_complete[first + i] =
                    Some(pair.from_standard.backward(store, cache, g_view, grads)?);
            }
        }
    }

    let g_decoded = Tensor::new(decoded.shape(), g_decoded)?;
    let (g_y_hat, g_gains) =
        models
            .codec
            .decode_backward(store, &dec, &g_decoded, Mode::Train, grads)?;
    let g_y = Tensor::new(
        y.shape(),
        g_y_hat
            .data()
            .iter()
            .zip(&pass_mask)
            .map(|(g, m)| g * m)
            .collect(),
    )?;
    let g_x = models
        .codec
        .encode_backward(store, &enc, &g_y, &g_gains, Mode::Train, grads)?;
    for (p, cav) in cavs.iter().enumerate() {
        let g_rows = g_x.index0(p).reshape(&[k, c])?;
        let (g_s, g_imp) = select_backward(&cav.standard, &cav.importance, &cav.pack, &g_rows)?;
        let s = batched(&cav.standard)?;
        let g_sel = models.selector.backward(
            store,
            &s,
            std::slice::from_ref(&cav.importance),
            &[g_imp],
            grads,
        )?;
        if let Some(cache) = &cav.to_std {
            let mut g = batched(&g_s)?;
            g.add_assign(&g_sel)?;
            if let Some(gc) = &g_complete[p] {
                g.add_assign(gc)?;
            }
            models
                .converter(cav.modality)?
                .to_standard
                .backward(store, cache, &g, grads)?;
        }
    }
    Ok((
        report.finish(w),
        CommCaches {
            encode: enc,
            decode: dec,
        },
    ))
}

/// Freeze layout for each stage.
pub fn apply_freeze(models: &mut Models, stage: Stage, pretrain_modality: Modality) {
    let store = &mut models.store;
    match stage {
        Stage::Pretrain => {
            store.freeze_all(true);
            store.set_frozen_prefix(&Models::fusion_prefix(pretrain_modality), false);
            store.set_frozen_prefix(&Models::head_prefix(pretrain_modality), false);
        }
        Stage::Stage1 => {
            store.freeze_all(true);
            store.set_frozen_prefix(CONVERTER_PREFIX, false);
        }
        Stage::Stage2 => {
            store.freeze_all(true);
            store.set_frozen_prefix(SELECTOR_PREFIX, false);
            store.set_frozen_prefix(CODEC_PREFIX, false);
        }
        Stage::Stage3 => store.freeze_all(false),
    }
}

/// Draws batches and channel contexts and runs the schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub scene: SceneConfig,
    pub render: RenderConfig,
}

/// Probe-batch losses measured at the boundaries of each stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageProbe {
    pub stage: Stage,
    pub before: LossReport,
    pub after: LossReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    pub history: Vec<LossReport>,
    pub probes: Vec<StageProbe>,
}

impl TrainOutcome {
    pub fn probe(&self, stage: Stage) -> Option<&StageProbe> {
        self.probes.iter().find(|p| p.stage == stage)
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, scene: SceneConfig, render: RenderConfig) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        Ok(Trainer { cfg, scene, render })
    }

    fn plan(&self, key: &[u64], modality: Option<Modality>) -> Result<ScenePlan> {
        let scene = sample_scene(
            derive_seed(self.cfg.seed, &[&[stream::SCENE], key].concat()),
            &self.scene,
        )?;
        let mut rng = rng_from(self.cfg.seed, &[&[stream::MODALITY], key].concat());
        let modalities = (0..scene.vehicles.len())
            .map(|_| modality.unwrap_or_else(|| Modality::SENSORS[rng.random_range(0..2)]))
            .collect();
        Ok(ScenePlan {
            scene,
            modalities,
            noise_seed: derive_seed(self.cfg.seed, &[&[stream::RENDER], key].concat()),
        })
    }

    /// Training batch for a step. `modality` forces a homogeneous batch.
    pub fn batch(
        &self,
        stage: Stage,
        step: usize,
        modality: Option<Modality>,
    ) -> Result<Vec<ScenePlan>> {
        (0..self.cfg.batch_size)
            .map(|j| {
                self.plan(
                    &[stream::BATCH, stage.number(), step as u64, j as u64],
                    modality,
                )
            })
            .collect()
    }

    /// Fixed batch used to measure a stage's progress.
    pub fn probe_batch(&self, modality: Option<Modality>) -> Result<Vec<ScenePlan>> {
        let tag = modality.map_or(9, |m| m.index() as u64);
        (0..self.cfg.probe_scenes)
            .map(|j| self.plan(&[PROBE_STREAM, tag, j as u64], modality))
            .collect()
    }

    pub fn comm_context(&self, key: &[u64], model: ChannelModel, packs: usize) -> CommContext {
        let mut rng = rng_from(self.cfg.seed, &[&[stream::CHANNEL], key].concat());
        let lambda = self.cfg.lambdas[rng.random_range(0..self.cfg.lambdas.len())];
        let snr_db = (0..packs)
            .map(|_| {
                if self.cfg.snr_max_db > self.cfg.snr_min_db {
                    rng.random_range(self.cfg.snr_min_db..self.cfg.snr_max_db)
                } else {
                    self.cfg.snr_min_db
                }
            })
            .collect();
        let seeds = (0..packs).map(|_| rng.random()).collect();
        CommContext {
            lambda,
            model,
            snr_db,
            seeds,
        }
    }

    fn complete_maps(&self, stage: Stage) -> bool {
        stage == Stage::Stage3 && self.cfg.stage3_complete_maps
    }

    fn cav_count(batch: &[ScenePlan]) -> usize {
        batch
            .iter()
            .map(|p| p.modalities.len().saturating_sub(1))
            .sum()
    }

    pub fn pretrain_step(
        &self,
        models: &mut Models,
        batch: &[ScenePlan],
        adam: &Adam,
    ) -> Result<LossReport> {
        let mut grads = Grads::for_store(&models.store);
        let r = pretrain_pass(models, batch, &self.render, &self.cfg.weights(), &mut grads)?;
        adam.step(&mut models.store, &grads)?;
        Ok(r)
    }

    pub fn stage1_step(
        &self,
        models: &mut Models,
        batch: &[ScenePlan],
        adam: &Adam,
    ) -> Result<LossReport> {
        homogeneous(batch)?;
        let mut grads = Grads::for_store(&models.store);
        let r = stage1_pass(models, batch, &self.render, &self.cfg.weights(), &mut grads)?;
        adam.step(&mut models.store, &grads)?;
        Ok(r)
    }

    pub fn stage2_step(
        &self,
        models: &mut Models,
        batch: &[ScenePlan],
        ctx: &CommContext,
        adam: &Adam,
    ) -> Result<LossReport> {
        if !models.store.prefix_frozen(CONVERTER_PREFIX) {
            return Err(Error::contract(
                "stage 2 requires frozen semantic converters",
            ));
        }
        self.comm_step(models, batch, ctx, adam, Stage::Stage2)
            .map(|(r, _)| r)
    }

    /// Returns the report and the gradients that were applied.
    pub fn stage3_step(
        &self,
        models: &mut Models,
        batch: &[ScenePlan],
        ctx: &CommContext,
        adam: &Adam,
    ) -> Result<(LossReport, Grads)> {
        self.comm_step(models, batch, ctx, adam, Stage::Stage3)
    }

    fn comm_step(
        &self,
        models: &mut Models,
        batch: &[ScenePlan],
        ctx: &CommContext,
        adam: &Adam,
        stage: Stage,
    ) -> Result<(LossReport, Grads)> {
        let mut grads = Grads::for_store(&models.store);
        let through = !models.store.prefix_frozen(CONVERTER_PREFIX);
        let complete = self.complete_maps(stage);
        let (r, caches) = comm_pass(
            models,
            batch,
            &self.render,
            ctx,
            &self.cfg.weights(),
            stage,
            through,
            complete,
            &mut grads,
        )?;
        adam.step(&mut models.store, &grads)?;
        models
            .codec
            .commit_running_stats(&mut models.store, &caches.encode, &caches.decode)?;
        Ok((r, grads))
    }

    /// Loss on the probe batch without touching any parameter.
    pub fn probe(&self, models: &Models, stage: Stage) -> Result<LossReport> {
        let w = self.cfg.weights();
        let mut sink = Grads::for_store(&models.store);
        match stage {
            Stage::Pretrain | Stage::Stage1 => {
                let mut acc = LossReport::new(stage);
                for m in Modality::SENSORS {
                    let batch = self.probe_batch(Some(m))?;
                    let r = if stage == Stage::Pretrain {
                        pretrain_pass(models, &batch, &self.render, &w, &mut sink)?
                    } else {
                        stage1_pass(models, &batch, &self.render, &w, &mut sink)?
                    };
                    acc.cls += r.cls / 2.0;
                    acc.reg += r.reg / 2.0;
                    acc.mse_ms += r.mse_ms / 2.0;
                    acc.mse_sm += r.mse_sm / 2.0;
                    acc.mse_cycle += r.mse_cycle / 2.0;
                }
                Ok(acc.finish(&w))
            }
            Stage::Stage2 | Stage::Stage3 => {
                let batch = self.probe_batch(None)?;
                let ctx = self.comm_context(
                    &[PROBE_STREAM],
                    self.cfg.stage2_channel,
                    Self::cav_count(&batch),
                );
                let complete = self.complete_maps(stage);
                Ok(comm_pass(
                    models,
                    &batch,
                    &self.render,
                    &ctx,
                    &w,
                    stage,
                    false,
                    complete,
                    &mut sink,
                )?
                .0)
            }
        }
    }

    /// Runs pretraining and the three stages. `on_stage_end` is called after
    /// each stage, for checkpointing.
    pub fn train(
        &self,
        models: &mut Models,
        mut on_stage_end: impl FnMut(Stage, &Models) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let mut out = TrainOutcome::default();
        for stage in Stage::ALL {
            let (steps, lr) = match stage {
                Stage::Pretrain => (self.cfg.pretrain_steps, self.cfg.pretrain_lr),
                Stage::Stage1 => (self.cfg.stage1_steps, self.cfg.stage1_lr),
                Stage::Stage2 => (self.cfg.stage2_steps, self.cfg.stage2_lr),
                Stage::Stage3 => (self.cfg.stage3_steps, self.cfg.stage3_lr),
            };
            models.store.reset_optimizer_state();
            let adam = Adam::new(lr);
            let before = self.probe(models, stage)?;
            for step in 0..steps {
                let sensor = Modality::SENSORS[step % 2];
                let mut r = match stage {
                    Stage::Pretrain => {
                        apply_freeze(models, stage, sensor);
                        let b = self.batch(stage, step, Some(sensor))?;
                        self.pretrain_step(models, &b, &adam)?
                    }
                    Stage::Stage1 => {
                        apply_freeze(models, stage, sensor);
                        let b = self.batch(stage, step, Some(sensor))?;
                        self.stage1_step(models, &b, &adam)?
                    }
                    Stage::Stage2 | Stage::Stage3 => {
                        apply_freeze(models, stage, sensor);
                        let b = self.batch(stage, step, None)?;
                        let model = if stage == Stage::Stage2 {
                            self.cfg.stage2_channel
                        } else {
                            self.cfg.stage3_channel
                        };
                        let ctx = self.comm_context(
                            &[stage.number(), step as u64],
                            model,
                            Self::cav_count(&b),
                        );
                        if stage == Stage::Stage2 {
                            self.stage2_step(models, &b, &ctx, &adam)?
                        } else {
                            self.stage3_step(models, &b, &ctx, &adam)?.0
                        }
                    }
                };
                r.step = step;
                out.history.push(r);
            }
            let after = self.probe(models, stage)?;
            out.probes.push(StageProbe {
                stage,
                before,
                after,
            });
            on_stage_end(stage, models)?;
        }
        models.store.freeze_all(false);
        Ok(out)
    }
}
