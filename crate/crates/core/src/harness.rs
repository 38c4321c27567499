//! Experiment sweeps over methods, SNRs and compression ratios, with CSV output.

use crate::channel::ChannelModel;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Models;
use crate::perception::average_precision;
use crate::pipeline::{Link, Method, ScenePlan};
use crate::rng::{derive_seed, rng_from, stream};
use crate::scene::{sample_scene, Modality};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

pub const CSV_HEADER: &str =
    "method,channel,snr_db,lambda,ego_modality,cav_modalities,ap50,ap70,channel_uses,seed,scenes";

/// Ego sensor: fixed, or drawn per scene from the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EgoChoice {
    Lidar,
    Camera,
    Random,
}

impl EgoChoice {
    pub fn fixed(m: Modality) -> Self {
        match m {
            Modality::Camera => EgoChoice::Camera,
            _ => EgoChoice::Lidar,
        }
    }
}

impl fmt::Display for EgoChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EgoChoice::Lidar => "lidar",
            EgoChoice::Camera => "camera",
            EgoChoice::Random => "random",
        })
    }
}

/// Collaborator sensors: `"random"` or a `;`-separated list such as
/// `"lidar;camera"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CavChoice {
    Random,
    Fixed(Vec<Modality>),
}

impl FromStr for CavChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(CavChoice::Random);
        }
        let list = s
            .split([';', ','])
            .map(|t| t.trim().parse::<Modality>())
            .collect::<Result<Vec<_>>>()?;
        if list.contains(&Modality::Standard) {
            return Err(Error::Unknown {
                kind: "collaborator modality",
                value: s.to_string(),
            });
        }
        Ok(CavChoice::Fixed(list))
    }
}

impl TryFrom<String> for CavChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CavChoice> for String {
    fn from(c: CavChoice) -> String {
        c.to_string()
    }
}

impl fmt::Display for CavChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CavChoice::Random => f.write_str("random"),
            CavChoice::Fixed(list) => {
                let names: Vec<String> = list.iter().map(|m| m.to_string()).collect();
                f.write_str(&names.join(";"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorMatrixConfig {
    pub method: Method,
    pub channel: ChannelModel,
    pub snr_db: f64,
    pub lambda: f64,
}

impl Default for SensorMatrixConfig {
    fn default() -> Self {
        SensorMatrixConfig {
            method: Method::Cmsc,
            channel: ChannelModel::Awgn,
            snr_db: 20.0,
            lambda: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnrSweepConfig {
    pub methods: Vec<Method>,
    pub channel: ChannelModel,
    pub snrs: Vec<f64>,
    pub lambda: f64,
    pub ego_modality: EgoChoice,
    pub cav_modalities: CavChoice,
}

impl Default for SnrSweepConfig {
    fn default() -> Self {
        SnrSweepConfig {
            methods: Method::ALL.to_vec(),
            channel: ChannelModel::Awgn,
            snrs: (0..=10).map(|i| 2.0 * i as f64).collect(),
            lambda: 0.06,
            ego_modality: EgoChoice::Lidar,
            cav_modalities: CavChoice::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaSweepConfig {
    pub methods: Vec<Method>,
    pub channel: ChannelModel,
    pub snrs: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub ego_modality: EgoChoice,
    pub cav_modalities: CavChoice,
}

impl Default for LambdaSweepConfig {
    fn default() -> Self {
        LambdaSweepConfig {
            methods: vec![Method::Cmsc],
            channel: ChannelModel::Rayleigh,
            snrs: vec![0.0, 10.0, 20.0],
            lambdas: vec![0.01, 0.02, 0.04, 0.06, 0.1, 0.2],
            ego_modality: EgoChoice::Random,
            cav_modalities: CavChoice::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenes: usize,
    pub seed: u64,
    pub num_cavs: usize,
    /// Derive baseline ratios from the channel-use parity rule.
    pub parity: bool,
    pub sensor_matrix: SensorMatrixConfig,
    pub snr_sweep: SnrSweepConfig,
    pub lambda_sweep: LambdaSweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenes: 200,
            seed: 0,
            num_cavs: 2,
            parity: true,
            sensor_matrix: SensorMatrixConfig::default(),
            snr_sweep: SnrSweepConfig::default(),
            lambda_sweep: LambdaSweepConfig::default(),
        }
    }
}

/// One evaluation point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub method: Method,
    pub channel: ChannelModel,
    pub snr_db: f64,
    /// Learned-codec ratio; baselines derive theirs from it under parity.
    pub lambda: f64,
    pub ego: EgoChoice,
    pub cavs: CavChoice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub channel: ChannelModel,
    pub snr_db: f64,
    pub lambda: f64,
    pub ego_modality: EgoChoice,
    pub cav_modalities: CavChoice,
    pub ap50: f64,
    pub ap70: f64,
    pub channel_uses: usize,
    pub seed: u64,
    pub scenes: usize,
}

fn trim_float(v: f64) -> String {
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.4},{:.4},{},{},{}",
            self.method,
            self.channel,
            trim_float(self.snr_db),
            trim_float(self.lambda),
            self.ego_modality,
            self.cav_modalities,
            self.ap50,
            self.ap70,
            self.channel_uses,
            self.seed,
            self.scenes
        )
    }
}

pub fn csv_string(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::contract("no result rows to emit"));
    }
    let mut s = String::new();
    let _ = writeln!(s, "{CSV_HEADER}");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    Ok(s)
}

pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let text = csv_string(rows)?;
    std::fs::write(path, text).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot write {}: {e}", path.display()),
        ))
    })
}

/// Trained models plus the configuration they are evaluated under.
pub struct Harness<'a> {
    pub models: &'a Models,
    pub cfg: &'a Config,
}

impl<'a> Harness<'a> {
    pub fn new(models: &'a Models, cfg: &'a Config) -> Result<Self> {
        if models.channels != cfg.render.channels {
            return Err(Error::Config(format!(
                "model has {} channels but the renderer produces {}",
                models.channels, cfg.render.channels
            )));
        }
        Ok(Harness { models, cfg })
    }

    fn exp(&self) -> &ExperimentConfig {
        &self.cfg.experiment
    }

    /// Scene `j` with its sensor assignment. Scenes and assignments depend
    /// only on the experiment seed and `j`, so every sweep point sees the
    /// same scenes.
    pub fn plan(&self, j: usize, ego: EgoChoice, cavs: &CavChoice) -> Result<ScenePlan> {
        let exp = self.exp();
        let mut scene_cfg = self.cfg.scene.clone();
        scene_cfg.num_cavs = exp.num_cavs;
        let scene = sample_scene(
            derive_seed(exp.seed, &[stream::SCENE, j as u64]),
            &scene_cfg,
        )?;
        let mut rng = rng_from(exp.seed, &[stream::MODALITY, j as u64]);
        let mut draw = || Modality::SENSORS[rng.random_range(0..2)];
        let ego_m = match ego {
            EgoChoice::Lidar => Modality::Lidar,
            EgoChoice::Camera => Modality::Camera,
            EgoChoice::Random => draw(),
        };
        let mut modalities = vec![ego_m];
        match cavs {
            CavChoice::Random => modalities.extend((0..exp.num_cavs).map(|_| draw())),
            CavChoice::Fixed(list) => {
                if list.len() != exp.num_cavs {
                    return Err(Error::Config(format!(
                        "{} collaborator modalities given for {} collaborators",
                        list.len(),
                        exp.num_cavs
                    )));
                }
                modalities.extend(list);
            }
        }
        Ok(ScenePlan {
            scene,
            modalities,
            noise_seed: derive_seed(exp.seed, &[stream::RENDER, j as u64]),
        })
    }

    /// Mean AP@0.5 and AP@0.7 over the configured scenes.
    pub fn evaluate(&self, point: &EvalPoint) -> Result<ResultRow> {
        let exp = self.exp();
        if exp.scenes == 0 {
            return Err(Error::contract("an experiment needs at least one scene"));
        }
        if !(point.lambda > 0.0 && point.lambda <= 1.0) {
            return Err(Error::contract(format!(
                "compression ratio {} outside (0, 1]",
                point.lambda
            )));
        }
        let lambda = point.method.effective_lambda(point.lambda, exp.parity);
        let link = Link {
            model: point.channel,
            snr_db: point.snr_db,
        };
        let per_scene: Vec<(f64, f64, usize)> = (0..exp.scenes)
            .into_par_iter()
            .map(|j| {
                let plan = self.plan(j, point.ego, &point.cavs)?;
                let channel_seed = derive_seed(
                    exp.seed,
                    &[
                        stream::CHANNEL,
                        point.snr_db.to_bits(),
                        point.lambda.to_bits(),
                        j as u64,
                    ],
                );
                let out = self.models.run_scene(
                    point.method,
                    &plan,
                    lambda,
                    link,
                    channel_seed,
                    &self.cfg.render,
                    &self.cfg.perception,
                )?;
                let gt = &plan.scene.objects;
                Ok((
                    average_precision(&out.detections, gt, 0.5),
                    average_precision(&out.detections, gt, 0.7),
                    out.channel_uses,
                ))
            })
            .collect::<Result<_>>()?;
        let n = per_scene.len() as f64;
        Ok(ResultRow {
            method: point.method,
            channel: point.channel,
            snr_db: point.snr_db,
            lambda,
            ego_modality: point.ego,
            cav_modalities: point.cavs.clone(),
            ap50: per_scene.iter().map(|r| r.0).sum::<f64>() / n,
            ap70: per_scene.iter().map(|r| r.1).sum::<f64>() / n,
            channel_uses: per_scene.iter().map(|r| r.2).max().unwrap_or(0),
            seed: exp.seed,
            scenes: exp.scenes,
        })
    }

    /// Rows L/L, L/C, C/C, C/L (ego / collaborators).
    pub fn run_sensor_matrix(&self) -> Result<Vec<ResultRow>> {
        let c = &self.exp().sensor_matrix;
        let n = self.exp().num_cavs;
        let pairs = [
            (Modality::Lidar, Modality::Lidar),
            (Modality::Lidar, Modality::Camera),
            (Modality::Camera, Modality::Camera),
            (Modality::Camera, Modality::Lidar),
        ];
        pairs
            .iter()
            .map(|&(e, k)| {
                self.evaluate(&EvalPoint {
                    method: c.method,
                    channel: c.channel,
                    snr_db: c.snr_db,
                    lambda: c.lambda,
                    ego: EgoChoice::fixed(e),
                    cavs: CavChoice::Fixed(vec![k; n]),
                })
            })
            .collect()
    }

    /// One row per (method, SNR), method-major.
    pub fn run_snr_sweep(&self) -> Result<Vec<ResultRow>> {
        let c = &self.exp().snr_sweep;
        let mut rows = Vec::with_capacity(c.methods.len() * c.snrs.len());
        for &method in &c.methods {
            for &snr_db in &c.snrs {
                rows.push(self.evaluate(&EvalPoint {
                    method,
                    channel: c.channel,
                    snr_db,
                    lambda: c.lambda,
                    ego: c.ego_modality,
                    cavs: c.cav_modalities.clone(),
                })?);
            }
        }
        Ok(rows)
    }

    /// One row per (method, SNR, lambda).
    pub fn run_lambda_sweep(&self) -> Result<Vec<ResultRow>> {
        let c = &self.exp().lambda_sweep;
        if let Some(&bad) = c.lambdas.iter().find(|&&l| !(l > 0.0 && l <= 1.0)) {
            return Err(Error::contract(format!(
                "compression ratio {bad} outside (0, 1]"
            )));
        }
        let mut rows = Vec::new();
        for &method in &c.methods {
            for &snr_db in &c.snrs {
                for &lambda in &c.lambdas {
                    rows.push(self.evaluate(&EvalPoint {
                        method,
                        channel: c.channel,
                        snr_db,
                        lambda,
                        ego: c.ego_modality,
                        cavs: c.cav_modalities.clone(),
                    })?);
                }
            }
        }
        Ok(rows)
    }
}
