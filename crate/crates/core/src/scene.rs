//! Synthetic BEV scenes and modality renderers.
//!
//! A scene holds axis-aligned boxes and the vehicles that observe them. Each
//! vehicle renders the scene into a feature map for its own sensor: a shared
//! six-channel latent (objectness blob, soft box interior, center offsets,
//! log extents) attenuated by a soft sensor-range edge, optionally smeared
//! radially for cameras, then mixed by a fixed per-modality linear map and
//! squashed by `tanh`.
//!
//! Coordinates are in cell units: `x` runs along the width (columns), `y`
//! along the height (rows), and cell `(row, col)` has center
//! `(col + 0.5, row + 0.5)`.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{rng_from, stream};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const LATENT_CHANNELS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Lidar,
    Camera,
    Standard,
}

impl Modality {
    pub const SENSORS: [Modality; 2] = [Modality::Lidar, Modality::Camera];

    pub fn index(self) -> usize {
        match self {
            Modality::Lidar => 0,
            Modality::Camera => 1,
            Modality::Standard => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Lidar => "L",
            Modality::Camera => "C",
            Modality::Standard => "S",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Lidar => "lidar",
            Modality::Camera => "camera",
            Modality::Standard => "standard",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lidar" | "l" | "L" => Ok(Modality::Lidar),
            "camera" | "c" | "C" => Ok(Modality::Camera),
            "standard" => Ok(Modality::Standard),
            other => Err(Error::Unknown {
                kind: "modality",
                value: other.to_string(),
            }),
        }
    }
}

/// Axis-aligned BEV box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: u32,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            cx,
            cy,
            w,
            h,
            class_id: 0,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Half-open containment `[cx - w/2, cx + w/2) x [cy - h/2, cy + h/2)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.cx - self.w / 2.0
            && x < self.cx + self.w / 2.0
            && y >= self.cy - self.h / 2.0
            && y < self.cy + self.h / 2.0
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = ((self.cx + self.w / 2.0).min(other.cx + other.w / 2.0)
            - (self.cx - self.w / 2.0).max(other.cx - other.w / 2.0))
        .max(0.0);
        let iy = ((self.cy + self.h / 2.0).min(other.cy + other.h / 2.0)
            - (self.cy - self.h / 2.0).max(other.cy - other.h / 2.0))
        .max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vehicle {
    pub x: f64,
    pub y: f64,
}

impl Vehicle {
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        ((self.x - x).powi(2) + (self.y - y).powi(2)).sqrt()
    }
}

/// Ground truth plus observer poses. `vehicles[0]` is the ego vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<BBox>,
    pub vehicles: Vec<Vehicle>,
    pub height: usize,
    pub width: usize,
    /// Distance at which sensor visibility falls to one half.
    pub sensor_range: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Collaborating vehicles besides the ego vehicle.
    pub num_cavs: usize,
    pub sensor_range: f64,
    pub min_vehicle_spacing: f64,
    pub max_iou: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            min_objects: 3,
            max_objects: 8,
            min_size: 2.0,
            max_size: 4.5,
            num_cavs: 2,
            sensor_range: 12.0,
            min_vehicle_spacing: 10.0,
            max_iou: 0.3,
            max_retries: 1000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene grid must be nonempty".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::Config(
                "scene sizes need 0 < min_size <= max_size".into(),
            ));
        }
        if self.max_size > self.height.min(self.width) as f64 {
            return Err(Error::Config("max_size exceeds the grid".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects > max_objects".into()));
        }
        if self.sensor_range <= 0.0 {
            return Err(Error::Config("sensor_range must be positive".into()));
        }
        Ok(())
    }
}

/// Draws a scene by rejection sampling.
///
/// Objects are placed within sensor range of at least one vehicle and keep
/// pairwise IoU below `max_iou`. Fails with [`Error::Infeasible`] once
/// `max_retries` consecutive placements are rejected.
pub fn sample_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng_from(seed, &[stream::SCENE]);
    let (wf, hf) = (cfg.width as f64, cfg.height as f64);
    let margin = (wf.min(hf) / 8.0).min(4.0);

    let mut vehicles: Vec<Vehicle> = Vec::with_capacity(cfg.num_cavs + 1);
    let mut tries = 0;
    while vehicles.len() < cfg.num_cavs + 1 {
        let v = Vehicle {
            x: rng.random_range(margin..=wf - margin),
            y: rng.random_range(margin..=hf - margin),
        };
        if vehicles
            .iter()
            .all(|u| u.distance(v.x, v.y) >= cfg.min_vehicle_spacing)
        {
            vehicles.push(v);
            tries = 0;
        } else {
            tries += 1;
            if tries > cfg.max_retries {
                return Err(Error::Infeasible(format!(
                    "cannot place {} vehicles {} cells apart",
                    cfg.num_cavs + 1,
                    cfg.min_vehicle_spacing
                )));
            }
        }
    }

    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<BBox> = Vec::with_capacity(count);
    while objects.len() < count {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let w = rng.random_range(cfg.min_size..=cfg.max_size);
            let h = rng.random_range(cfg.min_size..=cfg.max_size);
            let b = BBox::new(
                rng.random_range(w / 2.0..=wf - w / 2.0),
                rng.random_range(h / 2.0..=hf - h / 2.0),
                w,
                h,
            );
            let seen = vehicles
                .iter()
                .any(|v| v.distance(b.cx, b.cy) <= cfg.sensor_range);
            if seen && objects.iter().all(|o| o.iou(&b) < cfg.max_iou) {
                objects.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "placed {} of {count} objects before exhausting {} retries",
                objects.len(),
                cfg.max_retries
            )));
        }
    }

    Ok(Scene {
        objects,
        vehicles,
        height: cfg.height,
        width: cfg.width,
        sensor_range: cfg.sensor_range,
        seed,
    })
}

impl Scene {
    /// Line-oriented text form: `#` header lines, then `cx cy w h class_id`.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# bounds {} {}\n# range {}\n# seed {}\n",
            self.height, self.width, self.sensor_range, self.seed
        );
        for v in &self.vehicles {
            s.push_str(&format!("# vehicle {} {}\n", v.x, v.y));
        }
        for b in &self.objects {
            s.push_str(&format!(
                "{} {} {} {} {}\n",
                b.cx, b.cy, b.w, b.h, b.class_id
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Scene> {
        let bad = |line: &str| Error::Parse(format!("malformed scene line: {line:?}"));
        let mut scene = Scene {
            objects: Vec::new(),
            vehicles: Vec::new(),
            height: 0,
            width: 0,
            sensor_range: SceneConfig::default().sensor_range,
            seed: 0,
        };
        let mut have_bounds = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["#", "bounds", h, w] => {
                    scene.height = h.parse().map_err(|_| bad(line))?;
                    scene.width = w.parse().map_err(|_| bad(line))?;
                    have_bounds = true;
                }
                ["#", "range", r] => scene.sensor_range = r.parse().map_err(|_| bad(line))?,
                ["#", "seed", s] => scene.seed = s.parse().map_err(|_| bad(line))?,
                ["#", "vehicle", x, y] => scene.vehicles.push(Vehicle {
                    x: x.parse().map_err(|_| bad(line))?,
                    y: y.parse().map_err(|_| bad(line))?,
                }),
                ["#", ..] => {}
                [cx, cy, w, h, c] => {
                    let b = BBox {
                        cx: cx.parse().map_err(|_| bad(line))?,
                        cy: cy.parse().map_err(|_| bad(line))?,
                        w: w.parse().map_err(|_| bad(line))?,
                        h: h.parse().map_err(|_| bad(line))?,
                        class_id: c.parse().map_err(|_| bad(line))?,
                    };
                    if !(b.w > 0.0 && b.h > 0.0) {
                        return Err(Error::Parse(format!("degenerate box: {line:?}")));
                    }
                    scene.objects.push(b);
                }
                _ => return Err(bad(line)),
            }
        }
        if !have_bounds {
            return Err(Error::Parse("missing '# bounds' header".into()));
        }
        Ok(scene)
    }
}

/// An `[H, W, C]` map tagged with the space it lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub modality: Modality,
    pub vehicle_id: usize,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, modality: Modality, vehicle_id: usize) -> Result<Self> {
        if tensor.ndim() != 3 {
            return Err(Error::shape("FeatureMap", "[H, W, C]", tensor.shape()));
        }
        if !tensor.is_finite() {
            return Err(Error::contract("feature map holds non-finite values"));
        }
        Ok(FeatureMap {
            tensor,
            modality,
            vehicle_id,
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.tensor.shape()[0], self.tensor.shape()[1])
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub channels: usize,
    /// Blob width as a fraction of the half extent.
    pub sigma_blob: f64,
    /// One-sided radial smear of camera features, in cells.
    pub sigma_range: f64,
    /// Cross-range spread of the camera smear, in cells.
    pub sigma_perp: f64,
    pub lidar_noise: f64,
    pub camera_noise: f64,
    pub mixing_std: f64,
    pub bias_std: f64,
    /// Width of the soft sensor-range edge, in cells.
    pub range_softness: f64,
    pub mixing_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            channels: 16,
            sigma_blob: 1.0,
            sigma_range: 3.0,
            sigma_perp: 0.7,
            lidar_noise: 0.02,
            camera_noise: 0.08,
            mixing_std: 0.6,
            bias_std: 0.1,
            range_softness: 1.0,
            mixing_seed: 0x00C0_FFEE,
        }
    }
}

/// Fixed per-modality channel mixing `[6, C]` and bias `[C]`.
pub fn mixing(modality: Modality, cfg: &RenderConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if modality == Modality::Standard {
        return Err(Error::Usage("the standard space has no renderer".into()));
    }
    let mut rng = rng_from(
        cfg.mixing_seed,
        &[stream::MODALITY, modality.index() as u64],
    );
    let mut draw = |std: f64| std * Distribution::<f64>::sample(&StandardNormal, &mut rng);
    let w = (0..LATENT_CHANNELS * cfg.channels)
        .map(|_| draw(cfg.mixing_std))
        .collect();
    let b = (0..cfg.channels).map(|_| draw(cfg.bias_std)).collect();
    Ok((w, b))
}

fn soft_step(v: f64, width: f64) -> f64 {
    crate::nn::layers::sigmoid(v / width)
}

/// Noise-free latent `[H, W, 6]` as seen from `vehicle`, before any smear.
pub fn latent(scene: &Scene, vehicle: &Vehicle, cfg: &RenderConfig) -> Vec<f64> {
    let (h, w) = (scene.height, scene.width);
    let mut lat = vec![0.0; h * w * LATENT_CHANNELS];
    for b in &scene.objects {
        let vis = soft_step(
            scene.sensor_range - vehicle.distance(b.cx, b.cy),
            cfg.range_softness,
        );
        if vis < 1e-6 {
            continue;
        }
        let sx = cfg.sigma_blob * b.w / 2.0;
        let sy = cfg.sigma_blob * b.h / 2.0;
        for row in 0..h {
            let py = row as f64 + 0.5;
            for col in 0..w {
                let px = col as f64 + 0.5;
                let (dx, dy) = (b.cx - px, b.cy - py);
                let blob = (-0.5 * ((dx / sx).powi(2) + (dy / sy).powi(2))).exp();
                let inside =
                    soft_step(b.w / 2.0 - dx.abs(), 0.25) * soft_step(b.h / 2.0 - dy.abs(), 0.25);
                let cell = &mut lat[(row * w + col) * LATENT_CHANNELS..][..LATENT_CHANNELS];
                cell[0] += vis * blob;
                cell[1] += vis * inside;
                cell[2] += vis * inside * dx / 2.0;
                cell[3] += vis * inside * dy / 2.0;
                cell[4] += vis * inside * (b.w.ln() - 1.0);
                cell[5] += vis * inside * (b.h.ln() - 1.0);
            }
        }
    }
    lat
}

/// Spreads every latent cell radially away from the observer with a
/// one-sided Gaussian profile, normalized per source cell.
fn radial_smear(
    lat: &[f64],
    h: usize,
    w: usize,
    vehicle: &Vehicle,
    cfg: &RenderConfig,
) -> Vec<f64> {
    let mut out = vec![0.0; lat.len()];
    let reach = (3.0 * cfg.sigma_range.max(cfg.sigma_perp)).ceil() as isize;
    let mut weights: Vec<(usize, f64)> = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let src = &lat[(row * w + col) * LATENT_CHANNELS..][..LATENT_CHANNELS];
            if src.iter().all(|v| v.abs() < 1e-6) {
                continue;
            }
            let (qx, qy) = (col as f64 + 0.5, row as f64 + 0.5);
            let (ux, uy) = {
                let (dx, dy) = (qx - vehicle.x, qy - vehicle.y);
                let n = (dx * dx + dy * dy).sqrt();
                if n < 1e-9 {
                    (1.0, 0.0)
                } else {
                    (dx / n, dy / n)
                }
            };
            weights.clear();
            let mut total = 0.0;
            for r in (row as isize - reach).max(0)..(row as isize + reach + 1).min(h as isize) {
                for c in (col as isize - reach).max(0)..(col as isize + reach + 1).min(w as isize) {
                    let (ex, ey) = (c as f64 + 0.5 - qx, r as f64 + 0.5 - qy);
                    let along = ex * ux + ey * uy;
                    if along < -0.5 {
                        continue;
                    }
                    let across = -ex * uy + ey * ux;
                    let a = along.max(0.0);
                    let k = (-0.5
                        * ((a / cfg.sigma_range).powi(2) + (across / cfg.sigma_perp).powi(2)))
                    .exp();
                    if k > 1e-6 {
                        weights.push((r as usize * w + c as usize, k));
                        total += k;
                    }
                }
            }
            for &(idx, k) in &weights {
                let dst = &mut out[idx * LATENT_CHANNELS..][..LATENT_CHANNELS];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * k / total;
                }
            }
        }
    }
    out
}

/// Renders the scene as observed by `vehicle_id` with the given sensor.
pub fn render_features(
    scene: &Scene,
    vehicle_id: usize,
    modality: Modality,
    noise_seed: u64,
    cfg: &RenderConfig,
) -> Result<FeatureMap> {
    let vehicle = scene.vehicles.get(vehicle_id).ok_or_else(|| {
        Error::Usage(format!(
            "vehicle {vehicle_id} not in scene with {} vehicles",
            scene.vehicles.len()
        ))
    })?;
    let (w_mix, bias) = mixing(modality, cfg)?;
    let (h, w) = (scene.height, scene.width);
    let mut lat = latent(scene, vehicle, cfg);
    if modality == Modality::Camera {
        lat = radial_smear(&lat, h, w, vehicle, cfg);
    }
    let c = cfg.channels;
    let std = match modality {
        Modality::Lidar => cfg.lidar_noise,
        _ => cfg.camera_noise,
    };
    let mut rng = rng_from(
        noise_seed,
        &[stream::RENDER, modality.index() as u64, vehicle_id as u64],
    );
    let mut data = vec![0.0; h * w * c];
    for (cell, out) in lat.chunks(LATENT_CHANNELS).zip(data.chunks_mut(c)) {
        for (k, o) in out.iter_mut().enumerate() {
            let mut v = bias[k];
            for (j, l) in cell.iter().enumerate() {
                v += l * w_mix[j * c + k];
            }
            *o = v.tanh();
        }
    }
    if std > 0.0 {
        for v in &mut data {
            *v += std * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    FeatureMap::new(Tensor::new(&[h, w, c], data)?, modality, vehicle_id)
}

/// Per-cell detection supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub height: usize,
    pub width: usize,
    /// 1 where the cell center lies inside a box.
    pub objectness: Vec<f64>,
    /// `(dx, dy, ln w, ln h)` of the assigned box; zero on negative cells.
    pub regression: Vec<[f64; 4]>,
}

impl Targets {
    pub fn positives(&self) -> usize {
        self.objectness.iter().filter(|&&o| o > 0.5).count()
    }
}

/// Marks cells whose center falls inside a box. A cell covered by several
/// boxes is assigned to the one with the nearest center.
pub fn ground_truth_targets(scene: &Scene, grid: (usize, usize)) -> Targets {
    let (h, w) = grid;
    let mut objectness = vec![0.0; h * w];
    let mut regression = vec![[0.0; 4]; h * w];
    for row in 0..h {
        let py = row as f64 + 0.5;
        for col in 0..w {
            let px = col as f64 + 0.5;
            let best = scene
                .objects
                .iter()
                .filter(|b| b.contains(px, py))
                .min_by(|a, b| {
                    let da = (a.cx - px).powi(2) + (a.cy - py).powi(2);
                    let db = (b.cx - px).powi(2) + (b.cy - py).powi(2);
                    da.total_cmp(&db)
                });
            if let Some(b) = best {
                let i = row * w + col;
                objectness[i] = 1.0;
                regression[i] = [b.cx - px, b.cy - py, b.w.ln(), b.h.ln()];
            }
        }
    }
    Targets {
        height: h,
        width: w,
        objectness,
        regression,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_offset_unit_squares() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        let b = BBox::new(1.0, 0.5, 1.0, 1.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_objects_gives_empty_scene() {
        let cfg = SceneConfig {
            min_objects: 0,
            max_objects: 0,
            ..Default::default()
        };
        assert!(sample_scene(4, &cfg).unwrap().objects.is_empty());
    }

    #[test]
    fn overcrowded_config_is_infeasible() {
        let cfg = SceneConfig {
            min_objects: 400,
            max_objects: 400,
            max_retries: 50,
            ..Default::default()
        };
        assert!(matches!(sample_scene(1, &cfg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn standard_space_cannot_be_rendered() {
        let scene = sample_scene(0, &SceneConfig::default()).unwrap();
        let r = render_features(&scene, 0, Modality::Standard, 0, &RenderConfig::default());
        assert!(r.is_err());
    }
}
