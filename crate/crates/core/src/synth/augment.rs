//! Data augmentation for multi-frame synthetic samples.
//!
//! One parameter draw is shared by every frame of a sample: the same scale,
//! mask box and injected clusters apply to all frames. Injected points carry
//! the background label and zero flow. Augmentations that move points drop
//! the limb attachments, since these no longer describe the stored points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::skeleton::PointCloud;

use super::body::{forward_kinematics, sample_end_pose_with, CapsuleBody, Placement};
use super::raycast::{raycast, RayCasterConfig};
use super::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownsampleAug {
    pub enabled: bool,
    /// Fraction of points kept per frame.
    pub keep: f64,
}

impl Default for DownsampleAug {
    fn default() -> Self {
        Self { enabled: false, keep: 0.7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskAug {
    pub enabled: bool,
    /// Half edge of the axis-aligned box removed around a random body point, meters.
    pub half_extent: f64,
}

impl Default for MaskAug {
    fn default() -> Self {
        Self { enabled: false, half_extent: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterAug {
    pub enabled: bool,
    pub clusters: usize,
    pub points_per_cluster: usize,
    /// Cluster spread, meters.
    pub spread: f64,
    /// Cluster centres are drawn between 0.5 m and this horizontal distance from the pelvis.
    pub radius: f64,
}

impl Default for ClusterAug {
    fn default() -> Self {
        Self::ground()
    }
}

impl ClusterAug {
    fn ground() -> Self {
        Self { enabled: false, clusters: 3, points_per_cluster: 40, spread: 0.3, radius: 2.0 }
    }

    fn background() -> Self {
        Self { enabled: false, clusters: 3, points_per_cluster: 30, spread: 0.15, radius: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecondPersonAug {
    pub enabled: bool,
    pub min_offset: f64,
    pub max_offset: f64,
}

impl Default for SecondPersonAug {
    fn default() -> Self {
        Self { enabled: false, min_offset: 0.8, max_offset: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseAug {
    pub enabled: bool,
    /// Per-axis Gaussian standard deviation, meters.
    pub sigma: f64,
}

impl Default for NoiseAug {
    fn default() -> Self {
        Self { enabled: false, sigma: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleAug {
    pub enabled: bool,
    pub min: f64,
    pub max: f64,
}

impl Default for ScaleAug {
    fn default() -> Self {
        Self { enabled: false, min: 0.8, max: 1.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub seed: u64,
    pub downsample: DownsampleAug,
    pub mask: MaskAug,
    pub ground: ClusterAug,
    pub background: ClusterAug,
    pub second_person: SecondPersonAug,
    pub noise: NoiseAug,
    pub scale: ScaleAug,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            downsample: DownsampleAug::default(),
            mask: MaskAug::default(),
            ground: ClusterAug::ground(),
            background: ClusterAug::background(),
            second_person: SecondPersonAug::default(),
            noise: NoiseAug::default(),
            scale: ScaleAug::default(),
        }
    }
}

impl AugmentationConfig {
    /// Every augmentation enabled with its default parameters.
    pub fn all_enabled() -> Self {
        let mut c = Self::default();
        c.downsample.enabled = true;
        c.mask.enabled = true;
        c.ground.enabled = true;
        c.background.enabled = true;
        c.second_person.enabled = true;
        c.noise.enabled = true;
        c.scale.enabled = true;
        c
    }

    pub fn any_enabled(&self) -> bool {
        self.downsample.enabled
            || self.mask.enabled
            || self.ground.enabled
            || self.background.enabled
            || self.second_person.enabled
            || self.noise.enabled
            || self.scale.enabled
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.downsample.keep) {
            return bad("downsample keep fraction must lie in [0, 1]");
        }
        if !(self.noise.sigma >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        if !(self.scale.min > 0.0 && self.scale.min <= self.scale.max) {
            return bad("scale range must be positive and ordered");
        }
        if !(self.mask.half_extent >= 0.0) {
            return bad("mask extent must be non-negative");
        }
        if !(self.second_person.min_offset >= 0.0 && self.second_person.min_offset <= self.second_person.max_offset) {
            return bad("second person offsets must be ordered");
        }
        for c in [&self.ground, &self.background] {
            if !(c.spread >= 0.0 && c.radius >= 0.5) {
                return bad("cluster spread must be non-negative and radius at least 0.5 m");
            }
        }
        Ok(())
    }
}

/// Context the second-person augmentation needs to render a bystander.
#[derive(Debug, Clone, Copy)]
pub struct AugmentContext<'a> {
    pub body: &'a CapsuleBody,
    pub raycaster: &'a RayCasterConfig,
    pub background_class: usize,
}

fn append_background(cloud: &mut PointCloud, pts: &[Vec3], background: usize) {
    cloud.points.extend_from_slice(pts);
    let n = pts.len();
    if let Some(f) = &mut cloud.forward_flow {
        f.extend(std::iter::repeat_n(Vec3::zeros(), n));
    }
    if let Some(f) = &mut cloud.backward_flow {
        f.extend(std::iter::repeat_n(Vec3::zeros(), n));
    }
    if let Some(l) = &mut cloud.gt_label {
        l.extend(std::iter::repeat_n(background, n));
    }
    if let Some(v) = &mut cloud.valid {
        v.extend(std::iter::repeat_n(true, n));
    }
    cloud.attachment = None;
}

fn random_horizontal<R: Rng>(rng: &mut R, min: f64, max: f64) -> Vec3 {
    let r = rng.random_range(min..=max);
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    Vec3::new(r * a.cos(), r * a.sin(), 0.0)
}

/// Applies `cfg` identically to every frame of a sample.
pub fn augment(frames: &[Frame], cfg: &AugmentationConfig, ctx: &AugmentContext<'_>, seed: u64) -> Result<Vec<Frame>> {
    cfg.validate()?;
    let mut out = frames.to_vec();
    if !cfg.any_enabled() || frames.is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ cfg.seed.rotate_left(32));
    let pelvis = frames[0].pose.positions[0];
    let ground_z = frames.iter().flat_map(|f| f.cloud.points.iter().map(|p| p.z)).fold(f64::INFINITY, f64::min);

    if cfg.scale.enabled {
        let s = rng.random_range(cfg.scale.min..=cfg.scale.max);
        let c = Vec3::new(pelvis.x, pelvis.y, ground_z);
        for f in &mut out {
            scale_frame(f, &c, s);
        }
    }

    let mut injected: Vec<Vec3> = Vec::new();
    if cfg.second_person.enabled {
        let offset = random_horizontal(&mut rng, cfg.second_person.min_offset, cfg.second_person.max_offset);
        let other = ctx.body.jittered(&mut rng);
        let angles = sample_end_pose_with(&other, &mut rng);
        let place = Placement {
            translation: Vec3::new(pelvis.x, pelvis.y, ground_z) + offset - Vec3::new(0.0, 0.0, 0.0),
            yaw_deg: rng.random_range(0.0..360.0),
        };
        let posed = forward_kinematics(&other, &angles, &place);
        // a bystander fully outside the field of view adds nothing
        if let Ok(scan) = raycast(&other, &posed, ctx.raycaster) {
            injected.extend(scan.cloud.points);
        }
    }
    if cfg.ground.enabled {
        let g = &cfg.ground;
        for _ in 0..g.clusters {
            let c = Vec3::new(pelvis.x, pelvis.y, ground_z) + random_horizontal(&mut rng, 0.5, g.radius);
            for _ in 0..g.points_per_cluster {
                let d = random_horizontal(&mut rng, 0.0, g.spread.max(1e-9));
                injected.push(c + d + Vec3::new(0.0, 0.0, rng.random_range(-0.02..=0.02)));
            }
        }
    }
    if cfg.background.enabled && cfg.background.points_per_cluster > 0 {
        let b = &cfg.background;
        let normal = Normal::new(0.0, b.spread).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for _ in 0..b.clusters {
            let mut c = Vec3::new(pelvis.x, pelvis.y, ground_z) + random_horizontal(&mut rng, 0.5, b.radius);
            c.z += rng.random_range(0.0..=2.0);
            for _ in 0..b.points_per_cluster {
                injected.push(c + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)));
            }
        }
    }
    if !injected.is_empty() {
        for f in &mut out {
            append_background(&mut f.cloud, &injected, ctx.background_class);
        }
    }

    if cfg.mask.enabled {
        let src = &out[0].cloud;
        if !src.is_empty() {
            let centre = src.points[rng.random_range(0..src.len())];
            let h = cfg.mask.half_extent;
            for f in &mut out {
                let keep: Vec<usize> =
                    (0..f.cloud.len()).filter(|&i| (f.cloud.points[i] - centre).iter().any(|d| d.abs() > h)).collect();
                f.cloud = f.cloud.select(&keep);
            }
        }
    }

    if cfg.downsample.enabled {
        for f in &mut out {
            let n = f.cloud.len();
            let k = ((n as f64) * cfg.downsample.keep).round() as usize;
            let mut idx = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
            idx.sort_unstable();
            f.cloud = f.cloud.select(&idx);
        }
    }

    if cfg.noise.enabled && cfg.noise.sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise.sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for f in &mut out {
            for p in &mut f.cloud.points {
                *p += Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
            }
            f.cloud.attachment = None;
        }
    }
    Ok(out)
}

fn scale_frame(f: &mut Frame, c: &Vec3, s: f64) {
    for p in &mut f.cloud.points {
        *p = c + (*p - c) * s;
    }
    for flow in [&mut f.cloud.forward_flow, &mut f.cloud.backward_flow].into_iter().flatten() {
        for v in flow.iter_mut() {
            *v *= s;
        }
    }
    for p in &mut f.pose.positions {
        *p = c + (*p - c) * s;
    }
    for t in &mut f.limb_transforms {
        t.translation = c + (t.translation - c) * s;
    }
    f.cloud.attachment = None;
}
