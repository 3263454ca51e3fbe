//! Synthetic LiDAR pedestrian sequences with exact ground truth.
//!
//! A capsule body is posed by interpolating joint angles from the canonical
//! standing pose to a random end pose, placed 6 to 17 meters from a spinning
//! ray caster and scanned once per frame. Every point keeps its limb attachment,
//! which gives exact scene flow between frames.

pub mod augment;
pub mod body;
pub mod raycast;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::skeleton::{LimbAttachment, PointCloud, SkeletonPose};

pub use augment::{augment, AugmentationConfig};
pub use body::{
    forward_kinematics, interpolate_sequence, sample_end_pose, BodyConfig, CapsuleBody, Placement, PoseAngles,
    PosedBody, RigidTransform,
};
pub use raycast::{raycast, RayCasterConfig, Scan};

/// Rays needed on the limbs around a joint before it counts as visible.
pub const VISIBILITY_MIN_HITS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub frames: usize,
    pub distance_min: f64,
    pub distance_max: f64,
    /// Height of the sensor above the ground, in meters.
    pub sensor_height: f64,
    /// Frames with more valid points are randomly downsampled to this size.
    pub max_points: usize,
    pub raycaster: RayCasterConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            distance_min: 6.0,
            distance_max: 17.0,
            sensor_height: 1.8,
            max_points: 1024,
            raycaster: RayCasterConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 frames per sequence, got {}", self.frames)));
        }
        if !(self.distance_min > 0.0 && self.distance_min <= self.distance_max) {
            return Err(Error::InvalidConfig("bad placement distance range".into()));
        }
        if self.max_points == 0 {
            return Err(Error::InvalidConfig("max_points must be positive".into()));
        }
        self.raycaster.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub cloud: PointCloud,
    pub pose: SkeletonPose,
    pub visibility: Vec<bool>,
    pub limb_transforms: Vec<RigidTransform>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    /// Per-sequence body after shape jitter.
    pub body: CapsuleBody,
    pub placement: Placement,
    pub distance: f64,
    pub angles: Vec<PoseAngles>,
    pub frames: Vec<Frame>,
}

/// Flow carrying each attached point from one set of limb transforms to another.
pub fn exact_flow(
    attachment: Option<&[LimbAttachment]>,
    from: &[RigidTransform],
    to: &[RigidTransform],
) -> Result<Vec<Vec3>> {
    let att = attachment.ok_or(Error::MissingAttachment)?;
    Ok(att.iter().map(|a| to[a.limb].apply(&a.local) - from[a.limb].apply(&a.local)).collect())
}

/// RNG for sequence `index` of a dataset, independent of generation order.
pub fn sequence_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Places the body on the ground at horizontal `distance` from the sensor.
pub fn place_at(distance: f64, azimuth_deg: f64, yaw_deg: f64, cfg: &SynthConfig) -> Result<Placement> {
    if !(cfg.distance_min..=cfg.distance_max).contains(&distance) {
        return Err(Error::InvalidConfig(format!(
            "placement distance {distance} outside [{}, {}]",
            cfg.distance_min, cfg.distance_max
        )));
    }
    let o = cfg.raycaster.origin();
    let az = azimuth_deg.to_radians();
    Ok(Placement { translation: o + Vec3::new(distance * az.cos(), distance * az.sin(), -cfg.sensor_height), yaw_deg })
}

/// Poses and scans a body for every frame of an angle sequence.
pub fn render_frames(
    body: &CapsuleBody,
    angles: &[PoseAngles],
    placement: &Placement,
    cfg: &SynthConfig,
) -> Result<Vec<Frame>> {
    let mut frames = Vec::with_capacity(angles.len());
    for a in angles {
        let posed = forward_kinematics(body, a, placement);
        let scan = raycast(body, &posed, &cfg.raycaster)?;
        let visibility = raycast::visibility(body.topology(), &scan.hits_per_limb, VISIBILITY_MIN_HITS);
        frames.push(Frame { cloud: scan.cloud, pose: posed.pose, visibility, limb_transforms: posed.limb_transforms });
    }
    attach_exact_flows(&mut frames)?;
    Ok(frames)
}

/// Fills forward flow on every frame but the last and backward flow on every frame but the first.
pub fn attach_exact_flows(frames: &mut [Frame]) -> Result<()> {
    let n = frames.len();
    for t in 0..n {
        let att = frames[t].cloud.attachment.as_deref();
        let fwd = if t + 1 < n {
            Some(exact_flow(att, &frames[t].limb_transforms, &frames[t + 1].limb_transforms)?)
        } else {
            None
        };
        let bwd = if t > 0 {
            Some(exact_flow(att, &frames[t].limb_transforms, &frames[t - 1].limb_transforms)?)
        } else {
            None
        };
        frames[t].cloud.forward_flow = fwd;
        frames[t].cloud.backward_flow = bwd;
    }
    Ok(())
}

/// Random subset of at most `max` points, in original order.
pub fn downsample<R: Rng>(cloud: &PointCloud, max: usize, rng: &mut R) -> PointCloud {
    if cloud.len() <= max {
        return cloud.clone();
    }
    let mut idx = rand::seq::index::sample(rng, cloud.len(), max).into_vec();
    idx.sort_unstable();
    cloud.select(&idx)
}

/// Generates one sequence. Frame 0 is always the canonical standing pose.
pub fn generate_sequence(
    base: &CapsuleBody,
    cfg: &SynthConfig,
    master_seed: u64,
    index: u64,
) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = sequence_rng(master_seed, index);
    let body = base.jittered(&mut rng);
    let distance = rng.random_range(cfg.distance_min..=cfg.distance_max);
    let azimuth = rng.random_range(0.0..360.0);
    let yaw = rng.random_range(0.0..360.0);
    let placement = place_at(distance, azimuth, yaw, cfg)?;
    let end = body::sample_end_pose_with(&body, &mut rng);
    let angles = interpolate_sequence(&body.rest_angles(), &end, cfg.frames)?;
    let mut frames = render_frames(&body, &angles, &placement, cfg)?;
    for f in &mut frames {
        f.cloud = downsample(&f.cloud, cfg.max_points, &mut rng);
    }
    Ok(SyntheticSequence { body, placement, distance, angles, frames })
}
