//! Capsule body model, pose sampling and forward kinematics.

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::skeleton::{Limb, SkeletonPose, SkeletonTopology};

const DEFAULT_BODY: &str = include_str!("../../data/body_default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub offset: [f64; 3],
    #[serde(default)]
    pub radius: f64,
    #[serde(default)]
    pub noise_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyConfig {
    pub root_position: [f64; 3],
    #[serde(default)]
    pub shape_jitter: f64,
    pub joints: Vec<JointConfig>,
}

impl Default for BodyConfig {
    fn default() -> Self {
        toml::from_str(DEFAULT_BODY).expect("bundled body config parses")
    }
}

/// A rigid transform `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vec3::zeros() }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn inverse_apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// One joint of the kinematic tree. The bone ending at this joint hangs off `parent`.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyJoint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: Vec3,
    pub radius: f64,
    pub noise_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleBody {
    pub joints: Vec<BodyJoint>,
    pub root_position: Vec3,
    pub shape_jitter: f64,
    topology: SkeletonTopology,
    /// For each limb, the joint whose incoming bone it is.
    limb_joint: Vec<usize>,
}

impl CapsuleBody {
    pub fn from_config(cfg: &BodyConfig) -> Result<Self> {
        let mut joints = Vec::with_capacity(cfg.joints.len());
        for (i, j) in cfg.joints.iter().enumerate() {
            let parent = match &j.parent {
                None => None,
                Some(p) => {
                    let idx = cfg.joints[..i]
                        .iter()
                        .position(|q| &q.name == p)
                        .ok_or_else(|| Error::InvalidConfig(format!("joint {} must follow its parent {p}", j.name)))?;
                    Some(idx)
                }
            };
            joints.push(BodyJoint {
                name: j.name.clone(),
                parent,
                offset: Vec3::from(j.offset),
                radius: j.radius,
                noise_deg: j.noise_deg,
            });
        }
        Self::new(joints, Vec3::from(cfg.root_position), cfg.shape_jitter)
    }

    /// Joints must be listed parents-first with a single root at index 0.
    pub fn new(joints: Vec<BodyJoint>, root_position: Vec3, shape_jitter: f64) -> Result<Self> {
        if joints.is_empty() || joints[0].parent.is_some() {
            return Err(Error::InvalidConfig("first joint must be the root".into()));
        }
        for (i, j) in joints.iter().enumerate().skip(1) {
            match j.parent {
                Some(p) if p < i => {}
                _ => return Err(Error::InvalidConfig(format!("joint {} needs an earlier parent", j.name))),
            }
            if !(j.offset.norm() > 0.0) || !(j.radius > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "bone ending at {} needs positive length and radius",
                    j.name
                )));
            }
        }
        if !(0.0..1.0).contains(&shape_jitter) {
            return Err(Error::InvalidConfig("shape jitter must lie in [0, 1)".into()));
        }
        Ok(Self::assemble(joints, root_position, shape_jitter))
    }

    fn assemble(joints: Vec<BodyJoint>, root_position: Vec3, shape_jitter: f64) -> Self {
        let names = joints.iter().map(|j| j.name.clone()).collect();
        let mut limbs = Vec::new();
        let mut limb_joint = Vec::new();
        for (i, j) in joints.iter().enumerate() {
            if let Some(p) = j.parent {
                limbs.push(Limb { parent: i, child: p });
                limb_joint.push(i);
            }
        }
        let topology = SkeletonTopology::new(names, limbs).expect("tree topology is valid");
        Self { joints, root_position, shape_jitter, topology, limb_joint }
    }

    pub fn default_body() -> Self {
        Self::from_config(&BodyConfig::default()).expect("bundled body is valid")
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topology
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    /// Joint whose incoming bone realises `limb`.
    pub fn limb_joint(&self, limb: usize) -> usize {
        self.limb_joint[limb]
    }

    pub fn limb_radius(&self, limb: usize) -> f64 {
        self.joints[self.limb_joint[limb]].radius
    }

    /// Copy with every offset and radius scaled by an independent factor in `1 +- shape_jitter`.
    pub fn jittered<R: Rng>(&self, rng: &mut R) -> Self {
        let j = self.shape_jitter;
        let mut joints = self.joints.clone();
        if j > 0.0 {
            for joint in joints.iter_mut().skip(1) {
                joint.offset *= rng.random_range(1.0 - j..=1.0 + j);
                joint.radius *= rng.random_range(1.0 - j..=1.0 + j);
            }
        }
        Self::assemble(joints, self.root_position, self.shape_jitter)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut joints = self.joints.clone();
        for joint in &mut joints {
            joint.offset *= s;
            joint.radius *= s;
        }
        Self::assemble(joints, self.root_position * s, self.shape_jitter)
    }

    pub fn rest_angles(&self) -> PoseAngles {
        PoseAngles::zeros(self.joints.len())
    }

    /// Largest distance from the root of any capsule surface point at rest, an upper
    /// bound on the body's extent in any pose.
    pub fn reach(&self) -> f64 {
        // chain length from the root plus the bone radius bounds every pose
        let mut reach = vec![0.0; self.joints.len()];
        let mut best: f64 = 0.0;
        for (i, j) in self.joints.iter().enumerate() {
            if let Some(p) = j.parent {
                reach[i] = reach[p] + j.offset.norm();
                best = best.max(reach[i] + j.radius).max(reach[p] + j.radius);
            }
        }
        best
    }
}

/// Per-joint Euler angles in degrees. Entry `j` rotates the bone ending at `j`
/// about its parent joint; the root entry tilts the whole body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseAngles {
    pub angles: Vec<[f64; 3]>,
}

impl PoseAngles {
    pub fn zeros(n: usize) -> Self {
        Self { angles: vec![[0.0; 3]; n] }
    }

    fn rotation(&self, j: usize) -> Rotation3<f64> {
        let [x, y, z] = self.angles[j];
        Rotation3::from_euler_angles(x.to_radians(), y.to_radians(), z.to_radians())
    }
}

/// Rest pose plus independent uniform noise on every angle, bounded per joint.
pub fn sample_end_pose(body: &CapsuleBody, seed: u64) -> PoseAngles {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_end_pose_with(body, &mut rng)
}

pub fn sample_end_pose_with<R: Rng>(body: &CapsuleBody, rng: &mut R) -> PoseAngles {
    let mut pose = body.rest_angles();
    for (a, j) in pose.angles.iter_mut().zip(&body.joints) {
        if j.noise_deg > 0.0 {
            for c in a.iter_mut() {
                *c += rng.random_range(-j.noise_deg..=j.noise_deg);
            }
        }
    }
    pose
}

/// Per-angle linear interpolation, endpoints included.
pub fn interpolate_sequence(start: &PoseAngles, end: &PoseAngles, frames: usize) -> Result<Vec<PoseAngles>> {
    if frames < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 frames, got {frames}")));
    }
    if start.angles.len() != end.angles.len() {
        return Err(Error::ShapeMismatch("start and end poses differ in joint count".into()));
    }
    Ok((0..frames)
        .map(|f| {
            let s = f as f64 / (frames - 1) as f64;
            let angles = start
                .angles
                .iter()
                .zip(&end.angles)
                .map(|(a, b)| {
                    if f == frames - 1 {
                        *b
                    } else {
                        [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), a[2] + s * (b[2] - a[2])]
                    }
                })
                .collect();
            PoseAngles { angles }
        })
        .collect())
}

/// Where the body stands: a ground-level position and a facing angle about +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub translation: Vec3,
    pub yaw_deg: f64,
}

impl Placement {
    pub fn identity() -> Self {
        Self { translation: Vec3::zeros(), yaw_deg: 0.0 }
    }

    fn transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: Rotation3::from_axis_angle(&Vec3::z_axis(), self.yaw_deg.to_radians()),
            translation: self.translation,
        }
    }
}

/// Posed body: keypoints plus, per limb, the transform taking rest-frame capsule
/// coordinates (origin at the bone's parent joint) to world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedBody {
    pub pose: SkeletonPose,
    pub limb_transforms: Vec<RigidTransform>,
}

pub fn forward_kinematics(body: &CapsuleBody, angles: &PoseAngles, placement: &Placement) -> PosedBody {
    let n = body.joints.len();
    assert_eq!(angles.angles.len(), n, "angle count must match the body");
    let world = placement.transform();
    let mut rot = vec![Rotation3::identity(); n];
    let mut pos = vec![Vec3::zeros(); n];
    for (i, j) in body.joints.iter().enumerate() {
        match j.parent {
            None => {
                rot[i] = world.rotation * angles.rotation(i);
                pos[i] = world.apply(&body.root_position);
            }
            Some(p) => {
                rot[i] = rot[p] * angles.rotation(i);
                pos[i] = pos[p] + rot[i] * j.offset;
            }
        }
    }
    let limb_transforms = (0..body.topology.limbs().len())
        .map(|l| {
            let j = body.limb_joint[l];
            let p = body.joints[j].parent.expect("limb joints have parents");
            RigidTransform { rotation: rot[j], translation: pos[p] }
        })
        .collect();
    PosedBody { pose: SkeletonPose { positions: pos }, limb_transforms }
}

/// Rest-frame segment of a limb's capsule: from the origin to the bone offset.
pub fn rest_segment(body: &CapsuleBody, limb: usize) -> (Vec3, Vec3) {
    (Vec3::zeros(), body.joints[body.limb_joint[limb]].offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn chain(l1: f64, l2: f64) -> CapsuleBody {
        let joints = vec![
            BodyJoint { name: "root".into(), parent: None, offset: Vec3::zeros(), radius: 0.0, noise_deg: 0.0 },
            BodyJoint {
                name: "mid".into(),
                parent: Some(0),
                offset: Vec3::new(0.0, 0.0, -l1),
                radius: 0.1,
                noise_deg: 0.0,
            },
            BodyJoint {
                name: "tip".into(),
                parent: Some(1),
                offset: Vec3::new(0.0, 0.0, -l2),
                radius: 0.1,
                noise_deg: 0.0,
            },
        ];
        CapsuleBody::new(joints, Vec3::zeros(), 0.0).unwrap()
    }

    #[test]
    fn default_body_shape() {
        let b = CapsuleBody::default_body();
        assert_eq!(b.num_joints(), 13);
        assert_eq!(b.topology().limbs().len(), 12);
        // every part class belongs to exactly one limb
        let mut parents: Vec<usize> = b.topology().limbs().iter().map(|l| l.parent).collect();
        parents.sort();
        parents.dedup();
        assert_eq!(parents.len(), 12);
    }

    #[test]
    fn rest_pose_chain() {
        let b = chain(0.5, 0.4);
        let posed = forward_kinematics(&b, &b.rest_angles(), &Placement::identity());
        assert_eq!(posed.pose.positions[0], Vec3::zeros());
        assert_abs_diff_eq!(posed.pose.positions[1], Vec3::new(0.0, 0.0, -0.5), epsilon = 1e-15);
        assert_abs_diff_eq!(posed.pose.positions[2], Vec3::new(0.0, 0.0, -0.9), epsilon = 1e-15);
    }

    #[test]
    fn elbow_rotation_moves_end_effector() {
        let b = chain(0.5, 0.4);
        let mut a = b.rest_angles();
        // rotate the second bone 90 degrees about x
        a.angles[2] = [90.0, 0.0, 0.0];
        let posed = forward_kinematics(&b, &a, &Placement::identity());
        // R_x(90) (0, 0, -0.4) = (0, 0.4, 0)
        assert_abs_diff_eq!(posed.pose.positions[2], Vec3::new(0.0, 0.4, -0.5), epsilon = 1e-12);
        // rotating the first bone carries the second one with it
        a.angles[1] = [90.0, 0.0, 0.0];
        let posed = forward_kinematics(&b, &a, &Placement::identity());
        assert_abs_diff_eq!(posed.pose.positions[1], Vec3::new(0.0, 0.5, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(posed.pose.positions[2], Vec3::new(0.0, 0.5, 0.4), epsilon = 1e-12);
    }

    #[test]
    fn zero_lengths_collapse() {
        let mut b = chain(0.5, 0.4);
        for j in &mut b.joints {
            j.offset = Vec3::zeros();
        }
        let posed = forward_kinematics(&b, &b.rest_angles(), &Placement::identity());
        assert!(posed.pose.positions.iter().all(|p| *p == Vec3::zeros()));
    }

    #[test]
    fn limb_transforms_carry_rest_segments() {
        let b = CapsuleBody::default_body();
        let a = sample_end_pose(&b, 7);
        let place = Placement { translation: Vec3::new(8.0, -3.0, -1.8), yaw_deg: 40.0 };
        let posed = forward_kinematics(&b, &a, &place);
        for (l, limb) in b.topology().limbs().iter().enumerate() {
            let (s0, s1) = rest_segment(&b, l);
            let t = &posed.limb_transforms[l];
            // limb parent is the bone's distal joint, child the proximal one
            assert_abs_diff_eq!(t.apply(&s1), posed.pose.positions[limb.parent], epsilon = 1e-12);
            assert_abs_diff_eq!(t.apply(&s0), posed.pose.positions[limb.child], epsilon = 1e-12);
        }
    }

    #[test]
    fn end_pose_noise_bounds() {
        let mut b = CapsuleBody::default_body();
        let elbow = b.topology().joint_index("left_elbow").unwrap();
        for seed in 0..10_000 {
            let a = sample_end_pose(&b, seed);
            assert!(a.angles[elbow].iter().all(|x| x.abs() <= 60.0));
        }
        assert_ne!(sample_end_pose(&b, 1), sample_end_pose(&b, 2));
        for j in &mut b.joints {
            j.noise_deg = 0.0;
        }
        assert_eq!(sample_end_pose(&b, 3), b.rest_angles());
    }

    #[test]
    fn interpolation() {
        let s = PoseAngles { angles: vec![[0.0, 10.0, -4.0]] };
        let e = PoseAngles { angles: vec![[30.0, -10.0, 8.0]] };
        let two = interpolate_sequence(&s, &e, 2).unwrap();
        assert_eq!(two, vec![s.clone(), e.clone()]);
        let three = interpolate_sequence(&s, &e, 3).unwrap();
        assert_eq!(three[1].angles[0], [15.0, 0.0, 2.0]);
        let same = interpolate_sequence(&s, &s, 16).unwrap();
        assert!(same.iter().all(|p| *p == s));
        assert!(interpolate_sequence(&s, &e, 1).is_err());
    }

    #[test]
    fn body_validation() {
        let mut cfg = BodyConfig::default();
        cfg.joints[3].radius = 0.0;
        assert!(CapsuleBody::from_config(&cfg).is_err());
        let mut cfg = BodyConfig::default();
        cfg.joints.swap(1, 2);
        assert!(CapsuleBody::from_config(&cfg).is_err());
    }
}
