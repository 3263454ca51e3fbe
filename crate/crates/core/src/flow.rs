//! Scene flow providers: exact synthetic flow and two estimators for data without it.

use nalgebra::{Matrix3, Rotation3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::skeleton::PointCloud;
use crate::synth::{exact_flow, Frame};

/// Forward flow of frame t and backward flow of frame t+1.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub forward: Vec<Vec3>,
    pub backward: Vec<Vec3>,
}

impl FlowField {
    pub fn is_finite(&self) -> bool {
        self.forward.iter().chain(&self.backward).all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Stores the field on the two clouds it was computed for.
    pub fn attach(self, cloud_t: &mut PointCloud, cloud_t1: &mut PointCloud) -> Result<()> {
        if self.forward.len() != cloud_t.len() || self.backward.len() != cloud_t1.len() {
            return Err(Error::ShapeMismatch(format!(
                "flow sized {}/{} for clouds of {}/{} points",
                self.forward.len(),
                self.backward.len(),
                cloud_t.len(),
                cloud_t1.len()
            )));
        }
        cloud_t.forward_flow = Some(self.forward);
        cloud_t1.backward_flow = Some(self.backward);
        Ok(())
    }
}

/// Exact flow from the limb attachments of two synthetic frames.
pub fn gt_flow_provider(t: &Frame, t1: &Frame) -> Result<FlowField> {
    Ok(FlowField {
        forward: exact_flow(t.cloud.attachment.as_deref(), &t.limb_transforms, &t1.limb_transforms)?,
        backward: exact_flow(t1.cloud.attachment.as_deref(), &t1.limb_transforms, &t.limb_transforms)?,
    })
}

fn nearest(p: &Vec3, pts: &[Vec3]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, q) in pts.iter().enumerate() {
        let d = (q - p).norm_squared();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn nn_displacements(from: &[Vec3], to: &[Vec3]) -> Vec<Vec3> {
    from.par_iter().map(|p| to[nearest(p, to)] - p).collect()
}

/// Flow to the nearest neighbour in the other frame, in both directions.
pub fn nn_flow(cloud_t: &PointCloud, cloud_t1: &PointCloud) -> Result<FlowField> {
    if cloud_t.is_empty() || cloud_t1.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(FlowField {
        forward: nn_displacements(&cloud_t.points, &cloud_t1.points),
        backward: nn_displacements(&cloud_t1.points, &cloud_t.points),
    })
}

/// Rigid motion mapping `src` onto `dst`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vec3::zeros() }
    }

    pub fn translation(t: Vec3) -> Self {
        Self { rotation: Rotation3::identity(), translation: t }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self { rotation: r, translation: -(r * self.translation) }
    }
}

fn centroid(pts: &[Vec3]) -> Vec3 {
    pts.iter().sum::<Vec3>() / pts.len() as f64
}

/// Least-squares rotation and translation with `dst[i] ≈ R src[i] + t`.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Result<RigidMotion> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!("{} source and {} target points", src.len(), dst.len())));
    }
    if src.is_empty() {
        return Err(Error::EmptySet);
    }
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v_t"));
    let v = v_t.transpose();
    // reflection guard
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = Rotation3::from_matrix_unchecked(r);
    Ok(RigidMotion { rotation, translation: cd - rotation * cs })
}

const ICP_ITERS: usize = 50;
const ICP_TOL: f64 = 1e-12;

/// Iterative closest point from a centroid-aligned start.
///
/// Fewer than three points on either side gives translation only.
pub fn icp(src: &[Vec3], dst: &[Vec3]) -> RigidMotion {
    if src.is_empty() || dst.is_empty() {
        return RigidMotion::identity();
    }
    let mut m = RigidMotion::translation(centroid(dst) - centroid(src));
    if src.len() < 3 || dst.len() < 3 {
        return m;
    }
    let mut prev = f64::INFINITY;
    for _ in 0..ICP_ITERS {
        let moved: Vec<Vec3> = src.iter().map(|p| m.apply(p)).collect();
        let matched: Vec<Vec3> = moved.iter().map(|p| dst[nearest(p, dst)]).collect();
        let err: f64 = moved.iter().zip(&matched).map(|(a, b)| (a - b).norm_squared()).sum();
        let Ok(next) = kabsch(src, &matched) else { break };
        m = next;
        if prev - err <= ICP_TOL * (1.0 + err) {
            break;
        }
        prev = err;
    }
    m
}

fn class_members(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// Flow from one rigid motion per part class, estimated by ICP between frames.
pub fn rigid_part_flow(
    cloud_t: &PointCloud,
    labels_t: &[usize],
    cloud_t1: &PointCloud,
    labels_t1: &[usize],
) -> Result<FlowField> {
    if labels_t.len() != cloud_t.len() || labels_t1.len() != cloud_t1.len() {
        return Err(Error::ShapeMismatch("one label per point required".into()));
    }
    let classes = labels_t.iter().chain(labels_t1).max().map_or(0, |m| m + 1);
    let (mt, mt1) = (class_members(labels_t, classes), class_members(labels_t1, classes));
    let motions: Vec<RigidMotion> = (0..classes)
        .into_par_iter()
        .map(|c| {
            let a: Vec<Vec3> = mt[c].iter().map(|&i| cloud_t.points[i]).collect();
            let b: Vec<Vec3> = mt1[c].iter().map(|&i| cloud_t1.points[i]).collect();
            icp(&a, &b)
        })
        .collect();
    let flow = |cloud: &PointCloud, labels: &[usize], inverse: bool| -> Vec<Vec3> {
        cloud
            .points
            .iter()
            .zip(labels)
            .map(|(p, &l)| {
                let m = if inverse { motions[l].inverse() } else { motions[l] };
                m.apply(p) - p
            })
            .collect()
    };
    Ok(FlowField { forward: flow(cloud_t, labels_t, false), backward: flow(cloud_t1, labels_t1, true) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sequence, CapsuleBody, SynthConfig};
    use nalgebra::Unit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
    }

    fn min_spacing(pts: &[Vec3]) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..pts.len() {
            for j in 0..i {
                m = m.min((pts[i] - pts[j]).norm());
            }
        }
        m
    }

    #[test]
    fn nn_identical_and_shifted() {
        let pts = random_points(60, 1);
        let c = PointCloud::from_points(pts.clone());
        let f = nn_flow(&c, &c).unwrap();
        assert!(f.forward.iter().chain(&f.backward).all(|v| v.norm() == 0.0));

        let v = Vec3::new(1.0, -1.0, 0.5).normalize() * (0.45 * min_spacing(&pts));
        let shifted = PointCloud::from_points(pts.iter().map(|p| p + v).collect());
        let f = nn_flow(&c, &shifted).unwrap();
        assert!(f.forward.iter().all(|u| (u - v).norm() <= 1e-12));
        assert!(f.backward.iter().all(|u| (u + v).norm() <= 1e-12));

        let a = PointCloud::from_points(vec![Vec3::new(1.0, 2.0, 3.0)]);
        let b = PointCloud::from_points(vec![Vec3::new(0.0, 2.0, 5.0)]);
        assert_eq!(nn_flow(&a, &b).unwrap().forward[0], Vec3::new(-1.0, 0.0, 2.0));
        assert!(matches!(nn_flow(&a, &PointCloud::default()), Err(Error::EmptyCloud)));
    }

    #[test]
    fn kabsch_recovers_known_rotation() {
        let src = random_points(10, 2);
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::new(0.3, -1.0, 0.4)), 1.1);
        let c = centroid(&src);
        let dst: Vec<Vec3> = src.iter().map(|p| c + r * (p - c)).collect();
        let m = kabsch(&src, &dst).unwrap();
        assert!((m.rotation.matrix() - r.matrix()).norm() <= 1e-6);
        assert!(dst.iter().zip(&src).all(|(d, s)| (m.apply(s) - d).norm() <= 1e-9));
    }

    #[test]
    fn per_part_translation_is_exact() {
        let a = random_points(10, 3);
        let b: Vec<Vec3> = random_points(10, 4).iter().map(|p| p + Vec3::new(3.0, 0.0, 0.0)).collect();
        let (ta, tb) = (Vec3::new(0.05, 0.0, -0.02), Vec3::new(-0.01, 0.03, 0.0));
        let pts_t: Vec<Vec3> = a.iter().chain(&b).copied().collect();
        let pts_t1: Vec<Vec3> = a.iter().map(|p| p + ta).chain(b.iter().map(|p| p + tb)).collect();
        let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let f = rigid_part_flow(&PointCloud::from_points(pts_t), &labels, &PointCloud::from_points(pts_t1), &labels)
            .unwrap();
        for i in 0..20 {
            let want = if i < 10 { ta } else { tb };
            assert!((f.forward[i] - want).norm() <= 1e-9);
            assert!((f.backward[i] + want).norm() <= 1e-9);
        }
    }

    #[test]
    fn identity_motion_is_zero_and_small_parts_fall_back() {
        let pts = random_points(12, 5);
        let c = PointCloud::from_points(pts.clone());
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let f = rigid_part_flow(&c, &labels, &c, &labels).unwrap();
        assert!(f.forward.iter().all(|v| v.norm() <= 1e-9));

        // two points: translation only; class absent in t+1: zero
        let a = PointCloud::from_points(vec![Vec3::zeros(), Vec3::x(), Vec3::new(5.0, 5.0, 5.0)]);
        let b = PointCloud::from_points(vec![Vec3::y(), Vec3::new(1.0, 1.0, 0.0)]);
        let f = rigid_part_flow(&a, &[0, 0, 1], &b, &[0, 0]).unwrap();
        assert!((f.forward[0] - Vec3::y()).norm() <= 1e-12);
        assert_eq!(f.forward[2], Vec3::zeros());
    }

    #[test]
    fn gt_provider_matches_stored_flow() {
        let s = generate_sequence(&CapsuleBody::default_body(), &SynthConfig { frames: 3, ..Default::default() }, 9, 1)
            .unwrap();
        let f = gt_flow_provider(&s.frames[0], &s.frames[1]).unwrap();
        assert_eq!(Some(&f.forward), s.frames[0].cloud.forward_flow.as_ref());
        assert_eq!(Some(&f.backward), s.frames[1].cloud.backward_flow.as_ref());
        assert!(f.is_finite());
        let mut bare = s.frames[0].clone();
        bare.cloud.attachment = None;
        assert!(matches!(gt_flow_provider(&bare, &s.frames[1]), Err(Error::MissingAttachment)));
    }
}
