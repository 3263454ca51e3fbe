//! Random objective instances and a finite-difference audit of the analytic gradients.
//!
//! Instances are sampled away from the kinks of the objective: points do not
//! sit on a limb axis or near a segment end, and no absolute value in the flow
//! term is evaluated near zero. Central differences are only meaningful there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{segment_parameter, LimbFrame, Vec3};
use crate::grad::{finite_diff_check, objective_gradient, term_gradient, Term};
use crate::losses::{stage2_objective, LossConfig, Sequence};
use crate::skeleton::{PointCloud, SkeletonPose, SoftAssignment};
use crate::synth::{forward_kinematics, CapsuleBody, Placement};

/// Central-difference step used by the audit.
pub const FD_STEP: f64 = 1e-5;
/// Minimum distance of any kink argument from its kink.
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseConfig {
    pub points: usize,
    pub frames: usize,
    /// Soft rows spread over every class instead of one-hot rows.
    pub soft: bool,
    pub kink_margin: f64,
}

impl Default for CaseConfig {
    fn default() -> Self {
        Self { points: 256, frames: 2, soft: false, kink_margin: KINK_MARGIN }
    }
}

#[derive(Debug, Clone)]
pub struct GradCase {
    pub seq: Sequence,
    pub poses: Vec<SkeletonPose>,
}

fn gaussian3<R: Rng>(rng: &mut R, n: &Normal<f64>) -> Vec3 {
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

fn unit_perpendicular<R: Rng>(rng: &mut R, axis: &Vec3) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let q = v - axis * v.dot(axis);
        if q.norm() > 0.1 {
            return q.normalize();
        }
    }
}

/// Samples a sequence on the default 13-joint body with perturbed poses, random
/// flows and one part class per point (or soft rows).
pub fn random_case(seed: u64, cfg: &CaseConfig) -> Result<GradCase> {
    if cfg.frames < 1 || cfg.points == 0 {
        return Err(Error::InvalidConfig("a case needs at least one frame and one point".into()));
    }
    let body = CapsuleBody::default_body();
    let topo = body.topology().clone();
    let limbs = topo.limbs().to_vec();
    let classes = topo.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joint_noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let flow_noise = Normal::new(0.0, 0.03).expect("valid sigma");

    let rest = forward_kinematics(&body, &body.rest_angles(), &Placement::identity()).pose;
    let mut poses = vec![SkeletonPose {
        positions: rest.positions.iter().map(|p| p + gaussian3(&mut rng, &joint_noise)).collect(),
    }];
    for t in 1..cfg.frames {
        let prev = &poses[t - 1];
        poses.push(SkeletonPose {
            positions: prev.positions.iter().map(|p| p + gaussian3(&mut rng, &joint_noise)).collect(),
        });
    }
    let frames: Vec<Vec<LimbFrame>> =
        poses.iter().map(|p| topo.limb_frames(p, cfg.kink_margin)).collect::<Result<_>>()?;

    let mut clouds = Vec::with_capacity(cfg.frames);
    let mut assignments = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut points = Vec::with_capacity(cfg.points);
        let mut fwd = Vec::with_capacity(cfg.points);
        let mut bwd = Vec::with_capacity(cfg.points);
        let mut rows = Vec::with_capacity(cfg.points * classes);
        while points.len() < cfg.points {
            let l = rng.random_range(0..limbs.len());
            let f = &frames[t][l];
            let along = rng.random_range(-0.15..1.15) * f.length;
            let radius = rng.random_range(0.02..0.15);
            let p = f.origin + f.axis * along + unit_perpendicular(&mut rng, &f.axis) * radius;
            let ff = gaussian3(&mut rng, &flow_noise);
            let bf = gaussian3(&mut rng, &flow_noise);
            let mut row = vec![0.0; classes];
            if cfg.soft {
                let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                row.iter_mut().zip(&raw).for_each(|(r, x)| *r = x / s);
            } else {
                row[limbs[l].parent] = 1.0;
            }
            // every limb the row touches must be kink-free for this point
            let touched: Vec<usize> = (0..limbs.len()).filter(|&k| row[limbs[k].parent] > 0.0).collect();
            if touched.iter().all(|&k| clear_of_kinks(&p, &ff, &bf, t, k, &poses, &frames, &limbs, cfg.kink_margin)) {
                points.push(p);
                fwd.push(ff);
                bwd.push(bf);
                rows.extend(row);
            }
        }
        let mut cloud = PointCloud::from_points(points);
        if t + 1 < cfg.frames {
            cloud.forward_flow = Some(fwd);
        }
        if t > 0 {
            cloud.backward_flow = Some(bwd);
        }
        clouds.push(cloud);
        assignments.push(SoftAssignment::new(cfg.points, classes, rows)?);
    }
    Ok(GradCase { seq: Sequence::new(topo, clouds, assignments)?, poses })
}

#[allow(clippy::too_many_arguments)]
fn clear_of_kinks(
    p: &Vec3,
    ff: &Vec3,
    bf: &Vec3,
    t: usize,
    limb: usize,
    poses: &[SkeletonPose],
    frames: &[Vec<LimbFrame>],
    limbs: &[crate::skeleton::Limb],
    m: f64,
) -> bool {
    let f = &frames[t][limb];
    let c = f.coords(p);
    if c.r < m {
        return false;
    }
    let (ya, yb) = (poses[t].positions[limbs[limb].parent], poses[t].positions[limbs[limb].child]);
    if let Some(s) = segment_parameter(p, &ya, &yb) {
        if s.abs() * f.length < m || (s - 1.0).abs() * f.length < m {
            return false;
        }
    }
    // flow residuals against the neighbouring frames
    let check = |other: &LimbFrame, moved: Vec3| {
        let d = other.coords(&moved);
        (d.z - c.z).abs() >= m && (d.r - c.r).abs() >= m && d.r >= m
    };
    if t + 1 < frames.len() && !check(&frames[t + 1][limb], p + ff) {
        return false;
    }
    if t > 0 && !check(&frames[t - 1][limb], p + bf) {
        return false;
    }
    true
}

/// Audit result for one instance: relative error per term and for the weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub terms: Vec<(&'static str, f64)>,
    pub combined: f64,
}

impl CaseReport {
    pub fn max_error(&self) -> f64 {
        self.terms.iter().map(|(_, e)| *e).fold(self.combined, f64::max)
    }
}

/// Compares every term's analytic gradient, and the stage-2 combination, with
/// central differences at `step`.
pub fn check_case(case: &GradCase, cfg: &LossConfig, step: f64) -> Result<CaseReport> {
    let mut terms = Vec::with_capacity(Term::ALL.len());
    for term in Term::ALL {
        let iso = term.isolate(cfg);
        let (_, g) = term_gradient(&case.seq, &case.poses, cfg, term)?;
        let f = |ps: &[SkeletonPose]| stage2_objective(&case.seq, ps, &iso).map(|b| b.total).unwrap_or(f64::NAN);
        terms.push((term.name(), finite_diff_check(f, &g, &case.poses, step)));
    }
    let (_, g) = objective_gradient(&case.seq, &case.poses, cfg)?;
    let f = |ps: &[SkeletonPose]| stage2_objective(&case.seq, ps, cfg).map(|b| b.total).unwrap_or(f64::NAN);
    let combined = finite_diff_check(f, &g, &case.poses, step);
    Ok(CaseReport { terms, combined })
}
