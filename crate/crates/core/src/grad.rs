//! Analytic pose gradients of the Stage-II objective and a finite-difference verifier.

use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::Vec3;
use crate::losses::{self, combine, LossBreakdown, LossConfig, Sequence};
use crate::skeleton::SkeletonPose;

/// Per-frame, per-joint partial derivatives of a scalar objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub frames: Vec<Vec<Vec3>>,
}

impl Gradient {
    pub fn zeros(frames: usize, joints: usize) -> Self {
        Self { frames: vec![vec![Vec3::zeros(); joints]; frames] }
    }

    pub fn like(poses: &[SkeletonPose]) -> Self {
        Self { frames: poses.iter().map(|p| vec![Vec3::zeros(); p.len()]).collect() }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().flatten().flat_map(|v| v.iter().copied())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn add_scaled(&mut self, other: &Gradient, s: f64) {
        for (a, b) in self.frames.iter_mut().zip(&other.frames) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y * s;
            }
        }
    }
}

/// Pose-dependent terms of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Flow,
    P2l,
    Sym,
    J2p,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Flow, Term::P2l, Term::Sym, Term::J2p];

    pub fn name(self) -> &'static str {
        match self {
            Term::Flow => "flow",
            Term::P2l => "p2l",
            Term::Sym => "sym",
            Term::J2p => "j2p",
        }
    }

    /// `cfg` with this term's weight set to one and every other weight zero.
    pub fn isolate(self, cfg: &LossConfig) -> LossConfig {
        let mut c = cfg.zero_weights();
        match self {
            Term::Flow => c.flow = 1.0,
            Term::P2l => c.p2l = 1.0,
            Term::Sym => c.sym = 1.0,
            Term::J2p => c.j2p = 1.0,
        }
        c
    }
}

/// Objective value and its exact gradient with respect to every frame's pose.
///
/// The segmentation term is reported but contributes nothing to the gradient.
/// Each frame receives flow contributions from both adjacent pairs.
pub fn objective_gradient(
    seq: &Sequence,
    poses: &[SkeletonPose],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradient)> {
    seq.check_poses(poses)?;
    let frames = seq.frames();
    let joints = seq.topology.num_joints();
    let mut grad = Gradient::zeros(frames, joints);
    if frames == 0 {
        return Ok((LossBreakdown::default(), grad));
    }

    let per_frame: Vec<([f64; 4], [Vec<Vec3>; 3])> = (0..frames)
        .into_par_iter()
        .map(|t| {
            let (cloud, w, topo) = (&seq.clouds[t], &seq.assignments[t], &seq.topology);
            let pose = &poses[t];
            let mut g = [vec![Vec3::zeros(); joints], vec![Vec3::zeros(); joints], vec![Vec3::zeros(); joints]];
            let [gp, gs, gj] = &mut g;
            let p2l = losses::p2l_term(cloud, w, pose, topo, cfg, (cfg.p2l != 0.0).then_some(gp.as_mut_slice()))?;
            let sym = losses::sym_term(cloud, w, pose, topo, cfg, (cfg.sym != 0.0).then_some(gs.as_mut_slice()))?;
            let j2p = losses::j2p_term(cloud, w, pose, cfg, (cfg.j2p != 0.0).then_some(gj.as_mut_slice()))?.value;
            let seg = losses::seg_self_entropy(cloud, w, cfg.eps_prob)?;
            Ok(([p2l, sym, j2p, seg], g))
        })
        .collect::<Result<_>>()?;

    let pairs = frames - 1;
    let flows: Vec<(f64, Vec<Vec3>, Vec<Vec3>)> = (0..pairs)
        .into_par_iter()
        .map(|t| {
            let mut g0 = vec![Vec3::zeros(); joints];
            let mut g1 = vec![Vec3::zeros(); joints];
            let sink = (cfg.flow != 0.0).then_some((g0.as_mut_slice(), g1.as_mut_slice()));
            let v = losses::flow_term(&seq.pair(t, poses), &seq.topology, cfg, sink)?;
            Ok((v, g0, g1))
        })
        .collect::<Result<_>>()?;

    let frame_scale = 1.0 / frames as f64;
    for (t, (_, [gp, gs, gj])) in per_frame.iter().enumerate() {
        for (j, out) in grad.frames[t].iter_mut().enumerate() {
            *out += (gp[j] * cfg.p2l + gs[j] * cfg.sym + gj[j] * cfg.j2p) * frame_scale;
        }
    }
    if pairs > 0 {
        let pair_scale = cfg.flow / pairs as f64;
        for (t, (_, g0, g1)) in flows.iter().enumerate() {
            for j in 0..joints {
                grad.frames[t][j] += g0[j] * pair_scale;
                grad.frames[t + 1][j] += g1[j] * pair_scale;
            }
        }
    }

    let values: Vec<[f64; 4]> = per_frame.iter().map(|(v, _)| *v).collect();
    let flow_values: Vec<f64> = flows.iter().map(|(v, _, _)| *v).collect();
    Ok((combine(&values, &flow_values, cfg), grad))
}

/// Gradient of a single term, unweighted.
pub fn term_gradient(seq: &Sequence, poses: &[SkeletonPose], cfg: &LossConfig, term: Term) -> Result<(f64, Gradient)> {
    let (b, g) = objective_gradient(seq, poses, &term.isolate(cfg))?;
    Ok((b.total, g))
}

/// Central-difference estimate of the gradient of `objective` at `poses`.
pub fn numeric_gradient<F>(objective: F, poses: &[SkeletonPose], step: f64) -> Gradient
where
    F: Fn(&[SkeletonPose]) -> f64,
{
    let mut work = poses.to_vec();
    let mut out = Gradient::like(poses);
    for t in 0..poses.len() {
        for j in 0..poses[t].len() {
            for k in 0..3 {
                let x0 = work[t].positions[j][k];
                work[t].positions[j][k] = x0 + step;
                let fp = objective(&work);
                work[t].positions[j][k] = x0 - step;
                let fm = objective(&work);
                work[t].positions[j][k] = x0;
                out.frames[t][j][k] = (fp - fm) / (2.0 * step);
            }
        }
    }
    out
}

/// Largest coordinate error relative to the gradient's scale:
/// `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-8)`.
///
/// Normalising by the largest entry rather than per coordinate keeps
/// near-zero components, where central differences only see round-off, from
/// dominating the measure.
pub fn max_relative_error(analytic: &Gradient, numeric: &Gradient) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-8);
    analytic.iter().zip(numeric.iter()).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

/// Compares an analytic gradient against central differences of `objective`.
pub fn finite_diff_check<F>(objective: F, analytic: &Gradient, poses: &[SkeletonPose], step: f64) -> f64
where
    F: Fn(&[SkeletonPose]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    max_relative_error(analytic, &numeric_gradient(objective, poses, step))
}
