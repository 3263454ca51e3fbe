//! Keypoint metrics, the assignment solver and the perturbation-recovery harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::losses::{LossConfig, Sequence};
use crate::optim::{fit_sequence, OptimConfig};
use crate::skeleton::SkeletonPose;

/// Per-joint visibility flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityMask(pub Vec<bool>);

impl VisibilityMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn visible(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &v)| v).map(|(j, _)| j)
    }
}

/// A perfect matching: row `i` is paired with column `cols[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub cols: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cols.iter().copied().enumerate()
    }
}

/// Minimum-cost perfect matching on a square matrix given as rows.
///
/// Shortest augmenting paths with row and column potentials, O(n³). Rows are
/// inserted in increasing order and the first minimal column wins, so ties
/// resolve the same way on every call.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if let Some(r) = cost.iter().find(|r| r.len() != n) {
        return Err(Error::NonSquare { rows: n, cols: r.len() });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::ShapeMismatch("cost matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Assignment { cols: Vec::new(), cost: 0.0 });
    }
    // 1-based arrays; column 0 is a virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=n {
        cols[p[j] - 1] = j - 1;
    }
    let total = cols.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Assignment { cols, cost: total })
}

fn check_shapes(pred: &SkeletonPose, gt: &SkeletonPose, v: &VisibilityMask) -> Result<()> {
    if pred.len() != gt.len() || v.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("pred has {} joints, gt {}, mask {}", pred.len(), gt.len(), v.len())));
    }
    if v.count() == 0 {
        return Err(Error::NoVisibleJoints);
    }
    Ok(())
}

/// Mean Euclidean error over visible joints, in meters.
pub fn mpjpe(pred: &SkeletonPose, gt: &SkeletonPose, v: &VisibilityMask) -> Result<f64> {
    check_shapes(pred, gt, v)?;
    let sum: f64 = v.visible().map(|j| (pred.positions[j] - gt.positions[j]).norm()).sum();
    Ok(sum / v.count() as f64)
}

/// MPJPE after optimally pairing predictions with the visible ground-truth joints.
///
/// Invisible ground-truth joints take no part in the matching.
pub fn matched_mpjpe(pred: &SkeletonPose, gt: &SkeletonPose, v: &VisibilityMask) -> Result<f64> {
    check_shapes(pred, gt, v)?;
    let vis: Vec<usize> = v.visible().collect();
    let n = pred.len();
    // pad with free rows so every prediction can be left unmatched
    let mut cost = vec![vec![0.0; n]; n];
    for (r, &j) in vis.iter().enumerate() {
        for (k, p) in pred.positions.iter().enumerate() {
            cost[r][k] = (p - gt.positions[j]).norm();
        }
    }
    let a = hungarian(&cost)?;
    let sum: f64 = (0..vis.len()).map(|r| cost[r][a.cols[r]]).sum();
    Ok(sum / vis.len() as f64)
}

/// Per-frame error over a whole sequence, in parallel.
pub fn evaluate_frames(
    pred: &[SkeletonPose],
    gt: &[SkeletonPose],
    vis: &[VisibilityMask],
    matched: bool,
) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::FrameCountMismatch(pred.len(), gt.len()));
    }
    if vis.len() != gt.len() {
        return Err(Error::FrameCountMismatch(vis.len(), gt.len()));
    }
    (0..pred.len())
        .into_par_iter()
        .map(|t| if matched { matched_mpjpe(&pred[t], &gt[t], &vis[t]) } else { mpjpe(&pred[t], &gt[t], &vis[t]) })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    /// Standard deviation of the isotropic keypoint noise, meters.
    pub sigma: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub optim: OptimConfig,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { sigma: 0.06, seed: 0, loss: LossConfig::supplementary(), optim: OptimConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub initial_mpjpe: f64,
    pub final_mpjpe: f64,
    pub initial_matched_mpjpe: f64,
    pub final_matched_mpjpe: f64,
    /// Total objective at every iterate.
    pub loss_trace: Vec<f64>,
}

impl PerturbReport {
    /// Relative reduction of the matched error, in percent.
    pub fn reduction_percent(&self) -> f64 {
        if self.initial_matched_mpjpe == 0.0 {
            return 0.0;
        }
        100.0 * (self.initial_matched_mpjpe - self.final_matched_mpjpe) / self.initial_matched_mpjpe
    }

    pub fn improved(&self) -> bool {
        self.final_matched_mpjpe < self.initial_matched_mpjpe
    }
}

/// Adds seeded isotropic Gaussian noise to every keypoint.
pub fn perturb_poses(poses: &[SkeletonPose], sigma: f64, seed: u64) -> Result<Vec<SkeletonPose>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(poses.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(poses
        .iter()
        .map(|p| SkeletonPose {
            positions: p
                .positions
                .iter()
                .map(|y| y + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
                .collect(),
        })
        .collect())
}

/// Perturbs the ground-truth poses, refits them and reports the error before and after.
pub fn perturb_recovery(
    seq: &Sequence,
    gt: &[SkeletonPose],
    vis: &[VisibilityMask],
    cfg: &PerturbConfig,
) -> Result<PerturbReport> {
    if gt.len() != seq.frames() {
        return Err(Error::FrameCountMismatch(gt.len(), seq.frames()));
    }
    let start = perturb_poses(gt, cfg.sigma, cfg.seed)?;
    let fit = fit_sequence(seq, &start, &cfg.loss, &cfg.optim)?;
    Ok(PerturbReport {
        initial_mpjpe: mean(&evaluate_frames(&start, gt, vis, false)?),
        final_mpjpe: mean(&evaluate_frames(&fit.poses, gt, vis, false)?),
        initial_matched_mpjpe: mean(&evaluate_frames(&start, gt, vis, true)?),
        final_matched_mpjpe: mean(&evaluate_frames(&fit.poses, gt, vis, true)?),
        loss_trace: fit.trace.iter().map(|b| b.total).collect(),
    })
}
