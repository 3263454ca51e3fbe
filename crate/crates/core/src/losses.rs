//! Loss terms over point clouds, part assignments and keypoint poses.
//!
//! Every term is written once with an optional gradient sink so that the value
//! and its analytic pose gradient cannot drift apart. The gradients are
//! checked against central differences of the value-only path in [`crate::grad`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{kernel_unchecked, point_segment_distance_grad, LimbCoords, LimbCoordsGrad, LimbFrame, Vec3};
use crate::skeleton::{PointCloud, SkeletonPose, SkeletonTopology, SoftAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub flow: f64,
    pub p2l: f64,
    pub sym: f64,
    pub j2p: f64,
    pub seg: f64,
    pub kp: f64,
    /// Kernel bandwidth of the symmetry term, in meters.
    pub bandwidth: f64,
    pub eps_len: f64,
    pub eps_denom: f64,
    pub eps_prob: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::stage2()
    }
}

impl LossConfig {
    /// Stage-II network training weights.
    pub fn stage2() -> Self {
        Self {
            flow: 0.02,
            p2l: 0.01,
            sym: 0.5,
            j2p: 2.0,
            seg: 0.5,
            kp: 0.0,
            bandwidth: 0.1,
            eps_len: 1e-9,
            eps_denom: 1e-12,
            eps_prob: 1e-12,
        }
    }

    /// Weights of the perturbed-skeleton demo: flow, points-to-limb and symmetry only.
    pub fn supplementary() -> Self {
        Self { flow: 0.2, p2l: 0.1, sym: 5.0, j2p: 0.0, seg: 0.0, ..Self::stage2() }
    }

    /// Synthetic warm-up weights (keypoint L2 and segmentation cross entropy).
    pub fn stage1() -> Self {
        Self { flow: 0.0, p2l: 0.0, sym: 0.0, j2p: 0.0, seg: 1.0, kp: 0.5, ..Self::stage2() }
    }

    pub fn zero_weights(&self) -> Self {
        Self { flow: 0.0, p2l: 0.0, sym: 0.0, j2p: 0.0, seg: 0.0, kp: 0.0, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.flow, self.p2l, self.sym, self.j2p, self.seg, self.kp];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::InvalidBandwidth(self.bandwidth));
        }
        if !(self.eps_len >= 0.0 && self.eps_denom >= 0.0 && self.eps_prob > 0.0) {
            return Err(Error::InvalidConfig("numeric guards must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-term values and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub flow: f64,
    pub p2l: f64,
    pub sym: f64,
    pub j2p: f64,
    pub seg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(flow: f64, p2l: f64, sym: f64, j2p: f64, seg: f64, cfg: &LossConfig) -> Self {
        let total = cfg.flow * flow + cfg.p2l * p2l + cfg.sym * sym + cfg.j2p * j2p + cfg.seg * seg;
        Self { flow, p2l, sym, j2p, seg, total }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("flow", self.flow),
            ("p2l", self.p2l),
            ("sym", self.sym),
            ("j2p", self.j2p),
            ("seg", self.seg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Two consecutive frames with their assignments and poses.
#[derive(Debug, Clone, Copy)]
pub struct FramePair<'a> {
    pub cloud_t: &'a PointCloud,
    pub cloud_t1: &'a PointCloud,
    pub w_t: &'a SoftAssignment,
    pub w_t1: &'a SoftAssignment,
    pub pose_t: &'a SkeletonPose,
    pub pose_t1: &'a SkeletonPose,
}

fn check_assignment(cloud: &PointCloud, w: &SoftAssignment, topo: &SkeletonTopology) -> Result<()> {
    if w.rows() != cloud.len() || w.classes() != topo.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "assignment is {}x{}, cloud has {} points and topology {} classes",
            w.rows(),
            w.classes(),
            cloud.len(),
            topo.num_classes()
        )));
    }
    Ok(())
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn coords_maybe_grad(frame: &LimbFrame, p: &Vec3, want: bool) -> (LimbCoords, LimbCoordsGrad) {
    if want {
        frame.coords_grad(p)
    } else {
        let z = Vec3::zeros();
        (frame.coords(p), LimbCoordsGrad { dz_da: z, dz_db: z, dr_da: z, dr_db: z })
    }
}

/// One direction of the flow term for one limb: points of `src` moved by `flow`
/// into the limb frame of the other timestamp.
#[allow(clippy::too_many_arguments)]
fn directional_flow(
    src: &PointCloud,
    flow: &[Vec3],
    w: &SoftAssignment,
    class: usize,
    frame_src: &LimbFrame,
    frame_dst: &LimbFrame,
    scale: f64,
    mut grad: Option<(&mut [Vec3; 2], &mut [Vec3; 2])>,
) -> f64 {
    let n = src.valid_count();
    if n == 0 {
        return 0.0;
    }
    let want = grad.is_some();
    let mut sum = 0.0;
    for i in src.valid_indices() {
        let wi = w.get(i, class);
        if wi == 0.0 {
            continue;
        }
        let p = src.points[i];
        let q = p + flow[i];
        let (c0, g0) = coords_maybe_grad(frame_src, &p, want);
        let (c1, g1) = coords_maybe_grad(frame_dst, &q, want);
        let dr = c1.r - c0.r;
        let dz = c1.z - c0.z;
        sum += wi * (dr.abs() + dz.abs());
        if let Some((gs, gd)) = grad.as_mut() {
            let k = scale * wi / n as f64;
            let (sr, sz) = (sign(dr), sign(dz));
            gd[0] += (g1.dr_da * sr + g1.dz_da * sz) * k;
            gd[1] += (g1.dr_db * sr + g1.dz_db * sz) * k;
            gs[0] -= (g0.dr_da * sr + g0.dz_da * sz) * k;
            gs[1] -= (g0.dr_db * sr + g0.dz_db * sz) * k;
        }
    }
    sum / n as f64
}

pub(crate) fn flow_term(
    pair: &FramePair<'_>,
    topo: &SkeletonTopology,
    cfg: &LossConfig,
    mut grad: Option<(&mut [Vec3], &mut [Vec3])>,
) -> Result<f64> {
    let fwd = pair.cloud_t.forward_flow.as_deref().ok_or(Error::MissingFlow("forward"))?;
    let bwd = pair.cloud_t1.backward_flow.as_deref().ok_or(Error::MissingFlow("backward"))?;
    check_assignment(pair.cloud_t, pair.w_t, topo)?;
    check_assignment(pair.cloud_t1, pair.w_t1, topo)?;
    pair.pose_t.check_against(topo)?;
    pair.pose_t1.check_against(topo)?;
    let limbs = topo.limbs();
    if limbs.is_empty() {
        return Ok(0.0);
    }
    let frames_t = topo.limb_frames(pair.pose_t, cfg.eps_len)?;
    let frames_t1 = topo.limb_frames(pair.pose_t1, cfg.eps_len)?;
    // d total / d (ff or bf) for one limb
    let scale = 0.5 / limbs.len() as f64;

    let mut total = 0.0;
    for (li, limb) in limbs.iter().enumerate() {
        let class = limb.parent;
        let (ff, bf) = match grad.as_mut() {
            Some((gt, gt1)) => {
                let mut acc_t = [Vec3::zeros(); 2];
                let mut acc_t1 = [Vec3::zeros(); 2];
                let ff = directional_flow(
                    pair.cloud_t,
                    fwd,
                    pair.w_t,
                    class,
                    &frames_t[li],
                    &frames_t1[li],
                    scale,
                    Some((&mut acc_t, &mut acc_t1)),
                );
                let bf = directional_flow(
                    pair.cloud_t1,
                    bwd,
                    pair.w_t1,
                    class,
                    &frames_t1[li],
                    &frames_t[li],
                    scale,
                    Some((&mut acc_t1, &mut acc_t)),
                );
                gt[limb.parent] += acc_t[0];
                gt[limb.child] += acc_t[1];
                gt1[limb.parent] += acc_t1[0];
                gt1[limb.child] += acc_t1[1];
                (ff, bf)
            }
            None => (
                directional_flow(pair.cloud_t, fwd, pair.w_t, class, &frames_t[li], &frames_t1[li], scale, None),
                directional_flow(pair.cloud_t1, bwd, pair.w_t1, class, &frames_t1[li], &frames_t[li], scale, None),
            ),
        };
        total += 0.5 * (ff + bf);
    }
    Ok(total / limbs.len() as f64)
}

/// Rigid-motion consistency of limb-local coordinates across two frames.
pub fn flow_loss(pair: &FramePair<'_>, topo: &SkeletonTopology, cfg: &LossConfig) -> Result<f64> {
    flow_term(pair, topo, cfg, None)
}

pub(crate) fn p2l_term(
    cloud: &PointCloud,
    w: &SoftAssignment,
    pose: &SkeletonPose,
    topo: &SkeletonTopology,
    cfg: &LossConfig,
    mut grad: Option<&mut [Vec3]>,
) -> Result<f64> {
    check_assignment(cloud, w, topo)?;
    pose.check_against(topo)?;
    let limbs = topo.limbs();
    // degenerate limbs are an error here too, for parity with the other terms
    topo.limb_frames(pose, cfg.eps_len)?;
    let n = cloud.valid_count();
    if limbs.is_empty() || n == 0 {
        return Ok(0.0);
    }
    let scale = 1.0 / (n as f64 * limbs.len() as f64);
    let mut total = 0.0;
    for limb in limbs {
        let (ya, yb) = (pose.positions[limb.parent], pose.positions[limb.child]);
        let mut sum = 0.0;
        let (mut ga, mut gb) = (Vec3::zeros(), Vec3::zeros());
        for i in cloud.valid_indices() {
            let wi = w.get(i, limb.parent);
            if wi == 0.0 {
                continue;
            }
            let (d, da, db) = point_segment_distance_grad(&cloud.points[i], &ya, &yb);
            sum += wi * d;
            ga += da * wi;
            gb += db * wi;
        }
        total += sum;
        if let Some(g) = grad.as_mut() {
            g[limb.parent] += ga * scale;
            g[limb.child] += gb * scale;
        }
    }
    Ok(total * scale)
}

/// Weighted mean distance of part points to their limb segment.
pub fn p2l_loss(
    cloud: &PointCloud,
    w: &SoftAssignment,
    pose: &SkeletonPose,
    topo: &SkeletonTopology,
    cfg: &LossConfig,
) -> Result<f64> {
    p2l_term(cloud, w, pose, topo, cfg, None)
}

/// Sparse part rows, used for the similarity dot products of the symmetry term.
struct PartRows {
    /// Nonzero `(class, weight)` entries over part columns, per point.
    entries: Vec<Vec<(usize, f64)>>,
    /// Valid points with a nonzero weight, per part class.
    support: Vec<Vec<usize>>,
    all_valid: Vec<usize>,
}

impl PartRows {
    fn new(cloud: &PointCloud, w: &SoftAssignment, parts: usize) -> Self {
        let mut entries = vec![Vec::new(); cloud.len()];
        let mut support = vec![Vec::new(); parts];
        let all_valid: Vec<usize> = cloud.valid_indices().collect();
        for &i in &all_valid {
            for (k, &wk) in w.row(i)[..parts].iter().enumerate() {
                if wk > 0.0 {
                    entries[i].push((k, wk));
                    support[k].push(i);
                }
            }
        }
        Self { entries, support, all_valid }
    }

    fn similarity(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.entries[i], &self.entries[j]);
        let (mut x, mut y, mut s) = (0, 0, 0.0);
        while x < a.len() && y < b.len() {
            match a[x].0.cmp(&b[y].0) {
                std::cmp::Ordering::Less => x += 1,
                std::cmp::Ordering::Greater => y += 1,
                std::cmp::Ordering::Equal => {
                    s += a[x].1 * b[y].1;
                    x += 1;
                    y += 1;
                }
            }
        }
        s
    }

    /// Points that can have a nonzero similarity with `i`.
    fn candidates(&self, i: usize) -> &[usize] {
        self.candidate_set(self.candidate_key(i))
    }

    /// `Some(class)` for one-hot rows, `None` when every valid point is a candidate.
    fn candidate_key(&self, i: usize) -> Option<usize> {
        match self.entries[i].as_slice() {
            [(k, _)] => Some(*k),
            _ => None,
        }
    }

    fn candidate_set(&self, key: Option<usize>) -> &[usize] {
        match key {
            Some(k) => &self.support[k],
            None => &self.all_valid,
        }
    }
}

/// Kernel support in bandwidths: exp(-40) is negligible next to the self term.
const KERNEL_CUTOFF: f64 = 6.325;

pub(crate) fn sym_term(
    cloud: &PointCloud,
    w: &SoftAssignment,
    pose: &SkeletonPose,
    topo: &SkeletonTopology,
    cfg: &LossConfig,
    mut grad: Option<&mut [Vec3]>,
) -> Result<f64> {
    if !(cfg.bandwidth > 0.0) {
        return Err(Error::InvalidBandwidth(cfg.bandwidth));
    }
    check_assignment(cloud, w, topo)?;
    pose.check_against(topo)?;
    let limbs = topo.limbs();
    let frames = topo.limb_frames(pose, cfg.eps_len)?;
    let n = cloud.valid_count();
    if limbs.is_empty() || n == 0 {
        return Ok(0.0);
    }
    let h = cfg.bandwidth;
    let h2 = h * h;
    let rows = PartRows::new(cloud, w, topo.num_joints());
    let scale = 1.0 / (n as f64 * limbs.len() as f64);
    let want = grad.is_some();
    // Beyond this axial gap the kernel is below e^-40 and cannot move any sum.
    let cutoff = h * KERNEL_CUTOFF;
    let mut kbuf: Vec<f64> = Vec::new();

    let mut coords = vec![LimbCoords { z: 0.0, r: 0.0 }; cloud.len()];
    let mut cgrads = Vec::new();
    let mut adj_z = vec![0.0; cloud.len()];
    let mut adj_r = vec![0.0; cloud.len()];
    let mut total = 0.0;

    for (li, limb) in limbs.iter().enumerate() {
        let class = limb.parent;
        let outer = &rows.support.get(class).map(Vec::as_slice).unwrap_or(&[]);
        if outer.is_empty() {
            continue;
        }
        if want {
            cgrads.clear();
            cgrads.resize(cloud.len(), None);
        }
        // Coordinates are only needed for points reachable from the outer set.
        let mut needed = vec![false; cloud.len()];
        let mut sets: Vec<Option<usize>> = Vec::new();
        for &i in outer.iter() {
            let key = rows.candidate_key(i);
            if !sets.contains(&key) {
                sets.push(key);
                for &j in rows.candidate_set(key) {
                    needed[j] = true;
                }
            }
        }
        for j in 0..cloud.len() {
            if needed[j] {
                if want {
                    let (c, g) = frames[li].coords_grad(&cloud.points[j]);
                    coords[j] = c;
                    cgrads[j] = Some(g);
                    adj_z[j] = 0.0;
                    adj_r[j] = 0.0;
                } else {
                    coords[j] = frames[li].coords(&cloud.points[j]);
                }
            }
        }
        // Each candidate set sorted by axial position, so only the kernel window is scanned.
        let sorted: Vec<Vec<(f64, usize)>> = sets
            .iter()
            .map(|&key| {
                let mut v: Vec<(f64, usize)> = rows.candidate_set(key).iter().map(|&j| (coords[j].z, j)).collect();
                v.sort_by(|a, b| a.0.total_cmp(&b.0));
                v
            })
            .collect();

        let mut sum = 0.0;
        for &i in outer.iter() {
            let wi = w.get(i, class);
            let zi = coords[i].z;
            let key = rows.candidate_key(i);
            let set = &sorted[sets.iter().position(|&k| k == key).expect("key collected above")];
            let lo = set.partition_point(|&(z, _)| z < zi - cutoff);
            let hi = set.partition_point(|&(z, _)| z <= zi + cutoff);
            let window = &set[lo..hi];
            kbuf.clear();
            let (mut den, mut num) = (0.0, 0.0);
            for &(zj, j) in window {
                let s = rows.similarity(i, j);
                let k = if s == 0.0 { 0.0 } else { s * kernel_unchecked(zi, zj, h) };
                kbuf.push(k);
                den += k;
                num += k * coords[j].r;
            }
            if den < cfg.eps_denom || den == 0.0 {
                continue;
            }
            let rbar = num / den;
            let e = coords[i].r - rbar;
            sum += wi * e * e;

            if want {
                let c = 2.0 * wi * e * scale;
                adj_r[i] += c;
                for (&(zj, j), &k) in window.iter().zip(&kbuf) {
                    if k == 0.0 {
                        continue;
                    }
                    let dz = zi - zj;
                    adj_r[j] -= c * k / den;
                    // d k / d z_i = k * (-2 (z_i - z_j) / h^2)
                    let t = -c * k * (-2.0 * dz / h2) * (coords[j].r - rbar) / den;
                    adj_z[i] += t;
                    adj_z[j] -= t;
                }
            }
        }
        total += sum;

        if let Some(g) = grad.as_mut() {
            let (mut ga, mut gb) = (Vec3::zeros(), Vec3::zeros());
            for j in 0..cloud.len() {
                if let Some(cg) = &cgrads[j] {
                    ga += cg.dz_da * adj_z[j] + cg.dr_da * adj_r[j];
                    gb += cg.dz_db * adj_z[j] + cg.dr_db * adj_r[j];
                }
            }
            g[limb.parent] += ga;
            g[limb.child] += gb;
        }
    }
    Ok(total * scale)
}

/// Radial symmetry of part points around their limb axis.
///
/// Each point's radius is compared with a kernel-weighted mean radius of
/// points at similar axial positions and similar part assignment. Similarity
/// uses the part columns only; background membership never makes points alike.
pub fn sym_loss(
    cloud: &PointCloud,
    w: &SoftAssignment,
    pose: &SkeletonPose,
    topo: &SkeletonTopology,
    cfg: &LossConfig,
) -> Result<f64> {
    sym_term(cloud, w, pose, topo, cfg, None)
}

/// Weighted mean radius seen by each point of `class` around `frame`; used by tests
/// and diagnostics. Points whose denominator is below the guard are `None`.
pub fn symmetry_means(
    cloud: &PointCloud,
    w: &SoftAssignment,
    frame: &LimbFrame,
    class: usize,
    parts: usize,
    cfg: &LossConfig,
) -> Vec<(usize, Option<f64>)> {
    let rows = PartRows::new(cloud, w, parts);
    let coords: Vec<LimbCoords> = cloud.points.iter().map(|p| frame.coords(p)).collect();
    rows.support[class]
        .iter()
        .map(|&i| {
            let (mut den, mut num) = (0.0, 0.0);
            for &j in rows.candidates(i) {
                let k = rows.similarity(i, j) * kernel_unchecked(coords[i].z, coords[j].z, cfg.bandwidth);
                den += k;
                num += k * coords[j].r;
            }
            (i, (den >= cfg.eps_denom && den > 0.0).then(|| num / den))
        })
        .collect()
}

/// Result of the joint-to-part term, with the joints whose part was empty.
#[derive(Debug, Clone, PartialEq)]
pub struct JointToPart {
    pub value: f64,
    pub empty_parts: Vec<usize>,
}

pub(crate) fn j2p_term(
    cloud: &PointCloud,
    w: &SoftAssignment,
    pose: &SkeletonPose,
    cfg: &LossConfig,
    mut grad: Option<&mut [Vec3]>,
) -> Result<JointToPart> {
    let joints = pose.len();
    if w.rows() != cloud.len() || w.classes() <= joints {
        return Err(Error::ShapeMismatch(format!(
            "assignment is {}x{} for {} points and {} joints",
            w.rows(),
            w.classes(),
            cloud.len(),
            joints
        )));
    }
    if joints == 0 {
        return Ok(JointToPart { value: 0.0, empty_parts: Vec::new() });
    }
    let mut mass = vec![0.0; joints];
    let mut moment = vec![Vec3::zeros(); joints];
    for i in cloud.valid_indices() {
        for (j, &wij) in w.row(i)[..joints].iter().enumerate() {
            if wij != 0.0 {
                mass[j] += wij;
                moment[j] += cloud.points[i] * wij;
            }
        }
    }
    let mut total = 0.0;
    let mut empty_parts = Vec::new();
    for j in 0..joints {
        if !(mass[j] > cfg.eps_denom) {
            empty_parts.push(j);
            continue;
        }
        let d = pose.positions[j] - moment[j] / mass[j];
        let dist = d.norm();
        total += dist;
        if let Some(g) = grad.as_mut() {
            if dist > 0.0 {
                g[j] += d / (dist * joints as f64);
            }
        }
    }
    Ok(JointToPart { value: total / joints as f64, empty_parts })
}

/// Mean distance of each joint to the weighted centroid of its part.
pub fn j2p_loss(cloud: &PointCloud, w: &SoftAssignment, pose: &SkeletonPose, cfg: &LossConfig) -> Result<JointToPart> {
    j2p_term(cloud, w, pose, cfg, None)
}

/// `-sum_i sum_j gt[i,j] log(max(pred[i,j], eps_prob))`.
pub fn seg_cross_entropy(pred: &SoftAssignment, gt: &SoftAssignment, eps_prob: f64) -> Result<f64> {
    if pred.rows() != gt.rows() || pred.classes() != gt.classes() {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {}x{}, target is {}x{}",
            pred.rows(),
            pred.classes(),
            gt.rows(),
            gt.classes()
        )));
    }
    let mut total = 0.0;
    for i in 0..pred.rows() {
        for (p, t) in pred.row(i).iter().zip(gt.row(i)) {
            if *t != 0.0 {
                total -= t * p.max(eps_prob).ln();
            }
        }
    }
    Ok(total)
}

/// Cross entropy of an assignment against its own arg-max labels, over valid points.
pub fn seg_self_entropy(cloud: &PointCloud, w: &SoftAssignment, eps_prob: f64) -> Result<f64> {
    let idx: Vec<usize> = cloud.valid_indices().collect();
    let pred = w.select(&idx);
    let target = SoftAssignment::one_hot(&pred.argmax(), pred.classes())?;
    seg_cross_entropy(&pred, &target, eps_prob)
}

/// Mean per-joint Euclidean distance between two poses.
pub fn kp_l2(pred: &SkeletonPose, gt: &SkeletonPose) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} joints", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.positions.iter().zip(&gt.positions).map(|(a, b)| (a - b).norm()).sum();
    Ok(sum / pred.len() as f64)
}

/// Warm-up objective on labelled synthetic data.
pub fn stage1_objective(
    pred: &SkeletonPose,
    gt: &SkeletonPose,
    w_pred: &SoftAssignment,
    w_gt: &SoftAssignment,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(cfg.kp * kp_l2(pred, gt)? + cfg.seg * seg_cross_entropy(w_pred, w_gt, cfg.eps_prob)?)
}

/// A sequence of frames with fixed part assignments; the poses are the variables.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub topology: SkeletonTopology,
    pub clouds: Vec<PointCloud>,
    pub assignments: Vec<SoftAssignment>,
}

impl Sequence {
    pub fn new(topology: SkeletonTopology, clouds: Vec<PointCloud>, assignments: Vec<SoftAssignment>) -> Result<Self> {
        if clouds.len() != assignments.len() {
            return Err(Error::FrameCountMismatch(clouds.len(), assignments.len()));
        }
        for (c, w) in clouds.iter().zip(&assignments) {
            c.check()?;
            check_assignment(c, w, &topology)?;
        }
        Ok(Self { topology, clouds, assignments })
    }

    pub fn frames(&self) -> usize {
        self.clouds.len()
    }

    pub fn pair<'a>(&'a self, t: usize, poses: &'a [SkeletonPose]) -> FramePair<'a> {
        FramePair {
            cloud_t: &self.clouds[t],
            cloud_t1: &self.clouds[t + 1],
            w_t: &self.assignments[t],
            w_t1: &self.assignments[t + 1],
            pose_t: &poses[t],
            pose_t1: &poses[t + 1],
        }
    }

    pub(crate) fn check_poses(&self, poses: &[SkeletonPose]) -> Result<()> {
        if poses.len() != self.frames() {
            return Err(Error::FrameCountMismatch(poses.len(), self.frames()));
        }
        poses.iter().try_for_each(|p| p.check_against(&self.topology))
    }
}

/// Per-frame terms (everything except flow) for one frame.
pub(crate) fn frame_terms(
    seq: &Sequence,
    t: usize,
    pose: &SkeletonPose,
    cfg: &LossConfig,
    mut grad: Option<&mut [Vec3]>,
) -> Result<[f64; 4]> {
    let (cloud, w, topo) = (&seq.clouds[t], &seq.assignments[t], &seq.topology);
    let p2l = p2l_term(cloud, w, pose, topo, cfg, grad.as_deref_mut().filter(|_| cfg.p2l != 0.0))?;
    let sym = sym_term(cloud, w, pose, topo, cfg, grad.as_deref_mut().filter(|_| cfg.sym != 0.0))?;
    let j2p = j2p_term(cloud, w, pose, cfg, grad.filter(|_| cfg.j2p != 0.0))?.value;
    let seg = seg_self_entropy(cloud, w, cfg.eps_prob)?;
    Ok([p2l, sym, j2p, seg])
}

/// Stage-II objective over a sequence.
///
/// Flow is averaged over consecutive pairs, the remaining terms over frames.
/// The segmentation term is the cross entropy of the fixed assignments against
/// their own one-hot labels, so it does not depend on the poses.
pub fn stage2_objective(seq: &Sequence, poses: &[SkeletonPose], cfg: &LossConfig) -> Result<LossBreakdown> {
    seq.check_poses(poses)?;
    let frames = seq.frames();
    if frames == 0 {
        return Ok(LossBreakdown::default());
    }
    let per_frame: Vec<[f64; 4]> =
        (0..frames).into_par_iter().map(|t| frame_terms(seq, t, &poses[t], cfg, None)).collect::<Result<_>>()?;
    let flows: Vec<f64> = (0..frames.saturating_sub(1))
        .into_par_iter()
        .map(|t| flow_term(&seq.pair(t, poses), &seq.topology, cfg, None))
        .collect::<Result<_>>()?;
    Ok(combine(&per_frame, &flows, cfg))
}

pub(crate) fn combine(per_frame: &[[f64; 4]], flows: &[f64], cfg: &LossConfig) -> LossBreakdown {
    let mean = |it: &mut dyn Iterator<Item = f64>, n: usize| if n == 0 { 0.0 } else { it.sum::<f64>() / n as f64 };
    let n = per_frame.len();
    let flow = mean(&mut flows.iter().copied(), flows.len());
    let p2l = mean(&mut per_frame.iter().map(|f| f[0]), n);
    let sym = mean(&mut per_frame.iter().map(|f| f[1]), n);
    let j2p = mean(&mut per_frame.iter().map(|f| f[2]), n);
    let seg = mean(&mut per_frame.iter().map(|f| f[3]), n);
    LossBreakdown::weighted(flow, p2l, sym, j2p, seg, cfg)
}
