//! Label-free surrogate part segmentation.
//!
//! Frames are clustered with k-means, clusters are tracked across frames by
//! Hungarian matching on Chamfer distance, and the clusters of the canonical
//! first frame are mapped to part classes by matching against a rest-pose
//! template of the body.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::hungarian;
use crate::geometry::Vec3;
use crate::skeleton::{PointCloud, SkeletonTopology, SoftAssignment};
use crate::synth::{forward_kinematics, CapsuleBody, Placement};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLabeling {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec3>,
    /// Total squared distance of points to their centers.
    pub inertia: f64,
}

impl ClusterLabeling {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn members<'a>(&'a self, points: &'a [Vec3], c: usize) -> impl Iterator<Item = Vec3> + 'a {
        self.labels.iter().zip(points).filter(move |(&l, _)| l == c).map(|(_, p)| *p)
    }

    /// Renames cluster `i` to `to[i]`.
    pub fn relabel(&self, to: &[usize]) -> Self {
        let mut centers = vec![Vec3::zeros(); self.k()];
        for (i, c) in self.centers.iter().enumerate() {
            centers[to[i]] = *c;
        }
        Self { labels: self.labels.iter().map(|&l| to[l]).collect(), centers, inertia: self.inertia }
    }
}

fn nearest_center(p: &Vec3, centers: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn sample_d2<R: Rng>(d2: &[f64], total: f64, rng: &mut R) -> usize {
    if !(total > 0.0) {
        // every point coincides with a center already
        return rng.random_range(0..d2.len());
    }
    let mut target = rng.random::<f64>() * total;
    for (i, &d) in d2.iter().enumerate() {
        if target < d {
            return i;
        }
        target -= d;
    }
    d2.len() - 1
}

/// Greedy k-means++: each step draws `2 + ln k` candidates by D² sampling and
/// keeps the one that lowers the potential most.
fn plus_plus_init<R: Rng>(points: &[Vec3], k: usize, rng: &mut R) -> Vec<Vec3> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, Vec<f64>, Vec3)> = None;
        for _ in 0..trials {
            let c = points[sample_d2(&d2, total, rng)];
            let next: Vec<f64> = d2.iter().zip(points).map(|(d, p)| d.min((p - c).norm_squared())).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, next, c));
            }
        }
        let (_, next, c) = best.expect("at least one trial");
        centers.push(c);
        d2 = next;
    }
    centers
}

/// k-means with k-means++ seeding and Lloyd iterations.
///
/// Returns the labeling and the inertia after every Lloyd iteration.
pub fn kmeans_traced(points: &[Vec3], k: usize, seed: u64, max_iters: usize) -> Result<(ClusterLabeling, Vec<f64>)> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::TooFewPoints { n: points.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let mut labels = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let (c, _) = nearest_center(p, &centers);
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        let mut sums = vec![Vec3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            sums[l] += p;
            counts[l] += 1;
        }
        for c in 0..k {
            // an empty cluster keeps its previous center
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            }
        }
        let inertia: f64 = labels.iter().zip(points).map(|(&l, p)| (p - centers[l]).norm_squared()).sum();
        trace.push(inertia);
        if !changed {
            break;
        }
    }
    let inertia = *trace.last().expect("at least one iteration");
    Ok((ClusterLabeling { labels, centers, inertia }, trace))
}

pub fn kmeans(points: &[Vec3], k: usize, seed: u64, max_iters: usize) -> Result<ClusterLabeling> {
    kmeans_traced(points, k, seed, max_iters).map(|(l, _)| l)
}

/// Symmetric mean nearest-neighbour distance between two point sets.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let one_way = |x: &[Vec3], y: &[Vec3]| {
        x.iter().map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

fn cluster_sets(l: &ClusterLabeling, points: &[Vec3]) -> Result<Vec<Vec<Vec3>>> {
    let mut sets = vec![Vec::new(); l.k()];
    for (&c, p) in l.labels.iter().zip(points) {
        sets[c].push(*p);
    }
    if let Some(c) = sets.iter().position(Vec::is_empty) {
        return Err(Error::EmptyCluster(c));
    }
    Ok(sets)
}

/// Minimum total Chamfer cost bijection: cluster `i` of frame t pairs with `perm[i]` of frame t+1.
pub fn match_clusters(
    labeling_t: &ClusterLabeling,
    points_t: &[Vec3],
    labeling_t1: &ClusterLabeling,
    points_t1: &[Vec3],
) -> Result<Vec<usize>> {
    if labeling_t.k() != labeling_t1.k() {
        return Err(Error::ShapeMismatch(format!("{} vs {} clusters", labeling_t.k(), labeling_t1.k())));
    }
    let a = cluster_sets(labeling_t, points_t)?;
    let b = cluster_sets(labeling_t1, points_t1)?;
    let cost: Vec<Vec<f64>> = a
        .par_iter()
        .map(|x| b.iter().map(|y| chamfer_distance(x, y)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok(hungarian(&cost)?.cols)
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &j) in perm.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Clusters every frame and aligns each frame's cluster indices with the frame before.
pub fn propagate_labels(frames: &[Vec<Vec3>], k: usize, seed: u64, max_iters: usize) -> Result<Vec<ClusterLabeling>> {
    if frames.is_empty() {
        return Err(Error::EmptySet);
    }
    let raw: Vec<ClusterLabeling> =
        frames.par_iter().map(|pts| kmeans(pts, k, seed, max_iters)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(raw.len());
    out.push(raw[0].clone());
    for t in 1..raw.len() {
        let perm = match_clusters(&out[t - 1], &frames[t - 1], &raw[t], &frames[t])?;
        out.push(raw[t].relabel(&invert(&perm)));
    }
    Ok(out)
}

pub fn to_one_hot(labels: &[usize], num_classes: usize) -> Result<SoftAssignment> {
    SoftAssignment::one_hot(labels, num_classes)
}

/// Rest-pose part centres in a gravity-aligned body frame: lateral offset from the
/// body centre and height above the lowest surface point.
#[derive(Debug, Clone, PartialEq)]
pub struct PartTemplate {
    pub classes: Vec<usize>,
    pub centers: Vec<[f64; 2]>,
}

impl PartTemplate {
    pub fn from_body(body: &CapsuleBody) -> Self {
        let posed = forward_kinematics(body, &body.rest_angles(), &Placement::identity());
        let pos = &posed.pose.positions;
        let limbs = body.topology().limbs();
        let floor = limbs
            .iter()
            .enumerate()
            .map(|(l, lb)| pos[lb.parent].z.min(pos[lb.child].z) - body.limb_radius(l))
            .fold(f64::INFINITY, f64::min);
        let mid_x = pos.iter().map(|p| p.x).sum::<f64>() / pos.len() as f64;
        let (classes, centers) = limbs
            .iter()
            .map(|lb| {
                let m = (pos[lb.parent] + pos[lb.child]) / 2.0;
                (lb.parent, [m.x - mid_x, m.z - floor])
            })
            .unzip();
        Self { classes, centers }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Dominant horizontal direction of a point set, the shoulder line of a standing person.
fn lateral_axis(points: &[Vec3]) -> Vec3 {
    let n = points.len() as f64;
    let (mx, my) = (points.iter().map(|p| p.x).sum::<f64>() / n, points.iter().map(|p| p.y).sum::<f64>() / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Vec3::new(theta.cos(), theta.sin(), 0.0)
}

/// Maps the clusters of a canonical standing frame to part classes.
///
/// Cluster centres are expressed as (lateral offset, height) and matched to the
/// template by Hungarian assignment, trying both signs of the lateral axis. The
/// body is nearly mirror symmetric, so left and right may come out swapped.
pub fn map_clusters_to_classes(
    labeling: &ClusterLabeling,
    points: &[Vec3],
    template: &PartTemplate,
) -> Result<Vec<usize>> {
    let k = labeling.k();
    if k != template.len() {
        return Err(Error::ShapeMismatch(format!("{k} clusters for {} template parts", template.len())));
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let axis = lateral_axis(points);
    let floor = points.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for sign in [1.0, -1.0] {
        let cost: Vec<Vec<f64>> = labeling
            .centers
            .iter()
            .map(|c| {
                let lat = sign * (c - centroid).dot(&axis);
                let h = c.z - floor;
                template.centers.iter().map(|t| ((lat - t[0]).powi(2) + (h - t[1]).powi(2)).sqrt()).collect()
            })
            .collect();
        let a = hungarian(&cost)?;
        if best.as_ref().is_none_or(|(c, _)| a.cost < *c) {
            best = Some((a.cost, a.cols.iter().map(|&j| template.classes[j]).collect()));
        }
    }
    Ok(best.expect("two candidates evaluated").1)
}

/// Foreground test applied before clustering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundFilter {
    /// Points lower than this height are background. `None` disables the test.
    pub ground_height: Option<f64>,
    /// Points horizontally farther than this from the median point are background, meters.
    pub radius: f64,
}

impl Default for BackgroundFilter {
    fn default() -> Self {
        Self { ground_height: None, radius: 1.2 }
    }
}

impl BackgroundFilter {
    pub fn foreground(&self, cloud: &PointCloud) -> Vec<usize> {
        let valid: Vec<usize> = cloud.valid_indices().collect();
        if valid.is_empty() {
            return valid;
        }
        let median = |f: fn(&Vec3) -> f64| {
            let mut v: Vec<f64> = valid.iter().map(|&i| f(&cloud.points[i])).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let (cx, cy) = (median(|p| p.x), median(|p| p.y));
        valid
            .into_iter()
            .filter(|&i| {
                let p = &cloud.points[i];
                let near = (p.x - cx).hypot(p.y - cy) <= self.radius;
                near && self.ground_height.is_none_or(|g| p.z >= g)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// Cluster count. `None` uses one cluster per body part.
    pub k: Option<usize>,
    pub seed: u64,
    pub max_iters: usize,
    pub background: BackgroundFilter,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { k: None, seed: 0, max_iters: 100, background: BackgroundFilter::default() }
    }
}

/// Surrogate one-hot part assignments for a sequence whose first frame is the
/// canonical standing pose.
pub fn segment_sequence(
    clouds: &[PointCloud],
    topo: &SkeletonTopology,
    template: &PartTemplate,
    cfg: &SegmentationConfig,
) -> Result<Vec<SoftAssignment>> {
    let k = cfg.k.unwrap_or(template.len());
    let fg: Vec<Vec<usize>> = clouds.iter().map(|c| cfg.background.foreground(c)).collect();
    let pts: Vec<Vec<Vec3>> =
        clouds.iter().zip(&fg).map(|(c, idx)| idx.iter().map(|&i| c.points[i]).collect()).collect();
    let labelings = propagate_labels(&pts, k, cfg.seed, cfg.max_iters)?;
    let class_of = map_clusters_to_classes(&labelings[0], &pts[0], template)?;
    let bg = topo.background_class();
    clouds
        .iter()
        .zip(&fg)
        .zip(&labelings)
        .map(|((c, idx), lab)| {
            let mut labels = vec![bg; c.len()];
            for (&i, &l) in idx.iter().zip(&lab.labels) {
                labels[i] = class_of[l];
            }
            to_one_hot(&labels, topo.num_classes())
        })
        .collect()
}
