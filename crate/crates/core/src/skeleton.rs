//! Data model shared by the losses, the synthetic generator and the fitter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LimbFrame, Vec3};

/// A limb connects a parent keypoint to a child keypoint.
///
/// Surface points on the limb carry the parent's index as their part class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Limb {
    pub parent: usize,
    pub child: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    joint_names: Vec<String>,
    limbs: Vec<Limb>,
}

impl SkeletonTopology {
    pub fn new(joint_names: Vec<String>, limbs: Vec<Limb>) -> Result<Self> {
        let j = joint_names.len();
        if j == 0 {
            return Err(Error::InvalidTopology("no joints".into()));
        }
        for (i, l) in limbs.iter().enumerate() {
            if l.parent >= j || l.child >= j {
                return Err(Error::InvalidTopology(format!("limb {i} references a joint >= {j}")));
            }
            if l.parent == l.child {
                return Err(Error::InvalidTopology(format!("limb {i} connects joint {} to itself", l.parent)));
            }
            if limbs[..i].contains(l) {
                return Err(Error::InvalidTopology(format!("limb {i} duplicates ({}, {})", l.parent, l.child)));
            }
        }
        Ok(Self { joint_names, limbs })
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    /// Part classes plus the trailing background class.
    pub fn num_classes(&self) -> usize {
        self.joint_names.len() + 1
    }

    pub fn background_class(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn limbs(&self) -> &[Limb] {
        &self.limbs
    }

    /// Limbs incident to `joint`, as either endpoint.
    pub fn limbs_of(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.limbs.iter().enumerate().filter(move |(_, l)| l.parent == joint || l.child == joint).map(|(i, _)| i)
    }

    /// One frame per limb, failing on the first degenerate limb.
    pub fn limb_frames(&self, pose: &SkeletonPose, eps_len: f64) -> Result<Vec<LimbFrame>> {
        self.limbs
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (a, b) = (&pose.positions[l.parent], &pose.positions[l.child]);
                LimbFrame::new(a, b, eps_len).ok_or(Error::DegenerateLimb { limb: i, length: (b - a).norm() })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonPose {
    pub positions: Vec<Vec3>,
}

impl SkeletonPose {
    pub fn new(positions: Vec<Vec3>) -> Result<Self> {
        if positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidConfig("pose contains non-finite coordinates".into()));
        }
        Ok(Self { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn check_against(&self, topo: &SkeletonTopology) -> Result<()> {
        if self.positions.len() != topo.num_joints() {
            return Err(Error::ShapeMismatch(format!(
                "pose has {} joints, topology has {}",
                self.positions.len(),
                topo.num_joints()
            )));
        }
        Ok(())
    }

    pub fn translated(&self, v: &Vec3) -> Self {
        Self { positions: self.positions.iter().map(|p| p + v).collect() }
    }
}

/// Where a synthetic point sits on its limb, in the limb's rest frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimbAttachment {
    pub limb: usize,
    pub local: Vec3,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub forward_flow: Option<Vec<Vec3>>,
    pub backward_flow: Option<Vec<Vec3>>,
    pub gt_label: Option<Vec<usize>>,
    pub attachment: Option<Vec<LimbAttachment>>,
    /// `false` marks padding. Absent means every point is valid.
    pub valid: Option<Vec<bool>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        Self { points, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.valid.as_ref().is_none_or(|v| v[i])
    }

    pub fn valid_count(&self) -> usize {
        match &self.valid {
            None => self.points.len(),
            Some(v) => v.iter().filter(|&&b| b).count(),
        }
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.points.len()).filter(|&i| self.is_valid(i))
    }

    /// Checks that every optional field matches the point count.
    pub fn check(&self) -> Result<()> {
        let n = self.points.len();
        let lens = [
            ("forward_flow", self.forward_flow.as_ref().map(Vec::len)),
            ("backward_flow", self.backward_flow.as_ref().map(Vec::len)),
            ("gt_label", self.gt_label.as_ref().map(Vec::len)),
            ("attachment", self.attachment.as_ref().map(Vec::len)),
            ("valid", self.valid.as_ref().map(Vec::len)),
        ];
        for (name, len) in lens {
            if let Some(len) = len {
                if len != n {
                    return Err(Error::ShapeMismatch(format!("{name} has {len} entries for {n} points")));
                }
            }
        }
        Ok(())
    }

    /// Keeps the points at `indices`, carrying every optional field along.
    pub fn select(&self, indices: &[usize]) -> Self {
        fn pick<T: Clone>(v: &Option<Vec<T>>, idx: &[usize]) -> Option<Vec<T>> {
            v.as_ref().map(|v| idx.iter().map(|&i| v[i].clone()).collect())
        }
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            forward_flow: pick(&self.forward_flow, indices),
            backward_flow: pick(&self.backward_flow, indices),
            gt_label: pick(&self.gt_label, indices),
            attachment: pick(&self.attachment, indices),
            valid: pick(&self.valid, indices),
        }
    }

    /// Pads with invalid points at the origin up to `n` points.
    pub fn pad_to(&mut self, n: usize) {
        let extra = n.saturating_sub(self.points.len());
        if extra == 0 {
            return;
        }
        let old = self.points.len();
        let mut valid = self.valid.take().unwrap_or_else(|| vec![true; old]);
        valid.resize(n, false);
        self.valid = Some(valid);
        self.points.resize(n, Vec3::zeros());
        if let Some(f) = &mut self.forward_flow {
            f.resize(n, Vec3::zeros());
        }
        if let Some(f) = &mut self.backward_flow {
            f.resize(n, Vec3::zeros());
        }
        if let Some(l) = &mut self.gt_label {
            let fill = l.iter().copied().max().unwrap_or(0);
            l.resize(n, fill);
        }
        if let Some(a) = &mut self.attachment {
            a.resize(n, LimbAttachment { limb: 0, local: Vec3::zeros() });
        }
    }
}

/// Row-stochastic `N x (J+1)` part-membership matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
}

impl SoftAssignment {
    pub const ROW_SUM_TOL: f64 = 1e-6;

    pub fn new(rows: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * classes {
            return Err(Error::ShapeMismatch(format!("{} entries for a {rows}x{classes} assignment", data.len())));
        }
        if classes == 0 {
            return Err(Error::ShapeMismatch("assignment needs at least one class".into()));
        }
        for (i, row) in data.chunks(classes).enumerate() {
            if row.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                return Err(Error::InvalidConfig(format!("row {i} has an entry outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(Error::InvalidConfig(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { rows, classes, data })
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            data[i * classes + l] = 1.0;
        }
        Ok(Self { rows: labels.len(), classes, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.classes + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Index of the largest entry per row; ties go to the lowest class.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &w) in row.iter().enumerate() {
                    if w > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let data = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self { rows: indices.len(), classes: self.classes, data }
    }
}
