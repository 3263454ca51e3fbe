use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::ValueEnum;
use limbfit::eval::perturb_poses;
use limbfit::flow::{nn_flow, rigid_part_flow};
use limbfit::io::{fmt_real, write_pose, PoseRecord};
use limbfit::losses::Sequence;
use limbfit::optim::{fit_sequence, FitResult, OptimConfig};
use limbfit::segmentation::{segment_sequence, PartTemplate, SegmentationConfig};
use limbfit::synth::CapsuleBody;
use limbfit::{Error, LossBreakdown, LossConfig, PointCloud, Result, SkeletonPose, SoftAssignment, Vec3};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{load_dataset, pose_path, sequence_dir, LoadedSequence};
use crate::{mix_seed, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsPreset {
    /// flow 0.02, p2l 0.01, sym 0.5, j2p 2, seg 0.5, bandwidth 0.1
    Stage2,
    /// flow 0.2, p2l 0.1, sym 5, others 0
    SuppDemo,
}

impl WeightsPreset {
    pub fn config(self) -> LossConfig {
        match self {
            WeightsPreset::Stage2 => LossConfig::stage2(),
            WeightsPreset::SuppDemo => LossConfig::supplementary(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegSource {
    /// Ground-truth part labels stored in the frames.
    Gt,
    /// k-means surrogate labels tracked across frames.
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowSource {
    /// Exact flow stored in the frames.
    Gt,
    /// Nearest neighbour in the adjacent frame.
    Nn,
    /// One rigid motion per part, estimated by ICP.
    Rigid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Ground truth plus isotropic Gaussian noise of `sigma`.
    Perturb,
    /// Ground truth unchanged.
    Gt,
    /// Each joint at the centroid of its part, without ground truth.
    Centroid,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitOptions {
    pub input: PathBuf,
    #[serde(skip)]
    pub out: PathBuf,
    pub weights: WeightsPreset,
    pub iters: usize,
    pub lr: f64,
    pub seg: SegSource,
    pub flow: FlowSource,
    pub init: InitMode,
    pub sigma: f64,
    pub seed: u64,
}

impl FitOptions {
    pub fn new(input: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            input: input.into(),
            out: out.into(),
            weights: WeightsPreset::Stage2,
            iters: 100,
            lr: 1e-3,
            seg: SegSource::Gt,
            flow: FlowSource::Gt,
            init: InitMode::Perturb,
            sigma: 0.06,
            seed: 0,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig { learning_rate: self.lr, iterations: self.iters, seed: self.seed, ..Default::default() }
    }
}

/// One-hot assignments from the stored ground-truth labels.
pub fn gt_assignments(clouds: &[PointCloud], classes: usize) -> Result<Vec<SoftAssignment>> {
    clouds
        .iter()
        .map(|c| {
            let labels = c.gt_label.as_deref().ok_or_else(|| Error::InvalidConfig("frame has no seg_label".into()))?;
            SoftAssignment::one_hot(labels, classes)
        })
        .collect()
}

/// Replaces the stored flow with an estimate, or checks that exact flow is present.
pub fn prepare_flow(clouds: &mut [PointCloud], w: &[SoftAssignment], source: FlowSource) -> Result<()> {
    let n = clouds.len();
    if source == FlowSource::Gt {
        for (t, c) in clouds.iter().enumerate() {
            if t + 1 < n && c.forward_flow.is_none() {
                return Err(Error::MissingFlow("forward"));
            }
            if t > 0 && c.backward_flow.is_none() {
                return Err(Error::MissingFlow("backward"));
            }
        }
        return Ok(());
    }
    let fields = (0..n.saturating_sub(1))
        .into_par_iter()
        .map(|t| match source {
            FlowSource::Nn => nn_flow(&clouds[t], &clouds[t + 1]),
            _ => rigid_part_flow(&clouds[t], &w[t].argmax(), &clouds[t + 1], &w[t + 1].argmax()),
        })
        .collect::<Result<Vec<_>>>()?;
    for c in clouds.iter_mut() {
        c.forward_flow = None;
        c.backward_flow = None;
    }
    for (t, f) in fields.into_iter().enumerate() {
        let (a, b) = clouds.split_at_mut(t + 1);
        f.attach(&mut a[t], &mut b[0])?;
    }
    Ok(())
}

/// Joints at the centroid of their own part; joints owning no points fall back to the cloud centroid.
pub fn centroid_init(cloud: &PointCloud, w: &SoftAssignment, joints: usize) -> Result<SkeletonPose> {
    let labels = w.argmax();
    let mut sums = vec![(Vec3::zeros(), 0usize); joints];
    let mut all = (Vec3::zeros(), 0usize);
    for i in cloud.valid_indices() {
        all.0 += cloud.points[i];
        all.1 += 1;
        if labels[i] < joints {
            sums[labels[i]].0 += cloud.points[i];
            sums[labels[i]].1 += 1;
        }
    }
    if all.1 == 0 {
        return Err(Error::EmptyCloud);
    }
    let fallback = all.0 / all.1 as f64;
    SkeletonPose::new(sums.iter().map(|(s, n)| if *n > 0 { s / *n as f64 } else { fallback }).collect())
}

pub fn initial_poses(
    seq: &LoadedSequence,
    w: &[SoftAssignment],
    joints: usize,
    mode: InitMode,
    sigma: f64,
    seed: u64,
) -> Result<Vec<SkeletonPose>> {
    let gt: Vec<SkeletonPose> = seq.gt.iter().map(|r| r.pose.clone()).collect();
    match mode {
        InitMode::Gt => Ok(gt),
        InitMode::Perturb => perturb_poses(&gt, sigma, mix_seed(seed, seq.index)),
        InitMode::Centroid => seq.clouds.iter().zip(w).map(|(c, w)| centroid_init(c, w, joints)).collect(),
    }
}

/// Per-sequence outcome of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFit {
    pub index: u64,
    pub poses: Vec<SkeletonPose>,
    pub trace: Vec<LossBreakdown>,
    pub best_iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub sequences: Vec<SequenceFit>,
}

pub fn trace_csv(trace: &[LossBreakdown]) -> String {
    let mut s = String::from("iteration,total,flow,p2l,sym,j2p,seg\n");
    for (i, b) in trace.iter().enumerate() {
        let vals = [b.total, b.flow, b.p2l, b.sym, b.j2p, b.seg].map(fmt_real);
        writeln!(s, "{i},{}", vals.join(",")).expect("write to string");
    }
    s
}

fn fit_one(seq: &LoadedSequence, body: &CapsuleBody, opts: &FitOptions) -> Result<SequenceFit> {
    let topo = body.topology();
    let w = match opts.seg {
        SegSource::Gt => gt_assignments(&seq.clouds, topo.num_classes())?,
        SegSource::Kmeans => {
            let cfg = SegmentationConfig { seed: mix_seed(opts.seed, seq.index), ..Default::default() };
            segment_sequence(&seq.clouds, topo, &PartTemplate::from_body(body), &cfg)?
        }
    };
    let mut clouds = seq.clouds.clone();
    prepare_flow(&mut clouds, &w, opts.flow)?;
    let init = initial_poses(seq, &w, topo.num_joints(), opts.init, opts.sigma, opts.seed)?;
    let sequence = Sequence::new(topo.clone(), clouds, w)?;
    let FitResult { poses, trace, best_iteration } =
        fit_sequence(&sequence, &init, &opts.weights.config(), &opts.optim())?;
    Ok(SequenceFit { index: seq.index, poses, trace, best_iteration })
}

/// Fits every sequence of a dataset and writes poses, loss traces and the settings used.
pub fn cmd_fit(opts: &FitOptions) -> CliResult<FitSummary> {
    opts.optim().validate()?;
    let data = load_dataset(&opts.input)?;
    let sequences = data.sequences.par_iter().map(|s| fit_one(s, &data.body, opts)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&opts.out)?;
    let topo = data.body.topology();
    for (fit, seq) in sequences.iter().zip(&data.sequences) {
        fs::create_dir_all(opts.out.join(sequence_dir(fit.index)))?;
        for (t, (pose, gt)) in fit.poses.iter().zip(&seq.gt).enumerate() {
            let rec = PoseRecord { pose: pose.clone(), visible: gt.visible.clone() };
            write_pose(&opts.out.join(pose_path(fit.index, t)), topo, &rec)?;
        }
        fs::write(opts.out.join(sequence_dir(fit.index)).join("trace.csv"), trace_csv(&fit.trace))?;
    }
    let settings = toml::to_string(opts).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::write(opts.out.join("fit.toml"), settings)?;
    Ok(FitSummary { sequences })
}
