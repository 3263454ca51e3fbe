use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use limbfit::eval::{matched_mpjpe, mpjpe, VisibilityMask};
use limbfit::io::{fmt_real, read_pose, DatasetManifest, MANIFEST_FILE};
use limbfit::synth::CapsuleBody;
use limbfit::{Error, Result, SkeletonTopology};

use crate::CliResult;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub pred: PathBuf,
    pub gt: PathBuf,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    /// Frame file (relative path) and error in meters.
    pub rows: Vec<(String, f64)>,
    pub mean: f64,
}

impl EvalTable {
    /// CSV with meters at 9 significant digits and centimeters at two decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,mpjpe_m,mpjpe_cm\n");
        let row = |s: &mut String, name: &str, m: f64| {
            writeln!(s, "{name},{},{:.2}", fmt_real(m), m * 100.0).expect("write to string");
        };
        for (name, m) in &self.rows {
            row(&mut s, name, *m);
        }
        row(&mut s, "mean", self.mean);
        s
    }
}

fn collect_poses(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_poses(root, &p, out)?;
        } else if p.extension().is_some_and(|x| x == "pose") {
            out.push(p.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(())
}

/// Every `.pose` file under `root`, as sorted relative paths.
pub fn pose_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    collect_poses(root, root, &mut out)?;
    Ok(out)
}

fn topology_for(gt: &Path) -> Result<SkeletonTopology> {
    let body = if gt.join(MANIFEST_FILE).is_file() {
        CapsuleBody::from_config(&DatasetManifest::read(gt)?.body)?
    } else {
        CapsuleBody::default_body()
    };
    Ok(body.topology().clone())
}

/// Per-frame MPJPE (or matched MPJPE) of predicted against ground-truth pose files.
///
/// Frames pair up by relative path; visibility comes from the ground truth.
pub fn cmd_eval(opts: &EvalOptions) -> CliResult<EvalTable> {
    let topo = topology_for(&opts.gt)?;
    let gt_files = pose_files(&opts.gt)?;
    let pred_files = pose_files(&opts.pred)?;
    if gt_files.len() != pred_files.len() {
        return Err(Error::FrameCountMismatch(pred_files.len(), gt_files.len()).into());
    }
    if let Some((p, _)) = pred_files.iter().zip(&gt_files).find(|(p, g)| p != g) {
        return Err(Error::InvalidConfig(format!("prediction {} has no ground-truth counterpart", p.display())).into());
    }
    if gt_files.is_empty() {
        return Err(Error::EmptySet.into());
    }
    let mut rows = Vec::with_capacity(gt_files.len());
    for rel in &gt_files {
        let gt = read_pose(&opts.gt.join(rel), &topo)?;
        let pred = read_pose(&opts.pred.join(rel), &topo)?;
        let mask = VisibilityMask(gt.visible.clone());
        let e = if opts.matched {
            matched_mpjpe(&pred.pose, &gt.pose, &mask)?
        } else {
            mpjpe(&pred.pose, &gt.pose, &mask)?
        };
        rows.push((rel.to_string_lossy().replace('\\', "/"), e));
    }
    let mean = rows.iter().map(|(_, e)| e).sum::<f64>() / rows.len() as f64;
    Ok(EvalTable { rows, mean })
}
