use std::fmt::Write as _;
use std::path::PathBuf;

use limbfit::eval::{perturb_recovery, PerturbConfig, PerturbReport, VisibilityMask};
use limbfit::io::fmt_real;
use limbfit::losses::Sequence;
use limbfit::optim::OptimConfig;
use limbfit::{Error, LossConfig, Result, SkeletonPose};
use rayon::prelude::*;

use crate::dataset::{load_dataset, Dataset};
use crate::fit::gt_assignments;
use crate::{mix_seed, CliResult};

#[derive(Debug, Clone)]
pub struct PerturbOptions {
    pub input: PathBuf,
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
    pub iters: usize,
    pub lr: f64,
}

impl PerturbOptions {
    pub fn new(input: impl Into<PathBuf>) -> Self {
        Self { input: input.into(), sigma: 0.06, trials: 200, seed: 0, iters: 100, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub sequence: u64,
    /// First frame of the pair.
    pub frame: usize,
    pub report: PerturbReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbSummary {
    pub trials: Vec<TrialRecord>,
    /// Fraction of trials whose matched error went down.
    pub win_rate: f64,
    /// Median relative reduction of the matched error, in percent.
    pub median_reduction_pct: f64,
}

impl PerturbSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "trial,sequence,frame,initial_mpjpe_m,final_mpjpe_m,initial_matched_m,final_matched_m,reduction_pct\n",
        );
        for t in &self.trials {
            let r = &t.report;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{:.4}",
                t.trial,
                t.sequence,
                t.frame,
                fmt_real(r.initial_mpjpe),
                fmt_real(r.final_mpjpe),
                fmt_real(r.initial_matched_mpjpe),
                fmt_real(r.final_matched_mpjpe),
                r.reduction_percent()
            )
            .expect("write to string");
        }
        writeln!(
            s,
            "# trials {} win_rate {:.4} median_reduction_pct {:.4}",
            self.trials.len(),
            self.win_rate,
            self.median_reduction_pct
        )
        .expect("write to string");
        s
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// The `trial`-th consecutive frame pair, cycling through sequences first.
fn pick_pair(data: &Dataset, trial: usize) -> Result<(usize, usize)> {
    let s = data.sequences.len();
    let pairs = data.manifest.frames_per_sequence.saturating_sub(1);
    if s == 0 || pairs == 0 {
        return Err(Error::InvalidConfig("dataset has no frame pairs".into()));
    }
    Ok((trial % s, (trial / s) % pairs))
}

fn run_trial(data: &Dataset, trial: usize, opts: &PerturbOptions) -> Result<TrialRecord> {
    let (si, t) = pick_pair(data, trial)?;
    let seq = &data.sequences[si];
    let topo = data.body.topology();
    let clouds = seq.clouds[t..t + 2].to_vec();
    let w = gt_assignments(&clouds, topo.num_classes())?;
    let sequence = Sequence::new(topo.clone(), clouds, w)?;
    let gt: Vec<SkeletonPose> = seq.gt[t..t + 2].iter().map(|r| r.pose.clone()).collect();
    let vis: Vec<VisibilityMask> = seq.gt[t..t + 2].iter().map(|r| VisibilityMask(r.visible.clone())).collect();
    let cfg = PerturbConfig {
        sigma: opts.sigma,
        seed: mix_seed(opts.seed, trial as u64),
        loss: LossConfig::supplementary(),
        optim: OptimConfig { learning_rate: opts.lr, iterations: opts.iters, ..Default::default() },
    };
    let report = perturb_recovery(&sequence, &gt, &vis, &cfg)?;
    Ok(TrialRecord { trial, sequence: seq.index, frame: t, report })
}

/// Perturbation-recovery experiment on frame pairs of a dataset, with ground-truth
/// labels and flow and the supplementary loss weights.
pub fn cmd_perturb(opts: &PerturbOptions) -> CliResult<PerturbSummary> {
    if !(opts.sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be non-negative, got {}", opts.sigma)).into());
    }
    if opts.trials == 0 {
        return Ok(PerturbSummary { trials: Vec::new(), win_rate: 0.0, median_reduction_pct: 0.0 });
    }
    let data = load_dataset(&opts.input)?;
    let trials = (0..opts.trials).into_par_iter().map(|k| run_trial(&data, k, opts)).collect::<Result<Vec<_>>>()?;
    let wins = trials.iter().filter(|t| t.report.improved()).count();
    let mut reductions: Vec<f64> = trials.iter().map(|t| t.report.reduction_percent()).collect();
    Ok(PerturbSummary {
        win_rate: wins as f64 / trials.len() as f64,
        median_reduction_pct: median(&mut reductions),
        trials,
    })
}
