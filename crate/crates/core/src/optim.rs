//! Adam over keypoint positions and the sequence fitter built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{objective_gradient, Gradient};
use crate::losses::{LossBreakdown, LossConfig, Sequence};
use crate::skeleton::SkeletonPose;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    /// Number of Adam steps. Zero returns the initialisation unchanged.
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, iterations: 100, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed: 0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &OptimConfig) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }

    /// Applies one step to a set of poses using a pose-shaped gradient.
    pub fn step_poses(&mut self, poses: &mut [SkeletonPose], grad: &Gradient, cfg: &OptimConfig) {
        let mut flat = flatten(poses);
        let g: Vec<f64> = grad.iter().collect();
        self.step(&mut flat, &g, cfg);
        unflatten(&flat, poses);
    }
}

fn flatten(poses: &[SkeletonPose]) -> Vec<f64> {
    poses.iter().flat_map(|p| &p.positions).flat_map(|v| v.iter().copied()).collect()
}

fn unflatten(flat: &[f64], poses: &mut [SkeletonPose]) {
    let mut it = flat.chunks_exact(3);
    for p in poses.iter_mut().flat_map(|p| p.positions.iter_mut()) {
        let c = it.next().expect("flat vector too short");
        p.copy_from_slice(c);
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Poses with the lowest objective seen, which need not be the last iterate.
    pub poses: Vec<SkeletonPose>,
    /// Objective at every iterate, the initialisation first.
    pub trace: Vec<LossBreakdown>,
    pub best_iteration: usize,
}

impl FitResult {
    pub fn initial(&self) -> &LossBreakdown {
        &self.trace[0]
    }

    pub fn best(&self) -> &LossBreakdown {
        &self.trace[self.best_iteration]
    }
}

fn checked(b: LossBreakdown, g: &Gradient, iteration: usize) -> Result<LossBreakdown> {
    if let Some(term) = b.non_finite_term() {
        return Err(Error::NonFiniteLoss { iteration, term });
    }
    if !g.is_finite() {
        return Err(Error::NonFiniteLoss { iteration, term: "gradient" });
    }
    Ok(b)
}

/// Jointly fits the poses of every frame of `seq` with Adam.
pub fn fit_sequence(
    seq: &Sequence,
    initial: &[SkeletonPose],
    loss: &LossConfig,
    optim: &OptimConfig,
) -> Result<FitResult> {
    loss.validate()?;
    optim.validate()?;
    let mut poses = initial.to_vec();
    let mut state = AdamState::new(flatten(&poses).len());
    let mut trace: Vec<LossBreakdown> = Vec::with_capacity(optim.iterations + 1);
    let mut best_poses = poses.clone();
    let mut best_iteration = 0;

    for it in 0..=optim.iterations {
        let (b, g) = objective_gradient(seq, &poses, loss)?;
        let b = checked(b, &g, it)?;
        if it == 0 || b.total < trace[best_iteration].total {
            best_iteration = it;
            best_poses.clone_from(&poses);
        }
        trace.push(b);
        if it < optim.iterations {
            state.step_poses(&mut poses, &g, optim);
        }
    }
    Ok(FitResult { poses: best_poses, trace, best_iteration })
}
