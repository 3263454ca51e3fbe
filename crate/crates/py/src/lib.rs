//! Python module `limbfit`: dataset generation, fitting and evaluation, plus a
//! few standalone primitives.

use std::path::PathBuf;

use limbfit::eval::{hungarian as solve, matched_mpjpe, mpjpe as plain_mpjpe, VisibilityMask};
use limbfit::segmentation::kmeans as lloyd;
use limbfit::{SkeletonPose, Vec3};
use limbfit_cli::{
    cmd_eval, cmd_fit, cmd_gen, cmd_perturb, run_gradcheck, CliError, EvalOptions, FitOptions, FlowSource, GenOptions,
    GradcheckOptions, InitMode, PerturbOptions, SegSource, WeightsPreset, EXIT_NUMERIC,
};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: impl Into<CliError>) -> PyErr {
    let e: CliError = e.into();
    if e.exit_code() == EXIT_NUMERIC {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn choice<T: clap::ValueEnum>(name: &str, value: &str) -> PyResult<T> {
    T::from_str(value, true).map_err(|_| PyValueError::new_err(format!("unknown {name} `{value}`")))
}

fn points(xs: Vec<[f64; 3]>) -> Vec<Vec3> {
    xs.into_iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect()
}

fn pose(xs: Vec<[f64; 3]>) -> PyResult<SkeletonPose> {
    SkeletonPose::new(points(xs)).map_err(py_err)
}

/// Generates a synthetic dataset under `out`; returns the number of sequences written.
#[pyfunction]
#[pyo3(signature = (out, sequences=1000, frames=16, seed=0))]
fn generate(out: PathBuf, sequences: usize, frames: usize, seed: u64) -> PyResult<usize> {
    let mut opts = GenOptions::new(out);
    opts.sequences = sequences;
    opts.frames = frames;
    opts.seed = seed;
    Ok(cmd_gen(&opts).map_err(py_err)?.sequence_count)
}

/// Fits every sequence of a dataset; returns the best objective per sequence.
#[pyfunction]
#[pyo3(signature = (input, out, weights="stage2", iters=100, lr=1e-3, seg="gt", flow="gt", init="perturb", sigma=0.06, seed=0))]
#[allow(clippy::too_many_arguments)]
fn fit(
    input: PathBuf,
    out: PathBuf,
    weights: &str,
    iters: usize,
    lr: f64,
    seg: &str,
    flow: &str,
    init: &str,
    sigma: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let opts = FitOptions {
        input,
        out,
        weights: choice::<WeightsPreset>("weights", weights)?,
        iters,
        lr,
        seg: choice::<SegSource>("seg", seg)?,
        flow: choice::<FlowSource>("flow", flow)?,
        init: choice::<InitMode>("init", init)?,
        sigma,
        seed,
    };
    let summary = cmd_fit(&opts).map_err(py_err)?;
    Ok(summary.sequences.iter().map(|s| s.trace[s.best_iteration].total).collect())
}

/// Per-frame MPJPE in meters as `(rows, mean)`, rows being `(frame, error)`.
#[pyfunction]
#[pyo3(signature = (pred, gt, matched=false))]
fn evaluate(pred: PathBuf, gt: PathBuf, matched: bool) -> PyResult<(Vec<(String, f64)>, f64)> {
    let t = cmd_eval(&EvalOptions { pred, gt, matched }).map_err(py_err)?;
    Ok((t.rows, t.mean))
}

/// Perturbation-recovery experiment; returns `(win_rate, median_reduction_pct)`.
#[pyfunction]
#[pyo3(signature = (input, sigma=0.06, trials=200, seed=0, iters=100, lr=1e-3))]
fn perturb(input: PathBuf, sigma: f64, trials: usize, seed: u64, iters: usize, lr: f64) -> PyResult<(f64, f64)> {
    let s = cmd_perturb(&PerturbOptions { input, sigma, trials, seed, iters, lr }).map_err(py_err)?;
    Ok((s.win_rate, s.median_reduction_pct))
}

/// Largest relative gradient error over `configs` random instances.
#[pyfunction]
#[pyo3(signature = (seed=0, configs=200, points=256))]
fn gradcheck(seed: u64, configs: usize, points: usize) -> PyResult<f64> {
    Ok(run_gradcheck(&GradcheckOptions { seed, configs, points }).map_err(py_err)?.worst())
}

/// Minimum-cost assignment of a square matrix: `(columns, cost)`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let a = solve(&cost).map_err(py_err)?;
    Ok((a.cols, a.cost))
}

/// MPJPE between two `(J, 3)` keypoint lists over the visible joints.
#[pyfunction]
#[pyo3(signature = (pred, gt, visible=None, matched=false))]
fn mpjpe(pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>, visible: Option<Vec<bool>>, matched: bool) -> PyResult<f64> {
    let (p, g) = (pose(pred)?, pose(gt)?);
    let mask = VisibilityMask(visible.unwrap_or_else(|| vec![true; g.len()]));
    let e = if matched { matched_mpjpe(&p, &g, &mask) } else { plain_mpjpe(&p, &g, &mask) };
    e.map_err(py_err)
}

/// k-means++ and Lloyd: `(labels, centers, inertia)`.
#[pyfunction]
#[pyo3(signature = (points_xyz, k, seed=0, max_iters=100))]
fn kmeans(
    points_xyz: Vec<[f64; 3]>,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> PyResult<(Vec<usize>, Vec<[f64; 3]>, f64)> {
    let l = lloyd(&points(points_xyz), k, seed, max_iters).map_err(py_err)?;
    let centers = l.centers.iter().map(|c| [c.x, c.y, c.z]).collect();
    Ok((l.labels, centers, l.inertia))
}

#[pymodule]
#[pyo3(name = "limbfit")]
fn limbfit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(mpjpe, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    Ok(())
}
