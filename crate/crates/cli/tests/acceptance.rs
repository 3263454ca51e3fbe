//! Acceptance criteria 1 to 9, one report line each.
//!
//! Run with `cargo test -p limbfit-cli --test acceptance -- --nocapture` to see
//! the report. Set `LIMBFIT_UPDATE_BASELINE=1` to rewrite the recovery baseline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use limbfit::eval::{hungarian, matched_mpjpe, mpjpe, VisibilityMask};
use limbfit::gradcheck::{random_case, CaseConfig};
use limbfit::losses::{
    flow_loss, j2p_loss, p2l_loss, seg_cross_entropy, seg_self_entropy, sym_loss, FramePair, Sequence,
};
use limbfit::segmentation::kmeans_traced;
use limbfit::synth::raycast::{posed_capsules, surface_distance};
use limbfit::synth::{forward_kinematics, generate_sequence, CapsuleBody, SynthConfig};
use limbfit::{LossConfig, PointCloud, SkeletonPose, SoftAssignment, Vec3};
use limbfit_cli::{
    cmd_fit, cmd_gen, cmd_perturb, run_gradcheck, FitOptions, FlowSource, GenOptions, GradcheckOptions, PerturbOptions,
    SegSource, GRADCHECK_TOLERANCE,
};
use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const PERTURB_BUDGET: Duration = Duration::from_secs(600);
const INVARIANCE_TOL: f64 = 1e-9;
const ZERO_TOL: f64 = 1e-12;
const SYNTH_FLOW_TOL: f64 = 1e-9;
const SURFACE_TOL: f64 = 1e-6;
const MIN_WIN_RATE: f64 = 0.9;
/// Allowed drift of the median reduction from the committed baseline, in percentage points.
const BASELINE_DRIFT: f64 = 0.5;

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool").install(f)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let table = single_threaded(|| run_gradcheck(&GradcheckOptions::default())).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let names = ["flow", "p2l", "sym", "j2p"];
    let mut worst: Vec<(String, f64)> = names
        .iter()
        .enumerate()
        .map(|(k, n)| (n.to_string(), table.rows.iter().map(|r| r.terms[k].1).fold(0.0, f64::max)))
        .collect();
    worst.push(("stage2".into(), table.rows.iter().map(|r| r.combined).fold(0.0, f64::max)));
    let pass =
        table.rows.len() == 200 && worst.iter().all(|(_, e)| *e <= GRADCHECK_TOLERANCE) && elapsed < GRADCHECK_BUDGET;
    let per_term: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Outcome::new(
        pass,
        format!(
            "{} configs, worst relative error {} (tol 1e-4), {:.1}s single-threaded",
            table.rows.len(),
            per_term.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn rotate_cloud(c: &PointCloud, rot: &Rotation3<f64>, t: &Vec3) -> PointCloud {
    let mut out = c.clone();
    out.points = c.points.iter().map(|p| rot * p + t).collect();
    out.forward_flow = c.forward_flow.as_ref().map(|f| f.iter().map(|v| rot * v).collect());
    out.backward_flow = c.backward_flow.as_ref().map(|f| f.iter().map(|v| rot * v).collect());
    out
}

fn flow_invariance() -> Outcome {
    let cfg = LossConfig::stage2();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let case = random_case(1000 + k, &CaseConfig { points: 128, ..Default::default() }).expect("case");
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(0.0..std::f64::consts::PI));
        let t = Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..2.0));
        let seq = &case.seq;
        let moved = Sequence::new(
            seq.topology.clone(),
            seq.clouds.iter().map(|c| rotate_cloud(c, &rot, &t)).collect(),
            seq.assignments.clone(),
        )
        .expect("sequence");
        let poses: Vec<SkeletonPose> = case
            .poses
            .iter()
            .map(|p| SkeletonPose::new(p.positions.iter().map(|y| rot * y + t).collect()).expect("pose"))
            .collect();
        let a = flow_loss(&seq.pair(0, &case.poses), &seq.topology, &cfg).expect("flow");
        let b = flow_loss(&moved.pair(0, &poses), &moved.topology, &cfg).expect("flow");
        worst = worst.max((a - b).abs());
    }
    Outcome::new(worst <= INVARIANCE_TOL, format!("100 rigid transforms, max |loss difference| {worst:.2e} (tol 1e-9)"))
}

/// Unit vectors spanning the plane perpendicular to `axis`.
fn perpendicular_basis(axis: &Vec3) -> (Vec3, Vec3) {
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = axis.cross(&helper).normalize();
    (u, axis.cross(&u))
}

fn zero_loss_constructions() -> Outcome {
    let body = CapsuleBody::default_body();
    let topo = body.topology().clone();
    let pose = forward_kinematics(&body, &body.rest_angles(), &limbfit::synth::Placement::identity()).pose;
    let cfg = LossConfig::stage2();
    let classes = topo.num_classes();

    // Rings of constant radius around every limb, and points on every limb axis.
    let (mut ring, mut ring_labels, mut axis_pts, mut axis_labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for limb in topo.limbs() {
        let (a, b) = (pose.positions[limb.parent], pose.positions[limb.child]);
        let dir = (b - a).normalize();
        let (u, v) = perpendicular_basis(&dir);
        for s in 0..20 {
            let along = a + (b - a) * (s as f64 / 19.0);
            axis_pts.push(along);
            axis_labels.push(limb.parent);
            for q in 0..12 {
                let th = q as f64 * std::f64::consts::TAU / 12.0;
                ring.push(along + (u * th.cos() + v * th.sin()) * 0.07);
                ring_labels.push(limb.parent);
            }
        }
    }
    let ring_w = SoftAssignment::one_hot(&ring_labels, classes).expect("one-hot");
    let sym = sym_loss(&PointCloud::from_points(ring), &ring_w, &pose, &topo, &cfg).expect("sym");
    let axis_cloud = PointCloud::from_points(axis_pts);
    let axis_w = SoftAssignment::one_hot(&axis_labels, classes).expect("one-hot");
    let p2l = p2l_loss(&axis_cloud, &axis_w, &pose, &topo, &cfg).expect("p2l");

    // Joints moved onto the centroid of their own part.
    let mut centroid_pose = pose.clone();
    for j in 0..topo.num_joints() {
        let pts: Vec<Vec3> =
            axis_cloud.points.iter().zip(&axis_labels).filter(|(_, &l)| l == j).map(|(p, _)| *p).collect();
        if !pts.is_empty() {
            centroid_pose.positions[j] = pts.iter().sum::<Vec3>() / pts.len() as f64;
        }
    }
    let j2p = j2p_loss(&axis_cloud, &axis_w, &centroid_pose, &cfg).expect("j2p").value;

    let seg_ce = seg_cross_entropy(&axis_w, &axis_w, cfg.eps_prob).expect("seg");
    let seg_self = seg_self_entropy(&axis_cloud, &axis_w, cfg.eps_prob).expect("seg");
    let seg = seg_ce.max(seg_self);

    let vals = [sym, p2l, j2p, seg];
    Outcome::new(
        vals.iter().all(|v| v.abs() <= ZERO_TOL),
        format!("sym {sym:.1e}, p2l {p2l:.1e}, j2p {j2p:.1e}, seg {seg:.1e} (tol 1e-12)"),
    )
}

fn synthetic_consistency() -> Outcome {
    let body = CapsuleBody::default_body();
    let cfg = SynthConfig { frames: 3, ..Default::default() };
    let loss = LossConfig::stage2();
    let (mut pairs, mut worst_flow, mut worst_surface, mut range_ok) = (0, 0.0f64, 0.0f64, true);
    let mut index = 0;
    while pairs < 50 {
        let s = generate_sequence(&body, &cfg, 44, index).expect("sequence");
        index += 1;
        let topo = s.body.topology();
        range_ok &= (cfg.distance_min..=cfg.distance_max).contains(&s.distance);
        let origin = cfg.raycaster.origin();
        let reach = s.body.reach();
        for (t, f) in s.frames.iter().enumerate() {
            let caps = posed_capsules(&s.body, &forward_kinematics(&s.body, &s.angles[t], &s.placement));
            for p in &f.cloud.points {
                worst_surface = worst_surface.max(surface_distance(p, &caps));
                let horizontal = ((p.x - origin.x).powi(2) + (p.y - origin.y).powi(2)).sqrt();
                range_ok &= (horizontal - s.distance).abs() <= reach;
            }
        }
        let w: Vec<SoftAssignment> = s
            .frames
            .iter()
            .map(|f| {
                SoftAssignment::one_hot(f.cloud.gt_label.as_ref().expect("labels"), topo.num_classes())
                    .expect("one-hot")
            })
            .collect();
        for t in 0..s.frames.len() - 1 {
            if pairs == 50 {
                break;
            }
            let (a, b) = (&s.frames[t], &s.frames[t + 1]);
            let pair = FramePair {
                cloud_t: &a.cloud,
                cloud_t1: &b.cloud,
                w_t: &w[t],
                w_t1: &w[t + 1],
                pose_t: &a.pose,
                pose_t1: &b.pose,
            };
            worst_flow = worst_flow.max(flow_loss(&pair, topo, &loss).expect("flow"));
            pairs += 1;
        }
    }
    Outcome::new(
        worst_flow <= SYNTH_FLOW_TOL && worst_surface <= SURFACE_TOL && range_ok,
        format!(
            "{pairs} pairs, max flow loss {worst_flow:.1e} (tol 1e-9), max surface distance {worst_surface:.1e} m (tol 1e-6), placement range {}",
            if range_ok { "ok" } else { "violated" }
        ),
    )
}

fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

fn hungarian_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=7);
        // integer costs keep every sum exact, and the narrow range forces ties
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0..20) as f64).collect()).collect();
        let a = hungarian(&cost).expect("square");
        let row_sum: f64 = a.pairs().map(|(r, c)| cost[r][c]).sum();
        if a.cost != brute_force_min(&cost) || row_sum != a.cost {
            mismatches += 1;
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("1000 matrices with n <= 7, {mismatches} cost mismatches against brute force"),
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct RecoveryBaseline {
    sigma: f64,
    trials: usize,
    win_rate: f64,
    median_reduction_pct: f64,
}

fn baseline_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/baselines/perturb_recovery.toml")
}

fn perturbation_recovery() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut gen = GenOptions::new(dir.path());
    gen.sequences = 50;
    gen.frames = 5;
    gen.seed = 2024;
    cmd_gen(&gen).expect("gen");
    let opts = PerturbOptions { trials: 200, ..PerturbOptions::new(dir.path()) };
    let start = Instant::now();
    let summary = cmd_perturb(&opts).expect("perturb");
    let elapsed = start.elapsed();

    let current = RecoveryBaseline {
        sigma: opts.sigma,
        trials: summary.trials.len(),
        win_rate: summary.win_rate,
        median_reduction_pct: summary.median_reduction_pct,
    };
    let path = baseline_path();
    if std::env::var_os("LIMBFIT_UPDATE_BASELINE").is_some() || !path.exists() {
        fs::create_dir_all(path.parent().expect("parent")).expect("mkdir");
        fs::write(&path, toml::to_string(&current).expect("toml")).expect("write baseline");
    }
    let baseline: RecoveryBaseline =
        toml::from_str(&fs::read_to_string(&path).expect("baseline")).expect("baseline toml");
    let drift = (current.median_reduction_pct - baseline.median_reduction_pct).abs();
    Outcome::new(
        current.trials == 200 && current.win_rate >= MIN_WIN_RATE && drift <= BASELINE_DRIFT && elapsed < PERTURB_BUDGET,
        format!(
            "{} trials, improved in {:.1}% (need >= 90%), median reduction {:.2}% (baseline {:.2}%, drift {drift:.2}), {:.1}s",
            current.trials,
            100.0 * current.win_rate,
            current.median_reduction_pct,
            baseline.median_reduction_pct,
            elapsed.as_secs_f64()
        ),
    )
}

fn kmeans_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut increases = 0;
    for i in 0..100 {
        let n = rng.random_range(20..200);
        let k = rng.random_range(1..=8);
        let pts: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let (_, trace) = kmeans_traced(&pts, k, i, 100).expect("kmeans");
        increases += trace.windows(2).filter(|w| w[1] > w[0]).count();
    }

    let mut failures = 0;
    for i in 0..100 {
        let k = rng.random_range(2..=6);
        let spread = 0.01;
        // centers on a line 10 spreads apart at the closest
        let centers: Vec<Vec3> = (0..k).map(|c| Vec3::new(c as f64 * 12.0 * spread * 2.0, 0.0, 0.0)).collect();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (c, ctr) in centers.iter().enumerate() {
            for _ in 0..30 {
                let off =
                    Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                pts.push(ctr + off * spread);
                truth.push(c);
            }
        }
        let (lab, _) = kmeans_traced(&pts, k, 100 + i, 100).expect("kmeans");
        // same partition up to renaming
        let mut map = BTreeMap::new();
        let consistent = truth.iter().zip(&lab.labels).all(|(t, l)| *map.entry(*t).or_insert(*l) == *l);
        let distinct = map.values().collect::<std::collections::BTreeSet<_>>().len() == k;
        if !(consistent && distinct) {
            failures += 1;
        }
    }
    Outcome::new(
        increases == 0 && failures == 0,
        format!("{increases} inertia increases over 100 traces; {failures} of 100 separated instances not recovered"),
    )
}

fn metric_fixtures() -> Outcome {
    let body = CapsuleBody::default_body();
    let gt = forward_kinematics(&body, &body.rest_angles(), &limbfit::synth::Placement::identity()).pose;
    let n = gt.len();
    let all = VisibilityMask::all(n);
    let offset = SkeletonPose::new(gt.positions.iter().map(|p| p + Vec3::new(0.0, 0.03, 0.0)).collect()).expect("pose");
    let cm = mpjpe(&offset, &gt, &all).expect("mpjpe") * 100.0;

    let mut rev = gt.positions.clone();
    rev.reverse();
    let matched = matched_mpjpe(&SkeletonPose::new(rev).expect("pose"), &gt, &all).expect("matched");

    // Hidden joints carry a large error that must not leak into the mean.
    let mask = VisibilityMask((0..n).map(|j| j % 3 != 0).collect());
    let mut pred = gt.positions.clone();
    let mut expected = 0.0;
    for (j, p) in pred.iter_mut().enumerate() {
        let e = if mask.0[j] { 0.01 * (j + 1) as f64 } else { 5.0 };
        *p += Vec3::new(0.0, 0.0, e);
        if mask.0[j] {
            expected += (*p - gt.positions[j]).norm();
        }
    }
    expected /= mask.count() as f64;
    let masked = mpjpe(&SkeletonPose::new(pred).expect("pose"), &gt, &mask).expect("mpjpe");

    let pass = format!("{cm:.2}") == "3.00"
        && (cm - 3.0).abs() <= 1e-12
        && matched == 0.0
        && (masked - expected).abs() <= 1e-15;
    Outcome::new(
        pass,
        format!("offset {cm:.2} cm, permuted matched {matched:.1e}, masked {masked:.6} vs {expected:.6}"),
    )
}

fn tree_digest(root: &Path) -> String {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        let mut entries: Vec<_> = fs::read_dir(dir).expect("read_dir").map(|e| e.expect("entry").path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).expect("prefix").to_path_buf());
            }
        }
    }
    let mut files = Vec::new();
    walk(root, root, &mut files);
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(root.join(&rel)).expect("read"));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let (data, fit_gt, fit_km) = (tmp.path().join("data"), tmp.path().join("fit_gt"), tmp.path().join("fit_km"));
    // Both runs use the same paths, since the input path is part of the recorded settings.
    let run = || {
        let mut gen = GenOptions::new(&data);
        gen.sequences = 3;
        gen.frames = 3;
        gen.seed = 99;
        gen.augmentation =
            limbfit::synth::AugmentationConfig { seed: 5, ..limbfit::synth::AugmentationConfig::all_enabled() };
        cmd_gen(&gen).expect("gen");
        cmd_fit(&FitOptions { iters: 20, ..FitOptions::new(&data, &fit_gt) }).expect("fit");
        cmd_fit(&FitOptions {
            iters: 20,
            seg: SegSource::Kmeans,
            flow: FlowSource::Rigid,
            ..FitOptions::new(&data, &fit_km)
        })
        .expect("fit");
        let digests = [tree_digest(&data), tree_digest(&fit_gt), tree_digest(&fit_km)];
        for d in [&data, &fit_gt, &fit_km] {
            fs::remove_dir_all(d).expect("cleanup");
        }
        digests
    };
    let a = run();
    let b = run();
    Outcome::new(
        a == b,
        format!(
            "gen {}, fit {}, fit (k-means, rigid flow) {}",
            same(&a[0], &b[0]),
            same(&a[1], &b[1]),
            same(&a[2], &b[2])
        ),
    )
}

fn same(a: &str, b: &str) -> String {
    if a == b {
        format!("identical ({})", &a[..12])
    } else {
        "differ".into()
    }
}

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("gradient suite", gradient_suite),
        ("flow-loss rigid invariance", flow_invariance),
        ("zero-loss constructions", zero_loss_constructions),
        ("synthetic consistency", synthetic_consistency),
        ("hungarian oracle", hungarian_oracle),
        ("perturbation recovery", perturbation_recovery),
        ("k-means", kmeans_checks),
        ("metric fixtures", metric_fixtures),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        println!("criterion {}: {} {}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, name, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
