use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use limbfit::io::DatasetManifest;

fn limbfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_limbfit")).args(args).env("LIMBFIT_THREADS", "1").output().expect("spawn limbfit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_small(dir: &Path) {
    let o = limbfit(&["gen", "--sequences", "2", "--frames", "3", "--seed", "3", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_writes_a_valid_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let m = DatasetManifest::read(&data).unwrap();
    m.validate(&data).unwrap();
    assert_eq!((m.sequence_count, m.frames_per_sequence), (2, 3));
    assert!(data.join("seq_00001/frame_002.ply").is_file());
    assert!(data.join("seq_00001/frame_002.pose").is_file());
}

#[test]
fn ground_truth_evaluates_to_zero_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let d = data.to_str().unwrap();
    let o = limbfit(&["eval", "--pred", d, "--gt", d]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("frame,mpjpe_m,mpjpe_cm\n"));
    assert_eq!(out.lines().count(), 1 + 6 + 1);
    assert!(out.lines().last().unwrap().starts_with("mean,0.00000000e0,0.00"), "{out}");
}

#[test]
fn fit_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let fit = tmp.path().join("fit");
    gen_small(&data);
    let o = limbfit(&[
        "fit",
        "--input",
        data.to_str().unwrap(),
        "--out",
        fit.to_str().unwrap(),
        "--iters",
        "10",
        "--weights",
        "supp-demo",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fit.join("fit.toml").is_file());
    let trace = fs::read_to_string(fit.join("seq_00000/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 11);

    let o = limbfit(&["eval", "--pred", fit.to_str().unwrap(), "--gt", data.to_str().unwrap(), "--matched"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mean_cm: f64 = stdout(&o).lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(mean_cm > 0.0 && mean_cm < 20.0, "mean {mean_cm} cm");
}

#[test]
fn perturb_reports_every_trial() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let o = limbfit(&["perturb", "--input", data.to_str().unwrap(), "--trials", "3", "--iters", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1 + 3 + 1);
    assert!(out.lines().last().unwrap().starts_with("# trials 3 win_rate"));
}

#[test]
fn gradcheck_passes_on_a_few_configs() {
    let o = limbfit(&["gradcheck", "--configs", "3", "--points", "64"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1 + 3 + 1);
    assert!(out.lines().last().unwrap().starts_with("max,"));
}

#[test]
fn invalid_input_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let o = limbfit(&["fit", "--input", missing.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = limbfit(&["gen", "--frames", "1", "--sequences", "1", "--out", tmp.path().join("d").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = Command::new(env!("CARGO_BIN_EXE_limbfit"))
        .args(["gradcheck", "--configs", "1"])
        .env("LIMBFIT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_rejects_mismatched_frame_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let pred = tmp.path().join("pred");
    fs::create_dir_all(pred.join("seq_00000")).unwrap();
    fs::copy(data.join("seq_00000/frame_000.pose"), pred.join("seq_00000/frame_000.pose")).unwrap();
    let o = limbfit(&["eval", "--pred", pred.to_str().unwrap(), "--gt", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn degenerate_pose_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    // collapse every joint of one frame onto the first one
    let path = data.join("seq_00000/frame_001.pose");
    let text = fs::read_to_string(&path).unwrap();
    let first: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    let collapsed: String = text
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            format!("{} {} {} {} {}\n", f[0], first[1], first[2], first[3], f[4])
        })
        .collect();
    fs::write(&path, collapsed).unwrap();
    let fit = tmp.path().join("fit");
    let o = limbfit(&[
        "fit",
        "--input",
        data.to_str().unwrap(),
        "--out",
        fit.to_str().unwrap(),
        "--init",
        "gt",
        "--iters",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
