//! On-disk formats: ASCII PLY frames, per-frame pose records and the dataset manifest.
//!
//! Reals are written in scientific notation with 9 significant digits, so a
//! write, read, write cycle is byte-stable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::skeleton::{LimbAttachment, PointCloud, SkeletonPose, SkeletonTopology};
use crate::synth::{AugmentationConfig, BodyConfig};

/// Formats a real with 9 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.8e}")
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), msg: msg.into() }
}

fn push_vec(line: &mut String, v: &Vec3) {
    for x in v.iter() {
        line.push(' ');
        line.push_str(&fmt_real(*x));
    }
}

/// Serializes a cloud as ASCII PLY. Optional fields appear as properties only when present.
pub fn ply_string(cloud: &PointCloud) -> Result<String> {
    cloud.check()?;
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {}", cloud.len()).expect("write to string");
    let mut props: Vec<&str> = vec!["x", "y", "z"];
    if cloud.forward_flow.is_some() {
        props.extend(["flow_x", "flow_y", "flow_z"]);
    }
    if cloud.backward_flow.is_some() {
        props.extend(["bflow_x", "bflow_y", "bflow_z"]);
    }
    for p in &props {
        writeln!(s, "property double {p}").expect("write to string");
    }
    if cloud.gt_label.is_some() {
        s.push_str("property int seg_label\n");
    }
    if cloud.attachment.is_some() {
        s.push_str("property int limb_id\nproperty double local_x\nproperty double local_y\nproperty double local_z\n");
    }
    if cloud.valid.is_some() {
        s.push_str("property uchar valid\n");
    }
    s.push_str("end_header\n");
    for i in 0..cloud.len() {
        let mut line = String::new();
        push_vec(&mut line, &cloud.points[i]);
        if let Some(f) = &cloud.forward_flow {
            push_vec(&mut line, &f[i]);
        }
        if let Some(f) = &cloud.backward_flow {
            push_vec(&mut line, &f[i]);
        }
        if let Some(l) = &cloud.gt_label {
            write!(line, " {}", l[i]).expect("write to string");
        }
        if let Some(a) = &cloud.attachment {
            write!(line, " {}", a[i].limb).expect("write to string");
            push_vec(&mut line, &a[i].local);
        }
        if let Some(v) = &cloud.valid {
            write!(line, " {}", u8::from(v[i])).expect("write to string");
        }
        s.push_str(&line[1..]);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, ply_string(cloud)?)?;
    Ok(())
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(parse_err(path, "missing ply magic"));
    }
    let mut n = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", f, ..] => return Err(parse_err(path, format!("unsupported format {f}"))),
            ["comment", ..] | [] => {}
            ["element", "vertex", c] => {
                n = Some(c.parse::<usize>().map_err(|e| parse_err(path, e.to_string()))?);
            }
            ["element", e, ..] => return Err(parse_err(path, format!("unsupported element {e}"))),
            ["property", _, name] => props.push(name.to_string()),
            ["end_header"] => break,
            _ => return Err(parse_err(path, format!("bad header line `{line}`"))),
        }
    }
    let n = n.ok_or_else(|| parse_err(path, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let need = |name: &str| col(name).ok_or_else(|| parse_err(path, format!("missing property {name}")));
    let triple = |a: &str, b: &str, c: &str| -> Result<Option<[usize; 3]>> {
        match col(a) {
            None => Ok(None),
            Some(i) => Ok(Some([i, need(b)?, need(c)?])),
        }
    };
    let xyz = triple("x", "y", "z")?.ok_or_else(|| parse_err(path, "missing property x"))?;
    let fwd = triple("flow_x", "flow_y", "flow_z")?;
    let bwd = triple("bflow_x", "bflow_y", "bflow_z")?;
    let local = triple("local_x", "local_y", "local_z")?;
    let (seg, limb, valid) = (col("seg_label"), col("limb_id"), col("valid"));
    if limb.is_some() != local.is_some() {
        return Err(parse_err(path, "limb_id and local_* must appear together"));
    }

    let mut cloud = PointCloud {
        points: Vec::with_capacity(n),
        forward_flow: fwd.map(|_| Vec::with_capacity(n)),
        backward_flow: bwd.map(|_| Vec::with_capacity(n)),
        gt_label: seg.map(|_| Vec::with_capacity(n)),
        attachment: limb.map(|_| Vec::with_capacity(n)),
        valid: valid.map(|_| Vec::with_capacity(n)),
    };
    for k in 0..n {
        let line = lines.next().ok_or_else(|| parse_err(path, format!("expected {n} vertices, found {k}")))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != props.len() {
            return Err(parse_err(
                path,
                format!("vertex {k} has {} values for {} properties", toks.len(), props.len()),
            ));
        }
        let real = |i: usize| toks[i].parse::<f64>().map_err(|e| parse_err(path, format!("vertex {k}: {e}")));
        let int = |i: usize| toks[i].parse::<usize>().map_err(|e| parse_err(path, format!("vertex {k}: {e}")));
        let v3 = |c: [usize; 3]| -> Result<Vec3> { Ok(Vec3::new(real(c[0])?, real(c[1])?, real(c[2])?)) };
        cloud.points.push(v3(xyz)?);
        if let (Some(c), Some(f)) = (fwd, &mut cloud.forward_flow) {
            f.push(v3(c)?);
        }
        if let (Some(c), Some(f)) = (bwd, &mut cloud.backward_flow) {
            f.push(v3(c)?);
        }
        if let (Some(c), Some(l)) = (seg, &mut cloud.gt_label) {
            l.push(int(c)?);
        }
        if let (Some(c), Some(lc), Some(a)) = (limb, local, &mut cloud.attachment) {
            a.push(LimbAttachment { limb: int(c)?, local: v3(lc)? });
        }
        if let (Some(c), Some(v)) = (valid, &mut cloud.valid) {
            v.push(int(c)? != 0);
        }
    }
    Ok(cloud)
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    parse_ply(&fs::read_to_string(path)?, path)
}

/// Keypoints of one frame with per-joint visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub pose: SkeletonPose,
    pub visible: Vec<bool>,
}

/// One `joint_name x y z visible` line per joint.
pub fn pose_string(topo: &SkeletonTopology, rec: &PoseRecord) -> Result<String> {
    rec.pose.check_against(topo)?;
    if rec.visible.len() != rec.pose.len() {
        return Err(Error::ShapeMismatch("one visibility flag per joint required".into()));
    }
    let mut s = String::new();
    for ((name, p), v) in topo.joint_names().iter().zip(&rec.pose.positions).zip(&rec.visible) {
        writeln!(s, "{name} {} {} {} {}", fmt_real(p.x), fmt_real(p.y), fmt_real(p.z), u8::from(*v))
            .expect("write to string");
    }
    Ok(s)
}

pub fn write_pose(path: &Path, topo: &SkeletonTopology, rec: &PoseRecord) -> Result<()> {
    fs::write(path, pose_string(topo, rec)?)?;
    Ok(())
}

/// Parses a pose record. Joints may appear in any order but each exactly once.
pub fn parse_pose(text: &str, topo: &SkeletonTopology, path: &Path) -> Result<PoseRecord> {
    let j = topo.num_joints();
    let mut pos = vec![None; j];
    let mut visible = vec![false; j];
    for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        let [name, x, y, z, v] = toks.as_slice() else {
            return Err(parse_err(path, format!("line {}: expected 5 fields", ln + 1)));
        };
        let idx = topo.joint_index(name).ok_or_else(|| parse_err(path, format!("unknown joint {name}")))?;
        if pos[idx].is_some() {
            return Err(parse_err(path, format!("joint {name} repeated")));
        }
        let real = |t: &str| t.parse::<f64>().map_err(|e| parse_err(path, format!("line {}: {e}", ln + 1)));
        pos[idx] = Some(Vec3::new(real(x)?, real(y)?, real(z)?));
        visible[idx] = match *v {
            "1" => true,
            "0" => false,
            other => return Err(parse_err(path, format!("visibility must be 0 or 1, got {other}"))),
        };
    }
    let positions = pos
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| parse_err(path, format!("joint {} missing", topo.joint_names()[i]))))
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseRecord { pose: SkeletonPose::new(positions)?, visible })
}

pub fn read_pose(path: &Path, topo: &SkeletonTopology) -> Result<PoseRecord> {
    parse_pose(&fs::read_to_string(path)?, topo, path)
}

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub cloud: PathBuf,
    pub pose: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub index: u64,
    pub frames: Vec<FrameEntry>,
}

/// Dataset description. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub master_seed: u64,
    pub sequence_count: usize,
    pub frames_per_sequence: usize,
    pub body: BodyConfig,
    pub augmentation: AugmentationConfig,
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetManifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), self.to_toml()?)?;
        Ok(())
    }

    /// Loads `dir/manifest.toml` and checks the schema and every referenced file.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        let m: Self = toml::from_str(&text).map_err(|e| parse_err(&path, e.to_string()))?;
        m.validate(dir)?;
        Ok(m)
    }

    pub fn validate(&self, dir: &Path) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported schema version {}", self.schema_version)));
        }
        if self.sequences.len() != self.sequence_count {
            return Err(Error::InvalidConfig(format!(
                "manifest lists {} sequences but declares {}",
                self.sequences.len(),
                self.sequence_count
            )));
        }
        for s in &self.sequences {
            if s.frames.len() != self.frames_per_sequence {
                return Err(Error::FrameCountMismatch(s.frames.len(), self.frames_per_sequence));
            }
            for f in &s.frames {
                for p in [&f.cloud, &f.pose] {
                    if !dir.join(p).is_file() {
                        return Err(Error::InvalidConfig(format!("missing dataset file {}", p.display())));
                    }
                }
            }
        }
        Ok(())
    }
}
