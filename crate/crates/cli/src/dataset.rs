//! Dataset directory layout and loading.

use std::path::{Path, PathBuf};

use limbfit::io::{read_ply, read_pose, DatasetManifest, PoseRecord};
use limbfit::synth::CapsuleBody;
use limbfit::{PointCloud, Result};

pub fn sequence_dir(index: u64) -> String {
    format!("seq_{index:05}")
}

pub fn frame_stem(t: usize) -> String {
    format!("frame_{t:03}")
}

pub fn cloud_path(index: u64, t: usize) -> PathBuf {
    Path::new(&sequence_dir(index)).join(format!("{}.ply", frame_stem(t)))
}

pub fn pose_path(index: u64, t: usize) -> PathBuf {
    Path::new(&sequence_dir(index)).join(format!("{}.pose", frame_stem(t)))
}

#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub index: u64,
    pub clouds: Vec<PointCloud>,
    pub gt: Vec<PoseRecord>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub body: CapsuleBody,
    pub sequences: Vec<LoadedSequence>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(dir)?;
    let body = CapsuleBody::from_config(&manifest.body)?;
    let topo = body.topology();
    let sequences = manifest
        .sequences
        .iter()
        .map(|s| {
            let clouds = s.frames.iter().map(|f| read_ply(&dir.join(&f.cloud))).collect::<Result<_>>()?;
            let gt = s.frames.iter().map(|f| read_pose(&dir.join(&f.pose), topo)).collect::<Result<_>>()?;
            Ok(LoadedSequence { index: s.index, clouds, gt })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { root: dir.to_path_buf(), manifest, body, sequences })
}
