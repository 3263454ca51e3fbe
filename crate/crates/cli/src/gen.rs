use std::fs;
use std::path::{Path, PathBuf};

use limbfit::io::{write_ply, write_pose, DatasetManifest, FrameEntry, PoseRecord, SequenceEntry, SCHEMA_VERSION};
use limbfit::synth::augment::AugmentContext;
use limbfit::synth::{augment, generate_sequence, AugmentationConfig, BodyConfig, CapsuleBody, SynthConfig};
use limbfit::{Error, Result};
use rayon::prelude::*;

use crate::dataset::{cloud_path, pose_path, sequence_dir};
use crate::{mix_seed, CliResult};

#[derive(Debug, Clone)]
pub struct GenOptions {
    pub sequences: usize,
    pub frames: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub augmentation: AugmentationConfig,
    pub body: BodyConfig,
}

impl GenOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            sequences: 1000,
            frames: 16,
            seed: 0,
            out: out.into(),
            augmentation: AugmentationConfig::default(),
            body: BodyConfig::default(),
        }
    }
}

/// Reads an augmentation config from a TOML file.
pub fn read_augmentation(path: &Path) -> Result<AugmentationConfig> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), msg: e.to_string() })
}

fn write_sequence(opts: &GenOptions, base: &CapsuleBody, synth: &SynthConfig, index: u64) -> Result<SequenceEntry> {
    let seq = generate_sequence(base, synth, opts.seed, index)?;
    let frames = if opts.augmentation.any_enabled() {
        let ctx = AugmentContext {
            body: &seq.body,
            raycaster: &synth.raycaster,
            background_class: seq.body.topology().background_class(),
        };
        augment(&seq.frames, &opts.augmentation, &ctx, mix_seed(opts.seed, index))?
    } else {
        seq.frames
    };
    fs::create_dir_all(opts.out.join(sequence_dir(index)))?;
    let topo = base.topology();
    let mut entries = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        let (cloud, pose) = (cloud_path(index, t), pose_path(index, t));
        write_ply(&opts.out.join(&cloud), &f.cloud)?;
        let rec = PoseRecord { pose: f.pose.clone(), visible: f.visibility.clone() };
        write_pose(&opts.out.join(&pose), topo, &rec)?;
        entries.push(FrameEntry { cloud, pose });
    }
    Ok(SequenceEntry { index, frames: entries })
}

/// Generates a synthetic dataset: one PLY and one pose file per frame plus a manifest.
pub fn cmd_gen(opts: &GenOptions) -> CliResult<DatasetManifest> {
    let synth = SynthConfig { frames: opts.frames, ..Default::default() };
    synth.validate()?;
    opts.augmentation.validate()?;
    let base = CapsuleBody::from_config(&opts.body)?;
    fs::create_dir_all(&opts.out)?;
    let sequences = (0..opts.sequences as u64)
        .into_par_iter()
        .map(|i| write_sequence(opts, &base, &synth, i))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        master_seed: opts.seed,
        sequence_count: opts.sequences,
        frames_per_sequence: opts.frames,
        body: opts.body.clone(),
        augmentation: opts.augmentation,
        sequences,
    };
    manifest.write(&opts.out)?;
    Ok(manifest)
}
