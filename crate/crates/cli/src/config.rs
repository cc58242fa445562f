//! Run configuration and dataset loading.

use crate::error::CliError;
use anyhow::Context as _;
use serde::{Deserialize, Serialize};
use sigshot::episode::ImageDataset;
use sigshot::model::ModelConfig;
use sigshot::rng;
use sigshot::sig::ImageKind;
use sigshot::skeleton::{self, default_ntu_topology, SkeletonSequence, SynthManifest};
use sigshot::train::TrainConfig;
use std::path::{Path, PathBuf};

/// Generation parameters for a random synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub instances: usize,
    pub frames: usize,
    pub noise_sigma: f64,
    /// Instance speeds are uniform in `[1 − jitter, 1 + jitter]`.
    pub speed_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 15,
            instances: 10,
            frames: 64,
            noise_sigma: 0.01,
            speed_jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// An `index.json` written by `sigshot synth`, relative paths resolved
    /// against the config file.
    Index(PathBuf),
    /// A manifest generated in memory from the run seed.
    Synthetic(SyntheticSpec),
}

/// Class counts of the disjoint splits, taken in ascending class-id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 10,
            val: 0,
            test: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(CliError::Data)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: String| CliError::Usage(format!("invalid config: {e}"));
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        if self.split.train < self.train.way {
            return Err(usage(format!(
                "{} training classes cannot form {}-way episodes",
                self.split.train, self.train.way
            )));
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if s.classes < self.split.train + self.split.val + self.split.test {
                return Err(usage("synthetic class count is smaller than the split".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub file: String,
    pub label: u32,
    pub instance: usize,
    pub speed: f64,
}

/// The `index.json` written next to synthesized skeleton files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub frames: usize,
    pub entries: Vec<IndexEntry>,
}

pub fn sequence_id(label: u32, instance: usize) -> String {
    format!("a{label:03}_n{instance:03}")
}

/// Generates every manifest instance with its id and index entry.
pub fn synthesize(manifest: &SynthManifest) -> Result<Vec<(IndexEntry, SkeletonSequence)>, CliError> {
    manifest
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let seqs = manifest.generate().map_err(|e| CliError::Data(e.into()))?;
    let mut out = Vec::with_capacity(seqs.len());
    let mut it = seqs.into_iter();
    for c in &manifest.classes {
        for (k, inst) in c.instances.iter().enumerate() {
            let seq = it.next().expect("one sequence per instance");
            let id = sequence_id(c.class_id, k);
            out.push((
                IndexEntry {
                    file: format!("{id}.skeleton"),
                    id,
                    label: c.class_id,
                    instance: k,
                    speed: inst.speed,
                },
                seq,
            ));
        }
    }
    Ok(out)
}

pub fn synthetic_manifest(spec: &SyntheticSpec, seed: u64) -> SynthManifest {
    SynthManifest::random(
        spec.classes,
        spec.instances,
        spec.frames,
        spec.noise_sigma,
        spec.speed_jitter,
        rng::sub_seed(seed, "data"),
    )
}

pub fn read_skeleton(path: &Path) -> Result<SkeletonSequence, CliError> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::Data)?;
    skeleton::parse_ntu_skeleton(&text)
        .map_err(|e| CliError::Data(anyhow::anyhow!("{}: {e}", path.display())))
}

/// Loads the labelled sequences of a run's dataset.
pub fn load_sequences(cfg: &RunConfig, base: &Path) -> Result<Vec<(String, SkeletonSequence)>, CliError> {
    match &cfg.dataset {
        DatasetSource::Synthetic(spec) => Ok(synthesize(&synthetic_manifest(spec, cfg.train.seed))?
            .into_iter()
            .map(|(e, s)| (e.id, s))
            .collect()),
        DatasetSource::Index(path) => {
            let path = base.join(path);
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading index {}", path.display()))
                .map_err(CliError::Data)?;
            let index: DatasetIndex = serde_json::from_str(&text)
                .with_context(|| format!("parsing index {}", path.display()))
                .map_err(CliError::Data)?;
            let dir = path.parent().unwrap_or(Path::new("."));
            index
                .entries
                .iter()
                .map(|e| {
                    let mut seq = read_skeleton(&dir.join(&e.file))?;
                    seq.label = Some(e.label);
                    Ok((e.id.clone(), seq))
                })
                .collect()
        }
    }
}

/// The train, validation and test image sets at `resolution`.
pub fn load_splits(
    cfg: &RunConfig,
    base: &Path,
    resolution: [usize; 2],
    kinds: &[ImageKind],
) -> Result<[ImageDataset; 3], CliError> {
    let seqs = load_sequences(cfg, base)?;
    let ds = ImageDataset::render(&seqs, &default_ntu_topology(), (resolution[0], resolution[1]), kinds)
        .map_err(|e| CliError::Data(e.into()))?;
    ds.split(cfg.split.train, cfg.split.val, cfg.split.test)
        .map_err(|e| CliError::Data(e.into()))
}
