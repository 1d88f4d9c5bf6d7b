//! Datasets, cloud files and checkpoints.

pub mod checkpoint;
pub mod cloudfile;
pub mod synthetic;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Labels, PointCloud};
use crate::network::Task;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use cloudfile::{decode_cloud, encode_cloud, read_cloud, write_cloud};
pub use synthetic::{generate_parts, generate_shapes};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a point-cloud file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checksum mismatch in section {0}")]
    Checksum(String),
    #[error("checkpoint does not match the network: {0}")]
    Mismatch(String),
    #[error("checkpoint holds {stored} values, requested {requested}")]
    Precision {
        stored: String,
        requested: &'static str,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Labeled clouds with a train/test split given as indices into `clouds`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub clouds: Vec<PointCloud>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Class names (classification) or part names (segmentation).
    pub names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    task: Task,
    names: Vec<String>,
    files: Vec<String>,
    train: Vec<usize>,
    test: Vec<usize>,
}

const MANIFEST: &str = "dataset.json";

impl Dataset {
    pub fn num_labels(&self) -> usize {
        self.names.len()
    }

    pub fn train_clouds(&self) -> Vec<&PointCloud> {
        self.train.iter().map(|&i| &self.clouds[i]).collect()
    }

    pub fn test_clouds(&self) -> Vec<&PointCloud> {
        self.test.iter().map(|&i| &self.clouds[i]).collect()
    }

    /// Checks that splits are disjoint and cover every cloud, and that every
    /// label matches the task and lies below `num_outputs`.
    pub fn validate(&self, num_outputs: usize) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.clouds.is_empty() {
            return bad("no clouds".into());
        }
        let train: BTreeSet<_> = self.train.iter().collect();
        let test: BTreeSet<_> = self.test.iter().collect();
        if train.len() != self.train.len() || test.len() != self.test.len() {
            return bad("duplicate split index".into());
        }
        if !train.is_disjoint(&test) {
            return bad("train and test splits overlap".into());
        }
        if train.len() + test.len() != self.clouds.len()
            || train.iter().chain(&test).any(|&&i| i >= self.clouds.len())
        {
            return bad("splits must cover every cloud exactly once".into());
        }
        for (i, c) in self.clouds.iter().enumerate() {
            let labels: Vec<u32> = match (self.task, c.labels()) {
                (Task::Classification, Labels::Cloud(l)) => vec![*l],
                (Task::Segmentation, Labels::Points(l)) => l.clone(),
                _ => return bad(format!("cloud {i}: labels do not match {:?}", self.task)),
            };
            if let Some(l) = labels.iter().find(|&&l| l as usize >= num_outputs) {
                return bad(format!("cloud {i}: label {l} >= {num_outputs} outputs"));
            }
        }
        Ok(())
    }

    /// Re-splits a classification set: the last `test_per_class` clouds of
    /// every class (in storage order) form the test split.
    pub fn split_per_class(&mut self, test_per_class: usize) -> Result<(), DataError> {
        let mut by_class: Vec<Vec<usize>> = Vec::new();
        for (i, c) in self.clouds.iter().enumerate() {
            let Labels::Cloud(l) = c.labels() else {
                return Err(DataError::Invalid(format!("cloud {i} has no class label")));
            };
            let l = *l as usize;
            if by_class.len() <= l {
                by_class.resize(l + 1, Vec::new());
            }
            by_class[l].push(i);
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (class, members) in by_class.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            if members.len() < test_per_class {
                return Err(DataError::Invalid(format!(
                    "class {class} has {} clouds, fewer than {test_per_class}",
                    members.len()
                )));
            }
            let cut = members.len() - test_per_class;
            train.extend_from_slice(&members[..cut]);
            test.extend_from_slice(&members[cut..]);
        }
        self.train = train;
        self.test = test;
        Ok(())
    }

    /// Writes one cloud file per cloud plus a `dataset.json` manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let mut files = Vec::with_capacity(self.clouds.len());
        for (i, c) in self.clouds.iter().enumerate() {
            let name = format!("{i:05}.shcl");
            write_cloud(c, dir.join(&name))?;
            files.push(name);
        }
        let manifest = Manifest {
            task: self.task,
            names: self.names.clone(),
            files,
            train: self.train.clone(),
            test: self.test.clone(),
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| DataError::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DataError> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let clouds = m
            .files
            .iter()
            .map(|f| read_cloud(dir.join(f)))
            .collect::<Result<Vec<_>, _>>()?;
        let data = Dataset {
            task: m.task,
            clouds,
            train: m.train,
            test: m.test,
            names: m.names,
        };
        data.validate(data.num_labels())?;
        Ok(data)
    }
}
