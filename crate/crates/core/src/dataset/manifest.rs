//! Case discovery and the train/validation partition.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::Modality;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("no case folders under {0}")]
    EmptyDataset(String),
    #[error("case id {0} appears more than once")]
    DuplicateCase(String),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub t1: PathBuf,
    pub t1ce: PathBuf,
    pub t2: PathBuf,
    pub flair: PathBuf,
    pub seg: PathBuf,
    pub split: Option<Split>,
}

impl CaseEntry {
    pub fn modality_path(&self, m: Modality) -> &Path {
        match m {
            Modality::T1 => &self.t1,
            Modality::T1ce => &self.t1ce,
            Modality::T2 => &self.t2,
            Modality::Flair => &self.flair,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<CaseEntry>,
    pub seed: Option<u64>,
    pub fraction: Option<f64>,
}

impl DatasetManifest {
    pub fn split_cases(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == Some(split))
    }

    pub fn to_json(&self) -> Result<String, ManifestError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ManifestError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Filename suffixes identifying each file of a case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuffixTable {
    pub t1: String,
    pub t1ce: String,
    pub t2: String,
    pub flair: String,
    pub seg: String,
}

impl Default for SuffixTable {
    fn default() -> Self {
        Self {
            t1: "_t1.nii".into(),
            t1ce: "_t1ce.nii".into(),
            t2: "_t2.nii".into(),
            flair: "_flair.nii".into(),
            seg: "_seg.nii".into(),
        }
    }
}

impl SuffixTable {
    fn roles(&self) -> [(&'static str, &str); 5] {
        [
            ("t1", &self.t1),
            ("t1ce", &self.t1ce),
            ("t2", &self.t2),
            ("flair", &self.flair),
            ("seg", &self.seg),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncompleteCase {
    pub dir: PathBuf,
    pub id: String,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanReport {
    pub manifest: DatasetManifest,
    pub incomplete: Vec<IncompleteCase>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Walks `root`'s case folders. Complete cases become manifest entries sorted by
/// id; folders missing any file are reported in [`ScanReport::incomplete`].
pub fn scan_dataset(
    root: impl AsRef<Path>,
    suffixes: &SuffixTable,
) -> Result<ScanReport, ManifestError> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    if dirs.is_empty() {
        return Err(ManifestError::EmptyDataset(root.display().to_string()));
    }
    dirs.sort();
    let mut cases = Vec::new();
    let mut incomplete = Vec::new();
    let mut seen = BTreeSet::new();
    for dir in dirs {
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        let dir_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut found: Vec<Option<PathBuf>> = Vec::new();
        let mut ids = BTreeSet::new();
        let mut missing = Vec::new();
        for (role, suffix) in suffixes.roles() {
            match names.iter().find(|n| n.ends_with(suffix)) {
                Some(n) => {
                    ids.insert(n[..n.len() - suffix.len()].to_string());
                    found.push(Some(dir.join(n)));
                }
                None => {
                    missing.push(role.to_string());
                    found.push(None);
                }
            }
        }
        let id = if ids.len() == 1 {
            ids.into_iter().next().expect("one id")
        } else {
            if ids.len() > 1 {
                missing.push(format!("consistent case prefix (found {ids:?})"));
            }
            dir_name
        };
        if !missing.is_empty() {
            incomplete.push(IncompleteCase { dir, id, missing });
            continue;
        }
        if !seen.insert(id.clone()) {
            return Err(ManifestError::DuplicateCase(id));
        }
        let [t1, t1ce, t2, flair, seg]: [PathBuf; 5] = found
            .into_iter()
            .map(|p| p.expect("complete"))
            .collect::<Vec<_>>()
            .try_into()
            .expect("five roles");
        cases.push(CaseEntry {
            id,
            t1,
            t1ce,
            t2,
            flair,
            seg,
            split: None,
        });
    }
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(ScanReport {
        manifest: DatasetManifest {
            cases,
            seed: None,
            fraction: None,
        },
        incomplete,
    })
}

/// Assigns `round(train_fraction · N)` cases to training. The assignment
/// depends only on the set of case ids, the fraction and the seed.
pub fn split_train_val(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, ManifestError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ManifestError::InvalidFraction(train_fraction));
    }
    let mut cases = manifest.cases.clone();
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * cases.len() as f64).round() as usize;
    for (rank, &i) in order.iter().enumerate() {
        cases[i].split = Some(if rank < n_train {
            Split::Train
        } else {
            Split::Val
        });
    }
    Ok(DatasetManifest {
        cases,
        seed: Some(seed),
        fraction: Some(train_fraction),
    })
}

/// Default split fraction: 250 training cases out of 350.
pub const DEFAULT_TRAIN_FRACTION: f64 = 250.0 / 350.0;
