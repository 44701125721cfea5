//! The preprocessed dataset index, `preprocessed/index.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segkit::dataset::{read_raw, Split};
use segkit::volume::LabelVolume;
use segkit::Tensor;

use crate::cli::SplitArg;
use crate::error::{Classify, CliResult};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    /// Paths relative to the index directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedIndex {
    pub target_size: [usize; 3],
    pub cases: Vec<IndexEntry>,
}

impl PreprocessedIndex {
    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).or_internal("serializing index")? + "\n";
        let path = dir.join(INDEX_FILE);
        fs::write(&path, text).or_data(format!("writing {}", path.display()))
    }

    /// A missing index means preprocessing has not been run, which is a usage error.
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).or_usage(format!(
            "reading {}; run `segkit preprocess` first",
            path.display()
        ))?;
        serde_json::from_str(&text).or_data(format!("parsing {}", path.display()))
    }

    pub fn select(&self, split: SplitArg) -> Vec<&IndexEntry> {
        self.cases
            .iter()
            .filter(|c| match split {
                SplitArg::All => true,
                SplitArg::Train => c.split == Split::Train,
                SplitArg::Val => c.split == Split::Val,
            })
            .collect()
    }
}

pub struct LoadedCase {
    pub id: String,
    /// `(4, D, H, W)`.
    pub image: Tensor<f32>,
    pub labels: LabelVolume,
}

pub fn load_case(dir: &Path, entry: &IndexEntry) -> CliResult<LoadedCase> {
    let image_path = dir.join(&entry.image);
    let mask_path = dir.join(&entry.mask);
    let image = read_raw(&image_path).or_data(format!("reading {}", image_path.display()))?;
    let mask = read_raw(&mask_path).or_data(format!("reading {}", mask_path.display()))?;
    let labels = LabelVolume::from_tensor(&mask)
        .or_data(format!("decoding labels in {}", mask_path.display()))?;
    if image.shape().len() != 4 || image.shape()[1..] != labels.dims() {
        return Err(crate::error::CliError::data(format!(
            "case {}: image shape {:?} does not match mask dims {:?}",
            entry.id,
            image.shape(),
            labels.dims()
        )));
    }
    Ok(LoadedCase {
        id: entry.id.clone(),
        image,
        labels,
    })
}
