//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   manifest          one "NNNN train|val" line per sample
//!   images/NNNN.ppmt  f32 [3, H, W]
//!   labels/NNNN.ppmt  u8  [H, W]
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tensor_file::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest";
pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub split: Split,
    /// `[3, H, W]`
    pub image: Tensor<f32>,
    /// `[H, W]`
    pub label: Tensor<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<(u32, Split)>,
}

fn file_name(id: u32) -> String {
    format!("{id:04}.ppmt")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    /// Write `samples` under `root`, creating directories as needed.
    pub fn create(root: impl AsRef<Path>, samples: &[Sample]) -> Result<Dataset> {
        let root = root.as_ref().to_path_buf();
        create_dir(&root.join(IMAGES_DIR))?;
        create_dir(&root.join(LABELS_DIR))?;
        let mut manifest = String::new();
        for s in samples {
            let [_, h, w] = s.image.dims3()?;
            if s.image.shape()[0] != 3 || s.label.shape() != [h, w] {
                return Err(Error::shape(format!(
                    "sample {}: image {:?} and label {:?} disagree",
                    s.id,
                    s.image.shape(),
                    s.label.shape()
                )));
            }
            write_tensor(root.join(IMAGES_DIR).join(file_name(s.id)), &s.image)?;
            write_tensor(root.join(LABELS_DIR).join(file_name(s.id)), &s.label)?;
            manifest.push_str(&format!("{:04} {}\n", s.id, s.split));
        }
        let path = root.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        Ok(Dataset { root, entries: samples.iter().map(|s| (s.id, s.split)).collect() })
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Dataset> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("{}:{}: expected \"NNNN train|val\", got {line:?}", path.display(), n + 1));
            let mut parts = line.split_whitespace();
            let id = parts.next().and_then(|s| s.parse::<u32>().ok()).ok_or_else(bad)?;
            let split = parts.next().ok_or_else(bad)?.parse::<Split>().map_err(|_| bad())?;
            if parts.next().is_some() {
                return Err(bad());
            }
            entries.push((id, split));
        }
        Ok(Dataset { root, entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self, split: Split) -> Vec<u32> {
        self.entries.iter().filter(|e| e.1 == split).map(|e| e.0).collect()
    }

    pub fn load(&self, id: u32) -> Result<Sample> {
        let split = self
            .entries
            .iter()
            .find(|e| e.0 == id)
            .map(|e| e.1)
            .ok_or_else(|| Error::Usage(format!("sample {id} is not in the manifest")))?;
        let image: Tensor<f32> = read_tensor(self.root.join(IMAGES_DIR).join(file_name(id)))?;
        let label: Tensor<u8> = read_tensor(self.root.join(LABELS_DIR).join(file_name(id)))?;
        let [c, h, w] = image.dims3()?;
        if c != 3 || label.shape() != [h, w] {
            return Err(Error::shape(format!(
                "sample {id}: image {:?} and label {:?} disagree",
                image.shape(),
                label.shape()
            )));
        }
        Ok(Sample { id, split, image, label })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.ids(split).into_iter().map(|id| self.load(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{synth_generate, SyntheticSpec};

    fn spec() -> SyntheticSpec {
        SyntheticSpec { train_samples: 3, val_samples: 2, image_size: 16, ..Default::default() }
    }

    #[test]
    fn write_then_open() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("nested/data");
        let samples = synth_generate(&spec()).unwrap();
        Dataset::create(&root, &samples).unwrap();
        let ds = Dataset::open(&root).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.ids(Split::Train), vec![0, 1, 2]);
        assert_eq!(ds.ids(Split::Val), vec![3, 4]);
        assert_eq!(ds.load_split(Split::Train).unwrap(), samples[..3].to_vec());
        let manifest = fs::read_to_string(root.join(MANIFEST)).unwrap();
        assert_eq!(manifest.lines().next(), Some("0000 train"));
        assert!(root.join("images/0004.ppmt").exists());
    }

    #[test]
    fn bad_manifest_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Dataset::open(dir.path()).unwrap_err().is_io());
        fs::write(dir.path().join(MANIFEST), "0000 test\n").unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::Config(_))));
        fs::write(dir.path().join(MANIFEST), "0000 train\n").unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(ds.load(0).unwrap_err().is_io());
        assert!(matches!(ds.load(9), Err(Error::Usage(_))));
    }
}
