//! JSON-lines dataset manifest: one record per sample, image paths relative
//! to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::scenegen::ScenePose;
use crate::Error;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Real,
    Prediction,
}

/// Where a derived record came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub parent: String,
    /// Horizontal crop offset in resized pixels.
    pub crop_offset: u32,
    /// `true` for random training crops, `false` for the deterministic
    /// center crop applied to test records.
    pub augmented: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub version: u32,
    pub id: String,
    pub rgb_path: String,
    pub depth_path: Option<String>,
    pub seg_path: Option<String>,
    pub split: Split,
    pub camera: Option<CameraModel>,
    pub seed: Option<u64>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<Lineage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<ScenePose>,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<(), Error> {
        if self.provenance == Provenance::Synthetic && self.depth_path.is_none() {
            return Err(Error::MissingDepth(self.id.clone()));
        }
        if self.split == Split::Test && self.lineage.as_ref().is_some_and(|l| l.augmented) {
            return Err(Error::invalid(format!(
                "test record {} is an augmentation child",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            records: Vec::new(),
        }
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes the manifest; `root` becomes the file's parent directory.
    pub fn write(&self, path: &Path) -> Result<(), Error> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord =
                serde_json::from_str(&line).map_err(|source| Error::Manifest {
                    path: path.to_path_buf(),
                    line: i + 1,
                    source,
                })?;
            record.validate()?;
            records.push(record);
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }
}
