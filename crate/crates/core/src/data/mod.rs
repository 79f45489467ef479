//! Quality-annotated datasets: manifests, splits and image preprocessing.

mod image;
pub mod synth;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::image::{denormalize, preprocess, ErpImage, PreprocessConfig, SourceKind, IMAGENET_MEAN, IMAGENET_STD};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("split must be `train` or `test`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub image_id: String,
    /// Resolved path; relative manifest entries are joined to the manifest directory.
    pub path: PathBuf,
    pub mos: f64,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<QualityRecord>,
    pub mos_range: (f64, f64),
}

impl DatasetManifest {
    /// Checks id uniqueness and finite scores; the MOS range is the observed
    /// span, widened by 0.5 each way when all scores coincide.
    pub fn new(name: impl Into<String>, records: Vec<QualityRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !r.mos.is_finite() {
                return Err(Error::Validation(format!("mos of `{}` is not finite", r.image_id)));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::Validation(format!("duplicate image_id `{}`", r.image_id)));
            }
        }
        let lo = records.iter().map(|r| r.mos).fold(f64::INFINITY, f64::min);
        let hi = records.iter().map(|r| r.mos).fold(f64::NEG_INFINITY, f64::max);
        let mos_range = match (lo.is_finite(), lo < hi) {
            (false, _) => (0.0, 1.0),
            (true, true) => (lo, hi),
            (true, false) => (lo - 0.5, hi + 0.5),
        };
        Ok(Self {
            name: name.into(),
            records,
            mos_range,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, split: Split) -> Vec<&QualityRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    image_id: String,
    path: String,
    mos: String,
    #[serde(default)]
    split: Option<String>,
}

/// Reads a `image_id,path,mos[,split]` CSV.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    for required in ["image_id", "path", "mos"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: format!("missing column `{required}`"),
            });
        }
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = records.len() + 2;
        let parse_err = |msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };
        let mos: f64 = row
            .mos
            .parse()
            .map_err(|_| parse_err(format!("mos `{}` is not a number", row.mos)))?;
        if !mos.is_finite() {
            return Err(parse_err(format!("mos `{}` is not finite", row.mos)));
        }
        if row.image_id.is_empty() {
            return Err(parse_err("empty image_id".into()));
        }
        let split = match row.split.as_deref() {
            None | Some("") => None,
            Some(s) => Some(s.parse::<Split>().map_err(parse_err)?),
        };
        records.push(QualityRecord {
            image_id: row.image_id,
            path: base.join(row.path),
            mos,
            split,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    DatasetManifest::new(name, records)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.into(),
            source,
        },
        kind => Error::Parse {
            path: path.into(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

/// Writes a manifest CSV, storing paths relative to the file when possible.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["image_id", "path", "mos", "split"]).map_err(|e| csv_error(path, e))?;
    for r in &manifest.records {
        let rel = r.path.strip_prefix(base).unwrap_or(&r.path);
        let split = match r.split {
            Some(Split::Train) => "train",
            Some(Split::Test) => "test",
            None => "",
        };
        w.write_record([r.image_id.as_str(), &rel.to_string_lossy(), &r.mos.to_string(), split])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

/// Assigns every record to train or test. The train count is
/// `round(train_fraction * N)`, kept within `1..N` so both splits are non-empty.
pub fn split_dataset(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Precondition(format!("train_fraction {train_fraction} outside (0, 1)")));
    }
    let n = manifest.len();
    if n < 2 {
        return Err(Error::Precondition(format!(
            "cannot form train and test splits from {n} record(s)"
        )));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.records[i].split = Some(if rank < n_train { Split::Train } else { Split::Test });
    }
    Ok(out)
}
