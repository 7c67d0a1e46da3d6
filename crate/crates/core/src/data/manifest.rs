use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_cifar10_binary, load_idx, synth_blobs, BlobConfig, DatasetSplit};
use crate::error::{Error, Result};

/// TOML dataset manifest.
///
/// ```toml
/// name = "blobs4"
/// classes = 4
///
/// [source]
/// kind = "blobs"          # or "idx" / "cifar10"
/// classes = 4
/// per_class = 500       # remaining blob fields default, see `BlobConfig`
/// size = 12
/// seed = 0
///
/// [splits]
/// train = 0.6
/// val = 0.2               # test gets the remainder
/// seed = 7
/// subsample_per_class = 100   # optional, applied before splitting
/// ```
///
/// `idx` sources take `images` and `labels` paths; `cifar10` sources take a
/// `batches` list. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: usize,
    pub source: DatasetSource,
    pub splits: Splits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Blobs(BlobConfig),
    Idx { images: PathBuf, labels: PathBuf },
    Cifar10 { batches: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: f64,
    pub val: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_per_class: Option<usize>,
}

impl DatasetManifest {
    pub fn blobs(cfg: BlobConfig) -> Self {
        DatasetManifest {
            name: format!("blobs{}", cfg.classes),
            classes: cfg.classes,
            source: DatasetSource::Blobs(cfg),
            splits: Splits {
                train: 0.6,
                val: 0.2,
                seed: 7,
                subsample_per_class: None,
            },
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            manifest.resolve_paths(base);
        }
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.source {
            DatasetSource::Blobs(_) => {}
            DatasetSource::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
            DatasetSource::Cifar10 { batches } => batches.iter_mut().for_each(fix),
        }
    }

    /// Loads the source and returns disjoint `(train, val, test)` splits.
    pub fn load(&self) -> Result<(DatasetSplit, DatasetSplit, DatasetSplit)> {
        let mut all = match &self.source {
            DatasetSource::Blobs(cfg) => synth_blobs(cfg)?,
            DatasetSource::Idx { images, labels } => load_idx(images, labels)?,
            DatasetSource::Cifar10 { batches } => load_cifar10_binary(batches)?,
        };
        if all.classes > self.classes {
            return Err(Error::Config(format!(
                "{}: data has {} classes, manifest declares {}",
                self.name, all.classes, self.classes
            )));
        }
        all.classes = self.classes;
        all.name = self.name.clone();
        if let Some(per_class) = self.splits.subsample_per_class {
            all = all.subsample_stratified(per_class, self.splits.seed);
            all.name = self.name.clone();
        }
        all.split_stratified(self.splits.train, self.splits.val, self.splits.seed)
    }
}
