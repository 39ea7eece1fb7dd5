//! Dataset manifests: a JSON list of volume entries with paths relative to
//! the manifest file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::array_io::{read_json, write_json};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySplit {
    /// Template or unlabeled pool member.
    #[default]
    Train,
    /// Held out; used only for evaluation.
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub intensity: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    /// Externally computed feature grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    /// Ground truth used only for evaluation, never for training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub split: EntrySplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    #[serde(default)]
    pub exactly_one_labeled: bool,
    pub volumes: Vec<Entry>,
    /// Directory that relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Manifest = read_json(path)?;
        m.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::Validation(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        if self.volumes.is_empty() {
            return Err(Error::Validation("manifest lists no volumes".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &self.volumes {
            if !valid_id(&e.id) {
                return Err(Error::Validation(format!(
                    "id {:?} must be non-empty and use only [A-Za-z0-9_-]",
                    e.id
                )));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {:?}", e.id)));
            }
            if e.split == EntrySplit::Test && e.label.is_some() {
                return Err(Error::Validation(format!(
                    "test entry {:?} may carry truth but not a training label",
                    e.id
                )));
            }
        }
        if self.exactly_one_labeled {
            let labeled = self.volumes.iter().filter(|e| e.label.is_some()).count();
            if labeled != 1 {
                return Err(Error::Validation(format!(
                    "exactly one entry must have a label, found {labeled}"
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn template(&self) -> Option<&Entry> {
        self.volumes.iter().find(|e| e.label.is_some())
    }

    pub fn train(&self) -> impl Iterator<Item = &Entry> {
        self.volumes.iter().filter(|e| e.split == EntrySplit::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Entry> {
        self.volumes.iter().filter(|e| e.split == EntrySplit::Test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, label: bool) -> Entry {
        Entry {
            id: id.into(),
            intensity: format!("{id}.img").into(),
            label: label.then(|| format!("{id}.label").into()),
            features: None,
            truth: None,
            split: EntrySplit::Train,
        }
    }

    fn manifest(entries: Vec<Entry>) -> Manifest {
        Manifest {
            num_classes: 2,
            exactly_one_labeled: true,
            volumes: entries,
            root: PathBuf::new(),
        }
    }

    #[test]
    fn accepts_one_template() {
        manifest(vec![entry("a", true), entry("b", false)]).validate().unwrap();
    }

    #[test]
    fn rejects_missing_or_extra_template() {
        assert!(manifest(vec![entry("a", false)]).validate().is_err());
        assert!(manifest(vec![entry("a", true), entry("b", true)]).validate().is_err());
    }

    #[test]
    fn rejects_duplicates_and_bad_ids() {
        assert!(manifest(vec![entry("a", true), entry("a", false)]).validate().is_err());
        assert!(manifest(vec![entry("a.b", true)]).validate().is_err());
    }

    #[test]
    fn paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        manifest(vec![entry("a", true)]).save(&path).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.resolve(Path::new("a.img")), dir.path().join("a.img"));
    }
}
