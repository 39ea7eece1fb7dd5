//! Volumes loaded from a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use protoloop_core::volume::{IntensityVolume, LabelVolume};

use crate::array_io::{load_intensity, load_labels};
use crate::error::{Error, Result};
use crate::manifest::{EntrySplit, Manifest};

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub split: EntrySplit,
    pub intensity: IntensityVolume,
    /// Training label; only the template has one.
    pub label: Option<LabelVolume>,
    /// Evaluation-only ground truth.
    pub truth: Option<LabelVolume>,
    pub features_path: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_classes: usize,
    pub template: String,
    pub samples: BTreeMap<String, Sample>,
}

fn load_sample(m: &Manifest, idx: usize) -> Result<Sample> {
    let e = &m.volumes[idx];
    let intensity = load_intensity(&m.resolve(&e.intensity))?;
    let load = |p: &Option<PathBuf>| -> Result<Option<LabelVolume>> {
        let Some(p) = p else { return Ok(None) };
        let path = m.resolve(p);
        let l = load_labels(&path, Some(m.num_classes))?;
        if l.shape() != intensity.shape() {
            return Err(Error::Validation(format!(
                "{}: label shape {} differs from intensity shape {}",
                path.display(),
                l.shape(),
                intensity.shape()
            )));
        }
        Ok(Some(l))
    };
    Ok(Sample {
        id: e.id.clone(),
        split: e.split,
        label: load(&e.label)?,
        truth: load(&e.truth)?,
        features_path: e.features.as_ref().map(|p| m.resolve(p)),
        intensity,
    })
}

fn load_all(m: &Manifest) -> Result<BTreeMap<String, Sample>> {
    Ok(load_samples(m)?
        .into_iter()
        .map(|s| (s.id.clone(), s))
        .collect())
}

/// Every entry of `m`, in manifest order, with no template requirement.
pub fn load_samples(m: &Manifest) -> Result<Vec<Sample>> {
    (0..m.volumes.len()).map(|i| load_sample(m, i)).collect()
}

impl Dataset {
    /// Loads a one-label training manifest. The template is checked before
    /// any volume is read.
    pub fn load(path: &Path) -> Result<Self> {
        let m = Manifest::load(path)?;
        let labeled: Vec<_> = m.volumes.iter().filter(|e| e.label.is_some()).collect();
        let template = match labeled.as_slice() {
            [t] => t.id.clone(),
            [] => {
                return Err(Error::Validation(
                    "missing template label: no manifest entry has a label".into(),
                ))
            }
            _ => {
                return Err(Error::Validation(format!(
                    "expected one labeled template, found {}",
                    labeled.len()
                )))
            }
        };
        if m.train().count() < 2 {
            return Err(Error::Validation(
                "the training split needs the template plus at least one unlabeled volume".into(),
            ));
        }
        Ok(Dataset {
            num_classes: m.num_classes,
            template,
            samples: load_all(&m)?,
        })
    }

    /// Loads a fully labeled validation manifest.
    pub fn load_validation(path: &Path, num_classes: usize) -> Result<Vec<Sample>> {
        let m = Manifest::load(path)?;
        if m.num_classes != num_classes {
            return Err(Error::Validation(format!(
                "validation manifest has {} classes, expected {num_classes}",
                m.num_classes
            )));
        }
        if let Some(e) = m.volumes.iter().find(|e| e.label.is_none()) {
            return Err(Error::Validation(format!(
                "validation entry {:?} has no label",
                e.id
            )));
        }
        Ok(load_all(&m)?.into_values().collect())
    }

    pub fn template(&self) -> &Sample {
        &self.samples[&self.template]
    }

    /// Unlabeled training volumes, in id order.
    pub fn pool_ids(&self) -> Vec<String> {
        self.samples
            .values()
            .filter(|s| s.split == EntrySplit::Train && s.id != self.template)
            .map(|s| s.id.clone())
            .collect()
    }

    /// Held-out volumes that carry ground truth.
    pub fn test_ids(&self) -> Vec<String> {
        self.samples
            .values()
            .filter(|s| s.split == EntrySplit::Test && s.truth.is_some())
            .map(|s| s.id.clone())
            .collect()
    }

    /// Ground truth for every pool volume, if all of them have it.
    pub fn pool_truth(&self) -> Option<BTreeMap<String, LabelVolume>> {
        self.pool_ids()
            .into_iter()
            .map(|id| self.samples[&id].truth.clone().map(|t| (id, t)))
            .collect()
    }
}
