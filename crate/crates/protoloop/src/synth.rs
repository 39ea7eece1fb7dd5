//! Writes a phantom dataset to disk in the array and manifest formats.

use std::fs;
use std::path::{Path, PathBuf};

use protoloop_core::phantom::{PhantomSpec, Split};
use rayon::prelude::*;

use crate::array_io::{save_intensity, save_labels, write_json};
use crate::error::{Error, Result};
use crate::manifest::{Entry, EntrySplit, Manifest};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates `spec` under `out`:
///
/// ```text
/// manifest.json  spec.json
/// images/<id>.img   labels/<template>.label   truth/<id>.label
/// ```
///
/// Every entry lists its ground truth as `truth`; only the template has a
/// training `label`.
pub fn write_phantom(spec: &PhantomSpec, out: &Path, force: bool) -> Result<Manifest> {
    spec.validate().map_err(|e| Error::Validation(e.to_string()))?;
    let manifest_path = out.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(Error::AlreadyExists(manifest_path));
    }
    for sub in ["images", "labels", "truth"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let total = spec.num_volumes + spec.num_test;
    let entries = (0..total)
        .into_par_iter()
        .map(|i| {
            let v = spec.generate_one(i)?;
            let image = PathBuf::from("images").join(format!("{}.img", v.id));
            let truth = PathBuf::from("truth").join(format!("{}.label", v.id));
            save_intensity(&v.intensity, &out.join(&image))?;
            save_labels(&v.truth, &out.join(&truth))?;
            let label = if v.labeled {
                let p = PathBuf::from("labels").join(format!("{}.label", v.id));
                save_labels(&v.truth, &out.join(&p))?;
                Some(p)
            } else {
                None
            };
            Ok(Entry {
                id: v.id,
                intensity: image,
                label,
                features: None,
                truth: Some(truth),
                split: match v.split {
                    Split::Train => EntrySplit::Train,
                    Split::Test => EntrySplit::Test,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        num_classes: spec.num_classes,
        exactly_one_labeled: true,
        volumes: entries,
        root: out.to_path_buf(),
    };
    manifest.validate()?;
    write_json(spec, &out.join("spec.json"))?;
    manifest.save(&manifest_path)?;
    Ok(manifest)
}
