//! Feature grids and global features, computed once per volume and cached.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use protoloop_core::encoder::{
    check_channel_consistency, extract_feature_grid, global_feature, EncoderParams, FeatureGrid,
    GlobalFeature,
};
use protoloop_core::volume::IntensityVolume;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array_io::{load_features, read_json, save_features, write_json};
use crate::dataset::Sample;
use crate::error::{Error, Result};

/// How each cached grid came to be.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureCounters {
    /// Built-in encoder invocations on raw volumes.
    pub encoder_calls: usize,
    /// Grids read from manifest-declared external feature files.
    pub external_loads: usize,
    /// Grids restored from a previous run's feature cache.
    pub cache_loads: usize,
    pub global_computations: usize,
    /// Lookups served from memory.
    pub cache_hits: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    encoder: EncoderParams,
    ids: Vec<String>,
    globals: BTreeMap<String, GlobalFeature>,
    /// How the grids were originally produced, so that a reopened cache
    /// reports the same provenance as the process that built it.
    #[serde(default)]
    counters: FeatureCounters,
}

#[derive(Debug, Default)]
pub struct FeatureStore {
    encoder: EncoderParams,
    grids: BTreeMap<String, FeatureGrid>,
    globals: BTreeMap<String, GlobalFeature>,
    counters: FeatureCounters,
    hits: AtomicUsize,
}

enum Source {
    Encoder,
    External,
}

fn build(sample: &Sample, encoder: &EncoderParams) -> Result<(FeatureGrid, Source)> {
    match &sample.features_path {
        Some(path) => {
            let g = load_features(path)?;
            let shape = sample.intensity.shape();
            let g = FeatureGrid::from_external(g.channels(), g.grid_shape(), g.into_data(), shape)?;
            Ok((g, Source::External))
        }
        None => Ok((extract_feature_grid(&sample.intensity, encoder)?, Source::Encoder)),
    }
}

impl FeatureStore {
    pub fn new(encoder: EncoderParams) -> Result<Self> {
        encoder.validate()?;
        Ok(FeatureStore {
            encoder,
            ..Self::default()
        })
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn counters(&self) -> FeatureCounters {
        FeatureCounters {
            cache_hits: self.hits.load(Ordering::Relaxed),
            ..self.counters
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.grids.contains_key(id)
    }

    /// Computes or ingests grids for every sample not yet cached. Work runs in
    /// parallel; results are inserted in input order.
    pub fn ensure<'a>(&mut self, samples: impl IntoIterator<Item = &'a Sample>) -> Result<()> {
        let missing: Vec<&Sample> = samples
            .into_iter()
            .filter(|s| {
                let cached = self.grids.contains_key(&s.id);
                if cached {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                }
                !cached
            })
            .collect();
        let encoder = self.encoder;
        let built: Vec<_> = missing
            .par_iter()
            .map(|s| build(s, &encoder).map(|(g, src)| (s.id.clone(), g, src)))
            .collect::<Result<_>>()?;
        check_channel_consistency(
            self.grids
                .values()
                .take(1)
                .chain(built.iter().map(|(_, g, _)| g)),
        )?;
        for (id, grid, src) in built {
            match src {
                Source::Encoder => self.counters.encoder_calls += 1,
                Source::External => self.counters.external_loads += 1,
            }
            self.globals.insert(id.clone(), global_feature(&grid));
            self.counters.global_computations += 1;
            self.grids.insert(id, grid);
        }
        Ok(())
    }

    pub fn grid(&self, id: &str) -> Result<&FeatureGrid> {
        let g = self
            .grids
            .get(id)
            .ok_or_else(|| Error::Core(protoloop_core::Error::UnknownId(id.into())))?;
        self.hits.fetch_add(1, Ordering::Relaxed);
        Ok(g)
    }

    pub fn globals(&self) -> &BTreeMap<String, GlobalFeature> {
        &self.globals
    }

    /// Checks a grid against the volume it claims to describe.
    pub fn check_volume(&self, id: &str, vol: &IntensityVolume) -> Result<()> {
        let g = self.grid(id)?;
        if !vol.shape().contains(&g.grid_shape()) {
            return Err(Error::Core(protoloop_core::Error::GridLargerThanVolume {
                grid: g.grid_shape(),
                volume: vol.shape(),
            }));
        }
        Ok(())
    }

    /// Writes `<dir>/<id>.feat` for every grid plus `index.json` with the
    /// global features.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, g) in &self.grids {
            let path = dir.join(format!("{id}.feat"));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_features(g, &path)?;
        }
        let index = Index {
            encoder: self.encoder,
            ids: self.grids.keys().cloned().collect(),
            globals: self.globals.clone(),
            counters: FeatureCounters {
                cache_hits: 0,
                cache_loads: 0,
                ..self.counters()
            },
        };
        write_json(&index, &dir.join("index.json"))
    }

    /// Restores a cache written by [`FeatureStore::save`]. Nothing is
    /// recomputed: the encoder counter keeps the value recorded when the
    /// cache was built and only `cache_loads` grows.
    pub fn load(dir: &Path) -> Result<Self> {
        let index: Index = read_json(&dir.join("index.json"))?;
        let mut store = FeatureStore::new(index.encoder)?;
        store.counters = FeatureCounters {
            cache_hits: 0,
            ..index.counters
        };
        for id in &index.ids {
            let g = load_features(&dir.join(format!("{id}.feat")))?;
            if !index.globals.contains_key(id) {
                return Err(Error::format(dir, format!("no global feature for {id}")));
            }
            store.grids.insert(id.clone(), g);
            store.counters.cache_loads += 1;
        }
        check_channel_consistency(store.grids.values())?;
        store.globals = index.globals;
        Ok(store)
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join("index.json").is_file()
    }
}
