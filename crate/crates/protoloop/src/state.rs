//! Round states and their directory layout.
//!
//! ```text
//! round_<r>/
//!   <id>.round<r>.label          pseudo-label carried into the next round
//!   <id>.round<r>.raw.label      model prediction before refinement (r >= 1)
//!   <id>.round<r>.refined.label  KNN vote, uncertain samples only
//!   params.arr                   selected specialist weights (r >= 1)
//!   state.json  uncertainty.json  refine_audit.json  train_log.jsonl
//! ```
//!
//! A round directory is assembled under a temporary name and renamed into
//! place, so an interrupted round never leaves a partial `round_<r>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use protoloop_core::metrics::ClassMetrics;
use protoloop_core::refine::NeighborSet;
use protoloop_core::specialist::{LogEntry, SpecialistParams};
use protoloop_core::uncertainty::{Partition, SampleUncertainty};
use protoloop_core::volume::LabelVolume;
use serde::{Deserialize, Serialize};

use crate::array_io::{load_labels, load_params, read_json, save_labels, save_params, write_json, ParamsMeta};
use crate::error::{Error, Result};
use crate::features::FeatureCounters;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = protoloop_core::metrics::mean_std(values);
        MeanStd { mean, std }
    }
}

/// Foreground metrics over the held-out volumes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub count: usize,
    pub dice: MeanStd,
    pub jaccard: MeanStd,
    pub hd95: MeanStd,
    pub asd: MeanStd,
    pub per_volume: BTreeMap<String, ClassMetrics>,
}

impl TestSummary {
    pub fn from_metrics(per_volume: BTreeMap<String, ClassMetrics>) -> Self {
        let col = |f: fn(&ClassMetrics) -> f64| -> MeanStd {
            MeanStd::of(&per_volume.values().map(f).collect::<Vec<_>>())
        };
        TestSummary {
            count: per_volume.len(),
            dice: col(|m| m.dice),
            jaccard: col(|m| m.jaccard),
            hd95: col(|m| m.hd95),
            asd: col(|m| m.asd),
            per_volume,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// Mean foreground Dice of the carried pseudo-labels against ground truth.
    pub pseudo_label_dice: Option<f64>,
    /// Same, for the model predictions before refinement.
    pub raw_pseudo_label_dice: Option<f64>,
    pub test: Option<TestSummary>,
}

/// Wall-clock seconds per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub features: f64,
    pub propagation: f64,
    pub training: f64,
    pub inference: f64,
    pub refinement: f64,
    pub evaluation: f64,
}

impl Timings {
    /// Everything the generalist side is responsible for.
    pub fn feature_and_refine(&self) -> f64 {
        self.features + self.propagation + self.refinement
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub seed: u64,
    pub iterations: usize,
    pub selected_iteration: usize,
    pub best_validation_dice: Option<f64>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundState {
    pub round: usize,
    pub template: String,
    /// `ŷ^(r)` for every unlabeled pool volume.
    pub pseudo_labels: BTreeMap<String, LabelVolume>,
    /// Model predictions before refinement; empty for round 0.
    pub raw_labels: BTreeMap<String, LabelVolume>,
    pub uncertainty: Vec<SampleUncertainty>,
    pub partition: Option<Partition>,
    pub refined: bool,
    pub audit: Vec<NeighborSet>,
    pub params: Option<SpecialistParams>,
    pub training: Option<TrainingSummary>,
    pub train_log: Vec<LogEntry>,
    pub metrics: RoundMetrics,
    pub timings: Timings,
    pub counters: FeatureCounters,
    pub foreground_fraction: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    round: usize,
    template: String,
    pool: Vec<String>,
    refined: bool,
    has_params: bool,
    threshold: Option<f64>,
    certain: Option<BTreeSet<String>>,
    uncertain: Option<BTreeSet<String>>,
    training: Option<TrainingSummary>,
    metrics: RoundMetrics,
    timings: Timings,
    counters: FeatureCounters,
    foreground_fraction: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct UncertaintyFile {
    round: usize,
    threshold: Option<f64>,
    samples: Vec<UncertaintyRow>,
}

#[derive(Serialize, Deserialize)]
struct UncertaintyRow {
    id: String,
    uncertainty: f64,
    certain: Option<bool>,
}

pub fn round_dir(run: &Path, r: usize) -> PathBuf {
    run.join(format!("round_{r}"))
}

pub fn label_name(id: &str, r: usize, tag: Option<&str>) -> String {
    match tag {
        Some(t) => format!("{id}.round{r}.{t}.label"),
        None => format!("{id}.round{r}.label"),
    }
}

/// `round_<r>` directories present under `run`, ascending.
pub fn existing_rounds(run: &Path) -> Vec<usize> {
    let mut rounds: Vec<usize> = fs::read_dir(run)
        .into_iter()
        .flatten()
        .flatten()
        .filter(|e| e.path().join("state.json").is_file())
        .filter_map(|e| {
            e.file_name()
                .to_str()?
                .strip_prefix("round_")?
                .parse()
                .ok()
        })
        .collect();
    rounds.sort_unstable();
    rounds
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

impl RoundState {
    pub fn pool_ids(&self) -> impl Iterator<Item = &String> {
        self.pseudo_labels.keys()
    }

    fn write_contents(&self, dir: &Path) -> Result<()> {
        let r = self.round;
        for (id, l) in &self.pseudo_labels {
            save_labels(l, &dir.join(label_name(id, r, None)))?;
        }
        for (id, l) in &self.raw_labels {
            save_labels(l, &dir.join(label_name(id, r, Some("raw"))))?;
        }
        if self.refined {
            for n in &self.audit {
                let l = &self.pseudo_labels[&n.query];
                save_labels(l, &dir.join(label_name(&n.query, r, Some("refined"))))?;
            }
        }
        if let Some(p) = &self.params {
            let meta = ParamsMeta {
                num_features: p.num_features(),
                num_classes: p.num_classes(),
                round: Some(r),
                iteration: self.training.as_ref().map(|t| t.selected_iteration),
            };
            save_params(p, &meta, &dir.join("params.arr"))?;
        }

        let certain = self.partition.as_ref().map(|p| p.certain.clone());
        let uncertain = self.partition.as_ref().map(|p| p.uncertain.clone());
        let threshold = self.partition.as_ref().map(|p| p.threshold);
        let state = StateFile {
            round: r,
            template: self.template.clone(),
            pool: self.pseudo_labels.keys().cloned().collect(),
            refined: self.refined,
            has_params: self.params.is_some(),
            threshold,
            certain,
            uncertain,
            training: self.training.clone(),
            metrics: self.metrics.clone(),
            timings: self.timings,
            counters: self.counters,
            foreground_fraction: self.foreground_fraction.clone(),
        };
        let unc = UncertaintyFile {
            round: r,
            threshold,
            samples: self
                .uncertainty
                .iter()
                .map(|u| UncertaintyRow {
                    id: u.id.clone(),
                    uncertainty: u.value,
                    certain: self.partition.as_ref().map(|p| p.is_certain(&u.id)),
                })
                .collect(),
        };
        write_json(&unc, &dir.join("uncertainty.json"))?;
        write_json(&self.audit, &dir.join("refine_audit.json"))?;

        let log_path = dir.join("train_log.jsonl");
        let mut log = io(&log_path, fs::File::create(&log_path))?;
        for e in &self.train_log {
            let line = serde_json::to_string(e).map_err(|e| Error::json(&log_path, e))?;
            io(&log_path, writeln!(log, "{line}"))?;
        }
        io(&log_path, log.sync_all())?;
        // state.json last: its presence marks a complete round.
        write_json(&state, &dir.join("state.json"))
    }

    /// Writes `run/round_<r>` atomically. An existing directory is replaced
    /// only with `force`.
    pub fn save(&self, run: &Path, force: bool) -> Result<PathBuf> {
        let target = round_dir(run, self.round);
        if target.exists() && !force {
            return Err(Error::AlreadyExists(target));
        }
        io(run, fs::create_dir_all(run))?;
        let staging = run.join(format!(".round_{}.partial-{}", self.round, std::process::id()));
        if staging.exists() {
            io(&staging, fs::remove_dir_all(&staging))?;
        }
        io(&staging, fs::create_dir(&staging))?;
        if let Err(e) = self.write_contents(&staging) {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
        if target.exists() {
            let trash = run.join(format!(".round_{}.old-{}", self.round, std::process::id()));
            io(&target, fs::rename(&target, &trash))?;
            io(&target, fs::rename(&staging, &target))?;
            io(&trash, fs::remove_dir_all(&trash))?;
        } else {
            io(&target, fs::rename(&staging, &target))?;
        }
        Ok(target)
    }

    /// Reads a round directory written by [`RoundState::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let state: StateFile = read_json(&dir.join("state.json"))?;
        let r = state.round;
        let unc: UncertaintyFile = read_json(&dir.join("uncertainty.json"))?;
        let audit: Vec<NeighborSet> = read_json(&dir.join("refine_audit.json"))?;

        let mut pseudo_labels = BTreeMap::new();
        let mut raw_labels = BTreeMap::new();
        for id in &state.pool {
            pseudo_labels.insert(id.clone(), load_labels(&dir.join(label_name(id, r, None)), None)?);
            let raw = dir.join(label_name(id, r, Some("raw")));
            if raw.is_file() {
                raw_labels.insert(id.clone(), load_labels(&raw, None)?);
            }
        }
        let params = if state.has_params {
            Some(load_params(&dir.join("params.arr"))?.0)
        } else {
            None
        };
        let partition = match (state.certain, state.uncertain, state.threshold) {
            (Some(certain), Some(uncertain), Some(threshold)) => Some(Partition {
                certain,
                uncertain,
                threshold,
            }),
            _ => None,
        };

        let log_path = dir.join("train_log.jsonl");
        let text = io(&log_path, fs::read_to_string(&log_path))?;
        let train_log = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::json(&log_path, e)))
            .collect::<Result<_>>()?;

        Ok(RoundState {
            round: r,
            template: state.template,
            pseudo_labels,
            raw_labels,
            uncertainty: unc
                .samples
                .into_iter()
                .map(|s| SampleUncertainty {
                    id: s.id,
                    value: s.uncertainty,
                })
                .collect(),
            partition,
            refined: state.refined,
            audit,
            params,
            training: state.training,
            train_log,
            metrics: state.metrics,
            timings: state.timings,
            counters: state.counters,
            foreground_fraction: state.foreground_fraction,
        })
    }
}
