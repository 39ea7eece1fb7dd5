//! Round 0 prototype propagation followed by rounds of train, predict and refine.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use protoloop_core::encoder::EncoderParams;
use protoloop_core::metrics::{evaluate, pseudo_label_quality, ClassMetrics};
use protoloop_core::prototype::{compute_prototypes, initial_pseudo_label, PrototypeSet};
use protoloop_core::refine::refine_all;
use protoloop_core::specialist::{
    infer, predict_volume, train_round, LabeledVolume, SpecialistParams, TrainConfig,
    TrainingSet, VoxelFeatures,
};
use protoloop_core::uncertainty::{partition_by_quantile, sample_uncertainty, SampleUncertainty};
use protoloop_core::volume::{LabelVolume, ProbVolume, Shape3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array_io::{read_json, write_json};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::report::Report;
use crate::state::{existing_rounds, round_dir, RoundMetrics, RoundState, TestSummary, Timings, TrainingSummary};

pub const CONFIG_FILE: &str = "config.json";
pub const FEATURE_DIR: &str = "features";
const VALIDATION_PREFIX: &str = "validation/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub output: PathBuf,
    pub rounds: usize,
    pub encoder: EncoderParams,
    /// Per-round trainer settings; its seed is replaced by `seed ^ r`.
    pub train: TrainConfig,
    pub k: usize,
    pub q_unc: f64,
    /// Disabling skips KNN refinement and carries raw predictions forward.
    pub refine: bool,
    pub seed: u64,
    pub validation: Option<PathBuf>,
    /// Ground truth is available for every pool volume; track pseudo-label Dice.
    pub phantom: bool,
    /// Cubic sliding window side; `None` predicts the whole volume at once.
    pub window: Option<usize>,
    pub stride: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            manifest: PathBuf::new(),
            output: PathBuf::new(),
            rounds: 3,
            encoder: EncoderParams::default(),
            train: TrainConfig::default(),
            k: 5,
            q_unc: 0.9,
            refine: true,
            seed: 0,
            validation: None,
            phantom: false,
            window: None,
            stride: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if self.rounds < 1 {
            return bad("rounds must be at least 1");
        }
        if self.k < 1 {
            return bad("K must be at least 1");
        }
        if !(self.q_unc > 0.0 && self.q_unc <= 1.0) {
            return bad("q_unc must be in (0, 1]");
        }
        if self.window == Some(0) || self.stride == Some(0) {
            return bad("window and stride must be positive");
        }
        self.encoder
            .validate()
            .and_then(|_| self.train.validate())
            .map_err(|e| Error::Validation(e.to_string()))
    }

    /// Trainer settings for round `r`.
    pub fn round_train_config(&self, r: usize) -> TrainConfig {
        TrainConfig {
            seed: self.seed ^ r as u64,
            ..self.train.clone()
        }
    }
}

/// Holds the dataset and the feature cache for one run directory.
pub struct Pipeline {
    config: PipelineConfig,
    data: Dataset,
    validation: Vec<Sample>,
    store: FeatureStore,
    force: bool,
    /// Encoder invocations at the end of round 0; no later stage may add to it.
    frozen_encoder_calls: Option<usize>,
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn validation_key(id: &str) -> String {
    format!("{VALIDATION_PREFIX}{id}")
}

impl Pipeline {
    /// Validates the configuration and loads every volume. Fails before any
    /// feature is computed.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let data = Dataset::load(&config.manifest)?;
        let validation = match &config.validation {
            Some(p) => Dataset::load_validation(p, data.num_classes)?,
            None => Vec::new(),
        };
        if config.phantom && data.pool_truth().is_none() {
            return Err(Error::Validation(
                "phantom mode needs ground truth for every pool volume".into(),
            ));
        }
        let store = FeatureStore::new(config.encoder)?;
        Ok(Pipeline {
            config,
            data,
            validation,
            store,
            force: false,
            frozen_encoder_calls: None,
        })
    }

    /// Reopens a run directory after round 0, restoring its feature cache.
    pub fn open(run: &Path) -> Result<Self> {
        let mut config: PipelineConfig = read_json(&run.join(CONFIG_FILE))?;
        config.output = run.to_path_buf();
        let mut p = Pipeline::new(config)?;
        p.store = FeatureStore::load(&run.join(FEATURE_DIR))?;
        if *p.store.encoder() != p.config.encoder {
            return Err(Error::Validation(
                "feature cache was built with different encoder settings".into(),
            ));
        }
        p.frozen_encoder_calls = Some(p.store.counters().encoder_calls);
        Ok(p)
    }

    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut PipelineConfig {
        &mut self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn store(&self) -> &FeatureStore {
        &self.store
    }

    fn output(&self) -> &Path {
        &self.config.output
    }

    /// Refuses to clobber a previous run unless forced; with force, removes it.
    pub fn prepare_output(&self) -> Result<()> {
        let out = self.output();
        let occupied = out.join(CONFIG_FILE).exists() || !existing_rounds(out).is_empty();
        if occupied && !self.force {
            return Err(Error::AlreadyExists(out.to_path_buf()));
        }
        if occupied {
            for r in existing_rounds(out) {
                let d = round_dir(out, r);
                fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
            for f in [CONFIG_FILE, "report.json", "report.txt"] {
                let p = out.join(f);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
            let feats = out.join(FEATURE_DIR);
            if feats.exists() {
                fs::remove_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
            }
        }
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))
    }

    fn voxel_features<'a>(&'a self, key: &str, sample: &'a Sample) -> Result<VoxelFeatures<'a>> {
        Ok(VoxelFeatures::new(&sample.intensity, self.store.grid(key)?)?)
    }

    /// Extracts (or restores) features for every volume, including validation.
    fn ensure_features(&mut self) -> Result<()> {
        let feature_dir = self.output().join(FEATURE_DIR);
        if FeatureStore::exists(&feature_dir) && self.store.counters() == Default::default() {
            let cached = FeatureStore::load(&feature_dir)?;
            if *cached.encoder() != self.config.encoder {
                return Err(Error::Validation(format!(
                    "{} was built with different encoder settings (use --force)",
                    feature_dir.display()
                )));
            }
            self.store = cached;
        }
        let train: Vec<&Sample> = self.data.samples.values().collect();
        self.store.ensure(train)?;
        let renamed: Vec<Sample> = self
            .validation
            .iter()
            .map(|s| Sample {
                id: validation_key(&s.id),
                ..s.clone()
            })
            .collect();
        self.store.ensure(&renamed)?;
        for s in self.data.samples.values() {
            self.store.check_volume(&s.id, &s.intensity)?;
        }
        self.store.save(&feature_dir)
    }

    fn check_offline_contract(&self) -> Result<()> {
        let now = self.store.counters().encoder_calls;
        match self.frozen_encoder_calls {
            Some(frozen) if now != frozen => Err(Error::Validation(format!(
                "encoder ran {} times after round 0",
                now - frozen
            ))),
            _ => Ok(()),
        }
    }

    fn save_state(&self, state: &RoundState) -> Result<()> {
        state.save(self.output(), self.force).map(|_| ())
    }

    /// Round 0: features once for all volumes, template prototypes, and
    /// propagated pseudo-labels for the pool.
    pub fn run_round0(&mut self) -> Result<RoundState> {
        let t = Instant::now();
        self.ensure_features()?;
        write_json(&self.config, &self.output().join(CONFIG_FILE))?;
        let features = elapsed(t);

        let t = Instant::now();
        let template = self.data.template();
        let label = template.label.as_ref().expect("template has a label");
        let protos = compute_prototypes(self.store.grid(&template.id)?, label)?;
        let pool = self.data.pool_ids();
        let predictions: Vec<(LabelVolume, SampleUncertainty)> = pool
            .par_iter()
            .map(|id| {
                let (labels, probs) = self.propagate(&protos, id)?;
                Ok((labels, sample_uncertainty(id.as_str(), &probs)?))
            })
            .collect::<Result<_>>()?;
        let propagation = elapsed(t);

        let (pseudo_labels, uncertainty) = split_predictions(&pool, predictions);
        let t = Instant::now();
        let test = self.evaluate_test(|id| Ok(self.propagate(&protos, id)?.0))?;
        let metrics = RoundMetrics {
            pseudo_label_dice: self.pseudo_quality(&pseudo_labels)?,
            raw_pseudo_label_dice: None,
            test,
        };
        let evaluation = elapsed(t);

        self.frozen_encoder_calls = Some(self.store.counters().encoder_calls);
        let state = RoundState {
            round: 0,
            template: self.data.template.clone(),
            foreground_fraction: fractions(&pseudo_labels),
            pseudo_labels,
            raw_labels: BTreeMap::new(),
            uncertainty,
            partition: None,
            refined: false,
            audit: Vec::new(),
            params: None,
            training: None,
            train_log: Vec::new(),
            metrics,
            timings: Timings {
                features,
                propagation,
                evaluation,
                ..Timings::default()
            },
            counters: self.store.counters(),
        };
        self.save_state(&state)?;
        Ok(state)
    }

    fn propagate(&self, protos: &PrototypeSet, id: &str) -> Result<(LabelVolume, ProbVolume)> {
        let s = &self.data.samples[id];
        Ok(initial_pseudo_label(
            self.store.grid(id)?,
            protos,
            s.intensity.shape(),
        )?)
    }

    fn predict(&self, params: &SpecialistParams, id: &str) -> Result<(LabelVolume, ProbVolume)> {
        let s = &self.data.samples[id];
        let f = self.voxel_features(id, s)?;
        let out = match self.config.window {
            None => predict_volume(params, &f)?,
            Some(w) => {
                let stride = self.config.stride.unwrap_or(w.div_ceil(2));
                infer(params, &f, Shape3::cube(w), stride)?
            }
        };
        Ok(out)
    }

    fn pseudo_quality(&self, labels: &BTreeMap<String, LabelVolume>) -> Result<Option<f64>> {
        if !self.config.phantom {
            return Ok(None);
        }
        let truth = self.data.pool_truth().expect("checked at construction");
        Ok(Some(pseudo_label_quality(labels, &truth)?))
    }

    fn evaluate_test(
        &self,
        predict: impl Fn(&str) -> Result<LabelVolume> + Sync,
    ) -> Result<Option<TestSummary>> {
        let ids = self.data.test_ids();
        if ids.is_empty() {
            return Ok(None);
        }
        let per_volume: Vec<(String, ClassMetrics)> = ids
            .par_iter()
            .map(|id| {
                let pred = predict(id)?;
                let truth = self.data.samples[id].truth.as_ref().expect("test ids have truth");
                Ok((id.clone(), evaluate(&pred, truth)?.foreground))
            })
            .collect::<Result<_>>()?;
        Ok(Some(TestSummary::from_metrics(per_volume.into_iter().collect())))
    }

    /// Round `r >= 1`: train from scratch on `prev`'s pseudo-labels, predict
    /// the pool, split it by uncertainty and refine the uncertain part.
    pub fn run_round(&mut self, r: usize, prev: &RoundState) -> Result<RoundState> {
        if r == 0 || prev.round + 1 != r {
            return Err(Error::Validation(format!(
                "round {r} cannot follow round {}",
                prev.round
            )));
        }
        if !round_dir(self.output(), prev.round).join("state.json").is_file() {
            return Err(Error::Validation(format!(
                "round {} is not persisted under {}",
                prev.round,
                self.output().display()
            )));
        }
        if prev.template != self.data.template {
            return Err(Error::Validation("previous round used another template".into()));
        }
        let pool = self.data.pool_ids();
        if let Some(id) = pool.iter().find(|id| !prev.pseudo_labels.contains_key(*id)) {
            return Err(Error::Validation(format!("previous round has no label for {id}")));
        }

        // Stage 1: specialist training.
        let t = Instant::now();
        let train_config = self.config.round_train_config(r);
        let outcome = {
            let template = self.data.template();
            let label = template.label.as_ref().expect("template has a label");
            let pool_set = pool
                .iter()
                .map(|id| {
                    let s = &self.data.samples[id];
                    LabeledVolume::new(self.voxel_features(id, s)?, &prev.pseudo_labels[id])
                        .map_err(Error::from)
                })
                .collect::<Result<Vec<_>>>()?;
            let validation = self
                .validation
                .iter()
                .map(|s| {
                    let f = self.voxel_features(&validation_key(&s.id), s)?;
                    LabeledVolume::new(f, s.label.as_ref().expect("validated")).map_err(Error::from)
                })
                .collect::<Result<Vec<_>>>()?;
            let set = TrainingSet {
                template: LabeledVolume::new(self.voxel_features(&template.id, template)?, label)?,
                pool: pool_set,
                validation,
            };
            train_round(&set, &train_config)?
        };
        let training = elapsed(t);
        let params = outcome.params.clone();

        // Stage 2: prediction and sample uncertainty.
        let t = Instant::now();
        let predictions: Vec<(LabelVolume, SampleUncertainty)> = pool
            .par_iter()
            .map(|id| {
                let (labels, probs) = self.predict(&params, id)?;
                Ok((labels, sample_uncertainty(id.as_str(), &probs)?))
            })
            .collect::<Result<_>>()?;
        let inference = elapsed(t);
        let (raw_labels, uncertainty) = split_predictions(&pool, predictions);

        // Stage 3: partition and KNN refinement.
        let t = Instant::now();
        let (pseudo_labels, partition, audit) = self.refine(&raw_labels, &uncertainty)?;
        let refinement = elapsed(t);

        let t = Instant::now();
        let metrics = RoundMetrics {
            pseudo_label_dice: self.pseudo_quality(&pseudo_labels)?,
            raw_pseudo_label_dice: self.pseudo_quality(&raw_labels)?,
            test: self.evaluate_test(|id| Ok(self.predict(&params, id)?.0))?,
        };
        let evaluation = elapsed(t);
        self.check_offline_contract()?;

        let state = RoundState {
            round: r,
            template: self.data.template.clone(),
            foreground_fraction: fractions(&pseudo_labels),
            pseudo_labels,
            raw_labels,
            uncertainty,
            partition: Some(partition),
            refined: self.config.refine,
            audit,
            params: Some(params),
            training: Some(TrainingSummary {
                seed: train_config.seed,
                iterations: train_config.iterations,
                selected_iteration: outcome.selected_iteration,
                best_validation_dice: outcome.best_validation_dice,
                final_loss: outcome.log.last().map_or(f64::NAN, |e| e.loss),
            }),
            train_log: outcome.log,
            metrics,
            timings: Timings {
                training,
                inference,
                refinement,
                evaluation,
                ..Timings::default()
            },
            counters: self.store.counters(),
        };
        self.save_state(&state)?;
        Ok(state)
    }

    /// Partitions the pool and, when enabled, replaces uncertain labels by
    /// their KNN vote. Returns the labels to carry forward.
    #[allow(clippy::type_complexity)]
    pub fn refine(
        &self,
        raw: &BTreeMap<String, LabelVolume>,
        uncertainty: &[SampleUncertainty],
    ) -> Result<(
        BTreeMap<String, LabelVolume>,
        protoloop_core::uncertainty::Partition,
        Vec<protoloop_core::refine::NeighborSet>,
    )> {
        let template = self.data.template();
        let partition = partition_by_quantile(uncertainty, &template.id, self.config.q_unc)?;
        if !self.config.refine {
            return Ok((raw.clone(), partition, Vec::new()));
        }
        let mut with_template = raw.clone();
        with_template.insert(
            template.id.clone(),
            template.label.clone().expect("template has a label"),
        );
        let refined = refine_all(&with_template, &partition, self.store.globals(), self.config.k)?;
        let mut labels = refined.labels;
        labels.remove(&template.id);
        Ok((labels, partition, refined.audit))
    }

    /// Re-runs stage 3 of a persisted round with the current `k`, `q_unc`
    /// and refine flag.
    pub fn rerefine(&mut self, prev: &RoundState) -> Result<RoundState> {
        if prev.round == 0 || prev.raw_labels.is_empty() {
            return Err(Error::Validation("round 0 has nothing to refine".into()));
        }
        let t = Instant::now();
        let (pseudo_labels, partition, audit) = self.refine(&prev.raw_labels, &prev.uncertainty)?;
        let refinement = elapsed(t);
        let mut state = prev.clone();
        state.metrics.pseudo_label_dice = self.pseudo_quality(&pseudo_labels)?;
        state.foreground_fraction = fractions(&pseudo_labels);
        state.pseudo_labels = pseudo_labels;
        state.partition = Some(partition);
        state.audit = audit;
        state.refined = self.config.refine;
        state.timings.refinement = refinement;
        state.counters = self.store.counters();
        self.save_state(&state)?;
        Ok(state)
    }

    /// Round 0 then rounds `1..=R`, followed by the run report.
    pub fn run(&mut self) -> Result<Vec<RoundState>> {
        self.prepare_output()?;
        let mut states = vec![self.run_round0()?];
        for r in 1..=self.config.rounds {
            let next = self.run_round(r, states.last().expect("round 0 exists"))?;
            states.push(next);
        }
        Report::from_states(&self.config, &states).save(self.output(), true)?;
        Ok(states)
    }
}

fn split_predictions(
    ids: &[String],
    predictions: Vec<(LabelVolume, SampleUncertainty)>,
) -> (BTreeMap<String, LabelVolume>, Vec<SampleUncertainty>) {
    let mut labels = BTreeMap::new();
    let mut uncertainty = Vec::with_capacity(ids.len());
    for (id, (l, u)) in ids.iter().zip(predictions) {
        labels.insert(id.clone(), l);
        uncertainty.push(u);
    }
    (labels, uncertainty)
}

fn fractions(labels: &BTreeMap<String, LabelVolume>) -> BTreeMap<String, f64> {
    labels
        .iter()
        .map(|(id, l)| (id.clone(), l.foreground_fraction()))
        .collect()
}
