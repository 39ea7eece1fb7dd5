use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use protoloop::array_io::{save_features, save_intensity, save_labels};
use protoloop::core::encoder::{EncoderParams, FeatureGrid};
use protoloop::core::phantom::{PhantomSpec, ShapeFamily, StructureSpec};
use protoloop::core::specialist::TrainConfig;
use protoloop::core::volume::{IntensityVolume, LabelVolume, Shape3};
use protoloop::manifest::{Entry, EntrySplit, Manifest};
use protoloop::report::Report;
use protoloop::state::{existing_rounds, round_dir};
use protoloop::synth::{write_phantom, MANIFEST_FILE};
use protoloop::{Error, Pipeline, PipelineConfig, RoundState};

fn small_spec() -> PhantomSpec {
    PhantomSpec {
        num_volumes: 12,
        num_test: 2,
        shape: Shape3::cube(16),
        structures: vec![StructureSpec {
            family: ShapeFamily::Ellipsoid,
            center: [8.0; 3],
            radii: [4.0, 5.0, 3.5],
            center_jitter: 1.5,
            radius_jitter: 0.8,
            intensity: 1.0,
        }],
        ..PhantomSpec::default()
    }
}

fn config(data: &Path, out: &Path, rounds: usize) -> PipelineConfig {
    PipelineConfig {
        manifest: data.join(MANIFEST_FILE),
        output: out.to_path_buf(),
        rounds,
        encoder: EncoderParams {
            patch_size: 4,
            ..EncoderParams::default()
        },
        train: TrainConfig {
            iterations: 120,
            batch_voxels: 1024,
            ..TrainConfig::default()
        },
        phantom: true,
        seed: 3,
        ..PipelineConfig::default()
    }
}

struct Fixture {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_phantom(&small_spec(), &data, false).unwrap();
    let root = tmp.path().to_path_buf();
    Fixture { _tmp: tmp, data, root }
}

fn label_bytes(run: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for r in existing_rounds(run) {
        for e in fs::read_dir(round_dir(run, r)).unwrap().flatten() {
            let name = e.file_name().into_string().unwrap();
            if name.ends_with(".label") {
                out.insert(format!("{r}/{name}"), fs::read(e.path()).unwrap());
            }
        }
    }
    out
}

/// Parameters are persisted as f32; everything else round-trips exactly.
fn assert_same_state(loaded: &RoundState, original: &RoundState) {
    let f32s = |s: &RoundState| s.params.as_ref().map(|p| p.to_flat().iter().map(|&v| v as f32).collect::<Vec<_>>());
    assert_eq!(f32s(loaded), f32s(original));
    let strip = |s: &RoundState| RoundState { params: None, ..s.clone() };
    assert_eq!(strip(loaded), strip(original));
}

#[test]
fn one_round_run_writes_two_states_and_a_report() {
    let f = fixture();
    let out = f.root.join("run");
    let states = Pipeline::new(config(&f.data, &out, 1)).unwrap().run().unwrap();
    assert_eq!(states.len(), 2);
    assert_eq!(existing_rounds(&out), vec![0, 1]);
    assert!(out.join("report.json").is_file() && out.join("report.txt").is_file());

    let (r0, r1) = (&states[0], &states[1]);
    assert_eq!(r0.pseudo_labels.len(), 11);
    assert!(r0.params.is_none() && r1.params.is_some());
    assert!(r1.partition.is_some() && r1.raw_labels.len() == 11);
    let test = r1.metrics.test.as_ref().unwrap();
    assert_eq!(test.count, 2);
    assert!(r1.metrics.pseudo_label_dice.unwrap() > 0.3);

    // stage timings are recorded separately
    assert!(r0.timings.features > 0.0 && r0.timings.training == 0.0);
    assert!(r1.timings.training > 0.0 && r1.timings.inference > 0.0 && r1.timings.features == 0.0);

    for (r, s) in states.iter().enumerate() {
        assert_same_state(&RoundState::load(&round_dir(&out, r)).unwrap(), s);
    }
    let report = Report::from_run(&out).unwrap();
    assert_eq!(report.rounds.len(), 2);
    assert!(report.to_text().contains('±'));
}

#[test]
fn same_seed_gives_identical_labels() {
    let f = fixture();
    let (a, b) = (f.root.join("a"), f.root.join("b"));
    Pipeline::new(config(&f.data, &a, 2)).unwrap().run().unwrap();
    Pipeline::new(config(&f.data, &b, 2)).unwrap().run().unwrap();
    let (la, lb) = (label_bytes(&a), label_bytes(&b));
    assert!(la.len() > 30);
    assert_eq!(la, lb);
}

#[test]
fn resuming_from_disk_matches_an_uninterrupted_run() {
    let f = fixture();
    let whole = f.root.join("whole");
    Pipeline::new(config(&f.data, &whole, 2)).unwrap().run().unwrap();

    let parts = f.root.join("parts");
    {
        let mut p = Pipeline::new(config(&f.data, &parts, 2)).unwrap();
        p.prepare_output().unwrap();
        p.run_round0().unwrap();
    }
    for r in 1..=2 {
        let mut p = Pipeline::open(&parts).unwrap();
        let prev = RoundState::load(&round_dir(&parts, r - 1)).unwrap();
        let state = p.run_round(r, &prev).unwrap();
        // the reopened pipeline reads the cache and never runs the encoder
        assert_eq!(state.counters.encoder_calls, 14);
        assert!(state.counters.cache_loads >= 14);
    }
    assert_eq!(label_bytes(&whole), label_bytes(&parts));
    assert_eq!(Report::from_run(&parts).unwrap().encoder_calls_after_round0, 0);
}

#[test]
fn encoder_runs_once_per_volume_during_round_zero_only() {
    let f = fixture();
    let out = f.root.join("run");
    let states = Pipeline::new(config(&f.data, &out, 2)).unwrap().run().unwrap();
    let calls: Vec<usize> = states.iter().map(|s| s.counters.encoder_calls).collect();
    assert_eq!(calls, vec![14; 3]);
    assert_eq!(Report::from_run(&out).unwrap().encoder_calls_after_round0, 0);
}

#[test]
fn disabling_refinement_only_changes_later_rounds() {
    let f = fixture();
    let (on, off) = (f.root.join("on"), f.root.join("off"));
    let with = Pipeline::new(config(&f.data, &on, 2)).unwrap().run().unwrap();
    let without = Pipeline::new(PipelineConfig {
        refine: false,
        ..config(&f.data, &off, 2)
    })
    .unwrap()
    .run()
    .unwrap();

    assert_eq!(with[0].pseudo_labels, without[0].pseudo_labels);
    assert_eq!(with[1].raw_labels, without[1].raw_labels, "round 1 trains on identical labels");
    let part = with[1].partition.as_ref().unwrap();
    assert!(!part.uncertain.is_empty());
    assert!(without.iter().all(|s| s.audit.is_empty() && !s.refined));
    assert!(with[1].refined && with[1].audit.len() == part.uncertain.len());
    for id in &part.certain {
        if let Some(l) = with[1].pseudo_labels.get(id) {
            assert_eq!(l, &with[1].raw_labels[id]);
        }
    }
    // refined labels feed round 2, which then diverges
    assert_ne!(with[1].pseudo_labels, without[1].pseudo_labels);
    assert_ne!(with[2].raw_labels, without[2].raw_labels);
}

#[test]
fn existing_runs_are_kept_unless_forced() {
    let f = fixture();
    let out = f.root.join("run");
    Pipeline::new(config(&f.data, &out, 1)).unwrap().run().unwrap();
    let before = label_bytes(&out);
    let err = Pipeline::new(config(&f.data, &out, 1)).unwrap().run().unwrap_err();
    assert!(matches!(err, Error::AlreadyExists(_)));
    assert_eq!(err.exit_code(), 1);
    assert_eq!(label_bytes(&out), before);
    Pipeline::new(config(&f.data, &out, 1)).unwrap().force(true).run().unwrap();
    assert_eq!(label_bytes(&out), before);
}

#[test]
fn leftover_partial_directories_do_not_hide_finished_rounds() {
    let f = fixture();
    let out = f.root.join("run");
    let states = Pipeline::new(config(&f.data, &out, 1)).unwrap().run().unwrap();

    // an interrupted save of round 2 and a bare round dir without state
    let junk = out.join(".round_2.partial-4242");
    fs::create_dir_all(&junk).unwrap();
    fs::write(junk.join("vol001.round2.label"), b"truncated").unwrap();
    fs::create_dir_all(round_dir(&out, 3)).unwrap();

    assert_eq!(existing_rounds(&out), vec![0, 1]);
    assert_same_state(&RoundState::load(&round_dir(&out, 1)).unwrap(), &states[1]);
    let mut p = Pipeline::open(&out).unwrap();
    let r2 = p.run_round(2, &states[1]).unwrap();
    assert_same_state(&RoundState::load(&round_dir(&out, 2)).unwrap(), &r2);
}

#[test]
fn rounds_must_follow_a_persisted_predecessor() {
    let f = fixture();
    let out = f.root.join("run");
    let mut p = Pipeline::new(config(&f.data, &out, 1)).unwrap();
    p.prepare_output().unwrap();
    let r0 = p.run_round0().unwrap();
    assert!(matches!(p.run_round(2, &r0), Err(Error::Validation(_))));
    let mut other = r0.clone();
    other.round = 4;
    assert!(p.run_round(5, &other).is_err());
}

#[test]
fn missing_template_label_fails_before_any_work() {
    let f = fixture();
    let mut m = Manifest::load(&f.data.join(MANIFEST_FILE)).unwrap();
    m.volumes[0].label = Some("labels/missing.label".into());
    fs::write(f.data.join("broken.json"), serde_json::to_string(&m).unwrap()).unwrap();
    let out = f.root.join("run");
    let err = Pipeline::new(PipelineConfig {
        manifest: f.data.join("broken.json"),
        ..config(&f.data, &out, 1)
    })
    .err()
    .expect("must fail");
    assert!(err.to_string().contains("missing.label"), "{err}");
    assert!(!out.exists());

    let bad = PipelineConfig {
        q_unc: 0.0,
        ..config(&f.data, &out, 1)
    };
    assert!(matches!(Pipeline::new(bad), Err(Error::Validation(_))));
}

#[test]
fn validation_volumes_get_cached_features_and_select_a_checkpoint() {
    let f = fixture();
    let m = Manifest::load(&f.data.join(MANIFEST_FILE)).unwrap();
    let val = Manifest {
        num_classes: 2,
        exactly_one_labeled: false,
        volumes: m
            .test()
            .map(|e| Entry {
                label: e.truth.clone(),
                split: EntrySplit::Train,
                ..e.clone()
            })
            .collect(),
        root: PathBuf::new(),
    };
    let val_path = f.data.join("validation.json");
    fs::write(&val_path, serde_json::to_string(&val).unwrap()).unwrap();

    let out = f.root.join("run");
    let mut cfg = config(&f.data, &out, 1);
    cfg.validation = Some(val_path);
    cfg.train.validate_every = 40;
    let states = Pipeline::new(cfg).unwrap().run().unwrap();
    let training = states[1].training.as_ref().unwrap();
    assert!(training.best_validation_dice.is_some());
    assert_eq!(training.selected_iteration % 40, 0);
    assert_eq!(states[1].counters.encoder_calls, 16);
}

/// Block-aligned truth with one-hot external features: propagation is exact.
#[test]
fn orthogonal_external_features_propagate_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let shape = Shape3::cube(8);
    let grid = Shape3::cube(4);
    let mut volumes = Vec::new();
    for v in 0..4usize {
        let cell_class = |c: usize| ((c * 7 + v * 3) % 5 < 2) as u8;
        let truth = LabelVolume::from_fn(shape, 2, |[i, j, k]| cell_class(grid.index(i / 2, j / 2, k / 2))).unwrap();
        let mut data = vec![0.0f32; 2 * grid.len()];
        for c in 0..grid.len() {
            data[cell_class(c) as usize * grid.len() + c] = 1.0;
        }
        let feats = FeatureGrid::new(2, grid, [2, 2, 2], data).unwrap();
        let id = format!("v{v}");
        let intensity = IntensityVolume::from_fn(shape, |[i, j, k]| (i + 2 * j + 3 * k) as f32).unwrap();
        save_intensity(&intensity, &dir.join(format!("{id}.img"))).unwrap();
        save_labels(&truth, &dir.join(format!("{id}.label"))).unwrap();
        save_features(&feats, &dir.join(format!("{id}.feat"))).unwrap();
        volumes.push(Entry {
            label: (v == 0).then(|| format!("{id}.label").into()),
            features: Some(format!("{id}.feat").into()),
            truth: Some(format!("{id}.label").into()),
            intensity: format!("{id}.img").into(),
            split: EntrySplit::Train,
            id,
        });
    }
    let m = Manifest {
        num_classes: 2,
        exactly_one_labeled: true,
        volumes,
        root: PathBuf::new(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();

    let out = dir.join("run");
    let mut p = Pipeline::new(config(dir, &out, 1)).unwrap();
    p.prepare_output().unwrap();
    let r0 = p.run_round0().unwrap();
    assert_eq!(r0.metrics.pseudo_label_dice, Some(1.0));
    assert_eq!(r0.counters.encoder_calls, 0);
    assert_eq!(r0.counters.external_loads, 4);
}
