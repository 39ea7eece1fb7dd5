//! KNN refinement checked against an exhaustive re-implementation of the
//! quantile split, neighbour ranking and weighted per-voxel vote.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use protoloop_core::encoder::GlobalFeature;
use protoloop_core::refine::{knn_certain_neighbors, refine_all};
use protoloop_core::uncertainty::{partition_by_quantile, SampleUncertainty};
use protoloop_core::volume::{LabelVolume, Shape3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TEMPLATE: &str = "template";

struct Pool {
    labels: BTreeMap<String, LabelVolume>,
    globals: BTreeMap<String, GlobalFeature>,
    uncertainties: Vec<SampleUncertainty>,
    q: f64,
    k: usize,
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> GlobalFeature {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return GlobalFeature {
                vector: v.iter().map(|x| x / n).collect(),
                degenerate: false,
            };
        }
    }
}

fn random_pool(seed: u64) -> Pool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape3::from_dims([0; 3].map(|_| rng.random_range(1..=4usize))).unwrap();
    let classes = rng.random_range(2..=4usize);
    let size = rng.random_range(1..=9usize);
    let dim = rng.random_range(2..=6usize);
    let mut labels = BTreeMap::new();
    let mut globals = BTreeMap::new();
    let mut uncertainties = Vec::new();
    let mut ids: Vec<String> = (0..size).map(|i| format!("u{i}")).collect();
    ids.push(TEMPLATE.to_string());
    for id in &ids {
        let l = LabelVolume::from_fn(shape, classes, |_| rng.random_range(0..classes) as u8).unwrap();
        labels.insert(id.clone(), l);
        globals.insert(id.clone(), unit(&mut rng, dim));
        if id != TEMPLATE {
            // coarse values so that ties at the threshold occur regularly
            let value = rng.random_range(0..5u32) as f64 * 0.1;
            uncertainties.push(SampleUncertainty { id: id.clone(), value });
        }
    }
    Pool {
        labels,
        globals,
        uncertainties,
        q: [0.5, 0.7, 0.9, 1.0][rng.random_range(0..4usize)],
        k: rng.random_range(1..=6usize),
    }
}

fn brute_split(pool: &Pool) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut values: Vec<f64> = pool.uncertainties.iter().map(|u| u.value).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    // nearest rank: smallest value with at least q * n values at or below it
    let t = values
        .iter()
        .copied()
        .find(|&v| values.iter().filter(|&&x| x <= v).count() as f64 >= pool.q * n as f64 - 1e-9)
        .unwrap();
    let mut certain = BTreeSet::from([TEMPLATE.to_string()]);
    let mut uncertain = BTreeSet::new();
    for u in &pool.uncertainties {
        if u.value <= t {
            certain.insert(u.id.clone());
        } else {
            uncertain.insert(u.id.clone());
        }
    }
    (certain, uncertain)
}

fn dot(a: &GlobalFeature, b: &GlobalFeature) -> f64 {
    a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum()
}

fn brute_vote(pool: &Pool, certain: &BTreeSet<String>, query: &str) -> LabelVolume {
    let q = &pool.globals[query];
    let mut ranked: Vec<(f64, &String)> = certain.iter().map(|id| (dot(q, &pool.globals[id]), id)).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
    ranked.truncate(pool.k);
    let total: f64 = ranked.iter().map(|(s, _)| s.max(0.0)).sum();
    let raw = &pool.labels[query];
    if total < 1e-8 {
        return raw.clone();
    }
    let classes = raw.num_classes();
    let data = (0..raw.shape().len())
        .map(|v| {
            let mut score = vec![0.0; classes];
            for (s, id) in &ranked {
                score[pool.labels[*id].data()[v] as usize] += s.max(0.0);
            }
            let mut best = 0;
            for c in 1..classes {
                if score[c] / (total + 1e-8) > score[best] / (total + 1e-8) {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(raw.shape(), classes, data).unwrap()
}

#[test]
fn fifty_pools_match_brute_force_exactly() {
    let start = std::time::Instant::now();
    for seed in 0..50 {
        let pool = random_pool(seed);
        let partition = partition_by_quantile(&pool.uncertainties, TEMPLATE, pool.q).unwrap();
        let (certain, uncertain) = brute_split(&pool);
        assert_eq!(partition.certain, certain, "seed {seed}");
        assert_eq!(partition.uncertain, uncertain, "seed {seed}");

        let refined = refine_all(&pool.labels, &partition, &pool.globals, pool.k).unwrap();
        assert_eq!(refined.audit.len(), uncertain.len());
        for (id, got) in &refined.labels {
            let want = if uncertain.contains(id) {
                brute_vote(&pool, &certain, id)
            } else {
                pool.labels[id].clone()
            };
            assert_eq!(got, &want, "seed {seed} id {id}");
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn equal_features_give_an_equal_weight_vote() {
    let shape = Shape3::new(1, 1, 3).unwrap();
    let g = GlobalFeature {
        vector: vec![1.0, 0.0],
        degenerate: false,
    };
    let lv = |d: [u8; 3]| LabelVolume::new(shape, 3, d.to_vec()).unwrap();
    let labels = BTreeMap::from([
        ("a".to_string(), lv([1, 2, 0])),
        ("b".to_string(), lv([1, 0, 2])),
        ("q".to_string(), lv([0, 0, 0])),
    ]);
    let globals: BTreeMap<_, _> = labels.keys().map(|k| (k.clone(), g.clone())).collect();
    let partition = partition_by_quantile(
        &[
            SampleUncertainty { id: "b".into(), value: 0.1 },
            SampleUncertainty { id: "q".into(), value: 0.5 },
        ],
        "a",
        0.5,
    )
    .unwrap();
    let out = refine_all(&labels, &partition, &globals, 5).unwrap();
    // 1 is unanimous; the split voxels tie and go to the lower class.
    assert_eq!(out.labels["q"].data(), &[1, 0, 0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn certain_samples_untouched_and_votes_from_neighbours(seed in any::<u64>()) {
        let pool = random_pool(seed);
        let partition = partition_by_quantile(&pool.uncertainties, TEMPLATE, pool.q).unwrap();
        let out = refine_all(&pool.labels, &partition, &pool.globals, pool.k).unwrap();
        for id in &partition.certain {
            prop_assert_eq!(&out.labels[id], &pool.labels[id]);
        }
        for ns in &out.audit {
            prop_assert!(ns.neighbors.len() == pool.k.min(partition.certain.len()));
            for w in ns.neighbors.windows(2) {
                prop_assert!(w[0].similarity > w[1].similarity
                    || (w[0].similarity == w[1].similarity && w[0].id < w[1].id));
            }
            let refined = &out.labels[&ns.query];
            let fallback = ns.total_weight() < 1e-8;
            for v in 0..refined.shape().len() {
                let l = refined.data()[v];
                let from_neighbour = ns.neighbors.iter().any(|n| pool.labels[&n.id].data()[v] == l);
                prop_assert!(from_neighbour || (fallback && pool.labels[&ns.query].data()[v] == l));
            }
        }
    }

    #[test]
    fn ranking_survives_common_positive_scaling(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let pool = random_pool(seed);
        let partition = partition_by_quantile(&pool.uncertainties, TEMPLATE, pool.q).unwrap();
        let scaled: BTreeMap<_, _> = pool.globals.iter().map(|(k, g)| {
            (k.clone(), GlobalFeature { vector: g.vector.iter().map(|x| x * scale).collect(), degenerate: false })
        }).collect();
        for q in &partition.uncertain {
            let a = knn_certain_neighbors(&pool.globals, &partition.certain, q, pool.k).unwrap();
            let b = knn_certain_neighbors(&scaled, &partition.certain, q, pool.k).unwrap();
            let ids = |s: &protoloop_core::refine::NeighborSet| s.neighbors.iter().map(|n| n.id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
        }
    }

    #[test]
    fn refinement_is_deterministic(seed in any::<u64>()) {
        let pool = random_pool(seed);
        let partition = partition_by_quantile(&pool.uncertainties, TEMPLATE, pool.q).unwrap();
        let a = refine_all(&pool.labels, &partition, &pool.globals, pool.k).unwrap();
        let b = refine_all(&pool.labels, &partition, &pool.globals, pool.k).unwrap();
        prop_assert_eq!(a, b);
    }
}
