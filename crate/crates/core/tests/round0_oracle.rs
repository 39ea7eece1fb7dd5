//! Round-0 propagation checked against a direct, loop-by-loop evaluation of
//! prototype averaging, cosine scoring, upsampling and softmax-argmax.

use proptest::prelude::*;
use protoloop_core::encoder::FeatureGrid;
use protoloop_core::prototype::{compute_prototypes, initial_pseudo_label, similarity_maps};
use protoloop_core::volume::{LabelVolume, Shape3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    grid: FeatureGrid,
    cells: Vec<Vec<f64>>,
    grid_shape: Shape3,
    labels: LabelVolume,
    target: Shape3,
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gd = [0; 3].map(|_| rng.random_range(1..=4usize));
    let grid_shape = Shape3::from_dims(gd).unwrap();
    let channels = rng.random_range(1..=8usize);
    let num_classes = rng.random_range(2..=3usize);
    let factor = [0; 3].map(|_| rng.random_range(1..=3usize));
    let vol = Shape3::from_dims([0, 1, 2].map(|a| gd[a] * factor[a] + rng.random_range(0..2))).unwrap();

    let n = grid_shape.len();
    let cells: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..channels)
                .map(|_| rng.random_range(-1.0f32..1.0) as f64)
                .collect()
        })
        .collect();
    let mut data = vec![0f32; channels * n];
    for (cell, v) in cells.iter().enumerate() {
        for (c, x) in v.iter().enumerate() {
            data[c * n + cell] = *x as f32;
        }
    }
    let grid = FeatureGrid::new(channels, grid_shape, [2, 2, 2], data).unwrap();
    let labels = LabelVolume::from_fn(vol, num_classes, |_| {
        rng.random_range(0..num_classes) as u8
    })
    .unwrap();
    let target = Shape3::from_dims([0, 1, 2].map(|a| gd[a] + rng.random_range(0..5))).unwrap();
    Instance {
        grid,
        cells,
        grid_shape,
        labels,
        target,
    }
}

/// floor((i + 0.5) * src / dst), in floating point.
fn nn(i: usize, src: usize, dst: usize) -> usize {
    (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn brute_prototypes(inst: &Instance) -> Vec<Option<Vec<f64>>> {
    let g = inst.grid_shape;
    let v = inst.labels.shape();
    let c = inst.labels.num_classes();
    let channels = inst.cells[0].len();
    let mut out = Vec::new();
    for class in 0..c {
        let mut sum = vec![0.0; channels];
        let mut count = 0usize;
        for i in 0..g.d {
            for j in 0..g.h {
                for k in 0..g.w {
                    let label = inst.labels.get(nn(i, v.d, g.d), nn(j, v.h, g.h), nn(k, v.w, g.w));
                    if label as usize == class {
                        count += 1;
                        for (s, x) in sum.iter_mut().zip(&inst.cells[g.index(i, j, k)]) {
                            *s += x;
                        }
                    }
                }
            }
        }
        if count == 0 {
            out.push(None);
            continue;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / (count as f64 + 1e-8)).collect();
        let n = norm(&mean);
        out.push(if n == 0.0 {
            None
        } else {
            Some(mean.iter().map(|x| x / n).collect())
        });
    }
    out
}

fn brute_labels(inst: &Instance, protos: &[Option<Vec<f64>>]) -> Vec<u8> {
    let g = inst.grid_shape;
    let t = inst.target;
    let mut out = Vec::with_capacity(t.len());
    for i in 0..t.d {
        for j in 0..t.h {
            for k in 0..t.w {
                let cell = &inst.cells[g.index(nn(i, g.d, t.d), nn(j, g.h, t.h), nn(k, g.w, t.w))];
                let cn = norm(cell);
                let sims: Vec<f64> = protos
                    .iter()
                    .map(|p| match p {
                        None => f64::NEG_INFINITY,
                        Some(_) if cn == 0.0 => 0.0,
                        Some(p) => cell.iter().zip(p).map(|(a, b)| a / cn * b).sum(),
                    })
                    .collect();
                let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = sims.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut best = 0;
                for c in 1..e.len() {
                    if e[c] / z > e[best] / z {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
    }
    out
}

#[test]
fn fifty_instances_match_brute_force_exactly() {
    let start = std::time::Instant::now();
    for seed in 0..50 {
        let inst = random_instance(seed);
        let protos = compute_prototypes(&inst.grid, &inst.labels).unwrap();
        let expected_protos = brute_prototypes(&inst);
        for (c, p) in expected_protos.iter().enumerate() {
            match (p, protos.get(c)) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    for (x, y) in a.iter().zip(b) {
                        assert!((x - y).abs() < 1e-9, "seed {seed} class {c}");
                    }
                }
                _ => panic!("seed {seed}: presence of class {c} differs"),
            }
        }
        let (labels, probs) = initial_pseudo_label(&inst.grid, &protos, inst.target).unwrap();
        assert_eq!(labels.data(), &brute_labels(&inst, &expected_protos)[..], "seed {seed}");
        assert_eq!(probs.argmax_labels(), labels);
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn orthogonal_fixture_reproduces_resampled_truth() {
    // Each cell carries the basis vector of its class, so propagation on the
    // template's own grid must return the cell labels, upsampled.
    let grid_shape = Shape3::new(2, 3, 2).unwrap();
    let vol = Shape3::new(4, 6, 4).unwrap();
    let coarse: Vec<u8> = (0..grid_shape.len()).map(|i| (i % 3) as u8).collect();
    let labels = LabelVolume::from_fn(vol, 3, |[i, j, k]| coarse[grid_shape.index(i / 2, j / 2, k / 2)]).unwrap();
    let n = grid_shape.len();
    let mut data = vec![0f32; 3 * n];
    for (cell, &c) in coarse.iter().enumerate() {
        data[c as usize * n + cell] = 1.0;
    }
    let grid = FeatureGrid::new(3, grid_shape, [2, 2, 2], data).unwrap();
    let protos = compute_prototypes(&grid, &labels).unwrap();
    let (out, _) = initial_pseudo_label(&grid, &protos, vol).unwrap();
    assert_eq!(out, labels);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prototypes_are_unit_norm_and_probs_sum_to_one(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let protos = compute_prototypes(&inst.grid, &inst.labels).unwrap();
        for c in 0..protos.num_classes() {
            if let Some(p) = protos.get(c) {
                prop_assert!((norm(p) - 1.0).abs() < 1e-6);
            }
        }
        let (_, probs) = initial_pseudo_label(&inst.grid, &protos, inst.target).unwrap();
        let n = inst.target.len();
        for v in 0..n {
            let s: f64 = (0..protos.num_classes()).map(|c| probs.prob(c, v)).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn similarities_are_cosines(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let protos = compute_prototypes(&inst.grid, &inst.labels).unwrap();
        let maps = similarity_maps(&inst.grid, &protos).unwrap();
        for (cell, v) in inst.cells.iter().enumerate() {
            for c in 0..protos.num_classes() {
                let got = maps.value(c, cell);
                match protos.get(c) {
                    None => prop_assert_eq!(got, f64::NEG_INFINITY),
                    Some(p) => {
                        let want: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / norm(v);
                        prop_assert!((got - want).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn labels_only_use_present_classes(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let protos = compute_prototypes(&inst.grid, &inst.labels).unwrap();
        let (labels, _) = initial_pseudo_label(&inst.grid, &protos, inst.target).unwrap();
        for &l in labels.data() {
            prop_assert!(protos.is_present(l as usize));
        }
    }
}
