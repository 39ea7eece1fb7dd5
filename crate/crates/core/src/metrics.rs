//! Overlap and surface-distance metrics in voxel units.
//!
//! Surface voxels are foreground voxels with at least one 6-connected
//! background neighbour (outside the volume counts as background). Directed
//! surface distances come from an exact squared Euclidean distance transform
//! of the other mask's surface.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{ceil, sqrt};
use crate::volume::{LabelVolume, Shape3};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Overlap {
    pub dice: f64,
    pub jaccard: f64,
    /// Both masks empty; dice and jaccard are reported as 1.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub asd: f64,
    /// One of the surfaces is empty; both values hold the volume diagonal.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
    pub empty_prediction: bool,
    pub empty_reference: bool,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    /// Indexed by class id, background included.
    pub per_class: Vec<ClassMetrics>,
    /// Mean over the foreground classes `1..C`; flags are OR-ed.
    pub foreground: ClassMetrics,
}

fn check_pair(pred: &LabelVolume, reference: &LabelVolume) -> Result<()> {
    if pred.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            expected: reference.shape(),
            found: pred.shape(),
        });
    }
    if pred.num_classes() != reference.num_classes() {
        return Err(Error::ClassMismatch {
            expected: reference.num_classes(),
            found: pred.num_classes(),
        });
    }
    Ok(())
}

pub fn overlap_metrics(pred: &LabelVolume, reference: &LabelVolume, class: u8) -> Result<Overlap> {
    check_pair(pred, reference)?;
    let (mut p, mut r, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(reference.data()) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        r += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + r == 0 {
        return Ok(Overlap {
            dice: 1.0,
            jaccard: 1.0,
            degenerate: true,
        });
    }
    Ok(Overlap {
        dice: 2.0 * both as f64 / (p + r) as f64,
        jaccard: both as f64 / (p + r - both) as f64,
        degenerate: false,
    })
}

/// Flat indices of the surface voxels of `mask`, ascending.
pub fn surface_voxels(shape: Shape3, mask: &[bool]) -> Vec<usize> {
    let dims = shape.dims();
    let strides = [shape.h * shape.w, shape.w, 1];
    (0..shape.len())
        .filter(|&v| {
            if !mask[v] {
                return false;
            }
            let c = shape.coords(v);
            (0..3).any(|a| {
                c[a] == 0
                    || c[a] + 1 == dims[a]
                    || !mask[v - strides[a]]
                    || !mask[v + strides[a]]
            })
        })
        .collect()
}

/// One pass of the Felzenszwalb-Huttenlocher lower envelope along a line.
fn edt_line(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let qf = q as f64;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
            if s <= z[k as usize] {
                k -= 1;
            } else {
                k += 1;
                v[k as usize] = q;
                z[k as usize] = s;
                break;
            }
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let last = k as usize;
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while j < last && z[j + 1] < qf {
            j += 1;
        }
        let p = v[j];
        let d = qf - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest seed.
/// Values are integers stored in `f64`; `inf` when there are no seeds.
pub fn squared_distance_transform(shape: Shape3, seeds: &[bool]) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let dims = shape.dims();
    let strides = [shape.h * shape.w, shape.w, 1];
    let longest = dims.iter().copied().max().unwrap_or(1);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        for base in 0..shape.len() {
            if shape.coords(base)[axis] != 0 {
                continue;
            }
            for t in 0..n {
                line[t] = grid[base + t * stride];
            }
            edt_line(&line[..n], &mut out[..n], &mut v, &mut z);
            for t in 0..n {
                grid[base + t * stride] = out[t];
            }
        }
    }
    grid
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = (ceil(q * n as f64 - 1e-9) as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn distance_metrics(
    pred: &LabelVolume,
    reference: &LabelVolume,
    class: u8,
) -> Result<SurfaceDistances> {
    check_pair(pred, reference)?;
    let shape = pred.shape();
    let sp = surface_voxels(shape, &pred.mask(class));
    let sr = surface_voxels(shape, &reference.mask(class));
    if sp.is_empty() || sr.is_empty() {
        let diag = shape.diagonal();
        return Ok(SurfaceDistances {
            hd95: diag,
            asd: diag,
            degenerate: true,
        });
    }
    let directed = |from: &[usize], to: &[usize]| {
        let mut seeds = vec![false; shape.len()];
        for &t in to {
            seeds[t] = true;
        }
        let dt = squared_distance_transform(shape, &seeds);
        let mut d: Vec<f64> = from.iter().map(|&f| sqrt(dt[f])).collect();
        d.sort_by(f64::total_cmp);
        d
    };
    let d_pr = directed(&sp, &sr);
    let d_rp = directed(&sr, &sp);
    let hd95 = nearest_rank(&d_pr, 0.95).max(nearest_rank(&d_rp, 0.95));
    let asd = (d_pr.iter().sum::<f64>() + d_rp.iter().sum::<f64>())
        / (d_pr.len() + d_rp.len()) as f64;
    Ok(SurfaceDistances {
        hd95,
        asd,
        degenerate: false,
    })
}

pub fn class_metrics(pred: &LabelVolume, reference: &LabelVolume, class: u8) -> Result<ClassMetrics> {
    let o = overlap_metrics(pred, reference, class)?;
    let d = distance_metrics(pred, reference, class)?;
    Ok(ClassMetrics {
        dice: o.dice,
        jaccard: o.jaccard,
        hd95: d.hd95,
        asd: d.asd,
        empty_prediction: !pred.data().contains(&class),
        empty_reference: !reference.data().contains(&class),
    })
}

/// All four metrics for every class plus the foreground aggregate.
pub fn evaluate(pred: &LabelVolume, reference: &LabelVolume) -> Result<MetricReport> {
    check_pair(pred, reference)?;
    let c = reference.num_classes();
    let per_class = (0..c)
        .map(|k| class_metrics(pred, reference, k as u8))
        .collect::<Result<Vec<_>>>()?;
    let fg = &per_class[1..];
    let m = fg.len() as f64;
    let foreground = ClassMetrics {
        dice: fg.iter().map(|x| x.dice).sum::<f64>() / m,
        jaccard: fg.iter().map(|x| x.jaccard).sum::<f64>() / m,
        hd95: fg.iter().map(|x| x.hd95).sum::<f64>() / m,
        asd: fg.iter().map(|x| x.asd).sum::<f64>() / m,
        empty_prediction: fg.iter().any(|x| x.empty_prediction),
        empty_reference: fg.iter().any(|x| x.empty_reference),
    };
    Ok(MetricReport {
        per_class,
        foreground,
    })
}

/// Mean Dice over the foreground classes `1..C`.
pub fn foreground_dice(pred: &LabelVolume, reference: &LabelVolume) -> Result<f64> {
    check_pair(pred, reference)?;
    let c = reference.num_classes();
    let mut total = 0.0;
    for k in 1..c {
        total += overlap_metrics(pred, reference, k as u8)?.dice;
    }
    Ok(total / (c - 1) as f64)
}

/// Mean foreground Dice of pseudo-labels against ground truth over a pool.
pub fn pseudo_label_quality(
    pseudo: &BTreeMap<String, LabelVolume>,
    truth: &BTreeMap<String, LabelVolume>,
) -> Result<f64> {
    if pseudo.is_empty() {
        return Err(Error::EmptyPool);
    }
    if let Some(id) = truth.keys().find(|k| !pseudo.contains_key(*k)) {
        return Err(Error::UnknownId(id.clone()));
    }
    let mut total = 0.0;
    for (id, p) in pseudo {
        let t = truth.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
        total += foreground_dice(p, t)?;
    }
    Ok(total / pseudo.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, sqrt(var))
}
