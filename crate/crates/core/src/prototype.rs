//! Round-0 label propagation from the single annotated template.
//!
//! Template labels are downsampled to the feature lattice, each class is
//! summarized by the normalized mean of its cell features, and every cell of
//! an unlabeled volume is scored by cosine similarity against those
//! prototypes. Scores are upsampled to voxel resolution and turned into
//! probabilities with a per-voxel softmax.

use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::FeatureGrid;
use crate::math::{argmax, l2_norm, softmax_in_place};
use crate::volume::{
    nearest_downsample_labels, nearest_upsample_maps, ClassMaps, LabelVolume, ProbVolume, Shape3,
};
use crate::{Error, Result, EPSILON};

/// Unit-norm class prototypes; `None` marks a class with no template cells.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    channels: usize,
    prototypes: Vec<Option<Vec<f64>>>,
}

impl PrototypeSet {
    pub fn new(channels: usize, prototypes: Vec<Option<Vec<f64>>>) -> Result<Self> {
        if prototypes.iter().all(Option::is_none) {
            return Err(Error::NoPrototype);
        }
        for p in prototypes.iter().flatten() {
            if p.len() != channels {
                return Err(Error::ChannelMismatch {
                    expected: channels,
                    found: p.len(),
                });
            }
            if (l2_norm(p) - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidParameter("prototype is not unit norm"));
            }
        }
        Ok(PrototypeSet {
            channels,
            prototypes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.prototypes.get(class)?.as_deref()
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.get(class).is_some()
    }
}

/// Class prototypes from the template's feature grid and full-resolution labels.
///
/// A class whose cells average to the zero vector has no direction and is
/// treated like an absent class.
pub fn compute_prototypes(grid: &FeatureGrid, labels: &LabelVolume) -> Result<PrototypeSet> {
    let grid_shape = grid.grid_shape();
    if !labels.shape().contains(&grid_shape) {
        return Err(Error::GridLargerThanVolume {
            grid: grid_shape,
            volume: labels.shape(),
        });
    }
    let coarse = nearest_downsample_labels(labels, grid_shape)?;
    let channels = grid.channels();
    let num_classes = labels.num_classes();
    let mut sums = vec![vec![0.0f64; channels]; num_classes];
    let mut counts = vec![0usize; num_classes];
    let mut buf = vec![0.0; channels];
    for (cell, &class) in coarse.data().iter().enumerate() {
        grid.cell_vector(cell, &mut buf);
        let sum = &mut sums[class as usize];
        for (s, v) in sum.iter_mut().zip(&buf) {
            *s += v;
        }
        counts[class as usize] += 1;
    }
    let prototypes = sums
        .into_iter()
        .zip(counts)
        .map(|(mut sum, count)| {
            if count == 0 {
                return None;
            }
            let denom = count as f64 + EPSILON;
            for s in sum.iter_mut() {
                *s /= denom;
            }
            let norm = l2_norm(&sum);
            if norm == 0.0 {
                return None;
            }
            for s in sum.iter_mut() {
                *s /= norm;
            }
            Some(sum)
        })
        .collect();
    PrototypeSet::new(channels, prototypes)
}

/// Cosine similarity of every cell against every class prototype, over the
/// grid lattice. Absent classes get `-inf`; zero-norm cells score 0.
pub fn similarity_maps(grid: &FeatureGrid, protos: &PrototypeSet) -> Result<ClassMaps> {
    if grid.channels() != protos.channels {
        return Err(Error::ChannelMismatch {
            expected: protos.channels,
            found: grid.channels(),
        });
    }
    let cells = grid.grid_shape().len();
    let num_classes = protos.num_classes();
    let mut data = vec![0.0; cells * num_classes];
    let mut buf = vec![0.0; grid.channels()];
    for cell in 0..cells {
        grid.cell_vector(cell, &mut buf);
        let norm = l2_norm(&buf);
        if norm > 0.0 {
            for v in buf.iter_mut() {
                *v /= norm;
            }
        }
        for (c, proto) in protos.prototypes.iter().enumerate() {
            data[c * cells + cell] = match proto {
                None => f64::NEG_INFINITY,
                Some(_) if norm == 0.0 => 0.0,
                Some(p) => crate::math::dot(&buf, p),
            };
        }
    }
    ClassMaps::new(grid.grid_shape(), num_classes, data)
}

/// Softmax-then-argmax pseudo-label at full volume resolution.
pub fn initial_pseudo_label(
    grid: &FeatureGrid,
    protos: &PrototypeSet,
    vol_shape: Shape3,
) -> Result<(LabelVolume, ProbVolume)> {
    let coarse = similarity_maps(grid, protos)?;
    let fine = nearest_upsample_maps(&coarse, vol_shape)?;
    let n = vol_shape.len();
    let num_classes = protos.num_classes();
    let mut probs = vec![0.0; n * num_classes];
    let mut labels = Vec::with_capacity(n);
    let mut buf = vec![0.0; num_classes];
    for v in 0..n {
        for (c, b) in buf.iter_mut().enumerate() {
            *b = fine.value(c, v);
        }
        softmax_in_place(&mut buf);
        labels.push(argmax(&buf) as u8);
        for (c, b) in buf.iter().enumerate() {
            probs[c * n + v] = *b;
        }
    }
    Ok((
        LabelVolume::new(vol_shape, num_classes, labels)?,
        ProbVolume::new(vol_shape, num_classes, probs)?,
    ))
}
