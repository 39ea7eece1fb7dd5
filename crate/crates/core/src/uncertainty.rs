//! Sample-level uncertainty and the certain/uncertain split.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{ceil, ln};
use crate::volume::{ProbVolume, PROB_SUM_TOLERANCE};
use crate::{Error, Result};

/// Entropy of one class distribution in nats, with `0 log 0 = 0`.
pub fn voxel_entropy(probs: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &p in probs {
        if !(-PROB_SUM_TOLERANCE..=1.0 + PROB_SUM_TOLERANCE).contains(&p) {
            return Err(Error::ProbabilityOutOfRange(p));
        }
        if p > 0.0 {
            let p = p.min(1.0);
            h -= p * ln(p);
        }
    }
    Ok(h)
}

/// Per-voxel entropy over the whole volume.
pub fn entropy_map(p: &ProbVolume) -> Result<Vec<f64>> {
    let n = p.shape().len();
    let mut buf = vec![0.0; p.num_classes()];
    (0..n)
        .map(|v| {
            p.voxel(v, &mut buf);
            voxel_entropy(&buf)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SampleUncertainty {
    pub id: String,
    /// Mean voxel entropy in nats, within `[0, ln C]`.
    pub value: f64,
}

/// Mean voxel entropy of a prediction.
pub fn sample_uncertainty(id: impl Into<String>, p: &ProbVolume) -> Result<SampleUncertainty> {
    let map = entropy_map(p)?;
    let mean = map.iter().sum::<f64>() / map.len() as f64;
    let max = ln(p.num_classes() as f64);
    Ok(SampleUncertainty {
        id: id.into(),
        value: mean.clamp(0.0, max),
    })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Partition {
    pub certain: BTreeSet<String>,
    pub uncertain: BTreeSet<String>,
    pub threshold: f64,
}

impl Partition {
    pub fn is_certain(&self, id: &str) -> bool {
        self.certain.contains(id)
    }
}

/// Index into the ascending sort for the nearest-rank `q` quantile of `n` values.
pub(crate) fn nearest_rank_index(q: f64, n: usize) -> usize {
    // The small slack keeps q * n from landing one rank high through rounding,
    // e.g. 0.9 * 30 = 27.000000000000004.
    let rank = ceil(q * n as f64 - 1e-9) as usize;
    rank.clamp(1, n) - 1
}

/// Splits the pool at the nearest-rank `q_unc` quantile of its uncertainties.
/// Ties with the threshold count as certain; the labeled template is always certain.
pub fn partition_by_quantile(
    uncertainties: &[SampleUncertainty],
    labeled_id: &str,
    q_unc: f64,
) -> Result<Partition> {
    if !(q_unc > 0.0 && q_unc <= 1.0) {
        return Err(Error::InvalidQuantile(q_unc));
    }
    if uncertainties.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut seen = BTreeSet::new();
    for u in uncertainties {
        if u.id == labeled_id || !seen.insert(u.id.as_str()) {
            return Err(Error::DuplicateId(u.id.clone()));
        }
        if !u.value.is_finite() {
            return Err(Error::NonFinite);
        }
    }
    let mut sorted: Vec<f64> = uncertainties.iter().map(|u| u.value).collect();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[nearest_rank_index(q_unc, sorted.len())];

    let mut certain = BTreeSet::new();
    let mut uncertain = BTreeSet::new();
    certain.insert(String::from(labeled_id));
    for u in uncertainties {
        if u.value <= threshold {
            certain.insert(u.id.clone());
        } else {
            uncertain.insert(u.id.clone());
        }
    }
    Ok(Partition {
        certain,
        uncertain,
        threshold,
    })
}
