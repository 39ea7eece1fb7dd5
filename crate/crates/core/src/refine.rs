//! Uncertainty-guided nearest-neighbour refinement.
//!
//! Each uncertain sample is matched against the certain set by cosine
//! similarity of global features. Its pseudo-label is replaced by a per-voxel
//! vote of the `K` best matches, weighted by their clipped similarity.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::encoder::GlobalFeature;
use crate::math::argmax;
use crate::uncertainty::Partition;
use crate::volume::{resample_labels, LabelVolume};
use crate::{Error, Result, EPSILON};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
    /// `max(0, similarity)`.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NeighborSet {
    pub query: String,
    /// Descending similarity; ties broken by ascending id.
    pub neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn total_weight(&self) -> f64 {
        self.neighbors.iter().map(|n| n.weight).sum()
    }
}

fn lookup<'a, V>(map: &'a BTreeMap<String, V>, id: &str) -> Result<&'a V> {
    map.get(id).ok_or_else(|| Error::UnknownId(String::from(id)))
}

/// The `min(k, |certain|)` certain samples most similar to `query`.
pub fn knn_certain_neighbors(
    globals: &BTreeMap<String, GlobalFeature>,
    certain: &BTreeSet<String>,
    query: &str,
    k: usize,
) -> Result<NeighborSet> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be at least 1"));
    }
    if certain.is_empty() {
        return Err(Error::EmptyCertainSet);
    }
    if certain.contains(query) {
        return Err(Error::QueryIsCertain(String::from(query)));
    }
    let q = lookup(globals, query)?;
    let mut scored = certain
        .iter()
        .map(|id| {
            let g = lookup(globals, id)?;
            if g.vector.len() != q.vector.len() {
                return Err(Error::ChannelMismatch {
                    expected: q.vector.len(),
                    found: g.vector.len(),
                });
            }
            Ok((id, q.dot(g)))
        })
        .collect::<Result<Vec<_>>>()?;
    // BTreeSet iteration is already id-ascending, so a stable sort keeps id order on ties.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
    let neighbors = scored
        .into_iter()
        .take(k)
        .map(|(id, similarity)| Neighbor {
            id: id.clone(),
            similarity,
            weight: similarity.max(0.0),
        })
        .collect();
    Ok(NeighborSet {
        query: String::from(query),
        neighbors,
    })
}

/// Weighted per-voxel vote over the neighbours' labels.
///
/// `raw` must hold the query's own label (kept verbatim when all weights are
/// zero) and every neighbour's label. Neighbour labels with a different shape
/// are resampled onto the query's lattice first.
pub fn refine_pseudo_label(
    neighbors: &NeighborSet,
    raw: &BTreeMap<String, LabelVolume>,
) -> Result<LabelVolume> {
    if neighbors.neighbors.is_empty() {
        return Err(Error::NoNeighbors);
    }
    let query = lookup(raw, &neighbors.query)?;
    let shape = query.shape();
    let num_classes = query.num_classes();

    let mut votes = Vec::with_capacity(neighbors.neighbors.len());
    for n in &neighbors.neighbors {
        let labels = lookup(raw, &n.id)?;
        if labels.num_classes() != num_classes {
            return Err(Error::ClassMismatch {
                expected: num_classes,
                found: labels.num_classes(),
            });
        }
        let labels = if labels.shape() == shape {
            labels.clone()
        } else {
            resample_labels(labels, shape)?
        };
        votes.push((n.weight, labels));
    }

    let total: f64 = votes.iter().map(|(w, _)| *w).sum();
    if total < EPSILON {
        return Ok(query.clone());
    }
    let denom = total + EPSILON;
    let mut scores = vec![0.0; num_classes];
    let data = (0..shape.len())
        .map(|v| {
            scores.iter_mut().for_each(|s| *s = 0.0);
            for (w, labels) in &votes {
                scores[labels.data()[v] as usize] += *w;
            }
            for s in scores.iter_mut() {
                *s /= denom;
            }
            argmax(&scores) as u8
        })
        .collect();
    LabelVolume::new(shape, num_classes, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    /// Same keys as the input; uncertain entries replaced by their vote.
    pub labels: BTreeMap<String, LabelVolume>,
    /// One neighbour set per uncertain sample, in id order.
    pub audit: Vec<NeighborSet>,
}

/// Refines every uncertain sample; certain samples pass through unchanged.
///
/// `raw` must also contain the labeled template (with its ground truth) since
/// the template is always a member of the certain set.
pub fn refine_all(
    raw: &BTreeMap<String, LabelVolume>,
    partition: &Partition,
    globals: &BTreeMap<String, GlobalFeature>,
    k: usize,
) -> Result<Refinement> {
    for id in partition.uncertain.iter().chain(&partition.certain) {
        lookup(raw, id)?;
    }
    let mut labels = raw.clone();
    let mut audit = Vec::with_capacity(partition.uncertain.len());
    for id in &partition.uncertain {
        let neighbors = knn_certain_neighbors(globals, &partition.certain, id, k)?;
        let refined = refine_pseudo_label(&neighbors, raw)?;
        labels.insert(id.clone(), refined);
        audit.push(neighbors);
    }
    Ok(Refinement { labels, audit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Shape3;
    use alloc::string::ToString;

    fn gf(v: &[f64]) -> GlobalFeature {
        GlobalFeature {
            vector: v.to_vec(),
            degenerate: false,
        }
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_certain_sample_is_forced() {
        let globals: BTreeMap<_, _> = [
            ("q".to_string(), gf(&[1.0, 0.0])),
            ("a".to_string(), gf(&[-1.0, 0.0])),
        ]
        .into();
        let ns = knn_certain_neighbors(&globals, &set(&["a"]), "q", 5).unwrap();
        assert_eq!(ns.neighbors.len(), 1);
        assert_eq!(ns.neighbors[0].id, "a");
        assert_eq!(ns.neighbors[0].weight, 0.0);
    }

    #[test]
    fn identical_feature_ranks_first() {
        let s = 0.5f64.sqrt();
        let globals: BTreeMap<_, _> = [
            ("q".to_string(), gf(&[s, s])),
            ("a".to_string(), gf(&[1.0, 0.0])),
            ("b".to_string(), gf(&[s, s])),
            ("c".to_string(), gf(&[0.0, 1.0])),
        ]
        .into();
        let ns = knn_certain_neighbors(&globals, &set(&["a", "b", "c"]), "q", 2).unwrap();
        assert_eq!(ns.neighbors[0].id, "b");
        assert!((ns.neighbors[0].weight - 1.0).abs() < 1e-12);
        // a and c tie; ascending id wins
        assert_eq!(ns.neighbors[1].id, "a");
    }

    #[test]
    fn knn_errors() {
        let globals: BTreeMap<_, _> = [("q".to_string(), gf(&[1.0]))].into();
        assert_eq!(
            knn_certain_neighbors(&globals, &BTreeSet::new(), "q", 1),
            Err(Error::EmptyCertainSet)
        );
        assert_eq!(
            knn_certain_neighbors(&globals, &set(&["q"]), "q", 1),
            Err(Error::QueryIsCertain("q".into()))
        );
        assert_eq!(
            knn_certain_neighbors(&globals, &set(&["zz"]), "q", 1),
            Err(Error::UnknownId("zz".into()))
        );
    }

    fn labels(data: &[u8]) -> LabelVolume {
        LabelVolume::new(Shape3::new(1, 1, data.len()).unwrap(), 2, data.to_vec()).unwrap()
    }

    fn neighbor_set(query: &str, ws: &[(&str, f64)]) -> NeighborSet {
        NeighborSet {
            query: query.into(),
            neighbors: ws
                .iter()
                .map(|(id, w)| Neighbor {
                    id: id.to_string(),
                    similarity: *w,
                    weight: *w,
                })
                .collect(),
        }
    }

    #[test]
    fn single_neighbor_copies_labels() {
        let raw: BTreeMap<_, _> = [
            ("q".to_string(), labels(&[0, 0, 0, 0])),
            ("a".to_string(), labels(&[1, 0, 1, 1])),
        ]
        .into();
        let out = refine_pseudo_label(&neighbor_set("q", &[("a", 0.3)]), &raw).unwrap();
        assert_eq!(out, raw["a"]);
    }

    #[test]
    fn heavier_neighbor_wins_and_zero_weight_keeps_raw() {
        let raw: BTreeMap<_, _> = [
            ("q".to_string(), labels(&[1, 1])),
            ("a".to_string(), labels(&[0, 1])),
            ("b".to_string(), labels(&[1, 0])),
        ]
        .into();
        let out =
            refine_pseudo_label(&neighbor_set("q", &[("a", 0.9), ("b", 0.1)]), &raw).unwrap();
        assert_eq!(out.data(), &[0, 1]);
        let out = refine_pseudo_label(&neighbor_set("q", &[("a", 0.0), ("b", 0.0)]), &raw).unwrap();
        assert_eq!(out, raw["q"]);
        assert_eq!(
            refine_pseudo_label(&neighbor_set("q", &[]), &raw),
            Err(Error::NoNeighbors)
        );
    }

    #[test]
    fn mismatched_shapes_are_resampled() {
        let raw: BTreeMap<_, _> = [
            ("q".to_string(), labels(&[0, 0, 0, 0])),
            ("a".to_string(), labels(&[0, 1])),
        ]
        .into();
        let out = refine_pseudo_label(&neighbor_set("q", &[("a", 1.0)]), &raw).unwrap();
        assert_eq!(out.data(), &[0, 0, 1, 1]);
    }

    #[test]
    fn refine_all_with_empty_uncertain_set_is_identity() {
        let raw: BTreeMap<_, _> = [
            ("t".to_string(), labels(&[1, 0])),
            ("a".to_string(), labels(&[0, 1])),
        ]
        .into();
        let globals: BTreeMap<_, _> = [
            ("t".to_string(), gf(&[1.0])),
            ("a".to_string(), gf(&[1.0])),
        ]
        .into();
        let p = Partition {
            certain: set(&["t", "a"]),
            uncertain: BTreeSet::new(),
            threshold: 0.1,
        };
        let r = refine_all(&raw, &p, &globals, 5).unwrap();
        assert_eq!(r.labels, raw);
        assert!(r.audit.is_empty());
    }
}
