//! Gallery search: brute force over every item, or two-stage search that first
//! picks the nearest class anchor and then ranks only that anchor's bucket.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::AnchorSet;
use crate::numeric::{squared_distance, Matrix};

/// Items ascending by distance, ties by ascending id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<(usize, f64)>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|&(id, _)| id).collect()
    }
}

#[inline]
fn by_distance_then_id(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// Index of the nearest anchor; ties go to the lowest class id. Distances are
/// compared as squared values, which preserves the ordering exactly.
fn nearest_anchor(anchors: &AnchorSet, e: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..anchors.num_classes() {
        let d = squared_distance(e, anchors.anchor(j));
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Predicted label `argmin_j ‖e − c_j‖`.
pub fn classify(anchors: &AnchorSet, e: &[f64]) -> Result<usize> {
    if e.len() != anchors.dim() {
        return Err(Error::dims(anchors.dim(), e.len()));
    }
    Ok(nearest_anchor(anchors, e))
}

#[derive(Debug)]
pub struct RetrievalIndex {
    gallery: Matrix,
    labels: Vec<usize>,
    anchors: AnchorSet,
    buckets: Vec<Vec<usize>>,
    comparisons: AtomicU64,
}

impl RetrievalIndex {
    /// Assigns every gallery item to its nearest anchor.
    pub fn build(gallery: Matrix, labels: Vec<usize>, anchors: AnchorSet) -> Result<Self> {
        if gallery.rows() != labels.len() {
            return Err(Error::dims(gallery.rows(), labels.len()));
        }
        let gallery = if gallery.rows() == 0 {
            Matrix::zeros(0, anchors.dim())
        } else {
            gallery
        };
        if gallery.cols() != anchors.dim() {
            return Err(Error::dims(anchors.dim(), gallery.cols()));
        }
        let mut buckets = vec![Vec::new(); anchors.num_classes()];
        for (i, row) in gallery.iter_rows().enumerate() {
            buckets[nearest_anchor(&anchors, row)].push(i);
        }
        Ok(Self {
            gallery,
            labels,
            anchors,
            buckets,
            comparisons: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gallery(&self) -> &Matrix {
        &self.gallery
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn buckets(&self) -> &[Vec<usize>] {
        &self.buckets
    }

    pub fn max_bucket_size(&self) -> usize {
        self.buckets.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Distance evaluations since the last reset; resets the counter.
    pub fn reset_and_read_counter(&self) -> u64 {
        self.comparisons.swap(0, AtomicOrdering::Relaxed)
    }

    fn count(&self, n: usize) {
        self.comparisons.fetch_add(n as u64, AtomicOrdering::Relaxed);
    }

    fn check_query(&self, q: &[f64], k: usize) -> Result<()> {
        if q.len() != self.anchors.dim() {
            return Err(Error::dims(self.anchors.dim(), q.len()));
        }
        if k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        Ok(())
    }

    fn rank(&self, q: &[f64], ids: impl Iterator<Item = usize>, k: usize) -> RankedList {
        let mut scored: Vec<(usize, f64)> = ids
            .map(|i| (i, squared_distance(q, self.gallery.row(i)).sqrt()))
            .collect();
        self.count(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, by_distance_then_id);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_distance_then_id);
        RankedList { entries: scored }
    }

    /// Top `min(k, N)` over the whole gallery.
    pub fn brute_force_query(&self, q: &[f64], k: usize) -> Result<RankedList> {
        self.check_query(q, k)?;
        Ok(self.rank(q, 0..self.len(), k))
    }

    /// Anchor selected by stage one for `q`.
    pub fn select_anchor(&self, q: &[f64]) -> Result<usize> {
        if q.len() != self.anchors.dim() {
            return Err(Error::dims(self.anchors.dim(), q.len()));
        }
        self.count(self.anchors.num_classes());
        Ok(nearest_anchor(&self.anchors, q))
    }

    /// Stage one picks the nearest anchor; stage two ranks its bucket only.
    /// Returns at most `min(k, bucket size)` items.
    pub fn two_stage_query(&self, q: &[f64], k: usize) -> Result<RankedList> {
        Ok(self.two_stage_query_with_anchor(q, k)?.1)
    }

    /// [`Self::two_stage_query`] that also reports the selected anchor.
    pub fn two_stage_query_with_anchor(&self, q: &[f64], k: usize) -> Result<(usize, RankedList)> {
        self.check_query(q, k)?;
        let j = self.select_anchor(q)?;
        Ok((j, self.rank(q, self.buckets[j].iter().copied(), k)))
    }
}

/// Builds a [`RetrievalIndex`].
pub fn build_index(embeddings: Matrix, labels: Vec<usize>, anchors: AnchorSet) -> Result<RetrievalIndex> {
    RetrievalIndex::build(embeddings, labels, anchors)
}
