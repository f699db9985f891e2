//! Candidate object filtering (top-k, score threshold, per-category NMS)
//! and ordered pair enumeration.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PairDescriptor;
use crate::geometry::iou;
use crate::types::{Detection, ImageId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateConfig {
    /// Detections must score strictly above this.
    pub score_threshold: f64,
    pub top_k: usize,
    pub nms_threshold: f64,
    /// Cap on ordered pairs per image; `None` keeps all of them.
    pub max_pairs_per_image: Option<usize>,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            top_k: 100,
            nms_threshold: 0.3,
            max_pairs_per_image: None,
        }
    }
}

impl CandidateConfig {
    /// Settings for retrieval on candidate pairs (at most 500 pairs per image).
    pub fn retrieval() -> Self {
        Self {
            max_pairs_per_image: Some(500),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::invalid("candidate thresholds must lie in [0, 1]"));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        Ok(())
    }
}

/// An ordered (subject, object) detection pair from one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCandidate {
    pub image_id: ImageId,
    pub subject: Detection,
    pub object: Detection,
    pub descriptor: Option<PairDescriptor>,
}

impl PairCandidate {
    pub fn score_product(&self) -> f64 {
        self.subject.score * self.object.score
    }
}

/// Indices of `dets` sorted by score descending, input order on ties.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy per-category non-maximum suppression. A detection survives iff its
/// IoU with every higher-scored surviving detection of the same category is
/// at most `threshold`. Output is in descending score order.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<&Detection> = Vec::new();
    for i in score_order(dets) {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.category == d.category && iou(&k.bbox, &d.bbox) > threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Top-k by score, then the score threshold, then NMS.
pub fn select_candidates(dets: &[Detection], config: &CandidateConfig) -> Vec<Detection> {
    let top: Vec<Detection> = score_order(dets)
        .into_iter()
        .take(config.top_k)
        .filter(|&i| dets[i].score > config.score_threshold)
        .map(|i| dets[i].clone())
        .collect();
    nms(&top, config.nms_threshold)
}

/// All ordered pairs `(i, j)`, `i != j`, skipping exact duplicates (same box
/// and category). When `max_pairs` is set, keeps the pairs with the largest
/// score product, ties in enumeration order, and returns them in
/// enumeration order.
pub fn enumerate_pairs(kept: &[Detection], max_pairs: Option<usize>) -> Vec<PairCandidate> {
    let mut pairs = Vec::with_capacity(kept.len() * kept.len().saturating_sub(1));
    for (i, s) in kept.iter().enumerate() {
        for (j, o) in kept.iter().enumerate() {
            if i == j || (s.bbox == o.bbox && s.category == o.category) {
                continue;
            }
            pairs.push(PairCandidate {
                image_id: s.image_id.clone(),
                subject: s.clone(),
                object: o.clone(),
                descriptor: None,
            });
        }
    }
    if let Some(cap) = max_pairs {
        if pairs.len() > cap {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.sort_by(|&a, &b| {
                pairs[b]
                    .score_product()
                    .partial_cmp(&pairs[a].score_product())
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut keep: Vec<usize> = order.into_iter().take(cap).collect();
            keep.sort_unstable();
            let mut slots: Vec<Option<PairCandidate>> = pairs.into_iter().map(Some).collect();
            pairs = keep.into_iter().filter_map(|i| slots[i].take()).collect();
        }
    }
    pairs
}
