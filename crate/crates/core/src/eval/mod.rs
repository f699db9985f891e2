//! Detection recall@x, retrieval mAP and top-k recognition accuracy.
//!
//! All metrics depend only on the ranking of scores. Ties are broken by
//! input order, so results are bit-reproducible.

mod report;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, union_box, BoundingBox};
use crate::types::{ImageId, Triplet, TripletAnnotation};

pub use report::{render_table, BreakdownEntry, EvalReport};

/// Which boxes must agree for a detection to count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionMode {
    /// Boxes are the ground-truth boxes; the labels decide.
    Predicate,
    /// Union of subject and object boxes against the GT union.
    Phrase,
    /// Subject and object boxes individually.
    Relationship,
}

/// Localization criterion for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Localization {
    /// Ranked pairs are the annotated pairs themselves.
    Gt,
    Union,
    Subj,
    SubjObj,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matching {
    /// Predictions claim GT in descending score order.
    Greedy,
    /// Maximum bipartite matching between kept predictions and GT.
    Maximum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Mean precision at each positive rank.
    Raw,
    /// 11-point interpolated precision.
    Interpolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Predictions kept per image.
    pub x: usize,
    pub iou_threshold: f64,
    pub mode: DetectionMode,
    pub localization: Localization,
    /// Predicates kept per candidate pair.
    pub preds_per_pair: usize,
    pub matching: Matching,
    pub ap: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            x: 50,
            iou_threshold: 0.5,
            mode: DetectionMode::Relationship,
            localization: Localization::Union,
            preds_per_pair: 1,
            matching: Matching::Greedy,
            ap: ApMode::Raw,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.x == 0 {
            return Err(Error::invalid("recall cutoff x must be at least 1"));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::invalid("iou_threshold must lie in (0, 1]"));
        }
        if self.preds_per_pair == 0 {
            return Err(Error::invalid("preds_per_pair must be at least 1"));
        }
        Ok(())
    }
}

/// A scored (subject box, predicate, object box) hypothesis.
///
/// `pair` identifies the candidate pair within its image and is used for the
/// per-pair cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub image_id: ImageId,
    pub pair: usize,
    pub triplet: Triplet,
    pub subject_box: BoundingBox,
    pub object_box: BoundingBox,
    pub score: f64,
}

/// One entry of a retrieval ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub image_id: ImageId,
    pub subject_box: BoundingBox,
    pub object_box: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query: Triplet,
    pub items: Vec<RankedPair>,
}

/// Overlap of a hypothesis with a GT pair under a detection mode, or `None`
/// when they do not match.
fn detection_overlap(
    mode: DetectionMode,
    threshold: f64,
    (ps, po): (&BoundingBox, &BoundingBox),
    (gs, go): (&BoundingBox, &BoundingBox),
) -> Option<f64> {
    match mode {
        DetectionMode::Predicate => (ps == gs && po == go).then_some(1.0),
        DetectionMode::Phrase => {
            let v = iou(&union_box(ps, po), &union_box(gs, go));
            (v >= threshold).then_some(v)
        }
        DetectionMode::Relationship => {
            let v = iou(ps, gs).min(iou(po, go));
            (v >= threshold).then_some(v)
        }
    }
}

fn retrieval_overlap(
    loc: Localization,
    threshold: f64,
    (ps, po): (&BoundingBox, &BoundingBox),
    (gs, go): (&BoundingBox, &BoundingBox),
) -> Option<f64> {
    let v = match loc {
        Localization::Gt => return (ps == gs && po == go).then_some(1.0),
        Localization::Union => iou(&union_box(ps, po), &union_box(gs, go)),
        Localization::Subj => iou(ps, gs),
        Localization::SubjObj => iou(ps, gs).min(iou(po, go)),
    };
    (v >= threshold).then_some(v)
}

/// Indices of `scores` in descending order, input order on ties.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// The predictions of one image that survive the per-pair and per-image caps,
/// in descending score order.
pub fn kept_predictions<'a>(preds: &[&'a ScoredTriplet], x: usize, per_pair: usize) -> Vec<&'a ScoredTriplet> {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let mut per_pair_count: BTreeMap<usize, usize> = BTreeMap::new();
    let mut kept = Vec::new();
    for i in rank_desc(&scores) {
        if kept.len() == x {
            break;
        }
        let c = per_pair_count.entry(preds[i].pair).or_insert(0);
        if *c < per_pair {
            *c += 1;
            kept.push(preds[i]);
        }
    }
    kept
}

/// Compatibility matrix `overlap[p][g]` between kept predictions and GT.
fn compat(kept: &[&ScoredTriplet], gts: &[&TripletAnnotation], config: &EvalConfig) -> Vec<Vec<Option<f64>>> {
    kept.iter()
        .map(|p| {
            gts.iter()
                .map(|g| {
                    if p.triplet != g.triplet() {
                        return None;
                    }
                    let (gs, go) = g.boxes.as_ref()?;
                    detection_overlap(config.mode, config.iou_threshold, (&p.subject_box, &p.object_box), (gs, go))
                })
                .collect()
        })
        .collect()
}

/// Greedy matching in row order: each row takes the unclaimed column with
/// the largest overlap, lowest index on ties.
fn greedy_match(overlap: &[Vec<Option<f64>>], n_cols: usize) -> usize {
    let mut taken = vec![false; n_cols];
    let mut matched = 0;
    for row in overlap {
        let mut best: Option<(usize, f64)> = None;
        for (g, v) in row.iter().enumerate() {
            if let (false, Some(v)) = (taken[g], v) {
                if best.is_none_or(|(_, b)| *v > b) {
                    best = Some((g, *v));
                }
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            matched += 1;
        }
    }
    matched
}

/// Size of a maximum bipartite matching (augmenting paths).
fn maximum_match(overlap: &[Vec<Option<f64>>], n_cols: usize) -> usize {
    fn augment(r: usize, overlap: &[Vec<Option<f64>>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for (g, v) in overlap[r].iter().enumerate() {
            if v.is_none() || seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].is_none_or(|o| augment(o, overlap, owner, seen)) {
                owner[g] = Some(r);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_cols];
    (0..overlap.len())
        .filter(|&r| augment(r, overlap, &mut owner, &mut vec![false; n_cols]))
        .count()
}

/// Fraction of GT triplets recalled by the top-`x` predictions of each
/// image, aggregated over all GT.
pub fn recall_at_x(predictions: &[ScoredTriplet], gt: &[TripletAnnotation], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    if config.mode != DetectionMode::Predicate {
        if let Some(g) = gt.iter().find(|g| g.boxes.is_none()) {
            return Err(Error::invalid(format!(
                "ground truth in image {} has no boxes; required for phrase and relationship detection",
                g.image_id
            )));
        }
    }
    let mut images: BTreeMap<&str, (Vec<&ScoredTriplet>, Vec<&TripletAnnotation>)> = BTreeMap::new();
    for p in predictions {
        images.entry(p.image_id.as_str()).or_default().0.push(p);
    }
    for g in gt {
        images.entry(g.image_id.as_str()).or_default().1.push(g);
    }
    let images: Vec<_> = images.into_iter().collect();
    let breakdown: Vec<BreakdownEntry> = images
        .par_iter()
        .map(|(image, (preds, gts))| {
            let kept = kept_predictions(preds, config.x, config.preds_per_pair);
            let overlap = compat(&kept, gts, config);
            let matched = match config.matching {
                Matching::Greedy => greedy_match(&overlap, gts.len()),
                Matching::Maximum => maximum_match(&overlap, gts.len()),
            };
            BreakdownEntry::new(image.to_string(), matched, gts.len(), kept.len())
        })
        .collect();
    Ok(EvalReport::aggregate(
        format!("{}-recall@{}", mode_name(config.mode), config.x),
        breakdown,
    ))
}

fn mode_name(mode: DetectionMode) -> &'static str {
    match mode {
        DetectionMode::Predicate => "predicate",
        DetectionMode::Phrase => "phrase",
        DetectionMode::Relationship => "relationship",
    }
}

/// Precision-at-positive AP over a ranked hit list with `n_gt` positives.
pub fn average_precision(hits: &[bool], n_gt: usize, mode: ApMode) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64, h));
    }
    match mode {
        ApMode::Raw => curve.iter().filter(|c| c.2).map(|c| c.1).sum::<f64>() / n_gt as f64,
        ApMode::Interpolated => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|c| c.0 >= r - 1e-12)
                        .map(|c| c.1)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Positive flags of a ranking, consuming each GT pair at most once.
fn retrieval_hits(ranking: &QueryRanking, positives: &[&TripletAnnotation], config: &EvalConfig) -> Vec<bool> {
    let scores: Vec<f64> = ranking.items.iter().map(|p| p.score).collect();
    let mut consumed = vec![false; positives.len()];
    rank_desc(&scores)
        .into_iter()
        .map(|i| {
            let item = &ranking.items[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in positives.iter().enumerate() {
                if consumed[g] || gt.image_id != item.image_id {
                    continue;
                }
                let Some((gs, go)) = gt.boxes.as_ref() else { continue };
                let ov = retrieval_overlap(
                    config.localization,
                    config.iou_threshold,
                    (&item.subject_box, &item.object_box),
                    (gs, go),
                );
                if let Some(v) = ov {
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
            }
            if let Some((g, _)) = best {
                consumed[g] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

fn query_key(t: &Triplet) -> String {
    format!("{}-{}-{}", t.subject, t.predicate, t.object)
}

/// Mean over queries of the average precision of each ranking. Queries
/// without any positive are left out of the mean and listed in `excluded`.
pub fn retrieval_map(rankings: &[QueryRanking], positives: &[TripletAnnotation], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    if let Some(g) = positives.iter().find(|g| g.boxes.is_none()) {
        return Err(Error::invalid(format!("retrieval positive in image {} has no boxes", g.image_id)));
    }
    let mut by_query: BTreeMap<Triplet, Vec<&TripletAnnotation>> = BTreeMap::new();
    for p in positives {
        by_query.entry(p.triplet()).or_default().push(p);
    }
    let results: Vec<(String, Option<BreakdownEntry>)> = rankings
        .par_iter()
        .map(|ranking| {
            let key = query_key(&ranking.query);
            let pos = by_query.get(&ranking.query).map(Vec::as_slice).unwrap_or(&[]);
            if pos.is_empty() {
                return (key, None);
            }
            let hits = retrieval_hits(ranking, pos, config);
            let matched = hits.iter().filter(|&&h| h).count();
            let ap = average_precision(&hits, pos.len(), config.ap);
            let mut entry = BreakdownEntry::new(key.clone(), matched, pos.len(), ranking.items.len());
            entry.value = ap;
            (key, Some(entry))
        })
        .collect();
    let mut excluded = Vec::new();
    let mut breakdown = Vec::new();
    for (key, entry) in results {
        match entry {
            Some(e) => breakdown.push(e),
            None => excluded.push(key),
        }
    }
    let value = if breakdown.is_empty() {
        0.0
    } else {
        breakdown.iter().map(|e| e.value).sum::<f64>() / breakdown.len() as f64
    };
    let loc = match config.localization {
        Localization::Gt => "gt",
        Localization::Union => "union",
        Localization::Subj => "subj",
        Localization::SubjObj => "subj-obj",
    };
    let mut report = EvalReport::aggregate(format!("mAP-{loc}@{}", config.iou_threshold), breakdown);
    report.value = value;
    report.excluded = excluded;
    Ok(report)
}

/// Fraction of pairs whose GT predicate set meets the first `k` entries of
/// the ranked prediction list.
pub fn topk_accuracy(predictions: &[Vec<usize>], gt: &[Vec<usize>], k: usize) -> Result<EvalReport> {
    if predictions.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: gt.len(),
            found: predictions.len(),
        });
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if let Some(i) = gt.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("pair {i} has no ground-truth predicate")));
    }
    let breakdown = predictions
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (p, g))| {
            let hit = p.iter().take(k).any(|r| g.contains(r));
            BreakdownEntry::new(i.to_string(), usize::from(hit), 1, p.len().min(k))
        })
        .collect();
    Ok(EvalReport::aggregate(format!("top-{k}-accuracy"), breakdown))
}

/// Rankings for every query over the same pool of scored pairs. `score` maps
/// a pool index and a query to a score, or `None` to leave the pair out.
pub fn build_rankings<F>(queries: &[Triplet], pool: &[(ImageId, BoundingBox, BoundingBox)], score: F) -> Vec<QueryRanking>
where
    F: Fn(usize, &Triplet) -> Option<f64> + Sync,
{
    queries
        .par_iter()
        .map(|q| QueryRanking {
            query: *q,
            items: pool
                .iter()
                .enumerate()
                .filter_map(|(i, (img, s, o))| {
                    score(i, q).map(|score| RankedPair {
                        image_id: img.clone(),
                        subject_box: *s,
                        object_box: *o,
                        score,
                    })
                })
                .collect(),
        })
        .collect()
}
