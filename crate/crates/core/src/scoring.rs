//! Test-time triplet scores and tuning of their mixing weights.
//!
//! The score of a pair for a query `(s, r, o)` is
//! `x . w_r + alpha_sub * v_sub + alpha_obj * v_obj + alpha_lang * l`,
//! where `v_*` are detector scores and `l` an externally supplied language
//! score (0 when absent).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidates::PairCandidate;
use crate::error::{Error, Result};
use crate::eval::{recall_at_x, DetectionMode, EvalConfig, ScoredTriplet};
use crate::train_full::RelationModel;
use crate::types::{Triplet, TripletAnnotation, Vocabulary};

/// Grid used for each weight when none is given.
pub const DEFAULT_GRID: [f64; 5] = [0.0, 0.1, 0.3, 0.5, 1.0];

/// Floor applied before taking the log of a detector score.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorScores {
    /// Detector confidences as ingested.
    #[default]
    Raw,
    /// Natural log of the confidences.
    Log,
}

impl DetectorScores {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Self::Raw => v,
            Self::Log => v.max(LOG_FLOOR).ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub alpha_sub: f64,
    pub alpha_obj: f64,
    pub alpha_lang: f64,
    #[serde(default)]
    pub detector_scores: DetectorScores,
}

impl ScoreWeights {
    pub fn new(alpha_sub: f64, alpha_obj: f64, alpha_lang: f64) -> Result<Self> {
        let w = Self {
            alpha_sub,
            alpha_obj,
            alpha_lang,
            detector_scores: DetectorScores::Raw,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("alpha_sub", self.alpha_sub),
            ("alpha_obj", self.alpha_obj),
            ("alpha_lang", self.alpha_lang),
        ] {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {a}")));
            }
        }
        Ok(())
    }

    fn detector_term(&self, v_sub: f64, v_obj: f64) -> f64 {
        self.alpha_sub * self.detector_scores.apply(v_sub) + self.alpha_obj * self.detector_scores.apply(v_obj)
    }
}

/// Language scores keyed by triplet. Absent triplets score 0 and are counted.
#[derive(Debug, Default)]
pub struct LanguageScoreTable {
    scores: BTreeMap<Triplet, f64>,
    misses: AtomicUsize,
}

impl Clone for LanguageScoreTable {
    fn clone(&self) -> Self {
        Self {
            scores: self.scores.clone(),
            misses: AtomicUsize::new(self.misses()),
        }
    }
}

impl LanguageScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, t: Triplet, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::invalid(format!("language score for {t:?} is not finite")));
        }
        self.scores.insert(t, score);
        Ok(())
    }

    pub fn get(&self, t: &Triplet) -> f64 {
        match self.scores.get(t) {
            Some(&v) => v,
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                0.0
            }
        }
    }

    /// Number of lookups that found no entry.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Triplet, &f64)> {
        self.scores.iter()
    }

    /// Parses `subject,predicate,object,score` rows (with a header line),
    /// names resolved through `vocab`. `source` only labels errors.
    pub fn from_csv<R: Read>(reader: R, vocab: &Vocabulary, source: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let parse_err = |line: u64, msg: String| Error::Parse {
            path: source.to_path_buf(),
            line: line as usize,
            msg,
        };
        let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let expected = ["subject", "predicate", "object", "score"];
        if headers.iter().ne(expected) {
            return Err(parse_err(1, format!("expected header {}", expected.join(","))));
        }
        let mut table = Self::new();
        for record in rdr.records() {
            let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = record.position().map_or(0, |p| p.line());
            let object_id = |name: &str| {
                vocab
                    .object_id(name)
                    .ok_or_else(|| parse_err(line, format!("unknown object category '{name}'")))
            };
            let subject = object_id(&record[0])?;
            let predicate = vocab
                .predicate_id(&record[1])
                .filter(|&r| r < vocab.num_predicates())
                .ok_or_else(|| parse_err(line, format!("unknown predicate '{}'", &record[1])))?;
            let object = object_id(&record[2])?;
            let score: f64 = record[3]
                .parse()
                .map_err(|_| parse_err(line, format!("invalid score '{}'", &record[3])))?;
            table
                .insert(
                    Triplet {
                        subject,
                        predicate,
                        object,
                    },
                    score,
                )
                .map_err(|e| parse_err(line, e.to_string()))?;
        }
        Ok(table)
    }
}

fn descriptor_of(pair: &PairCandidate) -> Result<Vec<f64>> {
    pair.descriptor
        .as_ref()
        .map(|d| d.full())
        .ok_or_else(|| Error::invalid(format!("pair in image {} has no descriptor", pair.image_id)))
}

fn check_predicate(model: &RelationModel, r: usize) -> Result<()> {
    let n = model.vocabulary().num_predicates();
    if r >= n {
        return Err(Error::QueryMismatch(format!("predicate {r} is not one of the {n} rankable predicates")));
    }
    Ok(())
}

pub fn triplet_score(
    pair: &PairCandidate,
    query: &Triplet,
    model: &RelationModel,
    weights: &ScoreWeights,
    lang: Option<&LanguageScoreTable>,
) -> Result<f64> {
    if pair.subject.category != query.subject || pair.object.category != query.object {
        return Err(Error::QueryMismatch(format!(
            "pair categories ({}, {}) do not match query ({}, {})",
            pair.subject.category, pair.object.category, query.subject, query.object
        )));
    }
    check_predicate(model, query.predicate)?;
    let x = descriptor_of(pair)?;
    let v_rel = model.relation_score(&x, query.predicate)?;
    let l = lang.map_or(0.0, |t| t.get(query));
    Ok(v_rel + weights.detector_term(pair.subject.score, pair.object.score) + weights.alpha_lang * l)
}

/// Indices of the `k` largest entries, descending, lower index on ties.
fn top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| (i, scores[i])).collect()
}

/// The `k` best predicates of a pair by `x . w_r`. The no-relation class is
/// never ranked.
pub fn predict_relations(pair: &PairCandidate, model: &RelationModel, k: usize) -> Result<Vec<(usize, f64)>> {
    let x = descriptor_of(pair)?;
    let mut v = model.relation_scores(&x)?;
    v.truncate(model.vocabulary().num_predicates());
    Ok(top_k(&v, k))
}

/// Whether a score row (all classes) peaks at the no-relation class.
pub fn prefers_no_relation(v: &[f64], model: &RelationModel) -> bool {
    match model.vocabulary().no_relation_index() {
        Some(nr) => top_k(v, 1).first().is_some_and(|&(c, _)| c == nr),
        None => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionConfig {
    /// Predicates emitted per pair.
    pub preds_per_pair: usize,
    /// Drop pairs whose best class is no-relation.
    pub suppress_no_relation: bool,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            preds_per_pair: 1,
            suppress_no_relation: false,
        }
    }
}

/// Relation scores of every pair, one row per pair over all classes.
pub fn relation_score_rows(pairs: &[PairCandidate], model: &RelationModel) -> Result<Vec<Vec<f64>>> {
    pairs
        .par_iter()
        .map(|p| model.relation_scores(&descriptor_of(p)?))
        .collect()
}

/// Precomputed pieces of the triplet score of a pair set, so that many
/// weight settings can be evaluated cheaply.
struct ScoreParts<'a> {
    pairs: &'a [PairCandidate],
    v_rel: Vec<Vec<f64>>,
    lang: Vec<Vec<f64>>,
    suppressed: Vec<bool>,
}

impl<'a> ScoreParts<'a> {
    fn new(
        pairs: &'a [PairCandidate],
        model: &RelationModel,
        lang: Option<&LanguageScoreTable>,
        suppress_no_relation: bool,
    ) -> Result<Self> {
        let v_rel = relation_score_rows(pairs, model)?;
        let r = model.vocabulary().num_predicates();
        let suppressed = v_rel
            .iter()
            .map(|v| suppress_no_relation && prefers_no_relation(v, model))
            .collect();
        let lang = pairs
            .iter()
            .map(|p| {
                (0..r)
                    .map(|predicate| {
                        lang.map_or(0.0, |t| {
                            t.get(&Triplet {
                                subject: p.subject.category,
                                predicate,
                                object: p.object.category,
                            })
                        })
                    })
                    .collect()
            })
            .collect();
        let v_rel = v_rel
            .into_iter()
            .map(|mut v| {
                v.truncate(r);
                v
            })
            .collect();
        Ok(Self {
            pairs,
            v_rel,
            lang,
            suppressed,
        })
    }

    fn predictions(&self, weights: &ScoreWeights, k: usize) -> Vec<ScoredTriplet> {
        let mut out = Vec::new();
        let mut pair_ids: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, p) in self.pairs.iter().enumerate() {
            let id = pair_ids.entry(p.image_id.as_str()).or_insert(0);
            let pair_id = *id;
            *id += 1;
            if self.suppressed[i] {
                continue;
            }
            let det = weights.detector_term(p.subject.score, p.object.score);
            let s: Vec<f64> = self.v_rel[i]
                .iter()
                .zip(&self.lang[i])
                .map(|(v, l)| v + det + weights.alpha_lang * l)
                .collect();
            for (predicate, score) in top_k(&s, k) {
                out.push(ScoredTriplet {
                    image_id: p.image_id.clone(),
                    pair: pair_id,
                    triplet: Triplet {
                        subject: p.subject.category,
                        predicate,
                        object: p.object.category,
                    },
                    subject_box: p.subject.bbox,
                    object_box: p.object.bbox,
                    score,
                });
            }
        }
        out
    }
}

/// Scored triplet hypotheses for every pair: the `preds_per_pair`
/// predicates with the largest triplet score. Pairs are numbered per image
/// in input order.
pub fn score_pairs(
    pairs: &[PairCandidate],
    model: &RelationModel,
    weights: &ScoreWeights,
    lang: Option<&LanguageScoreTable>,
    config: &PredictionConfig,
) -> Result<Vec<ScoredTriplet>> {
    weights.validate()?;
    let parts = ScoreParts::new(pairs, model, lang, config.suppress_no_relation)?;
    Ok(parts.predictions(weights, config.preds_per_pair))
}

/// Candidate values for each weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightGrid {
    pub alpha_sub: Vec<f64>,
    pub alpha_obj: Vec<f64>,
    pub alpha_lang: Vec<f64>,
    pub detector_scores: DetectorScores,
}

impl Default for WeightGrid {
    fn default() -> Self {
        Self {
            alpha_sub: DEFAULT_GRID.to_vec(),
            alpha_obj: DEFAULT_GRID.to_vec(),
            alpha_lang: DEFAULT_GRID.to_vec(),
            detector_scores: DetectorScores::Raw,
        }
    }
}

impl WeightGrid {
    pub fn single(weights: ScoreWeights) -> Self {
        Self {
            alpha_sub: vec![weights.alpha_sub],
            alpha_obj: vec![weights.alpha_obj],
            alpha_lang: vec![weights.alpha_lang],
            detector_scores: weights.detector_scores,
        }
    }

    /// All cells, `alpha_sub` varying slowest and `alpha_lang` fastest.
    pub fn cells(&self) -> Result<Vec<ScoreWeights>> {
        let mut cells = Vec::new();
        for &alpha_sub in &self.alpha_sub {
            for &alpha_obj in &self.alpha_obj {
                for &alpha_lang in &self.alpha_lang {
                    let w = ScoreWeights {
                        alpha_sub,
                        alpha_obj,
                        alpha_lang,
                        detector_scores: self.detector_scores,
                    };
                    w.validate()?;
                    cells.push(w);
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::invalid("weight grid is empty"));
        }
        Ok(cells)
    }
}

/// Fully annotated pairs and ground truth used to pick weights.
#[derive(Debug, Clone, Default)]
pub struct ValidationSet {
    pub pairs: Vec<PairCandidate>,
    pub annotations: Vec<TripletAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: ScoreWeights,
    pub best_recall: f64,
    /// Every cell with its validation recall, in grid order.
    pub cells: Vec<(ScoreWeights, f64)>,
}

/// Exhaustive grid search maximizing relationship recall@50 at IoU 0.5 with
/// one predicate per pair. The first cell in grid order wins ties.
pub fn tune_weights(
    validation: &ValidationSet,
    model: &RelationModel,
    grid: &WeightGrid,
    lang: Option<&LanguageScoreTable>,
) -> Result<TuneResult> {
    let cells = grid.cells()?;
    let eval = EvalConfig {
        x: 50,
        iou_threshold: 0.5,
        mode: DetectionMode::Relationship,
        ..EvalConfig::default()
    };
    let parts = ScoreParts::new(&validation.pairs, model, lang, false)?;
    let recalls: Vec<f64> = cells
        .par_iter()
        .map(|w| {
            let preds = parts.predictions(w, eval.preds_per_pair);
            recall_at_x(&preds, &validation.annotations, &eval).map(|r| r.value)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &r) in recalls.iter().enumerate() {
        if r > recalls[best] {
            best = i;
        }
    }
    Ok(TuneResult {
        best: cells[best],
        best_recall: recalls[best],
        cells: cells.into_iter().zip(recalls).collect(),
    })
}
