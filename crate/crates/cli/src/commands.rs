use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use vrel::candidates::{enumerate_pairs, select_candidates, PairCandidate};
use vrel::eval::{build_rankings, recall_at_x, render_table, retrieval_map, EvalReport, ScoredTriplet};
use vrel::features::{describe_pairs, embed_appearance, fit_appearance_pca};
use vrel::gmm::fit_gmm;
use vrel::io::{load_dataset, load_model, load_pairs, read_jsonl, save_dataset, save_model, save_pairs, write_json, write_jsonl, CornerBox, Dataset, ModelBundle};
use vrel::scoring::{
    prefers_no_relation, relation_score_rows, score_pairs, triplet_score, tune_weights, LanguageScoreTable, ScoreWeights,
    ValidationSet,
};
use vrel::synth::planted_bags_dataset;
use vrel::train_full::{train_labeled, train_noisy, NoisyConfig, RelationModel};
use vrel::weak::{build_bags, fw_train, prune_infeasible_bags, sample_negatives, Bag, WeakProblem};
use vrel::{iou, spatial_vector, BoundingBox, Error, Triplet, TripletAnnotation, Vocabulary};

use crate::config::Config;
use crate::{Command, DataArgs, Failure, Preset, TrainArgs};

type Outcome = Result<(), Failure>;

pub fn run(command: Command, config: &Config) -> Outcome {
    match command {
        Command::Synth { preset, out } => synth(preset, &out, config),
        Command::FitGmm { data, k, annotated, out } => {
            fit_gmm_cmd(&data, k.unwrap_or(config.gmm_components), annotated, &out, config)
        }
        Command::FitPca { data, dim, model, out } => {
            fit_pca_cmd(&data, dim.unwrap_or(config.pca_dim), model.as_deref(), &out)
        }
        Command::Featurize {
            data,
            model,
            gt_pairs,
            out,
        } => featurize(&data, &model, gt_pairs, &out, config),
        Command::TrainFull(args) => train_full_cmd(&args, config),
        Command::TrainWeak { train, max_iters } => train_weak_cmd(&train, max_iters, config),
        Command::TrainNoisy(args) => train_noisy_cmd(&args, config),
        Command::TuneWeights {
            data,
            pairs,
            model,
            language,
            out,
            report,
        } => tune(&data, &pairs, &model, language.as_deref(), &out, report.as_deref(), config),
        Command::Score {
            data,
            pairs,
            model,
            language,
            k,
            out,
        } => score(&data, &pairs, &model, language.as_deref(), k, &out, config),
        Command::EvalRecall {
            data,
            predictions,
            x,
            mode,
            iou,
            out,
        } => {
            let mut eval = config.eval;
            eval.x = x.unwrap_or(eval.x);
            eval.mode = mode.unwrap_or(eval.mode);
            eval.iou_threshold = iou.unwrap_or(eval.iou_threshold);
            eval_recall(&data, &predictions, &eval, out.as_deref())
        }
        Command::EvalRetrieval {
            data,
            pairs,
            model,
            language,
            localization,
            iou,
            out,
        } => {
            let mut eval = config.eval;
            eval.localization = localization.unwrap_or(eval.localization);
            eval.iou_threshold = iou.unwrap_or(eval.iou_threshold);
            eval_retrieval(&data, &pairs, &model, language.as_deref(), &eval, out.as_deref(), config)
        }
    }
}

fn load(data: &DataArgs) -> Result<Dataset, Failure> {
    let loaded = load_dataset(&data.dataset)?;
    for w in &loaded.warnings {
        log::warn!("{}: {w}", data.dataset.display());
    }
    if let Some(split) = &data.split {
        loaded.dataset.images(Some(split))?;
    }
    Ok(loaded.dataset)
}

/// Loads a model and checks that it names the dataset's categories. The
/// model may add the no-relation class the dataset does not list.
fn load_bundle(path: &Path, dataset: &Dataset) -> Result<ModelBundle, Failure> {
    let expected = dataset.vocabulary.with_no_relation(true);
    let bundle = match load_model(path, Some(&expected)) {
        Err(Error::HashMismatch { .. }) => load_model(path, Some(&dataset.vocabulary))?,
        other => other?,
    };
    Ok(bundle)
}

fn load_language(path: Option<&Path>, vocab: &Vocabulary) -> Result<Option<LanguageScoreTable>, Failure> {
    let Some(path) = path else { return Ok(None) };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(LanguageScoreTable::from_csv(file, vocab, path)?))
}

/// Detector candidates of every image in the split, images in id order.
fn candidate_pairs(dataset: &Dataset, split: Option<&str>, config: &Config) -> Result<Vec<PairCandidate>, Failure> {
    config.candidates.validate()?;
    let by_image = dataset.detections_by_image(split)?;
    let per_image: Vec<Vec<PairCandidate>> = by_image
        .par_iter()
        .map(|(_, dets)| {
            if config.prefiltered {
                return enumerate_pairs(dets, config.candidates.max_pairs_per_image);
            }
            let kept = select_candidates(dets, &config.candidates);
            enumerate_pairs(&kept, config.candidates.max_pairs_per_image)
        })
        .collect();
    Ok(per_image.into_iter().flatten().collect())
}

/// One pair per annotated box pair, built from the detections carrying
/// exactly those boxes and categories.
fn annotated_pairs(dataset: &Dataset, split: Option<&str>) -> Result<Vec<PairCandidate>, Failure> {
    let by_image = dataset.detections_by_image(split)?;
    let mut pairs = Vec::new();
    let mut seen = BTreeSet::new();
    for a in dataset.annotations_in(split)? {
        let Some((sb, ob)) = a.boxes else {
            return Err(Error::invalid(format!("annotation in image {} has no boxes", a.image_id)).into());
        };
        let dets = &by_image[&a.image_id];
        let find = |b: &BoundingBox, c: usize| {
            dets.iter().find(|d| d.bbox == *b && d.category == c).cloned().ok_or_else(|| {
                Error::invalid(format!("image {}: no detection matches an annotated box", a.image_id))
            })
        };
        let (s, o) = (find(&sb, a.subject)?, find(&ob, a.object)?);
        if seen.insert((a.image_id.clone(), s.feature_ref, o.feature_ref, s.bbox.corners().map(f64::to_bits), o.bbox.corners().map(f64::to_bits))) {
            pairs.push(PairCandidate {
                image_id: a.image_id.clone(),
                subject: s,
                object: o,
                descriptor: None,
            });
        }
    }
    Ok(pairs)
}

fn synth(preset: Preset, out: &Path, config: &Config) -> Outcome {
    let dataset = match preset {
        Preset::PlantedBags => planted_bags_dataset(&config.synth)?,
    };
    let manifest = save_dataset(out, &dataset)?;
    log::info!(
        "wrote {} ({} detections, {} annotations)",
        manifest.display(),
        dataset.detections.len(),
        dataset.annotations.len()
    );
    Ok(())
}

fn fit_gmm_cmd(data: &DataArgs, k: usize, annotated: bool, out: &Path, config: &Config) -> Outcome {
    let dataset = load(data)?;
    let pairs = if annotated {
        annotated_pairs(&dataset, data.split.as_deref())?
    } else {
        candidate_pairs(&dataset, data.split.as_deref(), config)?
    };
    let samples: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| spatial_vector(&p.subject.bbox, &p.object.bbox).to_vec())
        .collect();
    let fit = fit_gmm(&samples, k, &config.gmm)?;
    log::info!(
        "GMM k={k} on {} pairs: {} iterations, converged {}, mean log-likelihood {:.6}",
        samples.len(),
        fit.iterations,
        fit.converged,
        fit.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    let mut bundle = ModelBundle::new(dataset.vocabulary.clone());
    bundle.gmm = Some(fit.model);
    bundle.config = json!({ "gmm": config.gmm, "gmm_components": k, "annotated_only": annotated, "samples": samples.len() });
    Ok(save_model(out, &bundle)?)
}

fn fit_pca_cmd(data: &DataArgs, dim: usize, model: Option<&Path>, out: &Path) -> Outcome {
    let dataset = load(data)?;
    let refs: BTreeSet<usize> = dataset
        .detections_by_image(data.split.as_deref())?
        .values()
        .flatten()
        .map(|d| d.feature_ref)
        .collect();
    if refs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 }.into());
    }
    let d = dataset.features.dim();
    let mut raw = DMatrix::zeros(refs.len(), d);
    for (i, &r) in refs.iter().enumerate() {
        let row = dataset.features.row_f64(r)?;
        raw.row_mut(i).copy_from_slice(&row);
    }
    let pca = fit_appearance_pca(&raw, dim)?;
    log::info!("PCA {d} -> {dim} on {} feature rows", refs.len());
    let mut bundle = match model {
        Some(p) => load_bundle(p, &dataset)?,
        None => ModelBundle::new(dataset.vocabulary.clone()),
    };
    bundle.pca = Some(pca);
    Ok(save_model(out, &bundle)?)
}

fn featurize(data: &DataArgs, model: &Path, gt_pairs: bool, out: &Path, config: &Config) -> Outcome {
    let dataset = load(data)?;
    let bundle = load_bundle(model, &dataset)?;
    let (Some(gmm), Some(pca)) = (&bundle.gmm, &bundle.pca) else {
        return Err(Failure::Usage(format!("{} must hold both a GMM and a PCA basis", model.display())));
    };
    let mut pairs = if gt_pairs {
        annotated_pairs(&dataset, data.split.as_deref())?
    } else {
        candidate_pairs(&dataset, data.split.as_deref(), config)?
    };
    let refs: BTreeSet<usize> = pairs
        .iter()
        .flat_map(|p| [p.subject.feature_ref, p.object.feature_ref])
        .collect();
    let embeddings: HashMap<usize, Vec<f64>> = refs
        .par_iter()
        .map(|&r| Ok((r, embed_appearance(pca, &dataset.features.row_f64(r)?)?)))
        .collect::<vrel::Result<_>>()?;
    let lookup = |r: usize| Ok(embeddings[&r].clone());
    let refs_of: Vec<_> = pairs.iter().map(|p| (&p.subject, &p.object)).collect();
    let descriptors = describe_pairs(gmm, &refs_of, &lookup)?;
    for (p, d) in pairs.iter_mut().zip(descriptors) {
        p.descriptor = Some(d);
    }
    log::info!("featurized {} pairs", pairs.len());
    Ok(save_pairs(out, &pairs, &dataset)?)
}

struct TrainingData {
    dataset: Dataset,
    pairs: Vec<PairCandidate>,
    features: DMatrix<f64>,
    vocabulary: Vocabulary,
    preprocessing: Option<ModelBundle>,
}

fn training_data(args: &TrainArgs, config: &Config) -> Result<TrainingData, Failure> {
    let dataset = load(&args.data)?;
    let pairs = load_pairs(&args.pairs, &dataset)?;
    if let Some(split) = &args.data.split {
        let images = dataset.images(Some(split))?;
        if let Some(p) = pairs.iter().find(|p| !images.contains(&p.image_id)) {
            return Err(Failure::Usage(format!("pair of image {} lies outside split '{split}'", p.image_id)));
        }
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 }.into());
    }
    let rows: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| p.descriptor.as_ref().expect("loaded pairs carry descriptors").full())
        .collect();
    let d = rows[0].len();
    let features = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let preprocessing = args.features.as_deref().map(|p| load_bundle(p, &dataset)).transpose()?;
    let vocabulary = dataset.vocabulary.with_no_relation(config.negative_sampling_rate > 0.0);
    Ok(TrainingData {
        dataset,
        pairs,
        features,
        vocabulary,
        preprocessing,
    })
}

fn write_trained(args: &TrainArgs, data: &TrainingData, model: RelationModel, assignment: Option<DMatrix<f64>>, record: serde_json::Value) -> Outcome {
    let mut bundle = ModelBundle::new(data.vocabulary.clone());
    if let Some(pre) = &data.preprocessing {
        bundle.gmm = pre.gmm.clone();
        bundle.pca = pre.pca.clone();
    }
    bundle.relation = Some(model);
    bundle.assignment = assignment;
    bundle.config = record;
    Ok(save_model(&args.out, &bundle)?)
}

fn annotations(dataset: &Dataset, split: Option<&str>) -> Result<Vec<TripletAnnotation>, Failure> {
    Ok(dataset.annotations_in(split)?)
}

fn row_groups(pairs: &[PairCandidate]) -> Vec<usize> {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    pairs
        .iter()
        .map(|p| {
            let next = ids.len();
            *ids.entry(&p.image_id).or_insert(next)
        })
        .collect()
}

/// Bags of the split plus sampled no-relation rows, with bags that the
/// sample makes unsatisfiable removed.
fn weak_targets(data: &TrainingData, split: Option<&str>, config: &Config) -> Result<(Vec<Bag>, BTreeSet<usize>, serde_json::Value), Failure> {
    let anns = annotations(&data.dataset, split)?;
    let set = build_bags(&anns, &data.pairs);
    if !set.skipped.is_empty() {
        log::warn!("{} annotations have no matching candidate pair", set.skipped.len());
    }
    let negatives = if config.negative_sampling_rate > 0.0 {
        sample_negatives(data.pairs.len(), &set.bags, config.negative_sampling_rate, config.frank_wolfe.seed)?
    } else {
        BTreeSet::new()
    };
    let (bags, dropped) = prune_infeasible_bags(&set.bags, &negatives);
    if !dropped.is_empty() {
        log::warn!("dropped {} bags that cannot be satisfied jointly", dropped.len());
    }
    let record = json!({
        "annotations": anns.len(),
        "bags": bags.len(),
        "skipped_annotations": set.skipped.len(),
        "dropped_bags": dropped.len(),
        "negatives": negatives.len(),
    });
    Ok((bags, negatives, record))
}

fn train_full_cmd(args: &TrainArgs, config: &Config) -> Outcome {
    let data = training_data(args, config)?;
    let lambda = args.lambda.unwrap_or(config.lambda);
    let anns = annotations(&data.dataset, args.data.split.as_deref())?;
    let mut by_image: HashMap<&str, Vec<&TripletAnnotation>> = HashMap::new();
    for a in &anns {
        if a.boxes.is_none() {
            return Err(Error::invalid(format!("full supervision needs boxes (image {})", a.image_id)).into());
        }
        by_image.entry(&a.image_id).or_default().push(a);
    }
    let thr = config.eval.iou_threshold;
    let mut labels = Vec::new();
    let mut unmatched = BTreeSet::new();
    for (row, p) in data.pairs.iter().enumerate() {
        let mut hit = false;
        for a in by_image.get(p.image_id.as_str()).into_iter().flatten() {
            let (sb, ob) = a.boxes.as_ref().unwrap();
            if a.subject == p.subject.category
                && a.object == p.object.category
                && iou(&p.subject.bbox, sb) >= thr
                && iou(&p.object.bbox, ob) >= thr
            {
                labels.push((row, a.predicate));
                hit = true;
            }
        }
        if !hit {
            unmatched.insert(row);
        }
    }
    let positives = labels.len();
    if let Some(nr) = data.vocabulary.no_relation_index() {
        // Same sampling as the weak setting: one bag per unmatched row would
        // be excluded, so sample directly among unmatched rows.
        let bags: Vec<Bag> = labels
            .iter()
            .map(|&(row, predicate)| Bag {
                rows: vec![row],
                predicate,
                image_id: data.pairs[row].image_id.clone(),
            })
            .collect();
        let negatives = sample_negatives(data.pairs.len(), &bags, config.negative_sampling_rate, config.frank_wolfe.seed)?;
        labels.extend(negatives.into_iter().filter(|r| unmatched.contains(r)).map(|r| (r, nr)));
    }
    let model = train_labeled(&data.features, &labels, lambda, &data.vocabulary)?;
    log::info!("trained on {positives} positive and {} no-relation rows", labels.len() - positives);
    let record = json!({
        "command": "train-full",
        "lambda": lambda,
        "positives": positives,
        "negatives": labels.len() - positives,
        "negative_sampling_rate": config.negative_sampling_rate,
    });
    write_trained(args, &data, model, None, record)
}

fn train_weak_cmd(args: &TrainArgs, max_iters: Option<usize>, config: &Config) -> Outcome {
    let data = training_data(args, config)?;
    let (bags, negatives, counts) = weak_targets(&data, args.data.split.as_deref(), config)?;
    let mut fw = config.frank_wolfe;
    fw.lambda = args.lambda.unwrap_or(config.lambda);
    fw.max_iters = max_iters.unwrap_or(fw.max_iters);
    fw.negative_sampling_rate = config.negative_sampling_rate;
    let groups = row_groups(&data.pairs);
    let scores: Vec<f64> = data.pairs.iter().map(PairCandidate::score_product).collect();
    let problem = WeakProblem {
        features: &data.features,
        bags: &bags,
        fixed_rows: &negatives,
        n_classes: data.vocabulary.num_classes(),
        no_relation: data.vocabulary.no_relation_index(),
        pair_scores: Some(&scores),
        row_groups: Some(&groups),
    };
    let (model, result) = fw_train(&problem, &data.vocabulary, &fw)?;
    let final_objective = result.trace.objective.last().copied().unwrap_or(f64::NAN);
    log::info!(
        "Frank-Wolfe: {} iterations, converged {}, objective {final_objective:.6e}",
        result.iterations,
        result.converged
    );
    let record = json!({
        "command": "train-weak",
        "frank_wolfe": fw,
        "targets": counts,
        "iterations": result.iterations,
        "converged": result.converged,
        "objective": result.trace.objective,
        "gap": result.trace.gap,
        "lmo": {
            "matching": result.lmo_stats.matching,
            "exhaustive": result.lmo_stats.exhaustive,
            "greedy": result.lmo_stats.greedy,
        },
    });
    write_trained(args, &data, model, Some(result.assignment.z), record)
}

fn train_noisy_cmd(args: &TrainArgs, config: &Config) -> Outcome {
    let data = training_data(args, config)?;
    let (bags, negatives, counts) = weak_targets(&data, args.data.split.as_deref(), config)?;
    let noisy = NoisyConfig {
        lambda: args.lambda.unwrap_or(config.lambda),
        seed: config.frank_wolfe.seed,
    };
    let (model, labels) = train_noisy(&data.features, &bags, &negatives, &data.vocabulary, &noisy)?;
    let record = json!({
        "command": "train-noisy",
        "noisy": noisy,
        "targets": counts,
        "labels": labels.labels.len(),
    });
    write_trained(args, &data, model, None, record)
}

fn tune(
    data: &DataArgs,
    pairs: &Path,
    model: &Path,
    language: Option<&Path>,
    out: &Path,
    report: Option<&Path>,
    config: &Config,
) -> Outcome {
    let dataset = load(data)?;
    let mut bundle = load_bundle(model, &dataset)?;
    let relation = bundle.relation_model()?;
    let lang = load_language(language, &dataset.vocabulary)?;
    let validation = ValidationSet {
        pairs: load_pairs(pairs, &dataset)?,
        annotations: annotations(&dataset, data.split.as_deref())?,
    };
    let result = tune_weights(&validation, &relation, &config.grid, lang.as_ref())?;
    log::info!(
        "best weights sub {} obj {} lang {}: recall@50 {:.4}",
        result.best.alpha_sub,
        result.best.alpha_obj,
        result.best.alpha_lang,
        result.best_recall
    );
    if let Some(path) = report {
        write_json(path, &result)?;
    }
    bundle.score_weights = Some(result.best);
    Ok(save_model(out, &bundle)?)
}

/// One scored triplet hypothesis, with category names and corner boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRecord {
    image_id: String,
    pair: usize,
    subject: String,
    predicate: String,
    object: String,
    subject_box: CornerBox,
    object_box: CornerBox,
    score: f64,
}

impl PredictionRecord {
    fn new(t: &ScoredTriplet, vocab: &Vocabulary) -> Self {
        let name = |n: Option<&str>| n.unwrap_or_default().to_string();
        Self {
            image_id: t.image_id.clone(),
            pair: t.pair,
            subject: name(vocab.object_name(t.triplet.subject)),
            predicate: name(vocab.predicate_name(t.triplet.predicate)),
            object: name(vocab.object_name(t.triplet.object)),
            subject_box: t.subject_box.corners(),
            object_box: t.object_box.corners(),
            score: t.score,
        }
    }

    fn resolve(&self, vocab: &Vocabulary) -> Result<ScoredTriplet, String> {
        let object = |n: &str| vocab.object_id(n).ok_or_else(|| format!("unknown object category '{n}'"));
        let b = |c: CornerBox| BoundingBox::from_corners(c[0], c[1], c[2], c[3]).map_err(|e| e.to_string());
        Ok(ScoredTriplet {
            image_id: self.image_id.clone(),
            pair: self.pair,
            triplet: Triplet {
                subject: object(&self.subject)?,
                predicate: vocab
                    .predicate_id(&self.predicate)
                    .ok_or_else(|| format!("unknown predicate '{}'", self.predicate))?,
                object: object(&self.object)?,
            },
            subject_box: b(self.subject_box)?,
            object_box: b(self.object_box)?,
            score: self.score,
        })
    }
}

fn model_weights(bundle: &ModelBundle) -> ScoreWeights {
    bundle.score_weights.unwrap_or_else(|| {
        log::info!("model has no tuned weights; scoring with v_rel only");
        ScoreWeights::default()
    })
}

fn score(
    data: &DataArgs,
    pairs: &Path,
    model: &Path,
    language: Option<&Path>,
    k: Option<usize>,
    out: &Path,
    config: &Config,
) -> Outcome {
    let dataset = load(data)?;
    let bundle = load_bundle(model, &dataset)?;
    let relation = bundle.relation_model()?;
    let lang = load_language(language, &dataset.vocabulary)?;
    let pairs = load_pairs(pairs, &dataset)?;
    let mut prediction = config.prediction;
    prediction.preds_per_pair = k.unwrap_or(prediction.preds_per_pair);
    let scored = score_pairs(&pairs, &relation, &model_weights(&bundle), lang.as_ref(), &prediction)?;
    let records: Vec<PredictionRecord> = scored.iter().map(|t| PredictionRecord::new(t, &dataset.vocabulary)).collect();
    log::info!("{} predictions for {} pairs", records.len(), pairs.len());
    Ok(write_jsonl(out, &records)?)
}

fn emit(report: &EvalReport, out: Option<&Path>) -> Outcome {
    print!("{}", render_table(std::slice::from_ref(report)));
    if let Some(path) = out {
        write_json(path, report)?;
    }
    Ok(())
}

fn eval_recall(data: &DataArgs, predictions: &Path, eval: &vrel::eval::EvalConfig, out: Option<&Path>) -> Outcome {
    let dataset = load(data)?;
    let images = dataset.images(data.split.as_deref())?;
    let preds = read_jsonl::<PredictionRecord>(predictions)?
        .into_iter()
        .map(|(line, r)| {
            r.resolve(&dataset.vocabulary).map_err(|msg| Error::Parse {
                path: predictions.to_path_buf(),
                line,
                msg,
            })
        })
        .filter(|p| p.as_ref().map_or(true, |p| images.contains(&p.image_id)))
        .collect::<vrel::Result<Vec<_>>>()?;
    let gt = annotations(&dataset, data.split.as_deref())?;
    emit(&recall_at_x(&preds, &gt, eval)?, out)
}

fn eval_retrieval(
    data: &DataArgs,
    pairs: &Path,
    model: &Path,
    language: Option<&Path>,
    eval: &vrel::eval::EvalConfig,
    out: Option<&Path>,
    config: &Config,
) -> Outcome {
    let dataset = load(data)?;
    let bundle = load_bundle(model, &dataset)?;
    let relation = bundle.relation_model()?;
    let weights = model_weights(&bundle);
    let lang = load_language(language, &dataset.vocabulary)?;
    let pairs = load_pairs(pairs, &dataset)?;
    let positives = annotations(&dataset, data.split.as_deref())?;
    let queries: Vec<Triplet> = positives.iter().map(TripletAnnotation::triplet).collect::<BTreeSet<_>>().into_iter().collect();
    let suppressed: Vec<bool> = if config.prediction.suppress_no_relation {
        relation_score_rows(&pairs, &relation)?
            .iter()
            .map(|v| prefers_no_relation(v, &relation))
            .collect()
    } else {
        vec![false; pairs.len()]
    };
    let pool: Vec<_> = pairs
        .iter()
        .map(|p| (p.image_id.clone(), p.subject.bbox, p.object.bbox))
        .collect();
    let rankings = build_rankings(&queries, &pool, |i, q| {
        let p = &pairs[i];
        if suppressed[i] || p.subject.category != q.subject || p.object.category != q.object {
            return None;
        }
        triplet_score(p, q, &relation, &weights, lang.as_ref()).ok()
    });
    emit(&retrieval_map(&rankings, &positives, eval)?, out)
}
