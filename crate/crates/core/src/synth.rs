//! Seeded synthetic data with planted relations.
//!
//! [`planted_benchmark`] works directly in descriptor space: every bag holds
//! one row drawn from its predicate's cluster and distractors drawn from a
//! broad background or from other predicates' clusters. Each image also has
//! background pairs outside every bag, the pool for no-relation negatives.
//! [`planted_bags_dataset`] produces a raw dataset (boxes, detector scores,
//! appearance vectors, annotations) where the predicate is encoded in the
//! spatial layout of one subject/object pair per image.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::io::{Dataset, FeatureStore};
use crate::train_full::RelationModel;
use crate::types::{Detection, TripletAnnotation, Vocabulary};
use crate::weak::Bag;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub n_images: usize,
    pub n_predicates: usize,
    /// Descriptor length, including one constant coordinate.
    pub dim: usize,
    pub min_bag: usize,
    pub max_bag: usize,
    /// Norm of each cluster center.
    pub center_norm: f64,
    /// Per-coordinate standard deviation around a center.
    pub cluster_std: f64,
    /// Per-coordinate standard deviation of background distractors.
    pub background_std: f64,
    /// Probability that a distractor comes from another predicate's cluster.
    pub confusable_rate: f64,
    /// Background pairs per image that belong to no bag.
    pub unmatched_per_image: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_images: 200,
            n_predicates: 5,
            dim: 33,
            min_bag: 3,
            max_bag: 12,
            center_norm: 8.0,
            cluster_std: 1.0,
            background_std: 1.5,
            confusable_rate: 0.3,
            unmatched_per_image: 10,
            n_test: 1000,
            seed: 0,
        }
    }
}

/// Bags over descriptor rows with a known positive in each.
#[derive(Debug, Clone)]
pub struct PlantedBenchmark {
    pub vocabulary: Vocabulary,
    pub features: DMatrix<f64>,
    pub bags: Vec<Bag>,
    /// The planted positive row of each bag.
    pub planted: Vec<usize>,
    /// Image of each row.
    pub row_groups: Vec<usize>,
    /// Detector score product of each row, independent of the planting.
    pub pair_scores: Vec<f64>,
    pub test_features: DMatrix<f64>,
    pub test_labels: Vec<usize>,
}

impl PlantedBenchmark {
    /// `(row, predicate)` labels of the planted rows.
    pub fn planted_labels(&self) -> Vec<(usize, usize)> {
        self.planted.iter().zip(&self.bags).map(|(&r, b)| (r, b.predicate)).collect()
    }
}

fn synthetic_vocabulary(n_objects: usize, n_predicates: usize) -> Result<Vocabulary> {
    Vocabulary::new(
        (0..n_objects).map(|i| format!("object{i}")).collect(),
        (0..n_predicates).map(|i| format!("predicate{i}")).collect(),
        true,
    )
}

fn gaussian_row(rng: &mut ChaCha8Rng, mean: &[f64], std: f64) -> Vec<f64> {
    let noise = Normal::new(0.0, std).unwrap();
    let mut x = Vec::with_capacity(mean.len() + 1);
    x.push(1.0);
    x.extend(mean.iter().map(|m| m + noise.sample(rng)));
    x
}

pub fn planted_benchmark(config: &PlantedConfig) -> Result<PlantedBenchmark> {
    let c = config;
    if c.n_predicates < 2 || c.dim < 2 || c.min_bag == 0 || c.min_bag > c.max_bag || c.n_images == 0 {
        return Err(Error::invalid("planted benchmark needs >= 2 predicates, dim >= 2 and 1 <= min_bag <= max_bag"));
    }
    if !(0.0..=1.0).contains(&c.confusable_rate) {
        return Err(Error::invalid("confusable_rate must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let std_normal: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    let centers: Vec<Vec<f64>> = (0..c.n_predicates)
        .map(|_| {
            let v: Vec<f64> = (0..c.dim - 1).map(|_| std_normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| c.center_norm * x / norm).collect()
        })
        .collect();
    let zero = vec![0.0; c.dim - 1];

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut bags = Vec::with_capacity(c.n_images);
    let mut planted = Vec::with_capacity(c.n_images);
    let mut row_groups = Vec::new();
    let mut pair_scores = Vec::new();
    for img in 0..c.n_images {
        let predicate = rng.random_range(0..c.n_predicates);
        let size = rng.random_range(c.min_bag..=c.max_bag);
        let positive = rng.random_range(0..size);
        let start = rows.len();
        for i in 0..size {
            let x = if i == positive {
                gaussian_row(&mut rng, &centers[predicate], c.cluster_std)
            } else if rng.random_bool(c.confusable_rate) {
                let other = (predicate + rng.random_range(1..c.n_predicates)) % c.n_predicates;
                gaussian_row(&mut rng, &centers[other], c.cluster_std)
            } else {
                gaussian_row(&mut rng, &zero, c.background_std)
            };
            rows.push(x);
            row_groups.push(img);
            pair_scores.push(rng.random_range(0.3..1.0f64) * rng.random_range(0.3..1.0f64));
        }
        bags.push(Bag {
            rows: (start..start + size).collect(),
            predicate,
            image_id: format!("img{img:04}"),
        });
        planted.push(start + positive);
        for _ in 0..c.unmatched_per_image {
            rows.push(gaussian_row(&mut rng, &zero, c.background_std));
            row_groups.push(img);
            pair_scores.push(rng.random_range(0.3..1.0f64) * rng.random_range(0.3..1.0f64));
        }
    }
    let mut test_rows = Vec::with_capacity(c.n_test);
    let mut test_labels = Vec::with_capacity(c.n_test);
    for i in 0..c.n_test {
        let r = i % c.n_predicates;
        test_rows.push(gaussian_row(&mut rng, &centers[r], c.cluster_std));
        test_labels.push(r);
    }
    let to_matrix = |rows: &[Vec<f64>]| DMatrix::from_fn(rows.len(), c.dim, |i, j| rows[i][j]);
    Ok(PlantedBenchmark {
        vocabulary: synthetic_vocabulary(2, c.n_predicates)?,
        features: to_matrix(&rows),
        bags,
        planted,
        row_groups,
        pair_scores,
        test_features: to_matrix(&test_rows),
        test_labels,
    })
}

/// Fraction of rows whose best predicate (no-relation excluded) is the label.
pub fn top1_accuracy(model: &RelationModel, features: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if features.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("need one label per feature row"));
    }
    let r = model.vocabulary().num_predicates();
    let scores = features * model.weights();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = scores.row(i);
            let mut best = 0;
            for j in 1..r {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Raw dataset preset with planted spatial relations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedBagsConfig {
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub n_objects: usize,
    /// Length of each detection's raw appearance vector.
    pub appearance_dim: usize,
    /// Extra detections of unrelated categories per image (upper bound).
    pub clutter: usize,
    pub seed: u64,
}

impl Default for PlantedBagsConfig {
    fn default() -> Self {
        Self {
            train_images: 200,
            val_images: 50,
            test_images: 100,
            n_objects: 6,
            appearance_dim: 64,
            clutter: 3,
            seed: 0,
        }
    }
}

/// Predicates of the preset and the subject placement each one implies,
/// relative to the object box: center offset in object widths/heights and
/// subject size as a fraction of the object's. Each instance is jittered
/// around these values.
pub const PLANTED_PREDICATES: [(&str, f64, f64, f64); 5] = [
    ("above", 0.0, -1.3, 0.8),
    ("below", 0.0, 1.3, 0.8),
    ("left of", -1.3, 0.0, 0.8),
    ("right of", 1.3, 0.0, 0.8),
    ("inside", 0.0, 0.0, 0.35),
];

const IMAGE_SIZE: f64 = 1000.0;

struct ImageBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    boxes: Vec<(BoundingBox, usize)>,
}

impl ImageBuilder<'_> {
    /// Whether `b` fits in the image and does not overlap a same-category box
    /// enough to be suppressed.
    fn admissible(&self, b: &BoundingBox, category: usize) -> bool {
        let [x0, y0, x1, y1] = b.corners();
        x0 >= 0.0
            && y0 >= 0.0
            && x1 <= IMAGE_SIZE
            && y1 <= IMAGE_SIZE
            && self.boxes.iter().all(|(o, c)| *c != category || iou(o, b) <= 0.2)
    }

    fn random_box(&mut self, category: usize) -> Option<BoundingBox> {
        for _ in 0..100 {
            let w = self.rng.random_range(60.0..160.0f64).round();
            let h = self.rng.random_range(60.0..160.0f64).round();
            let x0 = self.rng.random_range(0.0..IMAGE_SIZE - w).round();
            let y0 = self.rng.random_range(0.0..IMAGE_SIZE - h).round();
            let b = BoundingBox::from_corners(x0, y0, x0 + w, y0 + h).ok()?;
            if self.admissible(&b, category) {
                self.boxes.push((b, category));
                return Some(b);
            }
        }
        None
    }
}

/// Builds the raw preset. Each image carries one annotated relation between
/// a subject and an object category; detections of those categories form a
/// bag of 3 to 12 ordered pairs of which exactly one is planted.
pub fn planted_bags_dataset(config: &PlantedBagsConfig) -> Result<Dataset> {
    let c = config;
    if c.n_objects < 2 || c.appearance_dim == 0 {
        return Err(Error::invalid("preset needs at least 2 object categories and a positive appearance size"));
    }
    let vocabulary = Vocabulary::new(
        (0..c.n_objects).map(|i| format!("object{i}")).collect(),
        PLANTED_PREDICATES.iter().map(|p| p.0.to_string()).collect(),
        false,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let std_normal: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    let prototypes: Vec<Vec<f64>> = (0..c.n_objects)
        .map(|_| (0..c.appearance_dim).map(|_| std_normal.sample(&mut rng).abs()).collect())
        .collect();

    let mut detections = Vec::new();
    let mut annotations = Vec::new();
    let mut features: Vec<f32> = Vec::new();
    let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let total = c.train_images + c.val_images + c.test_images;
    let mut img = 0;
    while img < total {
        let image_id = format!("img{img:04}");
        let subject = rng.random_range(0..c.n_objects);
        let object = (subject + rng.random_range(1..c.n_objects)) % c.n_objects;
        let (n_s, n_o) = loop {
            let pair = (rng.random_range(1..=3usize), rng.random_range(1..=4usize));
            if (3..=12).contains(&(pair.0 * pair.1)) {
                break pair;
            }
        };
        let predicate = rng.random_range(0..PLANTED_PREDICATES.len());
        let (_, dx, dy, scale) = PLANTED_PREDICATES[predicate];
        // Jitter keeps each layout a cluster rather than a point mass.
        let scale = scale * rng.random_range(0.8..1.25);
        let (dx, dy) = (dx + rng.random_range(-0.15..0.15), dy + rng.random_range(-0.15..0.15));

        let mut builder = ImageBuilder {
            rng: &mut rng,
            boxes: Vec::new(),
        };
        let Some(ob) = builder.random_box(object) else { continue };
        let (w, h) = ((ob.w() * scale).round(), (ob.h() * scale).round());
        let (cx, cy) = (ob.x() + dx * ob.w(), ob.y() + dy * ob.h());
        let sb = BoundingBox::from_corners((cx - w / 2.0).round(), (cy - h / 2.0).round(), (cx - w / 2.0).round() + w, (cy - h / 2.0).round() + h)?;
        if !builder.admissible(&sb, subject) {
            continue;
        }
        builder.boxes.push((sb, subject));
        let mut placed = vec![(sb, subject), (ob, object)];
        let mut ok = true;
        for (cat, n) in [(subject, n_s - 1), (object, n_o - 1)] {
            for _ in 0..n {
                match builder.random_box(cat) {
                    Some(b) => placed.push((b, cat)),
                    None => ok = false,
                }
            }
        }
        let n_clutter = builder.rng.random_range(0..=c.clutter);
        for _ in 0..n_clutter {
            let cat = builder.rng.random_range(0..c.n_objects);
            if cat != subject && cat != object {
                if let Some(b) = builder.random_box(cat) {
                    placed.push((b, cat));
                }
            }
        }
        if !ok {
            continue;
        }
        // Detection order is shuffled so the planted pair has no privileged
        // position.
        for i in (1..placed.len()).rev() {
            let j = rng.random_range(0..=i);
            placed.swap(i, j);
        }
        for (b, cat) in &placed {
            let score = (rng.random_range(0.35..1.0f64) * 1000.0).round() / 1000.0;
            let feature_ref = features.len() / c.appearance_dim;
            features.extend(
                prototypes[*cat]
                    .iter()
                    .map(|p| (p + 0.3 * std_normal.sample(&mut rng)).abs() as f32),
            );
            detections.push(Detection::new(image_id.clone(), *b, *cat, score, feature_ref)?);
        }
        annotations.push(TripletAnnotation::full(image_id.clone(), subject, predicate, object, sb, ob));
        let split = if img < c.train_images {
            "train"
        } else if img < c.train_images + c.val_images {
            "val"
        } else {
            "test"
        };
        splits.entry(split.into()).or_default().push(image_id);
        img += 1;
    }
    Ok(Dataset {
        vocabulary,
        detections,
        annotations,
        features: FeatureStore::new(c.appearance_dim, features)?,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidates::{enumerate_pairs, select_candidates, CandidateConfig};
    use crate::weak::build_bags;

    #[test]
    fn benchmark_shapes() {
        let b = planted_benchmark(&PlantedConfig::default()).unwrap();
        assert_eq!(b.bags.len(), 200);
        assert!(b.bags.iter().all(|bag| (3..=12).contains(&bag.rows.len())));
        assert!(b.planted.iter().zip(&b.bags).all(|(p, bag)| bag.rows.contains(p)));
        assert_eq!(b.features.nrows(), b.row_groups.len());
        assert!(b.features.column(0).iter().all(|&v| v == 1.0));
        assert_eq!(b.test_features.nrows(), 1000);
    }

    #[test]
    fn benchmark_is_seeded() {
        let a = planted_benchmark(&PlantedConfig::default()).unwrap();
        let b = planted_benchmark(&PlantedConfig::default()).unwrap();
        assert_eq!(a.features, b.features);
        let c = planted_benchmark(&PlantedConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn preset_bags_have_one_planted_pair() {
        let d = planted_bags_dataset(&PlantedBagsConfig::default()).unwrap();
        assert!(d.validate().unwrap().is_empty());
        assert_eq!(d.splits["train"].len(), 200);
        assert_eq!(d.annotations.len(), 350);
        let by_image = d.detections_by_image(None).unwrap();
        let cfg = CandidateConfig::default();
        for a in &d.annotations {
            let kept = select_candidates(&by_image[&a.image_id], &cfg);
            assert_eq!(kept.len(), by_image[&a.image_id].len(), "no detection may be filtered");
            let pairs = enumerate_pairs(&kept, None);
            let bags = build_bags(std::slice::from_ref(a), &pairs);
            let bag = &bags.bags[0];
            assert!((3..=12).contains(&bag.rows.len()));
            let (sb, ob) = a.boxes.unwrap();
            let hits = bag
                .rows
                .iter()
                .filter(|&&r| pairs[r].subject.bbox == sb && pairs[r].object.bbox == ob)
                .count();
            assert_eq!(hits, 1);
        }
    }
}
