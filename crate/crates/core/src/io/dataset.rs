//! Dataset manifest: vocabulary, detections, annotations, features and
//! image splits, loaded and cross-checked together.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::feature_store::FeatureStore;
use super::records::{read_json, read_jsonl, write_json, write_jsonl, AnnotationRecord, DetectionRecord};
use crate::error::{Error, Result};
use crate::types::{Detection, ImageId, TripletAnnotation, Vocabulary};

pub const MANIFEST_VERSION: u32 = 1;

/// On-disk manifest. Relative paths resolve against the manifest's folder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub vocabulary: PathBuf,
    pub detections: PathBuf,
    pub annotations: PathBuf,
    pub features: PathBuf,
    /// Split tag (`train`, `val`, `test`, ...) to image ids.
    #[serde(default)]
    pub splits: BTreeMap<String, Vec<ImageId>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub detections: Vec<Detection>,
    pub annotations: Vec<TripletAnnotation>,
    pub features: FeatureStore,
    pub splits: BTreeMap<String, Vec<ImageId>>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

impl Dataset {
    /// Cross-checks references. Hard violations are errors; soft ones
    /// (unused feature rows, shared rows) are returned as warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (tag, images) in &self.splits {
            for img in images {
                if let Some(prev) = seen.insert(img, tag) {
                    if prev != tag {
                        return Err(Error::invalid(format!("image {img} is in splits '{prev}' and '{tag}'")));
                    }
                    return Err(Error::invalid(format!("image {img} listed twice in split '{tag}'")));
                }
            }
        }
        let mut used = vec![0usize; self.features.rows()];
        for d in &self.detections {
            if d.category >= self.vocabulary.num_objects() {
                return Err(Error::invalid(format!("detection category {} out of range", d.category)));
            }
            match used.get_mut(d.feature_ref) {
                Some(c) => *c += 1,
                None => {
                    return Err(Error::invalid(format!(
                        "detection in image {} references feature row {} of {}",
                        d.image_id,
                        d.feature_ref,
                        self.features.rows()
                    )))
                }
            }
        }
        for a in &self.annotations {
            self.vocabulary.check_triplet(a)?;
        }
        let unused = used.iter().filter(|&&c| c == 0).count();
        if unused > 0 {
            warnings.push(format!("{unused} feature rows are not referenced by any detection"));
        }
        let shared = used.iter().filter(|&&c| c > 1).count();
        if shared > 0 {
            warnings.push(format!("{shared} feature rows are shared by several detections"));
        }
        Ok(warnings)
    }

    /// Image ids of a split, or of every image when `split` is `None`.
    pub fn images(&self, split: Option<&str>) -> Result<BTreeSet<ImageId>> {
        match split {
            Some(tag) => self
                .splits
                .get(tag)
                .map(|v| v.iter().cloned().collect())
                .ok_or_else(|| Error::invalid(format!("unknown split '{tag}'"))),
            None => Ok(self
                .detections
                .iter()
                .map(|d| d.image_id.clone())
                .chain(self.annotations.iter().map(|a| a.image_id.clone()))
                .collect()),
        }
    }

    /// Detections grouped by image, in file order within each image.
    pub fn detections_by_image(&self, split: Option<&str>) -> Result<BTreeMap<ImageId, Vec<Detection>>> {
        let images = self.images(split)?;
        let mut out: BTreeMap<ImageId, Vec<Detection>> = images.iter().map(|i| (i.clone(), Vec::new())).collect();
        for d in &self.detections {
            if let Some(v) = out.get_mut(&d.image_id) {
                v.push(d.clone());
            }
        }
        Ok(out)
    }

    pub fn annotations_in(&self, split: Option<&str>) -> Result<Vec<TripletAnnotation>> {
        let images = self.images(split)?;
        Ok(self
            .annotations
            .iter()
            .filter(|a| images.contains(&a.image_id))
            .cloned()
            .collect())
    }

    /// Raw appearance vector of a detection.
    pub fn feature(&self, d: &Detection) -> Result<Vec<f64>> {
        self.features.row_f64(d.feature_ref)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn record_error(path: &Path, line: usize, msg: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest: DatasetManifest = read_json(manifest_path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            expected: MANIFEST_VERSION,
            found: manifest.version,
        });
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let vocab_path = resolve(base, &manifest.vocabulary);
    let det_path = resolve(base, &manifest.detections);
    let ann_path = resolve(base, &manifest.annotations);
    let feat_path = resolve(base, &manifest.features);

    let vocabulary: Vocabulary = read_json(&vocab_path)?;
    let ((det_records, ann_records), features) = rayon::join(
        || {
            rayon::join(
                || read_jsonl::<DetectionRecord>(&det_path),
                || read_jsonl::<AnnotationRecord>(&ann_path),
            )
        },
        || FeatureStore::read(&feat_path),
    );
    let features = features?;
    let detections = det_records?
        .into_iter()
        .map(|(line, r)| {
            let d = r.resolve(&vocabulary).map_err(|m| record_error(&det_path, line, m))?;
            if d.feature_ref >= features.rows() {
                return Err(record_error(
                    &det_path,
                    line,
                    format!("feature_ref {} beyond the {} feature rows", d.feature_ref, features.rows()),
                ));
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    let annotations = ann_records?
        .into_iter()
        .map(|(line, r)| r.resolve(&vocabulary).map_err(|m| record_error(&ann_path, line, m)))
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset {
        vocabulary,
        detections,
        annotations,
        features,
        splits: manifest.splits,
    };
    let warnings = dataset.validate().map_err(|e| Error::Format {
        path: manifest_path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(LoadedDataset { dataset, warnings })
}

/// Writes the dataset as `manifest.json` plus its member files into `dir`
/// and returns the manifest path.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    dataset.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        vocabulary: "vocabulary.json".into(),
        detections: "detections.jsonl".into(),
        annotations: "annotations.jsonl".into(),
        features: "features.relf".into(),
        splits: dataset.splits.clone(),
    };
    write_json(&dir.join(&manifest.vocabulary), &dataset.vocabulary)?;
    let dets = dataset
        .detections
        .iter()
        .map(|d| DetectionRecord::from_detection(d, &dataset.vocabulary))
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&dir.join(&manifest.detections), &dets)?;
    let anns = dataset
        .annotations
        .iter()
        .map(|a| AnnotationRecord::from_annotation(a, &dataset.vocabulary))
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&dir.join(&manifest.annotations), &anns)?;
    dataset.features.write(&dir.join(&manifest.features))?;
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}
