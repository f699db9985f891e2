//! Detections, triplet annotations and the object/predicate vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Opaque image identifier as it appears in the dataset files.
pub type ImageId = String;

/// One scored object detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    pub bbox: BoundingBox,
    pub category: usize,
    pub score: f64,
    /// Row of this detection's appearance vector in the feature store.
    pub feature_ref: usize,
}

impl Detection {
    pub fn new(
        image_id: impl Into<ImageId>,
        bbox: BoundingBox,
        category: usize,
        score: f64,
        feature_ref: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Self {
            image_id: image_id.into(),
            bbox,
            category,
            score,
            feature_ref,
        })
    }
}

/// A `(subject, predicate, object)` label for one image. Box-level
/// annotations carry both boxes; image-level annotations carry neither.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletAnnotation {
    pub image_id: ImageId,
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
    pub boxes: Option<(BoundingBox, BoundingBox)>,
}

impl TripletAnnotation {
    pub fn weak(image_id: impl Into<ImageId>, subject: usize, predicate: usize, object: usize) -> Self {
        Self {
            image_id: image_id.into(),
            subject,
            predicate,
            object,
            boxes: None,
        }
    }

    pub fn full(
        image_id: impl Into<ImageId>,
        subject: usize,
        predicate: usize,
        object: usize,
        subject_box: BoundingBox,
        object_box: BoundingBox,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            subject,
            predicate,
            object,
            boxes: Some((subject_box, object_box)),
        }
    }

    pub fn triplet(&self) -> Triplet {
        Triplet {
            subject: self.subject,
            predicate: self.predicate,
            object: self.object,
        }
    }

    pub fn subject_box(&self) -> Option<&BoundingBox> {
        self.boxes.as_ref().map(|(s, _)| s)
    }

    pub fn object_box(&self) -> Option<&BoundingBox> {
        self.boxes.as_ref().map(|(_, o)| o)
    }
}

/// Category-level triplet, used as a query key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

/// Object and predicate names. When `has_no_relation` is set an extra
/// predicate class with index `num_predicates()` exists for negatives; it
/// is never a valid annotation predicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    objects: Vec<String>,
    predicates: Vec<String>,
    has_no_relation: bool,
    object_index: HashMap<String, usize>,
    predicate_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    objects: Vec<String>,
    predicates: Vec<String>,
    #[serde(default)]
    no_relation: bool,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(repr: VocabularyRepr) -> Result<Self> {
        Vocabulary::new(repr.objects, repr.predicates, repr.no_relation)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            objects: v.objects,
            predicates: v.predicates,
            no_relation: v.has_no_relation,
        }
    }
}

fn index_names(kind: &str, names: &[String]) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if index.insert(name.clone(), i).is_some() {
            return Err(Error::invalid(format!("duplicate {kind} name {name:?}")));
        }
    }
    Ok(index)
}

impl Vocabulary {
    pub fn new(objects: Vec<String>, predicates: Vec<String>, has_no_relation: bool) -> Result<Self> {
        if objects.is_empty() || predicates.is_empty() {
            return Err(Error::invalid("vocabulary needs at least one object and one predicate"));
        }
        let object_index = index_names("object", &objects)?;
        let predicate_index = index_names("predicate", &predicates)?;
        Ok(Self {
            objects,
            predicates,
            has_no_relation,
            object_index,
            predicate_index,
        })
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    /// Number of real predicates `R`.
    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    /// Number of classifier columns: `R`, or `R + 1` with the no-relation class.
    pub fn num_classes(&self) -> usize {
        self.predicates.len() + usize::from(self.has_no_relation)
    }

    pub fn has_no_relation(&self) -> bool {
        self.has_no_relation
    }

    pub fn no_relation_index(&self) -> Option<usize> {
        self.has_no_relation.then_some(self.predicates.len())
    }

    pub fn with_no_relation(&self, enabled: bool) -> Self {
        let mut v = self.clone();
        v.has_no_relation = enabled;
        v
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn object_name(&self, idx: usize) -> Option<&str> {
        self.objects.get(idx).map(String::as_str)
    }

    pub fn predicate_name(&self, idx: usize) -> Option<&str> {
        if Some(idx) == self.no_relation_index() {
            return Some("__no_relation__");
        }
        self.predicates.get(idx).map(String::as_str)
    }

    pub fn object_id(&self, name: &str) -> Option<usize> {
        self.object_index.get(name).copied()
    }

    pub fn predicate_id(&self, name: &str) -> Option<usize> {
        self.predicate_index.get(name).copied()
    }

    /// Hex SHA-256 over the ordered names and the no-relation flag.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (tag, names) in [("objects", &self.objects), ("predicates", &self.predicates)] {
            hasher.update(tag.as_bytes());
            hasher.update((names.len() as u64).to_le_bytes());
            for name in names {
                hasher.update((name.len() as u64).to_le_bytes());
                hasher.update(name.as_bytes());
            }
        }
        hasher.update([u8::from(self.has_no_relation)]);
        hex::encode(hasher.finalize())
    }

    pub fn check_triplet(&self, t: &TripletAnnotation) -> Result<()> {
        if t.subject >= self.num_objects() || t.object >= self.num_objects() {
            return Err(Error::invalid(format!(
                "annotation object category out of range in image {}",
                t.image_id
            )));
        }
        if t.predicate >= self.num_predicates() {
            return Err(Error::invalid(format!(
                "annotation predicate {} out of range in image {}",
                t.predicate, t.image_id
            )));
        }
        Ok(())
    }
}
