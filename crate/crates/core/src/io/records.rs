//! JSON-lines records for detections, annotations and predictions.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::types::{Detection, TripletAnnotation, Vocabulary};

/// Corner form `[xmin, ymin, xmax, ymax]`.
pub type CornerBox = [f64; 4];

fn corners(b: &BoundingBox) -> CornerBox {
    b.corners()
}

fn from_corners(c: CornerBox) -> Result<BoundingBox> {
    BoundingBox::from_corners(c[0], c[1], c[2], c[3])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: CornerBox,
    pub category: String,
    pub score: f64,
    pub feature_ref: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub subject: String,
    pub predicate: String,
    pub object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_box: Option<CornerBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_box: Option<CornerBox>,
}

impl DetectionRecord {
    pub fn from_detection(d: &Detection, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self {
            image_id: d.image_id.clone(),
            bbox: corners(&d.bbox),
            category: vocab
                .object_name(d.category)
                .ok_or_else(|| Error::invalid(format!("object category {} out of range", d.category)))?
                .to_string(),
            score: d.score,
            feature_ref: d.feature_ref,
        })
    }

    pub fn resolve(&self, vocab: &Vocabulary) -> std::result::Result<Detection, String> {
        let category = vocab
            .object_id(&self.category)
            .ok_or_else(|| format!("unknown object category '{}'", self.category))?;
        let bbox = from_corners(self.bbox).map_err(|e| e.to_string())?;
        Detection::new(self.image_id.clone(), bbox, category, self.score, self.feature_ref).map_err(|e| e.to_string())
    }
}

impl AnnotationRecord {
    pub fn from_annotation(a: &TripletAnnotation, vocab: &Vocabulary) -> Result<Self> {
        vocab.check_triplet(a)?;
        Ok(Self {
            image_id: a.image_id.clone(),
            subject: vocab.object_name(a.subject).unwrap().to_string(),
            predicate: vocab.predicate_name(a.predicate).unwrap().to_string(),
            object: vocab.object_name(a.object).unwrap().to_string(),
            subject_box: a.subject_box().map(corners),
            object_box: a.object_box().map(corners),
        })
    }

    pub fn resolve(&self, vocab: &Vocabulary) -> std::result::Result<TripletAnnotation, String> {
        let object = |name: &str| {
            vocab
                .object_id(name)
                .ok_or_else(|| format!("unknown object category '{name}'"))
        };
        let subject = object(&self.subject)?;
        let predicate = vocab
            .predicate_id(&self.predicate)
            .filter(|&r| r < vocab.num_predicates())
            .ok_or_else(|| format!("unknown predicate '{}'", self.predicate))?;
        let object = object(&self.object)?;
        match (self.subject_box, self.object_box) {
            (None, None) => Ok(TripletAnnotation::weak(self.image_id.clone(), subject, predicate, object)),
            (Some(s), Some(o)) => Ok(TripletAnnotation::full(
                self.image_id.clone(),
                subject,
                predicate,
                object,
                from_corners(s).map_err(|e| e.to_string())?,
                from_corners(o).map_err(|e| e.to_string())?,
            )),
            _ => Err("annotation must have both boxes or neither".into()),
        }
    }
}

/// Reads one JSON value per non-blank line, tagging each with its 1-based
/// line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| Error::invalid(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(vec!["person".into(), "horse".into()], vec!["ride".into()], true).unwrap()
    }

    #[test]
    fn annotation_records() {
        let v = vocab();
        let rec: AnnotationRecord =
            serde_json::from_str(r#"{"image_id":"a","subject":"person","predicate":"ride","object":"horse"}"#).unwrap();
        let a = rec.resolve(&v).unwrap();
        assert!(a.boxes.is_none());
        let bad: AnnotationRecord =
            serde_json::from_str(r#"{"image_id":"a","subject":"person","predicate":"eat","object":"horse"}"#).unwrap();
        assert!(bad.resolve(&v).unwrap_err().contains("'eat'"));
        let half: AnnotationRecord = serde_json::from_str(
            r#"{"image_id":"a","subject":"person","predicate":"ride","object":"horse","subject_box":[0,0,1,1]}"#,
        )
        .unwrap();
        assert!(half.resolve(&v).is_err());
        assert!(serde_json::from_str::<AnnotationRecord>(r#"{"image_id":"a","subject":"x","predicate":"y","object":"z","extra":1}"#).is_err());
    }

    #[test]
    fn detection_records() {
        let v = vocab();
        let rec: DetectionRecord = serde_json::from_str(
            r#"{"image_id":"a","box":[0,0,2,4],"category":"horse","score":0.5,"feature_ref":3}"#,
        )
        .unwrap();
        let d = rec.resolve(&v).unwrap();
        assert_eq!(d.category, 1);
        assert_eq!(d.bbox.w(), 2.0);
        assert_eq!(DetectionRecord::from_detection(&d, &v).unwrap(), rec);
        let flat: DetectionRecord = serde_json::from_str(
            r#"{"image_id":"a","box":[0,0,0,4],"category":"horse","score":0.5,"feature_ref":3}"#,
        )
        .unwrap();
        assert!(flat.resolve(&v).is_err());
    }

    #[test]
    fn jsonl_errors_carry_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "{\"a\":1}\n\n{\"a\":\n").unwrap();
        let e = read_jsonl::<serde_json::Value>(&p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
    }
}
