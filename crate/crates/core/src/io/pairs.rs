//! Featurized candidate pairs: a JSON index of detection pairs plus a
//! feature store holding one descriptor per pair.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::feature_store::FeatureStore;
use super::records::{read_json, write_json};
use crate::candidates::PairCandidate;
use crate::error::{Error, Result};
use crate::features::PairDescriptor;
use crate::types::{Detection, ImageId};

pub const PAIRS_VERSION: u32 = 1;

/// A pair given by positions in the dataset's detection list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRef {
    pub image_id: ImageId,
    pub subject: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairsFile {
    version: u32,
    spatial_dim: usize,
    appearance_dim: usize,
    /// Relative to the index file.
    descriptors: PathBuf,
    pairs: Vec<PairRef>,
}

type DetectionKey = (ImageId, usize, usize, [u64; 4]);

fn key(d: &Detection) -> DetectionKey {
    let c = d.bbox.corners();
    (d.image_id.clone(), d.feature_ref, d.category, c.map(f64::to_bits))
}

/// Writes `path` (JSON index) and a sibling `.relf` descriptor store. Every
/// pair must carry a descriptor and reference detections of `dataset`.
/// Descriptors are stored as `f32`.
pub fn save_pairs(path: &Path, pairs: &[PairCandidate], dataset: &Dataset) -> Result<()> {
    let index: HashMap<DetectionKey, usize> = dataset
        .detections
        .iter()
        .enumerate()
        .rev()
        .map(|(i, d)| (key(d), i))
        .collect();
    let find = |d: &Detection| {
        index
            .get(&key(d))
            .copied()
            .ok_or_else(|| Error::invalid(format!("pair detection in image {} is not in the dataset", d.image_id)))
    };
    let mut refs = Vec::with_capacity(pairs.len());
    let mut rows = Vec::with_capacity(pairs.len());
    let mut dims = None;
    for p in pairs {
        let desc = p
            .descriptor
            .as_ref()
            .ok_or_else(|| Error::invalid("pair without descriptor"))?;
        let d = (desc.spatial().len(), desc.appearance().len());
        if *dims.get_or_insert(d) != d {
            return Err(Error::invalid("pairs have descriptors of different layouts"));
        }
        refs.push(PairRef {
            image_id: p.image_id.clone(),
            subject: find(&p.subject)?,
            object: find(&p.object)?,
        });
        rows.push(desc.full());
    }
    let (spatial_dim, appearance_dim) = dims.unwrap_or((0, 0));
    let relf = path.with_extension("relf");
    let file = PairsFile {
        version: PAIRS_VERSION,
        spatial_dim,
        appearance_dim,
        descriptors: PathBuf::from(relf.file_name().unwrap()),
        pairs: refs,
    };
    if !rows.is_empty() {
        FeatureStore::from_rows(&rows)?.write(&relf)?;
    }
    write_json(path, &file)
}

pub fn load_pairs(path: &Path, dataset: &Dataset) -> Result<Vec<PairCandidate>> {
    let file: PairsFile = read_json(path)?;
    if file.version != PAIRS_VERSION {
        return Err(Error::VersionMismatch {
            expected: PAIRS_VERSION,
            found: file.version,
        });
    }
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if file.pairs.is_empty() {
        return Ok(Vec::new());
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let store = FeatureStore::read(&base.join(&file.descriptors))?;
    if store.rows() != file.pairs.len() || store.dim() != file.spatial_dim + file.appearance_dim {
        return Err(bad(format!(
            "descriptor store is {} x {}, index expects {} x {}",
            store.rows(),
            store.dim(),
            file.pairs.len(),
            file.spatial_dim + file.appearance_dim
        )));
    }
    file.pairs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let get = |j: usize| {
                dataset
                    .detections
                    .get(j)
                    .filter(|d| d.image_id == r.image_id)
                    .cloned()
                    .ok_or_else(|| bad(format!("pair {i} references detection {j} outside image {}", r.image_id)))
            };
            let mut x = store.row_f64(i)?;
            let appearance = x.split_off(file.spatial_dim);
            Ok(PairCandidate {
                image_id: r.image_id.clone(),
                subject: get(r.subject)?,
                object: get(r.object)?,
                descriptor: Some(PairDescriptor::new(x, appearance)),
            })
        })
        .collect()
}
