//! Versioned model container.
//!
//! Layout: magic `VRLM`, `u32` version, `u64` header length, a JSON header,
//! then the arrays listed in the header as row-major little-endian `f64`.
//! The header always records the vocabulary and its hash.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PcaModel;
use crate::gmm::GmmModel;
use crate::scoring::ScoreWeights;
use crate::train_full::{Preprocessing, RelationModel};
use crate::types::Vocabulary;

pub const MODEL_MAGIC: &[u8; 4] = b"VRLM";
pub const MODEL_VERSION: u32 = 1;

/// Everything a pipeline stage may persist. Sections are optional so the
/// same container holds a bare GMM, a PCA basis or a full scoring model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub vocabulary: Vocabulary,
    pub gmm: Option<GmmModel>,
    pub pca: Option<PcaModel>,
    /// Classifier weights and regularization, without preprocessing.
    pub relation: Option<RelationModel>,
    pub score_weights: Option<ScoreWeights>,
    /// Final latent assignment of weakly supervised training.
    pub assignment: Option<DMatrix<f64>>,
    /// Free-form training record (configuration, traces, counters).
    pub config: serde_json::Value,
}

impl ModelBundle {
    pub fn new(vocabulary: Vocabulary) -> Self {
        Self {
            vocabulary,
            gmm: None,
            pca: None,
            relation: None,
            score_weights: None,
            assignment: None,
            config: serde_json::Value::Null,
        }
    }

    /// The relation model with the stored GMM and PCA attached when both
    /// are present.
    pub fn relation_model(&self) -> Result<RelationModel> {
        let rel = self
            .relation
            .clone()
            .ok_or_else(|| Error::invalid("model file has no relation classifier"))?;
        match (&self.gmm, &self.pca) {
            (Some(gmm), Some(pca)) => rel.with_preprocessing(Preprocessing {
                gmm: gmm.clone(),
                pca: pca.clone(),
            }),
            _ => Ok(rel),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArraySpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    vocabulary_hash: String,
    vocabulary: Vocabulary,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gmm_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    score_weights: Option<ScoreWeights>,
    config: serde_json::Value,
    arrays: Vec<ArraySpec>,
}

struct Payload {
    specs: Vec<ArraySpec>,
    data: Vec<f64>,
}

impl Payload {
    fn push(&mut self, name: &str, rows: usize, cols: usize, values: impl IntoIterator<Item = f64>) {
        self.specs.push(ArraySpec {
            name: name.into(),
            rows,
            cols,
        });
        self.data.extend(values);
    }

    fn push_matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        let values: Vec<f64> = m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        self.push(name, m.nrows(), m.ncols(), values);
    }
}

pub fn model_to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut payload = Payload {
        specs: Vec::new(),
        data: Vec::new(),
    };
    if let Some(g) = &bundle.gmm {
        payload.push("gmm.means", g.k(), g.dim(), g.means_flat().iter().copied());
        payload.push("gmm.variances", g.k(), g.dim(), g.variances_flat().iter().copied());
        payload.push("gmm.weights", 1, g.k(), g.weights().iter().copied());
    }
    if let Some(p) = &bundle.pca {
        payload.push("pca.mean", 1, p.input_dim(), p.mean().iter().copied());
        payload.push_matrix("pca.components", p.components());
        payload.push("pca.explained_variance", 1, p.output_dim(), p.explained_variance().iter().copied());
    }
    if let Some(r) = &bundle.relation {
        if r.vocabulary() != &bundle.vocabulary {
            return Err(Error::invalid("relation model vocabulary differs from the bundle vocabulary"));
        }
        payload.push_matrix("relation.weights", r.weights());
    }
    if let Some(z) = &bundle.assignment {
        payload.push_matrix("assignment", z);
    }
    if let Some(w) = &bundle.score_weights {
        w.validate()?;
    }
    let header = Header {
        vocabulary_hash: bundle.vocabulary.hash(),
        vocabulary: bundle.vocabulary.clone(),
        lambda: bundle.relation.as_ref().map(RelationModel::lambda),
        gmm_seed: bundle.gmm.as_ref().map(GmmModel::seed),
        score_weights: bundle.score_weights,
        config: bundle.config.clone(),
        arrays: payload.specs,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * payload.data.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a container. When `expected` is given its hash must match the
/// stored one. `path` only labels errors.
pub fn model_from_bytes(bytes: &[u8], path: &Path, expected: Option<&Vocabulary>) -> Result<ModelBundle> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 16 || &bytes[..4] != MODEL_MAGIC {
        return Err(bad("not a model file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            expected: MODEL_VERSION,
            found: version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(format!("bad header: {e}")))?;
    let hash = header.vocabulary.hash();
    if hash != header.vocabulary_hash {
        return Err(bad("stored vocabulary does not match its recorded hash".into()));
    }
    if let Some(v) = expected {
        if v.hash() != hash {
            return Err(Error::HashMismatch {
                model: hash,
                dataset: v.hash(),
            });
        }
    }
    let payload = &bytes[header_end..];
    let declared: usize = header.arrays.iter().map(|a| a.rows * a.cols).sum();
    if payload.len() != 8 * declared {
        return Err(bad(format!(
            "header declares {declared} f64 values but payload has {} bytes",
            payload.len()
        )));
    }
    let mut arrays = std::collections::BTreeMap::new();
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for spec in &header.arrays {
        let data: Vec<f64> = values.by_ref().take(spec.rows * spec.cols).collect();
        if arrays.insert(spec.name.as_str(), (spec.rows, spec.cols, data)).is_some() {
            return Err(bad(format!("array '{}' appears twice", spec.name)));
        }
    }
    let mut take = |name: &str| arrays.remove(name);
    let matrix = |(r, c, d): (usize, usize, Vec<f64>)| DMatrix::from_row_slice(r, c, &d);
    let wrap = |e: Error| bad(e.to_string());

    let gmm = match (take("gmm.means"), take("gmm.variances"), take("gmm.weights")) {
        (Some((_, dim, means)), Some((_, _, vars)), Some((_, _, w))) => {
            let seed = header.gmm_seed.ok_or_else(|| bad("GMM without seed".into()))?;
            Some(GmmModel::from_parts(dim, means, vars, w, seed).map_err(wrap)?)
        }
        (None, None, None) => None,
        _ => return Err(bad("incomplete GMM section".into())),
    };
    let pca = match (take("pca.mean"), take("pca.components"), take("pca.explained_variance")) {
        (Some((_, _, mean)), Some(c), Some((_, _, ev))) => Some(PcaModel::from_parts(mean, matrix(c), ev).map_err(wrap)?),
        (None, None, None) => None,
        _ => return Err(bad("incomplete PCA section".into())),
    };
    let relation = match take("relation.weights") {
        Some(w) => {
            let lambda = header.lambda.ok_or_else(|| bad("relation weights without lambda".into()))?;
            Some(RelationModel::new(matrix(w), lambda, header.vocabulary.clone()).map_err(wrap)?)
        }
        None => None,
    };
    let assignment = take("assignment").map(matrix);
    if let Some(name) = arrays.keys().next() {
        return Err(bad(format!("unknown array '{name}'")));
    }
    Ok(ModelBundle {
        vocabulary: header.vocabulary,
        gmm,
        pca,
        relation,
        score_weights: header.score_weights,
        assignment,
        config: header.config,
    })
}

pub fn save_model(path: &Path, bundle: &ModelBundle) -> Result<()> {
    fs::write(path, model_to_bytes(bundle)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path, expected: Option<&Vocabulary>) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, path, expected)
}
