//! Files: feature stores, JSON-lines records, dataset manifests, pair sets
//! and model containers.

mod dataset;
mod feature_store;
mod model;
mod pairs;
mod records;

pub use dataset::{load_dataset, save_dataset, Dataset, DatasetManifest, LoadedDataset, MANIFEST_VERSION};
pub use feature_store::{FeatureStore, FEATURE_MAGIC, FEATURE_VERSION};
pub use model::{load_model, model_from_bytes, model_to_bytes, save_model, ModelBundle, MODEL_MAGIC, MODEL_VERSION};
pub use pairs::{load_pairs, save_pairs, PairRef, PAIRS_VERSION};
pub use records::{read_json, read_jsonl, write_json, write_jsonl, AnnotationRecord, CornerBox, DetectionRecord};
