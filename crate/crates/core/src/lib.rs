//! Learning visual relation classifiers `(subject, predicate, object)` from
//! precomputed detections and appearance features, under full (box-level)
//! or weak (image-level) supervision, and evaluating them with
//! detection-recall and retrieval-mAP protocols.

pub mod candidates;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod gmm;
pub mod io;
pub mod scoring;
pub mod synth;
pub mod train_full;
pub mod types;
pub mod weak;

pub use error::{Error, Result};
pub use geometry::{iou, spatial_vector, union_box, BoundingBox};
pub use types::{Detection, ImageId, Triplet, TripletAnnotation, Vocabulary};
