//! Open-set panoptic segmentation toolkit.
//!
//! Covers dataset I/O for ID-encoded panoptic maps, known/unknown/unseen
//! split construction, proposal labeling and pseudo-label filtering, the
//! classification and objectiveness head losses with analytic gradients,
//! open-set decision rules, and panoptic-quality evaluation.

pub mod coco;
pub mod decision;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod io;
pub mod math;
pub mod pq;
pub mod proposals;
pub mod splits;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    validate_annotation, BBox, Category, CategoryId, CategoryRegistry, ImageId, Kind,
    PanopticAnnotation, SegmentId, SegmentInfo, SegmentMap, Status, Violation, UNKNOWN_CATEGORY,
    UNSEEN_CATEGORY, VOID,
};
