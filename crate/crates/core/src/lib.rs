//! Spatial-relation grounding over single RGB-D frames.
//!
//! Given candidate detections for a target and a reference label plus a
//! relation word ("mug left of laptop"), the engine lifts every candidate to a
//! PCA-fitted 3D box, scores each (target, reference) pair with a small relation
//! classifier, and picks the pair maximizing
//! `P(target | label) * P(reference | label) * P(pair | relation)`.
//!
//! Module map:
//!
//! - [`dataio`]: scene manifests, depth PNGs, RLE masks, dataset indices.
//! - [`geometry`]: backprojection, statistical outlier removal, PCA boxes, 2D IoU.
//! - [`features`]: flat MLP input vectors from 2D/3D boxes and word embeddings.
//! - [`srm`]: the relation MLP with its trainer and binary model format.
//! - [`ranking`]: candidate selection and pairwise probabilistic ranking.
//! - [`autolabel`]: rule-based relation labels from 3D boxes, expression generation.
//! - [`synthgen`]: deterministic ray-cast synthetic scenes and benchmarks.
//! - [`corpus`]: turns dataset directories into labeled feature samples.
//! - [`evalx`]: grounding and classification metrics plus report rendering.

pub mod autolabel;
pub mod corpus;
pub mod dataio;
pub mod error;
pub mod evalx;
pub mod features;
pub mod geometry;
pub mod ranking;
pub mod srm;
pub mod synthgen;

pub use error::{Error, Result, Role};
