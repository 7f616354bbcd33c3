//! Continual domain adaptation with gradient-regularized contrastive learning.
//!
//! A small MLP classifier is adapted through a sequence of unlabeled target
//! domains. Each update follows the gradient of an InfoNCE objective over a
//! momentum-updated feature bank, projected so that it does not increase the
//! cross-entropy on the labeled source domain or on an episodic memory of
//! earlier targets.
//!
//! Modules map onto the pieces of the pipeline:
//!
//! - [`model`]: the classifier, its projection head and exact gradients.
//! - [`contrast`]: the feature bank and the InfoNCE objective.
//! - [`gradproj`]: the constrained projection of a proposed update.
//! - [`memory`]: episodic memories and k-means pseudo-labels.
//! - [`domains`]: synthetic domain sequences, augmentation and CSV files.
//! - [`trainer`]: source training, per-domain adaptation and baselines.
//! - [`metrics`]: accuracy matrix, ACC and BWT.

pub mod contrast;
pub mod domains;
pub mod error;
pub mod gradproj;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod trainer;

mod rng;

pub use error::{GrclError, Result};
