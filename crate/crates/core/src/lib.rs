//! Unsupervised domain adaptation for segmentation with margin-preserving
//! prototype contrastive learning, self-paced pseudo-labels and adversarial
//! alignment of self-information maps.
//!
//! Everything runs on the small CPU autograd in [`numerics`].

pub mod data;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod prototypes;
pub mod pseudo_labels;
pub mod training;
