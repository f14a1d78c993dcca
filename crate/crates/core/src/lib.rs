//! Gaze-guided dual-teacher semi-supervised segmentation.
//!
//! The pipeline runs end to end on a built-in synthetic world: gaze traces
//! are filtered into fixations and rendered as heatmaps, GazeMix pastes
//! gaze-bounded crops between images, and a small U-Net with a multi-scale
//! gaze perception head is trained mean-teacher style against segmentation
//! and gaze-alignment losses.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ablation;
pub mod config;
pub mod gaze;
pub mod gazemix;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ndnet;
pub mod plot;
pub mod synth;
pub mod trainer;
