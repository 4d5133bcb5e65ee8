//! Weakly supervised multiple-instance learning with top-t% instance selection.
//!
//! Instances are grouped into bags carrying only a bag-level label. During
//! training the classifier scores every instance in a bag; inside each
//! positive bag the top t% by predicted positive probability receive positive
//! training labels, while every instance of a negative bag is labelled
//! negative. A harvest-and-retrain pass and a late-epoch checkpoint ensemble
//! refine the result. The crate also ships the surrounding experiment
//! machinery: IDX ingestion, a tiling/thresholding pipeline for synthetic
//! slides, evaluation metrics, and a config-driven CLI.

pub mod config;
pub mod domain;
pub mod experiment;
pub mod idx;
pub mod metrics;
pub mod mil;
pub mod nn;
pub mod pgm;
pub mod synth;
pub mod tile;

pub use domain::{Bag, BagLabel, BagSpec, InstanceRecord, RegionLabel, SelectionPolicy};
pub use mil::{Ensemble, HarvestSet, TrainConfig};
pub use nn::{AdamState, LrSchedule, MlpParams};
