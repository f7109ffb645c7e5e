//! Two-stage lesion detection on CT-like volumes.
//!
//! The crate covers the whole desk-scale pipeline: a deterministic head-CT
//! phantom with exact ground truth, a small grid-cell detector trained with a
//! phased schedule over ten random splits, candidate mining and a 4-fold
//! false-positive-reduction ensemble fed with one- or three-slice patches,
//! the evaluation harness (IoU matching, sensitivity / FP-per-case / F1,
//! exact McNemar), and an event-sourced two-phase reader session.

pub mod candidate;
pub mod detector;
pub mod eval;
pub mod experiment;
pub mod fpr;
pub mod nnet;
pub mod phantom;
pub mod readerstudy;
pub mod rng;
pub mod volume;

pub use candidate::{Candidate, Stage};
pub use volume::{BoundingBox2D, CaseAnnotation, HuVolume, InputMode, Lesion, NormalizedVolume, Patch, WindowSettings};
