//! Rigid body localization from incomplete time-of-flight ranging.
//!
//! A multi-tag vehicle is located by anchors at known positions. Signal
//! blockage leaves some tag–anchor ranges unmeasured; the toolkit recovers
//! the vehicle pose anyway by completing a structured Euclidean distance
//! matrix, jointly localizing the tags, and refining position and attitude
//! with Gauss-Newton. Baseline methods, Cramér–Rao bounds and an
//! occlusion-aware simulator are included for evaluation.

pub mod analysis;
pub mod baselines;
pub mod edm;
pub mod error;
pub mod geometry;
pub mod pose_estimation;
pub mod simulation;
pub mod tag_localization;

pub use error::{Error, Result};
