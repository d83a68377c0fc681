//! Few-shot object viewpoint estimation from meta-learned semantic keypoints.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod meta;
pub mod model;
pub mod rng;
pub mod synth;

pub use autodiff::{ParamSet, Tensor, UpdateOrder};
pub use config::RunConfig;
pub use geometry::{Rotation, Vec3};
pub use harness::{BaselineKind, EvalResult, EvalRow};
pub use meta::{AblationSpec, MetaModel, Pretrained, TrainState};
pub use model::{Checkpoint, KeypointOutput};
pub use synth::{RenderedSample, Split, SyntheticCategory};
