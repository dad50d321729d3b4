//! Transformer instance segmentation for vehicle damage, fake-damage and part
//! analysis, with a teacher-student distillation path, built on a small
//! reverse-mode autodiff engine.

pub mod autodiff;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use labels::{Domain, InstanceLabel, LabelSpace};
pub use tensor::Tensor;
