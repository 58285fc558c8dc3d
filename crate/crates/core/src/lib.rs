pub mod error;
pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod layout;
pub mod losses;
pub mod metrics;
pub mod mixer;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use backbone::{parse_backbones, ArchConfig, BackboneKind, SegNetwork};
pub use error::{Result, WmuError};
pub use tape::{Gradients, PceReduction, Tape, Var, UNLABELED};
pub use tensor::{ParamId, ParamStore, ParamTensor, Scalar, TensorGrid};
