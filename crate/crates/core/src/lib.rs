//! Content-style decoupled makeup transfer.
//!
//! Core algorithms: frequency decomposition, semantic correspondence,
//! networks on a small reverse-mode autodiff engine, losses, synthetic face
//! data, training, controllable editing, evaluation and the service API.

pub mod autograd;
pub mod checkpoint;
pub mod control;
pub mod correspondence;
pub mod error;
pub mod evalsuite;
pub mod facedata;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod networks;
pub mod perceptual;
pub mod pipeline;
pub mod pyramid;
pub mod service;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use image::{Image, Mask, ParsingMap};
pub use tensor::{Array, Real};
pub use control::{ControlOp, ControlOutput, Model, Region};
pub use evalsuite::{EvalConfig, EvalReport};
pub use facedata::{Dataset, Domain, FaceSample};
pub use networks::{ArchConfig, ParamSet};
pub use service::{ApiError, ApiRequest, ApiResponse, ModelRegistry};
pub use trainer::{Metrics, TrainConfig};
