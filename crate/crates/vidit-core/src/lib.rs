//! Toy video diffusion with a unified condition interface.
//!
//! Everything runs on the CPU in f32 with hand-written reverse-mode
//! derivatives. The pipeline: procedural scene data ([`datagen`]) is packed
//! into condition units ([`vcu`]), mapped to a latent grid by an exactly
//! invertible codec ([`codec`]), consumed by a small diffusion transformer
//! ([`model`]) trained with rectified flow ([`train`]) and sampled with an
//! Euler integrator ([`sampler`]).

pub mod codec;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vcu;

pub use codec::{CodecConfig, LatentBundle, LatentGrid};
pub use datagen::{make_sample, GeomParams, TaskKind};
pub use error::{Error, Result};
pub use harness::ablate::{ablate, AblateReport, Axis};
pub use harness::checkpoint::Checkpoint;
pub use harness::eval::{eval, EvalOptions, EvalReport};
pub use model::{attach_adapter, Mode, ModelConfig, ParamStore, PlacementSpec};
pub use graph::{Graph, Var};
pub use rng::Rng;
pub use sampler::{euler_sample, SampleConfig};
pub use tensor::Tensor;
pub use train::{fit, FitResult, TrainConfig, TrainSample, TrainState};
pub use vcu::{FrameSeq, MaskSeq, TaskTag, Vcu};
