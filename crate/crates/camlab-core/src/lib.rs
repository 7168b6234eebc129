//! Contrastive class activation mapping on a self-contained tensor/autodiff
//! engine, plus the entropy-targeted salience-fooling benchmark and the
//! evaluation harness around them.

pub mod cam;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod img;
pub mod lemma;
pub mod model;
mod seeds;
pub mod sham;
pub mod tape;
pub mod tensor;
pub mod train;

pub use cam::{Aggregator, CamMethod, SaliencyMap, TargetSpec};
pub use checkpoint::{load_model, save_model, Checkpoint, TrainMeta};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tape::{finite_diff_check, FiniteDiffReport, GradientBundle, NodeId, Tape};
pub use tensor::Tensor;
