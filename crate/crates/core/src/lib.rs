//! Part-to-whole collaborative prompting for promptable segmentation of
//! surgical instruments, small enough to train on a CPU.
//!
//! Text prompts of the form `"<part> of <category>"` are turned into sparse
//! (token) and dense (map) prompt embeddings, fused into a whole-instrument
//! prompt with learned category and image part weights, and decoded into
//! whole and part masks.

pub mod ablation;
pub mod config;
pub mod crossmodal;
pub mod dataset;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prompts;
pub mod scenegen;
pub mod trainer;

pub use config::{DataConfig, ModelDims, RunConfig, Variant};
pub use error::{Error, Result};
pub use metrics::EvalReport;
pub use model::{Model, Prediction};
pub use trainer::{evaluate_dataset, run_gradcheck, run_training, train_model, TrainLog};

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
