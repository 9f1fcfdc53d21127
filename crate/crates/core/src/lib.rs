pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod dil;
pub mod edm;
pub mod error;
pub mod eval;
pub mod fal;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod videodata;

pub use error::{Error, Result};
pub use config::RunConfig;
pub use eval::{EvalConfig, Evaluation};
pub use metrics::EvalReport;
pub use trainer::{MetricsRecord, Model, ModelConfig, Pretrained, SwapOptions, TrainConfig, TrainState};
pub use videodata::{SourceFace, SyntheticFactors, VideoClip};
