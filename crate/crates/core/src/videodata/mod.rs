//! Synthetic labelled face-video clips, disk ingestion and inpainting inputs.

mod clip;
mod dataset;
mod factors;
pub mod io;
pub use io::DiskDataset;
mod render;

pub use clip::{generate_synthetic_clip, mask_face_region, stack_frames, SourceFace, VideoClip, MASK_FILL};
pub use dataset::{
    sample_factors_and_motion, sample_training_pair, ClipList, ClipSource, SyntheticDataset,
    SyntheticDatasetConfig,
};
pub use factors::{FactorDelta, IdentityCodebook, IdentityParams, SyntheticFactors, CODEBOOK_SIZE};
pub use render::{render_frame, Background};
