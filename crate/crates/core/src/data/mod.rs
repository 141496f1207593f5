//! Dataset ingestion, frame decoding, persistence and toy-data generation.

pub mod checkpoint;
pub mod container;
pub mod frames;
pub mod manifest;
pub mod synthetic;

pub use checkpoint::Checkpoint;
pub use frames::{decode_frames, DecodeConfig, FrameCache, FrameSequence};
pub use manifest::{DatasetManifest, ManifestRow};
pub use synthetic::make_synthetic_dataset;
