//! Synthetic multi-view data and the binary file formats.

pub mod formats;
pub mod synth;

pub use formats::{
    EmbeddingRecord, EmbeddingSet, MultiViewSample, MviDataset, PatchEntry, PvfDataset,
};
pub use synth::{generate, render_views, DatasetManifest, GenerateConfig, ShapeClass, Solid, Split};
