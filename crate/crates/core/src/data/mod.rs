//! Feature and label ingestion, alignment, segmentation and synthetic data.

pub mod features;
pub mod labels;
pub mod manifest;
pub mod segments;
pub mod synth;

pub use features::{align_audio, fill_missing_faces, load_feature_file, FeatureSequence, Modality};
pub use labels::{read_labels, write_labels, LabelTrack};
pub use manifest::{load_video, load_videos, Manifest, ManifestEntry, Split, Video};
pub use segments::{split_segments, stitch_predictions, SegmentSpec};
pub use synth::{generate, synth_dataset, SynthSpec};
