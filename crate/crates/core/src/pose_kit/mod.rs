//! Pose ingestion, heatmap rendering, synthetic clip generation, the
//! measurement oracle, and the on-disk dataset layout.

pub mod dataset;
pub mod oracle;
pub mod pose;
pub mod render;
pub mod synth;

pub use dataset::{ClipRecord, Dataset, DatasetManifest};
pub use oracle::{oracle_measure, FrameMeasure, FOREGROUND_THRESHOLD};
pub use pose::{load_pose_sequence, save_pose_sequence, Keypoint, PoseSequence};
pub use render::{render_pose_frame, render_pose_maps};
pub use synth::{generate_synthetic, SynthClip, SynthSpec, Trajectory};
