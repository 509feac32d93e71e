//! On-disk synthetic dataset.
//!
//! ```text
//! DIR/manifest.json
//! DIR/clip_0000/video.uadt      raw [3,T,H,W] video (tensor `video`)
//! DIR/clip_0000/poses.json      driving poses
//! DIR/clip_0000/reference.ppm   reference image (frame 0)
//! DIR/clip_0000/spec.json       the SynthSpec that produced the clip
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_synthetic, load_pose_sequence, oracle_measure, save_pose_sequence, PoseSequence, SynthSpec};
use crate::container::{canonical_json, Container};
use crate::error::{Error, Result};
use crate::media::{load_ppm, save_ppm};
use crate::numerics::{Rng, Tensor};

pub const DATASET_VERSION: u32 = 1;
/// Generation-time tolerance between the oracle centroid and the trajectory.
pub const CROSS_CHECK_TOLERANCE_PX: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub canvas: [usize; 2],
    pub frames: usize,
    pub disc_radius: f64,
    pub clips: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ClipRecord {
    pub name: String,
    pub spec: SynthSpec,
    /// `[3, T, H, W]`.
    pub video: Tensor,
    pub poses: PoseSequence,
    /// `[3, H, W]`.
    pub reference: Tensor,
    pub reference_pose: PoseSequence,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<ClipRecord>,
}

/// Seed of clip `index` within a dataset seeded by `seed`.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    Rng::new(seed).split(index as u64).next_u64()
}

/// Largest distance between oracle centroid and spec trajectory over all frames.
pub fn cross_check(spec: &SynthSpec, video: &Tensor) -> Result<f64> {
    let measures = oracle_measure(video)?;
    let mut worst: f64 = 0.0;
    for (t, m) in measures.iter().enumerate() {
        let m = m.ok_or_else(|| Error::validation(format!("oracle found no figure in frame {t}")))?;
        let [x, y] = spec.position(t);
        worst = worst.max(((m.centroid[0] - x).powi(2) + (m.centroid[1] - y).powi(2)).sqrt());
    }
    Ok(worst)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl Dataset {
    /// Generates `clips` clips, checks each against the oracle, and writes
    /// them under `dir`.
    pub fn generate(dir: &Path, clips: usize, seed: u64, canvas: [usize; 2], frames: usize, disc_radius: f64) -> Result<Dataset> {
        if clips == 0 {
            return Err(Error::validation("dataset needs at least one clip"));
        }
        crate::latent_codec::temporal_layout(frames)?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut records = Vec::with_capacity(clips);
        for i in 0..clips {
            let name = format!("clip_{i:04}");
            let spec = SynthSpec::random(clip_seed(seed, i), canvas, frames, disc_radius)?;
            let clip = generate_synthetic(&spec)?;
            let err = cross_check(&spec, &clip.video)?;
            if err > CROSS_CHECK_TOLERANCE_PX {
                return Err(Error::validation(format!(
                    "{name}: oracle centroid off the trajectory by {err:.3} px"
                )));
            }
            let clip_dir = dir.join(&name);
            fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
            let mut dump = Container::new(canonical_json(&spec)?);
            dump.tensors.insert("video".into(), clip.video.clone());
            dump.save(&clip_dir.join("video.uadt"))?;
            save_pose_sequence(&clip.poses, &clip_dir.join("poses.json"))?;
            save_ppm(&clip.reference, &clip_dir.join("reference.ppm"))?;
            write(&clip_dir.join("spec.json"), serde_json::to_string_pretty(&spec)?.as_bytes())?;
            records.push(ClipRecord {
                name,
                spec,
                video: clip.video,
                poses: clip.poses,
                reference: clip.reference,
                reference_pose: clip.reference_pose,
            });
        }
        let manifest = DatasetManifest {
            version: DATASET_VERSION,
            seed,
            canvas,
            frames,
            disc_radius,
            clips: records.iter().map(|r| r.name.clone()).collect(),
        };
        write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(Dataset {
            manifest,
            clips: records,
        })
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::validation(format!(
                "dataset version {} unsupported",
                manifest.version
            )));
        }
        if manifest.clips.is_empty() {
            return Err(Error::validation("dataset manifest lists no clips"));
        }
        let clips = manifest
            .clips
            .iter()
            .map(|name| load_clip(&dir.join(name), name))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, clips })
    }

    pub fn clip_dirs(&self, dir: &Path) -> Vec<PathBuf> {
        self.manifest.clips.iter().map(|c| dir.join(c)).collect()
    }
}

fn load_clip(dir: &Path, name: &str) -> Result<ClipRecord> {
    let spec_path = dir.join("spec.json");
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("{}: {e}", spec_path.display())))?;
    let video = Container::load(&dir.join("video.uadt"))?.tensor("video")?.clone();
    crate::latent_codec::validate_pixels(&video).map_err(|e| e.context(name.to_string()))?;
    let poses = load_pose_sequence(&dir.join("poses.json"))?;
    let reference = load_ppm(&dir.join("reference.ppm"))?;
    if poses.len() != video.shape()[1] {
        return Err(Error::validation(format!(
            "{name}: {} pose frames for a {}-frame video",
            poses.len(),
            video.shape()[1]
        )));
    }
    if reference.shape()[1..] != video.shape()[2..] {
        return Err(Error::validation(format!(
            "{name}: reference image {:?} does not match video {:?}",
            reference.shape(),
            video.shape()
        )));
    }
    let reference_pose = poses.slice(0, 1)?;
    Ok(ClipRecord {
        name: name.to_string(),
        spec,
        video,
        poses,
        reference,
        reference_pose,
    })
}
