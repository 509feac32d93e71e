use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POSE_FORMAT_VERSION: u32 = 1;
pub const MAX_JOINTS: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// In `[0, 1]`; zero marks a missing joint.
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Keypoint { x, y, confidence }
    }
}

/// Per-frame 2D keypoints on a `height × width` canvas. Pixel centres sit at
/// integer coordinates; `x` is the column and `y` the row.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    height: usize,
    width: usize,
    joints: usize,
    frames: Vec<Vec<Keypoint>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    version: u32,
    canvas: [usize; 2],
    joints: usize,
    frames: Vec<Vec<[f64; 3]>>,
}

impl PoseSequence {
    pub fn new(canvas: [usize; 2], joints: usize, frames: Vec<Vec<Keypoint>>) -> Result<Self> {
        let seq = PoseSequence {
            height: canvas[0],
            width: canvas[1],
            joints,
            frames,
        };
        seq.validate()?;
        Ok(seq)
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation("pose canvas must be non-empty"));
        }
        if self.joints == 0 || self.joints > MAX_JOINTS {
            return Err(Error::validation(format!(
                "joint count {} outside 1..={MAX_JOINTS}",
                self.joints
            )));
        }
        if self.frames.is_empty() {
            return Err(Error::validation("pose sequence has no frames"));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != self.joints {
                return Err(Error::validation(format!(
                    "frames[{t}]: expected {} joints, found {}",
                    self.joints,
                    frame.len()
                )));
            }
            for (j, k) in frame.iter().enumerate() {
                let at = format!("frames[{t}][{j}]");
                if !(k.x.is_finite() && k.y.is_finite() && k.confidence.is_finite()) {
                    return Err(Error::validation(format!("{at}: non-finite value")));
                }
                if !(0.0..=1.0).contains(&k.confidence) {
                    return Err(Error::validation(format!(
                        "{at}: confidence {} outside [0,1]",
                        k.confidence
                    )));
                }
                if k.x < 0.0 || k.x >= self.width as f64 || k.y < 0.0 || k.y >= self.height as f64 {
                    return Err(Error::validation(format!(
                        "{at}: ({}, {}) outside the {}x{} canvas",
                        k.x, k.y, self.height, self.width
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn canvas(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[Keypoint] {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Vec<Keypoint>] {
        &self.frames
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<PoseSequence> {
        if start >= end || end > self.len() {
            return Err(Error::validation(format!(
                "pose slice [{start},{end}) outside 0..{}",
                self.len()
            )));
        }
        PoseSequence::new(self.canvas(), self.joints, self.frames[start..end].to_vec())
    }

    /// Extends the sequence to `len` frames by playing it forwards and
    /// backwards (0,1,..,T-1,T-2,..,0,1,..), keeping motion continuous.
    pub fn ping_pong(&self, len: usize) -> Result<PoseSequence> {
        let n = self.len();
        let frames = (0..len)
            .map(|i| {
                if n == 1 {
                    return self.frames[0].clone();
                }
                let period = 2 * (n - 1);
                let p = i % period;
                let idx = if p < n { p } else { period - p };
                self.frames[idx].clone()
            })
            .collect();
        PoseSequence::new(self.canvas(), self.joints, frames)
    }

    /// Scales every coordinate by `factor` onto a canvas of `canvas`.
    pub fn rescaled(&self, canvas: [usize; 2], factor: f64) -> Result<PoseSequence> {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                f.iter()
                    .map(|k| Keypoint::new(k.x * factor, k.y * factor, k.confidence))
                    .collect()
            })
            .collect();
        PoseSequence::new(canvas, self.joints, frames)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PoseFile {
            version: POSE_FORMAT_VERSION,
            canvas: [self.height, self.width],
            joints: self.joints,
            frames: self
                .frames
                .iter()
                .map(|f| f.iter().map(|k| [k.x, k.y, k.confidence]).collect())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PoseFile = serde_json::from_str(text)
            .map_err(|e| Error::validation(format!("pose file: {e}")))?;
        if file.version != POSE_FORMAT_VERSION {
            return Err(Error::validation(format!(
                "pose file version {} unsupported (expected {POSE_FORMAT_VERSION})",
                file.version
            )));
        }
        let frames = file
            .frames
            .into_iter()
            .map(|f| f.into_iter().map(|[x, y, c]| Keypoint::new(x, y, c)).collect())
            .collect();
        PoseSequence::new(file.canvas, file.joints, frames)
    }
}

pub fn load_pose_sequence(path: &Path) -> Result<PoseSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PoseSequence::from_json(&text).map_err(|e| e.context(path.display().to_string()))
}

pub fn save_pose_sequence(seq: &PoseSequence, path: &Path) -> Result<()> {
    fs::write(path, seq.to_json()?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_file() {
        let seq = PoseSequence::from_json(
            r#"{"version":1,"canvas":[32,32],"joints":1,"frames":[[[16,16,1.0]]]}"#,
        )
        .unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.joints(), 1);
        assert_eq!(seq.frame(0)[0], Keypoint::new(16.0, 16.0, 1.0));
    }

    #[test]
    fn rejects_negative_confidence() {
        let err = PoseSequence::from_json(
            r#"{"version":1,"canvas":[32,32],"joints":1,"frames":[[[16,16,-0.1]]]}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("frames[0][0]") && err.contains("confidence"), "{err}");
    }

    #[test]
    fn rejects_out_of_canvas_and_bad_schema() {
        let out = r#"{"version":1,"canvas":[32,32],"joints":1,"frames":[[[32,5,1]]]}"#;
        assert!(PoseSequence::from_json(out).unwrap_err().to_string().contains("outside"));
        let extra = r#"{"version":1,"canvas":[32,32],"joints":1,"frames":[[[3,5,1]]],"x":0}"#;
        assert!(PoseSequence::from_json(extra).is_err());
        let broken = "{\"version\":1,\n\"canvas\":[32,32],\n\"joints\":oops}";
        let err = PoseSequence::from_json(broken).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let wrong_count = r#"{"version":1,"canvas":[32,32],"joints":2,"frames":[[[3,5,1]]]}"#;
        assert!(PoseSequence::from_json(wrong_count).is_err());
        let v2 = r#"{"version":2,"canvas":[32,32],"joints":1,"frames":[[[3,5,1]]]}"#;
        assert!(PoseSequence::from_json(v2).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let seq = PoseSequence::new(
            [24, 40],
            2,
            vec![
                vec![Keypoint::new(1.25, 3.5, 1.0), Keypoint::new(0.0, 0.0, 0.0)],
                vec![Keypoint::new(39.9, 23.0, 0.5), Keypoint::new(0.1 + 0.2, 7.0, 1.0)],
            ],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_pose_sequence(&seq, &path).unwrap();
        assert_eq!(load_pose_sequence(&path).unwrap(), seq);
    }

    #[test]
    fn ping_pong_is_continuous() {
        let frames = (0..4).map(|i| vec![Keypoint::new(i as f64, 0.0, 1.0)]).collect();
        let seq = PoseSequence::new([8, 8], 1, frames).unwrap();
        let long = seq.ping_pong(9).unwrap();
        let xs: Vec<f64> = long.frames().iter().map(|f| f[0].x).collect();
        assert_eq!(xs, vec![0., 1., 2., 3., 2., 1., 0., 1., 2.]);
    }
}
