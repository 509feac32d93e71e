//! Frame measurements for rendered or generated videos.
//!
//! Deliberately shares nothing with the synthetic generator: a pixel belongs
//! to the figure when its mean RGB exceeds [`FOREGROUND_THRESHOLD`]; the
//! centroid is the intensity-weighted mean of figure pixel centres and the
//! colour is the plain mean RGB over figure pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FOREGROUND_THRESHOLD: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeasure {
    /// `(x, y)` in pixel-centre coordinates.
    pub centroid: [f64; 2],
    pub color: [f64; 3],
    pub pixels: usize,
}

/// One entry per frame of a `[3, T, H, W]` video; `None` when no pixel
/// clears the threshold.
pub fn oracle_measure(video: &Tensor) -> Result<Vec<Option<FrameMeasure>>> {
    let s = video.shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(Error::validation(format!("oracle needs a [3,T,H,W] video, got {s:?}")));
    }
    let (t, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    let v = video.data();
    let mut out = Vec::with_capacity(t);
    for ti in 0..t {
        let channel = |c: usize, p: usize| v[(c * t + ti) * plane + p];
        let mut wsum = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut rgb = [0.0; 3];
        let mut count = 0usize;
        for p in 0..plane {
            let px = [channel(0, p), channel(1, p), channel(2, p)];
            let intensity = (px[0] + px[1] + px[2]) / 3.0;
            if intensity <= FOREGROUND_THRESHOLD {
                continue;
            }
            let (row, col) = (p / w, p % w);
            wsum += intensity;
            cx += intensity * col as f64;
            cy += intensity * row as f64;
            for c in 0..3 {
                rgb[c] += px[c];
            }
            count += 1;
        }
        out.push((count > 0).then(|| FrameMeasure {
            centroid: [cx / wsum, cy / wsum],
            color: rgb.map(|c| c / count as f64),
            pixels: count,
        }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_frame_is_missing() {
        let m = oracle_measure(&Tensor::zeros(vec![3, 2, 8, 8])).unwrap();
        assert_eq!(m, vec![None, None]);
    }

    #[test]
    fn uniform_frame_centroid_is_canvas_centre() {
        let m = oracle_measure(&Tensor::full(vec![3, 1, 32, 24], 0.7)).unwrap();
        let f = m[0].unwrap();
        assert!((f.centroid[0] - 11.5).abs() < 1e-12);
        assert!((f.centroid[1] - 15.5).abs() < 1e-12);
        assert!(f.color.iter().all(|&c| (c - 0.7).abs() < 1e-12));
    }

    #[test]
    fn single_pixel() {
        let mut v = Tensor::zeros(vec![3, 1, 8, 8]);
        for c in 0..3 {
            v.set(&[c, 0, 2, 5], 0.5);
        }
        let f = oracle_measure(&v).unwrap()[0].unwrap();
        assert_eq!(f.centroid, [5.0, 2.0]);
        assert_eq!(f.pixels, 1);
    }
}
