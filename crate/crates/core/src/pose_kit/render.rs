use super::{Keypoint, PoseSequence};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn render_joint(k: &Keypoint, height: usize, width: usize, sigma: f64, out: &mut [f64]) {
    if k.confidence <= 0.0 {
        return;
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    // normalise so the pixel centre nearest the joint is exactly 1
    let nx = k.x.round().min((width - 1) as f64);
    let ny = k.y.round().min((height - 1) as f64);
    let d2_near = (nx - k.x).powi(2) + (ny - k.y).powi(2);
    for row in 0..height {
        let dy = row as f64 - k.y;
        for col in 0..width {
            let dx = col as f64 - k.x;
            out[row * width + col] = (-(dx * dx + dy * dy - d2_near) * inv).exp().min(1.0);
        }
    }
}

/// Gaussian heatmaps `[J, T, H, W]`, one channel per joint. A missing joint
/// (confidence 0) renders as an all-zero channel.
pub fn render_pose_maps(seq: &PoseSequence, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("pose sigma must be > 0, got {sigma}")));
    }
    let (j, t, h, w) = (seq.joints(), seq.len(), seq.height(), seq.width());
    let mut data = vec![0.0; j * t * h * w];
    for ji in 0..j {
        for ti in 0..t {
            let off = (ji * t + ti) * h * w;
            render_joint(&seq.frame(ti)[ji], h, w, sigma, &mut data[off..off + h * w]);
        }
    }
    Tensor::new(vec![j, t, h, w], data)
}

/// Heatmaps `[J, H, W]` for a single frame of `seq`.
pub fn render_pose_frame(seq: &PoseSequence, frame: usize, sigma: f64) -> Result<Tensor> {
    let maps = render_pose_maps(&seq.slice(frame, frame + 1)?, sigma)?;
    maps.reshape(vec![seq.joints(), seq.height(), seq.width()])
}
