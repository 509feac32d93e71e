//! Oracle-based scores for generated clips.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::latent_codec::{decode, encode};
use crate::dit::Model;
use crate::flow_match::SampleConfig;
use crate::long_video::{animate_long, LongVideo, WindowPlan};
use crate::numerics::Tensor;
use crate::pose_kit::{generate_synthetic, oracle_measure, SynthSpec};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackingScore {
    pub frames: usize,
    pub missing: usize,
    /// Mean distance between the generated figure and the trajectory.
    pub centroid_error_px: f64,
    /// The same, as a fraction of the frame width.
    pub centroid_error_frac: f64,
    /// Mean RGB distance between generated and codec-reconstructed figure colour.
    pub color_error: f64,
}

/// Scores `generated` against the clip it should reproduce.
///
/// Centroids are compared with `trajectory`. Colours are compared with the
/// truth after a codec round trip, since block pooling dilutes the figure's
/// colour in any decoded video. A frame where the oracle finds no figure
/// costs the full width and the distance from black to the true colour.
pub fn tracking_score(generated: &Tensor, truth: &Tensor, trajectory: &[[f64; 2]]) -> Result<TrackingScore> {
    if generated.shape() != truth.shape() {
        return Err(Error::shape(format!(
            "generated {:?} vs truth {:?}",
            generated.shape(),
            truth.shape()
        )));
    }
    let frames = generated.shape()[1];
    let width = generated.shape()[3] as f64;
    if trajectory.len() != frames {
        return Err(Error::validation(format!(
            "{} trajectory points for {frames} frames",
            trajectory.len()
        )));
    }
    let gen = oracle_measure(generated)?;
    let reference = oracle_measure(&decode(&encode(truth)?)?)?;
    let (mut pos, mut col, mut missing) = (0.0, 0.0, 0);
    for t in 0..frames {
        let r = reference[t].ok_or_else(|| Error::validation(format!("no figure in reconstructed truth frame {t}")))?;
        match gen[t] {
            Some(m) => {
                let [x, y] = trajectory[t];
                pos += (m.centroid[0] - x).hypot(m.centroid[1] - y);
                col += distance(&m.color, &r.color);
            }
            None => {
                missing += 1;
                pos += width;
                col += distance(&[0.0; 3], &r.color);
            }
        }
    }
    let n = frames as f64;
    Ok(TrackingScore {
        frames,
        missing,
        centroid_error_px: pos / n,
        centroid_error_frac: pos / n / width,
        color_error: col / n,
    })
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeamScore {
    pub seams: usize,
    pub seam_mean_rms: f64,
    pub within_median_rms: f64,
    pub ratio: f64,
}

fn frame_rms(latents: &Tensor, j: usize) -> Result<f64> {
    let a = latents.narrow(1, j - 1, j)?;
    let b = latents.narrow(1, j, j + 1)?;
    Ok(a.rms_diff(&b))
}

/// Mean adjacent-frame RMS across window seams over the median within
/// windows, on the latent timeline.
pub fn seam_score(latents: &Tensor, plan: &WindowPlan) -> Result<SeamScore> {
    if latents.rank() != 4 || latents.shape()[1] != plan.total {
        return Err(Error::shape(format!(
            "latents {:?} do not match a plan over {} frames",
            latents.shape(),
            plan.total
        )));
    }
    let mut seams = Vec::new();
    let mut within = Vec::new();
    for (i, w) in plan.windows.iter().enumerate() {
        if i > 0 {
            seams.push(frame_rms(latents, w.emit_start)?);
        }
        for j in w.emit_start + 1..w.emit_end {
            within.push(frame_rms(latents, j)?);
        }
    }
    if seams.is_empty() || within.is_empty() {
        return Err(Error::validation("seam score needs at least two windows with interior frames"));
    }
    within.sort_by(f64::total_cmp);
    let m = within.len();
    let median = if m % 2 == 1 {
        within[m / 2]
    } else {
        0.5 * (within[m / 2 - 1] + within[m / 2])
    };
    let mean = seams.iter().sum::<f64>() / seams.len() as f64;
    Ok(SeamScore {
        seams: seams.len(),
        seam_mean_rms: mean,
        within_median_rms: median,
        ratio: mean / median.max(1e-12),
    })
}

/// Scores of one synthetic clip re-animated from its reference and poses.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpecEval {
    pub tracking: TrackingScore,
    /// Present when the plan has more than one window.
    pub seams: Option<SeamScore>,
}

/// Renders `spec`, animates it from its own reference and poses with
/// windows of `window` latent frames, and scores the result.
pub fn evaluate_spec(
    model: &Model,
    spec: &SynthSpec,
    window: usize,
    discard: usize,
    cfg: &SampleConfig,
) -> Result<(SpecEval, LongVideo)> {
    let clip = generate_synthetic(spec)?;
    let out = animate_long(model, &clip.reference, &clip.reference_pose, &clip.poses, window, discard, cfg)?;
    let trajectory: Vec<[f64; 2]> = (0..spec.frames).map(|t| spec.position(t)).collect();
    let tracking = tracking_score(&out.video, &clip.video, &trajectory)?;
    let seams = if out.plan.windows.len() > 1 {
        Some(seam_score(&out.latents, &out.plan)?)
    } else {
        None
    };
    Ok((SpecEval { tracking, seams }, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::long_video::plan_windows;
    use crate::pose_kit::{generate_synthetic, SynthSpec};

    #[test]
    fn truth_scores_near_zero() {
        let spec = SynthSpec::random(3, [32, 32], 17, 6.0).unwrap();
        let clip = generate_synthetic(&spec).unwrap();
        let traj: Vec<_> = (0..17).map(|t| spec.position(t)).collect();
        let recon = decode(&encode(&clip.video).unwrap()).unwrap();
        let s = tracking_score(&recon, &clip.video, &traj).unwrap();
        assert_eq!(s.missing, 0);
        assert_eq!(s.color_error, 0.0);
        assert!(s.centroid_error_frac < 0.1, "{s:?}");
        let blank = Tensor::zeros(clip.video.shape().to_vec());
        let s = tracking_score(&blank, &clip.video, &traj).unwrap();
        assert_eq!((s.missing, s.centroid_error_frac), (17, 1.0));
    }

    #[test]
    fn linear_ramp_has_unit_ratio() {
        let plan = plan_windows(9, 5, 2).unwrap();
        let z = Tensor::from_fn(vec![1, 9, 2, 2], |i| i[1] as f64 * 0.1);
        let s = seam_score(&z, &plan).unwrap();
        assert_eq!(s.seams, 2);
        assert!((s.ratio - 1.0).abs() < 1e-9, "{s:?}");
    }
}
