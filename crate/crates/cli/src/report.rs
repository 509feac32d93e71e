//! `uadt report`: oracle metrics of a checkpoint on a dataset.

use std::fmt::Write as _;

use serde::Serialize;
use uadt_core::dit::Model;
use uadt_core::flow_match::SampleConfig;
use uadt_core::latent_codec::{pixel_frames, temporal_layout};
use uadt_core::metrics::evaluate_spec;
use uadt_core::pose_kit::Dataset;
use uadt_core::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub sample: SampleConfig,
    pub clips: Vec<ClipRow>,
    pub summary: Summary,
    pub long_video: LongRow,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClipRow {
    pub name: String,
    pub frames: usize,
    pub missing: usize,
    pub centroid_error_px: f64,
    pub centroid_error_frac: f64,
    pub color_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub clips: usize,
    pub centroid_error_px: f64,
    pub centroid_error_frac: f64,
    pub color_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LongRow {
    pub clip: String,
    pub frames: usize,
    pub latent_frames: usize,
    pub window: usize,
    pub discard: usize,
    pub windows: usize,
    pub seam_mean_rms: f64,
    pub within_median_rms: f64,
    pub seam_ratio: f64,
}

pub struct ReportOptions {
    pub clips: Option<usize>,
    pub window: Option<usize>,
    pub discard: usize,
    pub sample: SampleConfig,
}

/// Re-animates each clip from its reference and poses, then animates the
/// first clip's motion stretched over three windows for the seam metric.
pub fn build_report(model: &Model, dataset: &Dataset, opts: &ReportOptions) -> Result<Report> {
    let take = opts.clips.unwrap_or(dataset.clips.len()).min(dataset.clips.len());
    if take == 0 {
        return Err(Error::validation("report needs at least one clip"));
    }
    let latent = temporal_layout(dataset.manifest.frames)?;
    let window = opts.window.unwrap_or(latent);
    let mut clips = Vec::with_capacity(take);
    for clip in &dataset.clips[..take] {
        let (eval, _) = evaluate_spec(model, &clip.spec, latent, opts.discard.min(latent - 1), &opts.sample)
            .map_err(|e| e.context(clip.name.clone()))?;
        let s = eval.tracking;
        clips.push(ClipRow {
            name: clip.name.clone(),
            frames: s.frames,
            missing: s.missing,
            centroid_error_px: s.centroid_error_px,
            centroid_error_frac: s.centroid_error_frac,
            color_error: s.color_error,
        });
    }
    let n = clips.len() as f64;
    let summary = Summary {
        clips: clips.len(),
        centroid_error_px: clips.iter().map(|c| c.centroid_error_px).sum::<f64>() / n,
        centroid_error_frac: clips.iter().map(|c| c.centroid_error_frac).sum::<f64>() / n,
        color_error: clips.iter().map(|c| c.color_error).sum::<f64>() / n,
    };
    if window <= opts.discard {
        return Err(Error::config(format!("window {window} must exceed discard {}", opts.discard)));
    }
    let long_latent = window + 2 * (window - opts.discard);
    let first = &dataset.clips[0];
    let spec = first.spec.with_frames(pixel_frames(long_latent))?;
    let (eval, out) = evaluate_spec(model, &spec, window, opts.discard, &opts.sample)
        .map_err(|e| e.context(format!("{} (long)", first.name)))?;
    let seams = eval
        .seams
        .ok_or_else(|| Error::validation("long-video plan produced a single window"))?;
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        sample: opts.sample,
        clips,
        summary,
        long_video: LongRow {
            clip: first.name.clone(),
            frames: spec.frames,
            latent_frames: long_latent,
            window,
            discard: opts.discard,
            windows: out.plan.windows.len(),
            seam_mean_rms: seams.seam_mean_rms,
            within_median_rms: seams.within_median_rms,
            seam_ratio: seams.ratio,
        },
    })
}

impl Report {
    pub fn table(&self) -> String {
        let mut s = String::from("clip        frames  missing  centroid_px  centroid_frac  color_err\n");
        for c in &self.clips {
            let _ = writeln!(
                s,
                "{:<10}  {:>6}  {:>7}  {:>11.3}  {:>13.4}  {:>9.4}",
                c.name, c.frames, c.missing, c.centroid_error_px, c.centroid_error_frac, c.color_error
            );
        }
        let m = &self.summary;
        let _ = writeln!(
            s,
            "{:<10}  {:>6}  {:>7}  {:>11.3}  {:>13.4}  {:>9.4}",
            "mean", "", "", m.centroid_error_px, m.centroid_error_frac, m.color_error
        );
        let l = &self.long_video;
        let _ = writeln!(
            s,
            "long video: {} frames, {} windows of {} (discard {}), seam ratio {:.3}",
            l.frames, l.windows, l.window, l.discard, l.seam_ratio
        );
        s
    }
}
