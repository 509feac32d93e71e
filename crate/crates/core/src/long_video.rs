//! Overlapped sliding windows over the latent timeline.
//!
//! Windows advance by `W − d`. Each later window takes the preceding `d`
//! generated latents as given context (mask = 1, held fixed while sampling)
//! and emits only what comes after them. A final window that would run past
//! the end is shifted back to `L − W`, with its context widened to cover
//! everything already emitted.

use std::fmt::Write as _;
use std::ops::Range;

use serde::Serialize;

use crate::dit::Model;
use crate::error::{Error, Result, ResultExt};
use crate::flow_match::{build_condition, sample_with_rng, ConditionedModel, SampleConfig, VelocityField};
use crate::latent_codec::{decode, pixel_frames, temporal_layout, TEMPORAL_FACTOR};
use crate::numerics::{Rng, Tensor};
use crate::pose_kit::PoseSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub context: usize,
    pub emit_start: usize,
    pub emit_end: usize,
}

impl Window {
    pub fn emit(&self) -> Range<usize> {
        self.emit_start..self.emit_end
    }

    /// Pixel frames `4s ..= 4(s+len−1)` whose poses drive this window.
    pub fn pixel_span(&self) -> Range<usize> {
        TEMPORAL_FACTOR * self.start..TEMPORAL_FACTOR * (self.start + self.len - 1) + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WindowPlan {
    pub total: usize,
    pub window: usize,
    pub discard: usize,
    pub windows: Vec<Window>,
}

pub const DEFAULT_DISCARD: usize = 2;

pub fn plan_windows(total: usize, window: usize, discard: usize) -> Result<WindowPlan> {
    if total == 0 {
        return Err(Error::config("latent timeline must hold at least one frame"));
    }
    if window <= discard {
        return Err(Error::config(format!(
            "window length {window} must exceed the discard length {discard}"
        )));
    }
    let mut windows = Vec::new();
    if total <= window {
        windows.push(Window {
            start: 0,
            len: total,
            context: 0,
            emit_start: 0,
            emit_end: total,
        });
    } else {
        windows.push(Window {
            start: 0,
            len: window,
            context: 0,
            emit_start: 0,
            emit_end: window,
        });
        let stride = window - discard;
        let mut start = stride;
        loop {
            let emitted = windows.last().expect("first window").emit_end;
            if start + window >= total {
                let s = total - window;
                windows.push(Window {
                    start: s,
                    len: window,
                    context: emitted - s,
                    emit_start: emitted,
                    emit_end: total,
                });
                break;
            }
            windows.push(Window {
                start,
                len: window,
                context: discard,
                emit_start: emitted,
                emit_end: start + window,
            });
            start += stride;
        }
    }
    let plan = WindowPlan {
        total,
        window,
        discard,
        windows,
    };
    plan.verify()?;
    Ok(plan)
}

impl WindowPlan {
    /// Checks that emit ranges tile `[0, total)` and each window is consistent.
    pub fn verify(&self) -> Result<()> {
        let mut next = 0;
        for (i, w) in self.windows.iter().enumerate() {
            let ok = w.emit_start == next
                && w.emit_end > w.emit_start
                && w.emit_start == w.start + w.context
                && w.emit_end <= w.start + w.len
                && w.start + w.len <= self.total
                && (i > 0 || w.context == 0);
            if !ok {
                return Err(Error::validation(format!("window {i} {w:?} breaks the emit partition")));
            }
            next = w.emit_end;
        }
        if next != self.total {
            return Err(Error::validation(format!("emit ranges stop at {next} of {}", self.total)));
        }
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = String::from("window  start  len  context  emit\n");
        for (i, w) in self.windows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i:>6}  {:>5}  {:>3}  {:>7}  [{}, {})",
                w.start, w.len, w.context, w.emit_start, w.emit_end
            );
        }
        s
    }
}

/// Samples every window in order and concatenates the emitted latents.
///
/// `field_for` supplies the velocity field of a window; `latent` is
/// `[C, h, w]`. One RNG stream seeded by `cfg.seed` feeds all windows, so a
/// single-window plan reproduces [`crate::flow_match::sample`].
pub fn stitch_windows<'a>(
    plan: &WindowPlan,
    latent: [usize; 3],
    cfg: &SampleConfig,
    mut field_for: impl FnMut(&Window) -> Result<Box<dyn VelocityField + 'a>>,
) -> Result<Tensor> {
    plan.verify()?;
    let [c, h, w] = latent;
    let mut rng = Rng::new(cfg.seed);
    let mut out: Option<Tensor> = None;
    for (i, win) in plan.windows.iter().enumerate() {
        let field = field_for(win).with_context(|| format!("window {i}"))?;
        let given = match (&out, win.context) {
            (_, 0) => None,
            (Some(o), g) => Some(o.narrow(1, win.start, win.start + g)?),
            (None, _) => return Err(Error::validation("context requested before any output")),
        };
        let z = sample_with_rng(field.as_ref(), &[c, win.len, h, w], given.as_ref(), cfg.steps, &mut rng)
            .with_context(|| format!("window {i}"))?;
        let fresh = z.narrow(1, win.context, win.emit_end - win.start)?;
        out = Some(match out {
            None => fresh,
            Some(o) => Tensor::concat(&[&o, &fresh], 1)?,
        });
    }
    out.ok_or_else(|| Error::validation("empty window plan"))
}

#[derive(Clone, Debug)]
pub struct LongVideo {
    pub plan: WindowPlan,
    /// `[C, L, h, w]`.
    pub latents: Tensor,
    /// `[3, 1+4(L−1), H, W]`.
    pub video: Tensor,
}

/// Animates `poses` of any valid length with windows of `window` latent frames.
pub fn animate_long(
    model: &Model,
    reference: &Tensor,
    reference_pose: &PoseSequence,
    poses: &PoseSequence,
    window: usize,
    discard: usize,
    cfg: &SampleConfig,
) -> Result<LongVideo> {
    let total = temporal_layout(poses.len()).context("driving poses")?;
    let plan = plan_windows(total, window, discard)?;
    let full = build_condition(&model.config, reference, reference_pose, poses)?;
    let maps = full.pose_maps.clone().expect("driving maps");
    let s = full.ref_latent.shape();
    let latent = [s[0], s[1], s[2]];
    let latents = stitch_windows(&plan, latent, cfg, |win| {
        let span = win.pixel_span();
        if span.end > poses.len() {
            return Err(Error::validation(format!(
                "window needs pose frames up to {} but only {} given",
                span.end,
                poses.len()
            )));
        }
        let mut cond = full.clone();
        cond.pose_maps = Some(maps.narrow(1, span.start, span.end)?);
        Ok(Box::new(ConditionedModel::new(model, &cond)?))
    })?;
    debug_assert_eq!(latents.shape()[1], total);
    let video = decode(&latents)?;
    debug_assert_eq!(video.shape()[1], pixel_frames(total));
    Ok(LongVideo { plan, latents, video })
}

/// Animates `poses` in a single window covering the whole clip.
pub fn animate(
    model: &Model,
    reference: &Tensor,
    reference_pose: &PoseSequence,
    poses: &PoseSequence,
    cfg: &SampleConfig,
) -> Result<LongVideo> {
    let total = temporal_layout(poses.len()).context("driving poses")?;
    animate_long(model, reference, reference_pose, poses, total, DEFAULT_DISCARD.min(total.saturating_sub(1)), cfg)
}

/// Latent-frame pairs `(j−1, j)` that straddle a window boundary.
pub fn seam_pairs(plan: &WindowPlan) -> Vec<usize> {
    plan.windows.iter().skip(1).map(|w| w.emit_start).collect()
}
