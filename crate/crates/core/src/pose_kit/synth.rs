//! Synthetic skeleton-driven clips: a coloured disc on black following the
//! trajectory of joint 0.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::{Keypoint, PoseSequence};
use crate::error::{Error, Result};
use crate::latent_codec::{temporal_layout, SPATIAL_FACTOR};
use crate::numerics::{Rng, Tensor};

/// Sub-samples per pixel axis when rasterising the disc.
const SUPERSAMPLE: usize = 4;
/// Pixel values are multiples of 1/255 so PPM round trips are exact.
pub const QUANT_LEVELS: f64 = 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    Line {
        from: [f64; 2],
        to: [f64; 2],
    },
    Circle {
        center: [f64; 2],
        radius: f64,
        /// Start angle in turns.
        phase: f64,
        turns: f64,
    },
    Sine {
        from: [f64; 2],
        to: [f64; 2],
        amplitude: f64,
        cycles: f64,
    },
}

impl Trajectory {
    /// Position at normalised time `u ∈ [0, 1]`.
    pub fn at(&self, u: f64) -> [f64; 2] {
        match *self {
            Trajectory::Line { from, to } => lerp(from, to, u),
            Trajectory::Circle {
                center,
                radius,
                phase,
                turns,
            } => {
                let a = TAU * (phase + turns * u);
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
            Trajectory::Sine {
                from,
                to,
                amplitude,
                cycles,
            } => {
                let base = lerp(from, to, u);
                let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
                let len = (dx * dx + dy * dy).sqrt();
                let off = amplitude * (TAU * cycles * u).sin();
                if len == 0.0 {
                    [base[0], base[1] + off]
                } else {
                    [base[0] - dy / len * off, base[1] + dx / len * off]
                }
            }
        }
    }

    pub fn scaled(&self, k: f64) -> Trajectory {
        let s = |p: [f64; 2]| [p[0] * k, p[1] * k];
        match *self {
            Trajectory::Line { from, to } => Trajectory::Line { from: s(from), to: s(to) },
            Trajectory::Circle {
                center,
                radius,
                phase,
                turns,
            } => Trajectory::Circle {
                center: s(center),
                radius: radius * k,
                phase,
                turns,
            },
            Trajectory::Sine {
                from,
                to,
                amplitude,
                cycles,
            } => Trajectory::Sine {
                from: s(from),
                to: s(to),
                amplitude: amplitude * k,
                cycles,
            },
        }
    }
}

fn lerp(a: [f64; 2], b: [f64; 2], u: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// `[height, width]`.
    pub canvas: [usize; 2],
    pub frames: usize,
    pub color: [f64; 3],
    pub trajectory: Trajectory,
    pub disc_radius: f64,
}

pub struct SynthClip {
    /// `[3, T, H, W]` in `[0, 1]`.
    pub video: Tensor,
    pub poses: PoseSequence,
    /// `[3, H, W]`, the disc at its frame-0 position.
    pub reference: Tensor,
    pub reference_pose: PoseSequence,
}

impl SynthSpec {
    /// Joint-0 position at frame `t`.
    pub fn position(&self, t: usize) -> [f64; 2] {
        let u = if self.frames <= 1 {
            0.0
        } else {
            t as f64 / (self.frames - 1) as f64
        };
        self.trajectory.at(u)
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.canvas;
        if h == 0 || w == 0 || h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 {
            return Err(Error::validation(format!(
                "canvas {h}x{w} must be a positive multiple of {SPATIAL_FACTOR}"
            )));
        }
        temporal_layout(self.frames)?;
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::validation(format!("color {:?} outside [0,1]", self.color)));
        }
        if !(self.disc_radius > 0.0) {
            return Err(Error::validation("disc radius must be > 0"));
        }
        let r = self.disc_radius;
        for t in 0..self.frames {
            let [x, y] = self.position(t);
            // the disc must lie inside the pixel area [-0.5, W - 0.5]
            let inside = x - r >= -0.5 && x + r <= w as f64 - 0.5 && y - r >= -0.5 && y + r <= h as f64 - 0.5;
            if !inside {
                return Err(Error::validation(format!(
                    "trajectory leaves the canvas at frame {t}: centre ({x:.3}, {y:.3}), radius {r}"
                )));
            }
        }
        Ok(())
    }

    /// Draws a spec from `seed`: colour channels uniform in `[0.35, 0.95]`,
    /// one of the three trajectory families with parameters kept inside the
    /// canvas. Distinct seeds collide only if two 53-bit uniforms match.
    pub fn random(seed: u64, canvas: [usize; 2], frames: usize, disc_radius: f64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let color = [
            rng.uniform_range(0.35, 0.95),
            rng.uniform_range(0.35, 0.95),
            rng.uniform_range(0.35, 0.95),
        ];
        let [h, w] = canvas;
        let margin = disc_radius + 0.5;
        let (lo_x, hi_x) = (margin - 0.5, w as f64 - 0.5 - margin);
        let (lo_y, hi_y) = (margin - 0.5, h as f64 - 0.5 - margin);
        if lo_x >= hi_x || lo_y >= hi_y {
            return Err(Error::validation(format!(
                "radius {disc_radius} too large for a {h}x{w} canvas"
            )));
        }
        let point = |rng: &mut Rng| [rng.uniform_range(lo_x, hi_x), rng.uniform_range(lo_y, hi_y)];
        let trajectory = match rng.below(3) {
            0 => Trajectory::Line {
                from: point(&mut rng),
                to: point(&mut rng),
            },
            1 => {
                let max_r = ((hi_x - lo_x).min(hi_y - lo_y)) / 2.0;
                let radius = rng.uniform_range(0.3, 0.9) * max_r;
                let center = [
                    rng.uniform_range(lo_x + radius, hi_x - radius),
                    rng.uniform_range(lo_y + radius, hi_y - radius),
                ];
                let dir = if rng.below(2) == 0 { 1.0 } else { -1.0 };
                Trajectory::Circle {
                    center,
                    radius,
                    phase: rng.uniform(),
                    turns: dir * rng.uniform_range(0.25, 0.75),
                }
            }
            _ => {
                // horizontal sweep with vertical wobble, clipped to the canvas
                let mid = (lo_y + hi_y) / 2.0;
                let amplitude = rng.uniform_range(0.2, 0.45) * (hi_y - lo_y);
                let y0 = mid + rng.uniform_range(-0.5, 0.5) * ((hi_y - lo_y) / 2.0 - amplitude).max(0.0);
                let (a, b) = (rng.uniform_range(lo_x, hi_x), rng.uniform_range(lo_x, hi_x));
                Trajectory::Sine {
                    from: [a, y0],
                    to: [b, y0],
                    amplitude,
                    cycles: rng.uniform_range(0.5, 1.5),
                }
            }
        };
        let spec = SynthSpec {
            seed,
            canvas,
            frames,
            color,
            trajectory,
            disc_radius,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The same motion on a canvas scaled by `factor` (positions scale, the
    /// disc radius does not).
    pub fn rescaled(&self, factor: f64) -> Result<SynthSpec> {
        let canvas = [
            (self.canvas[0] as f64 * factor).round() as usize,
            (self.canvas[1] as f64 * factor).round() as usize,
        ];
        let spec = SynthSpec {
            canvas,
            trajectory: self.trajectory.scaled(factor),
            ..self.clone()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_frames(&self, frames: usize) -> Result<SynthSpec> {
        let spec = SynthSpec {
            frames,
            ..self.clone()
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Renders one RGB frame with the disc centred at `centre`.
fn draw_disc(canvas: [usize; 2], centre: [f64; 2], radius: f64, color: [f64; 3], out: &mut [f64]) {
    let [h, w] = canvas;
    let r2 = radius * radius;
    let step = 1.0 / SUPERSAMPLE as f64;
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for row in 0..h {
        for col in 0..w {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                let y = row as f64 - 0.5 + (sy as f64 + 0.5) * step - centre[1];
                for sx in 0..SUPERSAMPLE {
                    let x = col as f64 - 0.5 + (sx as f64 + 0.5) * step - centre[0];
                    if x * x + y * y <= r2 {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let cover = hits as f64 / total;
            for c in 0..3 {
                let v = (cover * color[c] * QUANT_LEVELS).round() / QUANT_LEVELS;
                out[(c * h + row) * w + col] = v;
            }
        }
    }
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthClip> {
    spec.validate()?;
    let [h, w] = spec.canvas;
    let t = spec.frames;
    let mut video = Tensor::zeros(vec![3, t, h, w]);
    let mut frame = vec![0.0; 3 * h * w];
    let mut keypoints = Vec::with_capacity(t);
    for ti in 0..t {
        let p = spec.position(ti);
        frame.fill(0.0);
        draw_disc(spec.canvas, p, spec.disc_radius, spec.color, &mut frame);
        let frame_t = Tensor::new(vec![3, 1, h, w], frame.clone())?;
        video.assign_narrow(1, ti, &frame_t)?;
        keypoints.push(vec![Keypoint::new(p[0], p[1], 1.0)]);
    }
    let poses = PoseSequence::new(spec.canvas, 1, keypoints)?;
    let reference = video.narrow(1, 0, 1)?.reshape(vec![3, h, w])?;
    let reference_pose = poses.slice(0, 1)?;
    Ok(SynthClip {
        video,
        poses,
        reference,
        reference_pose,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_spec() -> SynthSpec {
        SynthSpec {
            seed: 0,
            canvas: [32, 32],
            frames: 17,
            color: [0.8, 0.4, 0.6],
            trajectory: Trajectory::Line {
                from: [8.0, 16.0],
                to: [24.0, 16.0],
            },
            disc_radius: 6.0,
        }
    }

    #[test]
    fn line_midpoint() {
        let s = line_spec();
        assert_eq!(s.position(8), [16.0, 16.0]);
        let clip = generate_synthetic(&s).unwrap();
        assert_eq!(clip.poses.frame(8)[0], Keypoint::new(16.0, 16.0, 1.0));
        assert_eq!(clip.video.shape(), &[3, 17, 32, 32]);
    }

    #[test]
    fn zero_length_trajectory_is_static() {
        let s = SynthSpec {
            trajectory: Trajectory::Line {
                from: [12.0, 14.0],
                to: [12.0, 14.0],
            },
            ..line_spec()
        };
        let clip = generate_synthetic(&s).unwrap();
        let f0 = clip.video.narrow(1, 0, 1).unwrap();
        for t in 1..17 {
            assert!(clip.video.narrow(1, t, t + 1).unwrap().bit_eq(&f0));
        }
    }

    #[test]
    fn out_of_bounds_rejected() {
        let s = SynthSpec {
            trajectory: Trajectory::Line {
                from: [3.0, 16.0],
                to: [24.0, 16.0],
            },
            ..line_spec()
        };
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn reference_is_first_frame() {
        let clip = generate_synthetic(&line_spec()).unwrap();
        let f0 = clip.video.narrow(1, 0, 1).unwrap().reshape(vec![3, 32, 32]).unwrap();
        assert!(clip.reference.bit_eq(&f0));
        assert_eq!(clip.reference_pose.len(), 1);
    }

    #[test]
    fn pixels_are_quantised() {
        let clip = generate_synthetic(&line_spec()).unwrap();
        for &v in clip.video.data() {
            let k = (v * 255.0).round();
            assert_eq!(v, k / 255.0);
        }
    }

    #[test]
    fn random_specs_are_valid_and_distinct() {
        let mut colors = Vec::new();
        for seed in 0..200 {
            let s = SynthSpec::random(seed, [32, 32], 17, 6.0).unwrap();
            assert_eq!(s, SynthSpec::random(seed, [32, 32], 17, 6.0).unwrap());
            colors.push(s.color);
        }
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                assert_ne!(colors[i], colors[j]);
            }
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let s = SynthSpec::random(5, [32, 32], 17, 6.0).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: SynthSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
