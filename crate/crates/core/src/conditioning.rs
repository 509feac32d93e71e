//! The three conditioning pathways.
//!
//! * Driving poses: heatmaps `[J,T,H,W]` → 3D-conv stack → features on the
//!   latent grid `[C_pose, T_lat, H/8, W/8]`, later added to DiT tokens.
//! * Reference pose: heatmap `[J,H,W]` → 2D-conv stack → `[C_lat, H/8, W/8]`,
//!   summed into the reference-appearance channels.
//! * Reference appearance: the encoded reference frame, broadcast over time
//!   and concatenated with the noisy latent and a givenness mask.
//!
//! The pose encoder sees frame 0 replicated three extra times in front, so
//! `T + 3` is a multiple of 4 and its output frames line up one-to-one with
//! latent frames (latent frame 0 ↔ pixel frame 0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::latent_codec::{temporal_layout, SPATIAL_FACTOR, TEMPORAL_FACTOR};
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::params::{Binding, ParamStore};

pub const POSE_ENCODER_PREFIX: &str = "pose_encoder";
pub const REF_POSE_ENCODER_PREFIX: &str = "ref_pose_encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseEncoderConfig {
    /// Output channels per layer; the last entry is `C_pose`.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub temporal_strides: Vec<usize>,
    pub spatial_strides: Vec<usize>,
}

impl Default for PoseEncoderConfig {
    fn default() -> Self {
        PoseEncoderConfig {
            channels: vec![16, 32, 32, 64, 64, 64, 64],
            kernel: 3,
            temporal_strides: vec![1, 1, 2, 1, 2, 1, 1],
            spatial_strides: vec![2, 1, 2, 1, 2, 1, 1],
        }
    }
}

impl PoseEncoderConfig {
    pub fn num_layers(&self) -> usize {
        self.channels.len()
    }

    pub fn output_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// The first `layers` layers of this stack.
    pub fn truncated(&self, layers: usize) -> PoseEncoderConfig {
        PoseEncoderConfig {
            channels: self.channels[..layers].to_vec(),
            kernel: self.kernel,
            temporal_strides: self.temporal_strides[..layers].to_vec(),
            spatial_strides: self.spatial_strides[..layers].to_vec(),
        }
    }

    fn check_lengths(&self) -> Result<()> {
        let n = self.num_layers();
        if n == 0 {
            return Err(Error::config("pose encoder needs at least one layer"));
        }
        if self.temporal_strides.len() != n || self.spatial_strides.len() != n {
            return Err(Error::config(format!(
                "pose encoder has {n} layers but {} temporal / {} spatial strides",
                self.temporal_strides.len(),
                self.spatial_strides.len()
            )));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::config(format!("pose encoder kernel must be odd, got {}", self.kernel)));
        }
        if self.channels.iter().chain(&self.temporal_strides).chain(&self.spatial_strides).any(|&v| v == 0) {
            return Err(Error::config("pose encoder channels and strides must be >= 1"));
        }
        Ok(())
    }

    /// Full validation: stride products must reproduce the latent layout.
    pub fn validate(&self) -> Result<()> {
        self.check_lengths()?;
        let t: usize = self.temporal_strides.iter().product();
        let s: usize = self.spatial_strides.iter().product();
        if t != TEMPORAL_FACTOR || s != SPATIAL_FACTOR {
            return Err(Error::config(format!(
                "pose encoder strides multiply to {t}x (time) and {s}x (space); the latent layout needs {TEMPORAL_FACTOR}x and {SPATIAL_FACTOR}x"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefPoseEncoderConfig {
    /// Output channels per layer; the last entry must equal `C_lat`.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
}

impl Default for RefPoseEncoderConfig {
    fn default() -> Self {
        Self::for_latent_channels(crate::latent_codec::LATENT_CHANNELS)
    }
}

impl RefPoseEncoderConfig {
    pub fn for_latent_channels(latent_channels: usize) -> Self {
        RefPoseEncoderConfig {
            channels: vec![16, 32, 32, latent_channels],
            kernel: 3,
            strides: vec![2, 2, 2, 1],
        }
    }

    pub fn validate(&self, latent_channels: usize) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::config(format!(
                "ref-pose encoder: {} layers but {} strides",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::config("ref-pose encoder kernel must be odd"));
        }
        if self.strides.iter().product::<usize>() != SPATIAL_FACTOR {
            return Err(Error::config(format!(
                "ref-pose encoder strides {:?} must multiply to {SPATIAL_FACTOR}",
                self.strides
            )));
        }
        if self.channels.last() != Some(&latent_channels) {
            return Err(Error::config(format!(
                "ref-pose encoder must end with {latent_channels} channels, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// `(rf_t, rf_h, rf_w)` of the pose encoder via `rf += (k-1)·jump; jump *= stride`.
pub fn receptive_field(cfg: &PoseEncoderConfig) -> Result<(usize, usize, usize)> {
    cfg.check_lengths()?;
    let axis = |strides: &[usize]| {
        let (mut rf, mut jump) = (1, 1);
        for &s in strides {
            rf += (cfg.kernel - 1) * jump;
            jump *= s;
        }
        rf
    };
    let spatial = axis(&cfg.spatial_strides);
    Ok((axis(&cfg.temporal_strides), spatial, spatial))
}

fn conv_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Adds freshly initialised pose-encoder weights for `joints` input maps.
pub fn init_pose_encoder(params: &mut ParamStore, cfg: &PoseEncoderConfig, joints: usize, rng: &mut Rng) {
    let k = cfg.kernel;
    let mut c_in = joints;
    for (i, &c_out) in cfg.channels.iter().enumerate() {
        let std = conv_std(c_in * k * k * k);
        params.init_normal(&format!("{POSE_ENCODER_PREFIX}.{i}.weight"), vec![c_out, c_in, k, k, k], std, rng);
        params.init_zeros(&format!("{POSE_ENCODER_PREFIX}.{i}.bias"), vec![c_out]);
        c_in = c_out;
    }
}

pub fn init_ref_pose_encoder(params: &mut ParamStore, cfg: &RefPoseEncoderConfig, joints: usize, rng: &mut Rng) {
    let k = cfg.kernel;
    let mut c_in = joints;
    for (i, &c_out) in cfg.channels.iter().enumerate() {
        let std = conv_std(c_in * k * k);
        params.init_normal(&format!("{REF_POSE_ENCODER_PREFIX}.{i}.weight"), vec![c_out, c_in, k, k], std, rng);
        params.init_zeros(&format!("{REF_POSE_ENCODER_PREFIX}.{i}.bias"), vec![c_out]);
        c_in = c_out;
    }
}

/// Pose heatmaps `[J,T,H,W]` → features `[C_pose, T_lat, H/8, W/8]`.
pub fn pose_encoder_forward(tape: &mut Tape, p: &Binding, cfg: &PoseEncoderConfig, maps: Var) -> Result<Var> {
    cfg.validate()?;
    let s = tape.shape(maps).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("pose maps must be [J,T,H,W], got {s:?}")));
    }
    temporal_layout(s[1]).context("pose encoder")?;
    if s[2] % SPATIAL_FACTOR != 0 || s[3] % SPATIAL_FACTOR != 0 {
        return Err(Error::config(format!(
            "pose maps {}x{} not divisible by {SPATIAL_FACTOR}",
            s[2], s[3]
        )));
    }
    let first = tape.narrow(maps, 1, 0, 1)?;
    let pad = TEMPORAL_FACTOR - 1;
    let mut parts = vec![first; pad];
    parts.push(maps);
    let mut x = tape.concat(&parts, 1)?;
    let pad_sp = cfg.kernel / 2;
    for i in 0..cfg.num_layers() {
        let w = p.get(&format!("{POSE_ENCODER_PREFIX}.{i}.weight"))?;
        let b = p.get(&format!("{POSE_ENCODER_PREFIX}.{i}.bias"))?;
        let (ts, ss) = (cfg.temporal_strides[i], cfg.spatial_strides[i]);
        x = tape
            .conv3d(x, w, b, [ts, ss, ss], [pad_sp; 3])
            .with_context(|| format!("pose encoder layer {i}"))?;
        if i + 1 < cfg.num_layers() {
            x = tape.gelu(x)?;
        }
    }
    Ok(x)
}

/// Reference pose heatmap `[J,H,W]` → `[C_lat, H/8, W/8]`.
pub fn ref_pose_encoder_forward(tape: &mut Tape, p: &Binding, cfg: &RefPoseEncoderConfig, map: Var) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("reference pose map must be [J,H,W], got {s:?}")));
    }
    if s[1] % SPATIAL_FACTOR != 0 || s[2] % SPATIAL_FACTOR != 0 {
        return Err(Error::config(format!(
            "reference pose map {}x{} not divisible by {SPATIAL_FACTOR}",
            s[1], s[2]
        )));
    }
    let pad = cfg.kernel / 2;
    let mut x = map;
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let w = p.get(&format!("{REF_POSE_ENCODER_PREFIX}.{i}.weight"))?;
        let b = p.get(&format!("{REF_POSE_ENCODER_PREFIX}.{i}.bias"))?;
        x = tape
            .conv2d(x, w, b, [stride, stride], [pad, pad])
            .with_context(|| format!("ref-pose encoder layer {i}"))?;
        if i + 1 < cfg.strides.len() {
            x = tape.gelu(x)?;
        }
    }
    Ok(x)
}

/// Channel layout of the DiT input: `[noisy | reference | mask]`.
pub fn assembled_channels(latent_channels: usize) -> usize {
    2 * latent_channels + 1
}

/// Builds the `[2·C_lat + 1, T_lat, h, w]` DiT input.
///
/// `noisy` is `[C,T,h,w]`, `ref_latent` and `ref_pose_feat` are `[C,h,w]`.
/// When `given` holds clean latents `[C,g,h,w]`, they replace the first `g`
/// noisy frames and the mask is 1 on those frames, 0 elsewhere.
pub fn assemble_input(
    tape: &mut Tape,
    noisy: Var,
    ref_latent: Var,
    ref_pose_feat: Option<Var>,
    given: Option<Var>,
) -> Result<Var> {
    let ns = tape.shape(noisy).to_vec();
    if ns.len() != 4 {
        return Err(Error::shape(format!("noisy latent must be [C,T,h,w], got {ns:?}")));
    }
    let (c, t, h, w) = (ns[0], ns[1], ns[2], ns[3]);
    if tape.shape(ref_latent) != [c, h, w] {
        return Err(Error::shape(format!(
            "reference latent {:?} does not match [C,h,w] = {:?}",
            tape.shape(ref_latent),
            [c, h, w]
        )));
    }
    let mut reference = ref_latent;
    if let Some(f) = ref_pose_feat {
        if tape.shape(f) != [c, h, w] {
            return Err(Error::shape(format!(
                "reference pose feature {:?} does not match [C,h,w] = {:?}",
                tape.shape(f),
                [c, h, w]
            )));
        }
        reference = tape.add(reference, f)?;
    }
    let reference = tape.reshape(reference, vec![c, 1, h, w])?;
    let reference = tape.expand(reference, 1, t)?;

    let g = match given {
        None => 0,
        Some(gv) => {
            let gs = tape.shape(gv);
            if gs.len() != 4 || gs[0] != c || gs[2] != h || gs[3] != w || gs[1] > t {
                return Err(Error::shape(format!(
                    "given prefix {gs:?} incompatible with latent {ns:?}"
                )));
            }
            gs[1]
        }
    };
    let noisy = match given {
        Some(gv) if g == t => gv,
        Some(gv) => {
            let rest = tape.narrow(noisy, 1, g, t)?;
            tape.concat(&[gv, rest], 1)?
        }
        None => noisy,
    };
    let mask = Tensor::from_fn(vec![1, t, h, w], |i| if i[1] < g { 1.0 } else { 0.0 });
    let mask = tape.constant(mask);
    tape.concat_channels(&[noisy, reference, mask])
}
