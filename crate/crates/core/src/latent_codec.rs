//! Fixed pooling codec with the video-VAE latent layout.
//!
//! Latent frame 0 covers pixel frame 0 alone. Every later latent frame covers
//! a group of [`TEMPORAL_FACTOR`] pixel frames. Space is compressed by
//! [`SPATIAL_FACTOR`] on each axis. Encoding averages, decoding replicates,
//! so `encode(decode(z)) == z` exactly for latents in `[0, 1]`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{mean_pool, nearest_upsample, Tensor};

pub const TEMPORAL_FACTOR: usize = 4;
pub const SPATIAL_FACTOR: usize = 8;
pub const PIXEL_CHANNELS: usize = 3;
/// Latent channels of this codec. The learned video VAE it stands in for
/// uses 16.
pub const LATENT_CHANNELS: usize = PIXEL_CHANNELS;

/// Number of latent frames for `frames` pixel frames.
pub fn temporal_layout(frames: usize) -> Result<usize> {
    if frames == 0 || (frames - 1) % TEMPORAL_FACTOR != 0 {
        let below = if frames == 0 { 1 } else { frames - (frames - 1) % TEMPORAL_FACTOR };
        let hint = format!("{below} or {}", below + TEMPORAL_FACTOR);
        return Err(Error::validation(format!(
            "{frames} frames is not a valid clip length (need 1 + 4k); nearest valid: {hint}"
        )));
    }
    Ok(1 + (frames - 1) / TEMPORAL_FACTOR)
}

/// Pixel frame count for `latent_frames` latent frames.
pub fn pixel_frames(latent_frames: usize) -> usize {
    assert!(latent_frames >= 1);
    1 + TEMPORAL_FACTOR * (latent_frames - 1)
}

/// Pixel frames represented by latent frame `j`.
pub fn pixel_range(j: usize) -> Range<usize> {
    if j == 0 {
        0..1
    } else {
        1 + TEMPORAL_FACTOR * (j - 1)..1 + TEMPORAL_FACTOR * j
    }
}

/// Checks a `[3, T, H, W]` pixel video: layout-compatible extents and values in `[0,1]`.
pub fn validate_pixels(video: &Tensor) -> Result<()> {
    let s = video.shape();
    if s.len() != 4 || s[0] != PIXEL_CHANNELS {
        return Err(Error::validation(format!(
            "pixel video must be [3,T,H,W], got {s:?}"
        )));
    }
    temporal_layout(s[1])?;
    if s[2] % SPATIAL_FACTOR != 0 || s[3] % SPATIAL_FACTOR != 0 {
        return Err(Error::validation(format!(
            "pixel video {}x{} is not a multiple of {SPATIAL_FACTOR}",
            s[2], s[3]
        )));
    }
    if let Some(v) = video.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::validation(format!(
            "pixel value {v} outside [0,1]"
        )));
    }
    Ok(())
}

fn validate_latent(latent: &Tensor) -> Result<()> {
    let s = latent.shape();
    if s.len() != 4 || s[0] != LATENT_CHANNELS {
        return Err(Error::validation(format!(
            "latent video must be [{LATENT_CHANNELS},T,h,w], got {s:?}"
        )));
    }
    latent.check_finite("latent video")
}

/// `[3, T, H, W]` pixels → `[3, 1 + (T-1)/4, H/8, W/8]` latents.
pub fn encode(video: &Tensor) -> Result<Tensor> {
    validate_pixels(video)?;
    let frames = video.shape()[1];
    let spatial = [1, SPATIAL_FACTOR, SPATIAL_FACTOR];
    let first = mean_pool(&video.narrow(1, 0, 1)?, spatial)?;
    if frames == 1 {
        return Ok(first);
    }
    let rest = mean_pool(
        &video.narrow(1, 1, frames)?,
        [TEMPORAL_FACTOR, SPATIAL_FACTOR, SPATIAL_FACTOR],
    )?;
    Tensor::concat(&[&first, &rest], 1)
}

/// Inverse layout of [`encode`]: nearest-neighbour replication, clamped to `[0,1]`.
pub fn decode(latent: &Tensor) -> Result<Tensor> {
    validate_latent(latent)?;
    let lat_frames = latent.shape()[1];
    let spatial = [1, SPATIAL_FACTOR, SPATIAL_FACTOR];
    let first = nearest_upsample(&latent.narrow(1, 0, 1)?, spatial)?;
    let video = if lat_frames == 1 {
        first
    } else {
        let rest = nearest_upsample(
            &latent.narrow(1, 1, lat_frames)?,
            [TEMPORAL_FACTOR, SPATIAL_FACTOR, SPATIAL_FACTOR],
        )?;
        Tensor::concat(&[&first, &rest], 1)?
    };
    Ok(video.map(|v| v.clamp(0.0, 1.0)))
}

/// Encodes a single `[3, H, W]` image as a one-frame latent `[3, 1, H/8, W/8]`.
pub fn encode_image(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::validation(format!("image must be [3,H,W], got {s:?}")));
    }
    encode(&image.reshape(vec![s[0], 1, s[1], s[2]])?)
}
